use crate::exec;
use crate::kernel::TransitionKernel;
use crate::model::Action;

use super::{SolveReport, SolverError, SolverSettings, ValueFunction};

/// Relative value iteration for the average-cost Bellman equation.
///
/// Starting from `V_0 = 0`, each sweep computes
/// `v(s) = min_a { c(s) + sum_{s'} P(s'|s,a) V(s') }` and renormalizes
/// `V = v - v(ref)`. Iteration stops once the span of `V_t - V_{t-1}` drops
/// below `epsilon`. The gain estimate is `v(ref)` from the last sweep, and
/// `[min, max]` of `v - V_{t-1}` bounds it.
///
/// If the span stops decreasing for `stall_sweeps` consecutive sweeps (a
/// periodic chain), every row is replaced by `tau * delta_s + (1 - tau) * P`
/// and costs are scaled by `1 - tau`; the reported gain is rescaled back.
///
/// Inactive states (empty rows) keep value 0 and are ignored.
pub fn relative_value_iteration(
    kernel: &TransitionKernel,
    costs: &[f64],
    settings: &SolverSettings,
) -> Result<(ValueFunction, SolveReport), SolverError> {
    let n = kernel.num_states();
    assert_eq!(costs.len(), n, "cost vector length must match the kernel");
    let r = settings.ref_state;
    if r >= n || !kernel.is_active(r) {
        return Err(SolverError::BadReference(r));
    }
    let active: Vec<bool> = (0..n).map(|s| kernel.is_active(s)).collect();

    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut tau = 0.0;
    let mut prev_span = f64::INFINITY;
    let mut stalled = 0;
    let mut report = SolveReport {
        gain: f64::NAN,
        gain_lower: f64::NAN,
        gain_upper: f64::NAN,
        iterations: 0,
        final_span: f64::INFINITY,
        converged: false,
        damping_used: false,
    };

    for iteration in 1..=settings.max_iter {
        {
            let v = &values;
            let active = &active;
            exec::fill_indexed(settings.exec, &mut next, |s| {
                if !active[s] {
                    return 0.0;
                }
                let idle = kernel.expect(s, Action::ServeCached, v);
                let fresh = kernel.expect(s, Action::RequestFresh, v);
                let best = costs[s] + idle.min(fresh);
                (1.0 - tau) * best + tau * v[s]
            });
        }
        let (lo, hi) = exec::diff_bounds(settings.exec, &next, &values, |s| active[s]);
        let offset = next[r];
        if !(offset.is_finite() && lo.is_finite() && hi.is_finite()) {
            let state = next.iter().position(|x| !x.is_finite()).unwrap_or(r);
            return Err(SolverError::NonFinite { iteration, state });
        }
        for (s, x) in next.iter_mut().enumerate() {
            if active[s] {
                *x -= offset;
            }
        }
        std::mem::swap(&mut values, &mut next);

        let span = hi - lo;
        let scale = 1.0 - tau;
        report.gain = offset / scale;
        report.gain_lower = lo / scale;
        report.gain_upper = hi / scale;
        report.iterations = iteration;
        report.final_span = span;
        if span < settings.epsilon {
            report.converged = true;
            break;
        }

        if span >= prev_span {
            stalled += 1;
        } else {
            stalled = 0;
        }
        prev_span = span;
        if !report.damping_used && stalled >= settings.stall_sweeps {
            tau = settings.damping;
            report.damping_used = true;
            prev_span = f64::INFINITY;
            stalled = 0;
        }
    }
    Ok((ValueFunction { values }, report))
}

/// `max_s | min_a { c(s) + P V } - V(s) - gain |` over active states.
pub fn bellman_residual(kernel: &TransitionKernel, costs: &[f64], values: &ValueFunction, gain: f64) -> f64 {
    let v = &values.values;
    (0..kernel.num_states())
        .filter(|&s| kernel.is_active(s))
        .map(|s| {
            let best = kernel
                .expect(s, Action::ServeCached, v)
                .min(kernel.expect(s, Action::RequestFresh, v));
            (costs[s] + best - v[s] - gain).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;

    fn settings() -> SolverSettings {
        SolverSettings {
            exec: Execution::Sequential,
            ..SolverSettings::default()
        }
    }

    #[test]
    fn single_state_chain() {
        let kernel = TransitionKernel::from_rows(vec![[vec![(0, 1.0)], vec![(0, 1.0)]]]);
        let (v, rep) = relative_value_iteration(&kernel, &[3.5], &settings()).unwrap();
        assert_eq!(rep.gain, 3.5);
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert_eq!(v.values, vec![0.0]);
    }

    #[test]
    fn two_state_choice() {
        // State 1 costs 1; from state 0 action 0 stays, action 1 moves to state 1.
        // From state 1 both actions return to 0 w.p. 0.5.
        let kernel = TransitionKernel::from_rows(vec![
            [vec![(0, 1.0)], vec![(1, 1.0)]],
            [vec![(0, 0.5), (1, 0.5)], vec![(0, 0.5), (1, 0.5)]],
        ]);
        let costs = [0.0, 1.0];
        let (v, rep) = relative_value_iteration(&kernel, &costs, &settings()).unwrap();
        assert!(rep.converged);
        assert!(rep.gain.abs() < 1e-9);
        assert!(bellman_residual(&kernel, &costs, &v, rep.gain) < 1e-5);
        assert!(rep.gain_lower <= rep.gain && rep.gain <= rep.gain_upper);
    }

    #[test]
    fn periodic_chain_triggers_damping() {
        let kernel =
            TransitionKernel::from_rows(vec![[vec![(1, 1.0)], vec![(1, 1.0)]], [vec![(0, 1.0)], vec![(0, 1.0)]]]);
        let costs = [0.0, 1.0];
        let (v, rep) = relative_value_iteration(&kernel, &costs, &settings()).unwrap();
        assert!(rep.damping_used);
        assert!(rep.converged);
        assert!((rep.gain - 0.5).abs() < 1e-6, "{}", rep.gain);
        assert!(bellman_residual(&kernel, &costs, &v, rep.gain) < 1e-5);
    }

    #[test]
    fn nonconvergence_is_reported() {
        let kernel =
            TransitionKernel::from_rows(vec![[vec![(1, 1.0)], vec![(1, 1.0)]], [vec![(0, 1.0)], vec![(0, 1.0)]]]);
        let s = SolverSettings {
            max_iter: 10,
            ..settings()
        };
        let (_, rep) = relative_value_iteration(&kernel, &[0.0, 1.0], &s).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 10);
    }

    #[test]
    fn nonfinite_is_an_error() {
        let kernel = TransitionKernel::from_rows(vec![[vec![(0, 1.0)], vec![(0, 1.0)]]]);
        let err = relative_value_iteration(&kernel, &[f64::INFINITY], &settings()).unwrap_err();
        assert!(matches!(err, SolverError::NonFinite { .. }));
    }

    #[test]
    fn bad_reference() {
        let kernel = TransitionKernel::from_rows(vec![[vec![(0, 1.0)], vec![(0, 1.0)]]]);
        let s = SolverSettings {
            ref_state: 3,
            ..settings()
        };
        assert!(matches!(
            relative_value_iteration(&kernel, &[1.0], &s),
            Err(SolverError::BadReference(3))
        ));
    }
}
