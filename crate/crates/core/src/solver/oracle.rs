//! Exhaustive search over deterministic stationary policies, for tiny instances.

use crate::exec::{self, Execution};
use crate::kernel::build_kernel_with;
use crate::kernel::KernelOptions;
use crate::model::{Action, SystemParams};

use super::evaluate::{average_cost, PolicyView};
use super::{Policy, SolverError};

#[derive(Debug, Clone)]
pub struct OracleOptions {
    /// Refuse to enumerate more policies than this.
    pub max_policies: u64,
    /// Start state for the average-cost evaluation.
    pub start: usize,
    /// Restrict the search to these states; every other state serves from
    /// the cache. `None` enumerates every state with a non-empty battery.
    pub restrict: Option<Vec<usize>>,
    pub exec: Execution,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            max_policies: 1 << 20,
            start: 0,
            restrict: None,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub gain: f64,
    pub policy: Policy,
    pub policies_evaluated: u64,
}

/// Minimum average cost over all deterministic stationary policies.
///
/// Empty-battery states are pinned to serving from the cache (both actions
/// are identical there). Ties keep the policy with the smallest bitmask.
pub fn brute_force_optimal(params: &SystemParams, opts: &OracleOptions) -> Result<OracleResult, SolverError> {
    let (space, kernel) = build_kernel_with(
        params,
        &KernelOptions {
            exec: opts.exec,
            ..KernelOptions::default()
        },
    )?;
    let mut free: Vec<usize> = match &opts.restrict {
        Some(states) => states.iter().copied().filter(|&s| s < space.count()).collect(),
        None => (0..space.count()).collect(),
    };
    free.retain(|&s| space.battery_of(s) >= 1);
    free.sort_unstable();
    free.dedup();

    let count: u128 = 1u128 << free.len().min(127);
    if free.len() >= 64 || count > opts.max_policies as u128 {
        return Err(SolverError::TooManyPolicies {
            policies: if free.len() >= 127 { u128::MAX } else { count },
            limit: opts.max_policies,
        });
    }
    let count = count as u64;
    let costs = space.costs();

    let policy_for = |mask: u64| {
        let mut actions = vec![Action::ServeCached; space.count()];
        for (bit, &s) in free.iter().enumerate() {
            actions[s] = Action::from_bit(mask >> bit & 1 == 1);
        }
        actions
    };

    let gains: Vec<Result<f64, SolverError>> = exec::map_range(opts.exec, count as usize, |mask| {
        let actions = policy_for(mask as u64);
        let view = PolicyView {
            kernel: &kernel,
            actions: &actions,
        };
        average_cost(&view, &costs, opts.start, Execution::Sequential)
    });

    let mut best: Option<(u64, f64)> = None;
    for (mask, g) in gains.into_iter().enumerate() {
        let g = g?;
        if best.is_none_or(|(_, b)| g < b) {
            best = Some((mask as u64, g));
        }
    }
    let (mask, gain) = best.expect("at least one policy");
    Ok(OracleResult {
        gain,
        policy: Policy::new(policy_for(mask), Some(params.fingerprint())),
        policies_evaluated: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_free_states() {
        let p = SystemParams::new(1, 1, 1, 0.5, 0.5, vec![0.5], vec![0.0]).unwrap();
        let r = brute_force_optimal(&p, &OracleOptions::default()).unwrap();
        assert_eq!(r.policies_evaluated, 16);
        assert!(r.gain.is_finite());
    }

    #[test]
    fn refuses_large_instances() {
        let p = SystemParams::new(1, 2, 2, 0.5, 0.5, vec![0.5], vec![0.0]).unwrap();
        let err = brute_force_optimal(
            &p,
            &OracleOptions {
                max_policies: 1000,
                ..Default::default()
            },
        )
        .unwrap_err();
        match err {
            SolverError::TooManyPolicies { policies, limit } => {
                assert_eq!(policies, 1 << 18);
                assert_eq!(limit, 1000);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn restriction_pins_other_states() {
        let p = SystemParams::new(1, 1, 2, 0.5, 0.5, vec![0.5], vec![0.0]).unwrap();
        let r = brute_force_optimal(
            &p,
            &OracleOptions {
                restrict: Some(vec![0, 9, 10]),
                ..Default::default()
            },
        )
        .unwrap();
        // State 0 has an empty battery, so only two states are free.
        assert_eq!(r.policies_evaluated, 4);
        for (s, a) in r.policy.actions.iter().enumerate() {
            if s != 9 && s != 10 {
                assert_eq!(*a, Action::ServeCached);
            }
        }
    }
}
