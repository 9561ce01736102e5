//! Seeded Monte Carlo simulation of the slotted system, and parameter sweeps.
//!
//! Each replication `r` owns two ChaCha8 streams derived from the master
//! seed: stream `r` for the exogenous draws and stream `r | 2^63` for the
//! coin of the randomized policy. Every slot draws, in order, the energy
//! arrival, the source change, the request and one gossip bit per node, so
//! two policies run with the same seed see identical exogenous sample paths.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::kernel::{next_state_into, KernelError, StateSpace};
use crate::model::{Action, EnvOutcome, ParamError, State, SystemParams};
use crate::solver::{solve, Policy, SolveReport, SolverError, SolverSettings};

const COIN_STREAM: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("horizon and replications must be at least 1")]
    EmptyProtocol,
    #[error("random policy probability out of [0,1]: {0}")]
    BadProbability(f64),
    #[error("threshold table has {got} entries, expected B+1 = {expected}")]
    ThresholdLength { expected: usize, got: usize },
    #[error("{0}")]
    Sweep(String),
}

/// How the aggregator acts in simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    /// Per-state lookup, e.g. the solved optimal policy.
    Table(Policy),
    /// Request whenever the battery is non-empty.
    Greedy,
    /// Request with the given probability whenever the battery is non-empty.
    Random(f64),
    /// Request iff `delta_c >= thresholds[b]`.
    Threshold(Vec<Option<u32>>),
    /// Always serve from the cache.
    Never,
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Table(_) => "optimal",
            PolicySpec::Greedy => "greedy",
            PolicySpec::Random(_) => "random",
            PolicySpec::Threshold(_) => "threshold",
            PolicySpec::Never => "never",
        }
    }
}

/// Simulation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimProtocol {
    pub horizon: usize,
    pub replications: usize,
    pub seed: u64,
    /// Initial state; all zeros (empty battery, fresh ages) when absent.
    #[serde(skip)]
    pub initial: Option<State>,
    /// Record a per-slot trace of this replication.
    #[serde(skip)]
    pub trace_replication: Option<usize>,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for SimProtocol {
    fn default() -> Self {
        SimProtocol {
            horizon: 4000,
            replications: 400,
            seed: 1,
            initial: None,
            trace_replication: None,
            exec: Execution::Parallel,
        }
    }
}

/// One slot of a sample path: the pre-transition state, the action and the outcome drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub avg_version_aoi: f64,
    pub battery: u32,
    pub cache_age: u32,
    pub action: Action,
    pub outcome: EnvOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// Time-averaged mean Version AoI, averaged over replications.
    pub mean_avg_version_aoi: f64,
    /// Sample standard deviation over replications divided by `sqrt(replications)`.
    pub std_error: f64,
    pub per_replication: Vec<f64>,
    pub per_node_mean: Vec<f64>,
    pub sample_path: Option<Vec<TraceRow>>,
}

/// Writes `t,avg_version_aoi,b,delta_c,action,request,e,z`.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("t,avg_version_aoi,b,delta_c,action,request,e,z\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.t,
            r.avg_version_aoi,
            r.battery,
            r.cache_age,
            r.action.bit(),
            r.outcome.request,
            r.outcome.energy as u8,
            r.outcome.change as u8
        )
        .unwrap();
    }
    out
}

/// Resolved policy ready for per-slot decisions.
enum Decider<'a> {
    Table(&'a Policy, StateSpace),
    Greedy,
    Random(f64),
    Threshold(&'a [Option<u32>]),
    Never,
}

impl Decider<'_> {
    fn decide(&self, s: &State, coin: f64) -> Action {
        if s.battery == 0 {
            return Action::ServeCached;
        }
        match self {
            Decider::Table(policy, space) => policy.action(space.encode_unchecked(s)),
            Decider::Greedy => Action::RequestFresh,
            Decider::Random(p) => Action::from_bit(coin < *p),
            Decider::Threshold(t) => Action::from_bit(t[s.battery as usize].is_some_and(|thr| s.cache_age >= thr)),
            Decider::Never => Action::ServeCached,
        }
    }
}

fn draw_outcome(rng: &mut ChaCha8Rng, params: &SystemParams, cumulative_q: &[f64]) -> EnvOutcome {
    let energy = rng.random::<f64>() < params.beta;
    let change = rng.random::<f64>() < params.p_t;
    let u = rng.random::<f64>();
    let request = cumulative_q.iter().position(|&c| u < c).map_or(0, |i| i + 1);
    let mut gossip = 0u64;
    for (k, &l) in params.lambda.iter().enumerate() {
        if rng.random::<f64>() < l {
            gossip |= 1 << k;
        }
    }
    EnvOutcome {
        request,
        gossip,
        energy,
        change,
    }
}

struct Replication {
    mean: f64,
    node_means: Vec<f64>,
    trace: Option<Vec<TraceRow>>,
}

fn run_replication(
    params: &SystemParams,
    decider: &Decider,
    protocol: &SimProtocol,
    cumulative_q: &[f64],
    rep: usize,
) -> Replication {
    let mut exo = ChaCha8Rng::seed_from_u64(protocol.seed);
    exo.set_stream(rep as u64);
    let mut coins = ChaCha8Rng::seed_from_u64(protocol.seed);
    coins.set_stream(rep as u64 | COIN_STREAM);

    let mut state = protocol.initial.clone().unwrap_or_else(|| State::zero(params.nodes));
    let mut next = state.clone();
    let mut node_sums = vec![0u64; params.nodes];
    let mut trace = (protocol.trace_replication == Some(rep)).then(|| Vec::with_capacity(protocol.horizon));

    for t in 0..protocol.horizon {
        for (sum, &d) in node_sums.iter_mut().zip(&state.node_ages) {
            *sum += d as u64;
        }
        let outcome = draw_outcome(&mut exo, params, cumulative_q);
        let action = decider.decide(&state, coins.random::<f64>());
        if let Some(trace) = trace.as_mut() {
            trace.push(TraceRow {
                t,
                avg_version_aoi: state.avg_age(),
                battery: state.battery,
                cache_age: state.cache_age,
                action,
                outcome,
            });
        }
        next_state_into(&state, action, &outcome, params, &mut next);
        std::mem::swap(&mut state, &mut next);
    }
    let horizon = protocol.horizon as f64;
    let node_means: Vec<f64> = node_sums.iter().map(|&s| s as f64 / horizon).collect();
    Replication {
        mean: node_means.iter().sum::<f64>() / params.nodes as f64,
        node_means,
        trace,
    }
}

/// Simulates `policy` under `protocol`. Bit-identical for identical inputs,
/// whatever the execution mode.
pub fn simulate(params: &SystemParams, policy: &PolicySpec, protocol: &SimProtocol) -> Result<SimResult, SimError> {
    params.validate()?;
    if protocol.horizon == 0 || protocol.replications == 0 {
        return Err(SimError::EmptyProtocol);
    }
    let decider = match policy {
        PolicySpec::Table(p) => {
            let space = StateSpace::new(params)?;
            p.check_against(params, space.count())?;
            Decider::Table(p, space)
        }
        PolicySpec::Greedy => Decider::Greedy,
        PolicySpec::Random(prob) => {
            if !(0.0..=1.0).contains(prob) {
                return Err(SimError::BadProbability(*prob));
            }
            Decider::Random(*prob)
        }
        PolicySpec::Threshold(t) => {
            let expected = params.battery_capacity as usize + 1;
            if t.len() != expected {
                return Err(SimError::ThresholdLength { expected, got: t.len() });
            }
            Decider::Threshold(t)
        }
        PolicySpec::Never => Decider::Never,
    };
    if let Some(initial) = &protocol.initial {
        StateSpace::new(params)?.encode(initial)?;
    }
    let cumulative_q: Vec<f64> = params
        .q
        .iter()
        .scan(0.0, |acc, &q| {
            *acc += q;
            Some(*acc)
        })
        .collect();

    let reps = exec::map_range(protocol.exec, protocol.replications, |rep| {
        run_replication(params, &decider, protocol, &cumulative_q, rep)
    });

    let n = reps.len() as f64;
    let per_replication: Vec<f64> = reps.iter().map(|r| r.mean).collect();
    let mean = per_replication.iter().sum::<f64>() / n;
    let std_error = if reps.len() > 1 {
        let var = per_replication.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let mut per_node_mean = vec![0.0; params.nodes];
    for r in &reps {
        for (acc, m) in per_node_mean.iter_mut().zip(&r.node_means) {
            *acc += m;
        }
    }
    per_node_mean.iter_mut().for_each(|m| *m /= n);
    let sample_path = reps.into_iter().find_map(|r| r.trace);
    Ok(SimResult {
        mean_avg_version_aoi: mean,
        std_error,
        per_replication,
        per_node_mean,
        sample_path,
    })
}

/// Parameter varied by a sweep. `q_all` and `lambda_all` set every node to the same value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "q_all")]
    RequestAll,
    #[serde(rename = "B")]
    Battery,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "p_t")]
    ChangeProb,
    #[serde(rename = "lambda_all")]
    GossipAll,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::RequestAll => "q_all",
            SweepAxis::Battery => "B",
            SweepAxis::Beta => "beta",
            SweepAxis::ChangeProb => "p_t",
            SweepAxis::GossipAll => "lambda_all",
        }
    }

    /// `base` with this axis set to `value`, validated.
    pub fn apply(self, base: &SystemParams, value: f64) -> Result<SystemParams, SimError> {
        let mut p = base.clone();
        match self {
            SweepAxis::RequestAll => p.q = vec![value; p.nodes],
            SweepAxis::Battery => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(SimError::Sweep(format!(
                        "battery capacity must be a positive integer, got {value}"
                    )));
                }
                p.battery_capacity = value as u32;
            }
            SweepAxis::Beta => p.beta = value,
            SweepAxis::ChangeProb => p.p_t = value,
            SweepAxis::GossipAll => p.lambda = vec![value; p.nodes],
        }
        p.validate()?;
        Ok(p)
    }
}

/// Policy entry of a sweep; `optimal` is re-solved at every point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Optimal,
    Greedy,
    Random {
        #[serde(default = "half")]
        prob: f64,
    },
    Threshold {
        thresholds: Vec<Option<u32>>,
    },
    Never,
}

fn half() -> f64 {
    0.5
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Optimal => "optimal",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Random { .. } => "random",
            PolicyKind::Threshold { .. } => "threshold",
            PolicyKind::Never => "never",
        }
    }
}

/// The policies compared in the experiments.
pub fn standard_policies() -> Vec<PolicyKind> {
    vec![
        PolicyKind::Optimal,
        PolicyKind::Greedy,
        PolicyKind::Random { prob: 0.5 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub policy: String,
    pub mean: f64,
    pub std_error: f64,
    pub replications: usize,
    pub horizon: usize,
    /// Set when this row could not be produced; the sweep carries on.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub params_fingerprint: Option<String>,
    pub solve_report: Option<SolveReport>,
    pub rows: Vec<SweepRow>,
}

impl SweepPoint {
    pub fn row(&self, policy: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }
}

/// Runs every policy at every axis value. Points are processed in order;
/// a failure at one point is recorded in its rows and the sweep continues.
pub fn sweep(
    base: &SystemParams,
    axis: SweepAxis,
    values: &[f64],
    policies: &[PolicyKind],
    protocol: &SimProtocol,
    settings: &SolverSettings,
) -> Vec<SweepPoint> {
    values
        .iter()
        .map(|&value| sweep_point(base, axis, value, policies, protocol, settings))
        .collect()
}

fn sweep_point(
    base: &SystemParams,
    axis: SweepAxis,
    value: f64,
    policies: &[PolicyKind],
    protocol: &SimProtocol,
    settings: &SolverSettings,
) -> SweepPoint {
    let failed = |policy: &str, msg: String| SweepRow {
        axis_value: value,
        policy: policy.to_string(),
        mean: f64::NAN,
        std_error: f64::NAN,
        replications: protocol.replications,
        horizon: protocol.horizon,
        error: Some(msg),
    };
    let params = match axis.apply(base, value) {
        Ok(p) => p,
        Err(e) => {
            return SweepPoint {
                axis_value: value,
                params_fingerprint: None,
                solve_report: None,
                rows: policies.iter().map(|k| failed(k.name(), e.to_string())).collect(),
            }
        }
    };

    let mut solve_report = None;
    let mut optimal: Option<Result<Policy, String>> = None;
    if policies.contains(&PolicyKind::Optimal) {
        optimal = Some(match solve(&params, settings) {
            Ok(sol) => {
                solve_report = Some(sol.report.clone());
                if sol.report.converged {
                    Ok(sol.policy)
                } else {
                    Err(format!(
                        "solver did not converge in {} iterations",
                        sol.report.iterations
                    ))
                }
            }
            Err(e) => Err(e.to_string()),
        });
    }

    let rows = policies
        .iter()
        .map(|kind| {
            let spec = match kind {
                PolicyKind::Optimal => match optimal.as_ref().expect("solved above") {
                    Ok(p) => PolicySpec::Table(p.clone()),
                    Err(msg) => return failed(kind.name(), msg.clone()),
                },
                PolicyKind::Greedy => PolicySpec::Greedy,
                PolicyKind::Random { prob } => PolicySpec::Random(*prob),
                PolicyKind::Threshold { thresholds } => PolicySpec::Threshold(thresholds.clone()),
                PolicyKind::Never => PolicySpec::Never,
            };
            match simulate(&params, &spec, protocol) {
                Ok(r) => SweepRow {
                    axis_value: value,
                    policy: kind.name().to_string(),
                    mean: r.mean_avg_version_aoi,
                    std_error: r.std_error,
                    replications: protocol.replications,
                    horizon: protocol.horizon,
                    error: None,
                },
                Err(e) => failed(kind.name(), e.to_string()),
            }
        })
        .collect();
    SweepPoint {
        axis_value: value,
        params_fingerprint: Some(params.fingerprint()),
        solve_report,
        rows,
    }
}

/// `axis_value,policy,mean,std_error,replications,horizon` rows for a whole sweep.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("axis_value,policy,mean,std_error,replications,horizon\n");
    for row in points.iter().flat_map(|p| &p.rows) {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.axis_value, row.policy, row.mean, row.std_error, row.replications, row.horizon
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SystemParams {
        SystemParams::new(3, 5, 9, 0.2, 0.5, vec![0.1, 0.2, 0.3], vec![0.2; 3]).unwrap()
    }

    fn short() -> SimProtocol {
        SimProtocol {
            horizon: 500,
            replications: 20,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_across_execution_modes() {
        let a = simulate(&params(), &PolicySpec::Random(0.5), &short()).unwrap();
        let b = simulate(
            &params(),
            &PolicySpec::Random(0.5),
            &SimProtocol {
                exec: Execution::Sequential,
                ..short()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        let c = simulate(
            &params(),
            &PolicySpec::Random(0.5),
            &SimProtocol { seed: 10, ..short() },
        )
        .unwrap();
        assert_ne!(a.mean_avg_version_aoi, c.mean_avg_version_aoi);
    }

    #[test]
    fn never_update_saturates() {
        let r = simulate(&params(), &PolicySpec::Never, &short()).unwrap();
        assert!(r.mean_avg_version_aoi > 8.0 && r.mean_avg_version_aoi <= 9.0);
        assert_eq!(r.per_node_mean.len(), 3);
    }

    #[test]
    fn shared_exogenous_stream() {
        let proto = SimProtocol {
            trace_replication: Some(3),
            ..short()
        };
        let g = simulate(&params(), &PolicySpec::Greedy, &proto).unwrap();
        let n = simulate(&params(), &PolicySpec::Never, &proto).unwrap();
        let (g, n) = (g.sample_path.unwrap(), n.sample_path.unwrap());
        assert_eq!(g.len(), 500);
        assert!(g.iter().zip(&n).all(|(a, b)| a.outcome == b.outcome));
        assert!(g.iter().any(|r| r.action == Action::RequestFresh));
    }

    #[test]
    fn trajectories_stay_in_bounds() {
        let proto = SimProtocol {
            trace_replication: Some(0),
            replications: 1,
            horizon: 3000,
            ..short()
        };
        let p = SystemParams::new(2, 2, 4, 0.6, 0.7, vec![0.4, 0.5], vec![0.9, 0.1]).unwrap();
        for spec in [
            PolicySpec::Greedy,
            PolicySpec::Random(0.5),
            PolicySpec::Threshold(vec![None, Some(3), Some(1)]),
        ] {
            let r = simulate(&p, &spec, &proto).unwrap();
            assert_eq!(r.std_error, 0.0);
            for row in r.sample_path.unwrap() {
                assert!(row.battery <= 2 && row.cache_age <= 4 && row.avg_version_aoi <= 4.0);
                if row.battery == 0 {
                    assert_eq!(row.action, Action::ServeCached);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            simulate(&params(), &PolicySpec::Greedy, &SimProtocol { horizon: 0, ..short() }),
            Err(SimError::EmptyProtocol)
        ));
        assert!(matches!(
            simulate(&params(), &PolicySpec::Random(1.5), &short()),
            Err(SimError::BadProbability(_))
        ));
        assert!(matches!(
            simulate(&params(), &PolicySpec::Threshold(vec![None]), &short()),
            Err(SimError::ThresholdLength { .. })
        ));
        let other = SystemParams::new(1, 1, 2, 0.5, 0.5, vec![0.5], vec![0.0]).unwrap();
        let space = StateSpace::new(&other).unwrap();
        let foreign = Policy::greedy(&space);
        assert!(matches!(
            simulate(&params(), &PolicySpec::Table(foreign), &short()),
            Err(SimError::Solver(_))
        ));
        let wrong_fp = Policy::new(foreign_actions(&params()), Some("deadbeef".into()));
        assert!(matches!(
            simulate(&params(), &PolicySpec::Table(wrong_fp), &short()),
            Err(SimError::Solver(SolverError::Fingerprint { .. }))
        ));
    }

    fn foreign_actions(p: &SystemParams) -> Vec<Action> {
        vec![Action::ServeCached; StateSpace::new(p).unwrap().count()]
    }

    #[test]
    fn table_matches_equivalent_threshold() {
        let space = StateSpace::new(&params()).unwrap();
        let thr = vec![None, Some(6), Some(5), Some(4), Some(3), Some(2)];
        let table = Policy::from_thresholds(&space, &thr);
        let a = simulate(&params(), &PolicySpec::Table(table), &short()).unwrap();
        let b = simulate(&params(), &PolicySpec::Threshold(thr), &short()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn axis_application() {
        let p = params();
        assert_eq!(SweepAxis::RequestAll.apply(&p, 0.2).unwrap().q, vec![0.2; 3]);
        assert_eq!(SweepAxis::Battery.apply(&p, 7.0).unwrap().battery_capacity, 7);
        assert!(SweepAxis::Battery.apply(&p, 2.5).is_err());
        assert!(SweepAxis::RequestAll.apply(&p, 0.4).is_err());
        assert_eq!(SweepAxis::GossipAll.apply(&p, 1.0).unwrap().lambda, vec![1.0; 3]);
        let axis: SweepAxis = serde_json::from_str("\"lambda_all\"").unwrap();
        assert_eq!(axis, SweepAxis::GossipAll);
        let kinds: Vec<PolicyKind> = serde_json::from_str(
            r#"[{"kind":"optimal"},{"kind":"random"},{"kind":"threshold","thresholds":[null,3]}]"#,
        )
        .unwrap();
        assert_eq!(kinds[1], PolicyKind::Random { prob: 0.5 });
    }

    #[test]
    fn sweep_marks_invalid_points() {
        let tiny = SystemParams::new(1, 1, 2, 0.5, 0.5, vec![0.5], vec![0.0]).unwrap();
        let pts = sweep(
            &tiny,
            SweepAxis::Beta,
            &[0.3, 1.5],
            &standard_policies(),
            &SimProtocol {
                horizon: 100,
                replications: 4,
                ..Default::default()
            },
            &SolverSettings::default(),
        );
        assert_eq!(pts.len(), 2);
        assert!(pts[0].rows.iter().all(|r| r.error.is_none()));
        assert!(pts[0].solve_report.as_ref().unwrap().converged);
        assert!(pts[1]
            .rows
            .iter()
            .all(|r| r.error.as_deref().is_some_and(|e| e.contains("beta"))));
        let csv = sweep_csv(&pts);
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.starts_with("axis_value,policy,mean,std_error,replications,horizon\n0.3,optimal,"));
    }

    #[test]
    fn trace_csv_layout() {
        let row = TraceRow {
            t: 4,
            avg_version_aoi: 2.5,
            battery: 1,
            cache_age: 2,
            action: Action::RequestFresh,
            outcome: EnvOutcome {
                request: 2,
                gossip: 0,
                energy: true,
                change: false,
            },
        };
        assert_eq!(
            trace_csv(&[row]),
            "t,avg_version_aoi,b,delta_c,action,request,e,z\n4,2.5,1,2,1,2,1,0\n"
        );
    }
}
