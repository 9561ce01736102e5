//! Average-cost optimal control: relative value iteration, policy
//! extraction, exact policy evaluation and a brute-force oracle.

mod evaluate;
mod oracle;
mod rvi;

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::kernel::{build_kernel_with, KernelError, KernelOptions, StateSpace, TransitionKernel};
use crate::model::{Action, SystemParams};

pub use evaluate::{average_cost, policy_average_cost, ChainRows, MarkovChain, PolicyView, DIRECT_SOLVE_LIMIT};
pub use oracle::{brute_force_optimal, OracleOptions, OracleResult};
pub use rvi::{bellman_residual, relative_value_iteration};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("non-finite value at state {state} in sweep {iteration}")]
    NonFinite { iteration: usize, state: usize },
    #[error("reference state {0} is out of range or inactive")]
    BadReference(usize),
    #[error("start state {0} is out of range or inactive")]
    BadStart(usize),
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("policy evaluation did not converge within {0} iterations")]
    EvaluationStalled(usize),
    #[error("instance too large for enumeration: {policies} policies (limit {limit})")]
    TooManyPolicies { policies: u128, limit: u64 },
    #[error("policy has {got} entries, expected {expected}")]
    PolicyLength { expected: usize, got: usize },
    #[error("params fingerprint mismatch: file has {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("malformed line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Relative value function, indexed by state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub values: Vec<f64>,
}

/// Deterministic stationary policy, indexed by state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actions: Vec<Action>,
    /// Fingerprint of the parameters this policy was computed for.
    pub fingerprint: Option<String>,
}

/// Outcome of a relative value iteration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Optimal average cost estimate.
    pub gain: f64,
    /// Lower and upper certificate bounds on the gain from the last sweep.
    pub gain_lower: f64,
    pub gain_upper: f64,
    pub iterations: usize,
    pub final_span: f64,
    pub converged: bool,
    /// The aperiodicity transform was switched on.
    pub damping_used: bool,
}

/// Relative value iteration and policy extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub epsilon: f64,
    pub max_iter: usize,
    pub ref_state: usize,
    /// `|Delta V| <= tie_tolerance` resolves to serving from the cache.
    pub tie_tolerance: f64,
    /// Sweeps without span decrease before the aperiodicity transform kicks in.
    pub stall_sweeps: usize,
    /// Self-loop weight of the aperiodicity transform.
    pub damping: f64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            epsilon: 1e-6,
            max_iter: 10_000,
            ref_state: 0,
            tie_tolerance: 1e-9,
            stall_sweeps: 50,
            damping: 0.1,
            exec: Execution::Parallel,
        }
    }
}

impl Policy {
    pub fn new(actions: Vec<Action>, fingerprint: Option<String>) -> Self {
        Policy { actions, fingerprint }
    }

    /// Serve from the cache everywhere.
    pub fn never(space: &StateSpace) -> Self {
        Policy::new(
            vec![Action::ServeCached; space.count()],
            Some(space.params().fingerprint()),
        )
    }

    /// Request a fresh update whenever the battery is non-empty.
    pub fn greedy(space: &StateSpace) -> Self {
        let actions = (0..space.count())
            .map(|s| Action::from_bit(space.battery_of(s) >= 1))
            .collect();
        Policy::new(actions, Some(space.params().fingerprint()))
    }

    /// Request iff the battery is non-empty and the aggregator age reaches the per-battery threshold.
    pub fn from_thresholds(space: &StateSpace, thresholds: &[Option<u32>]) -> Self {
        let actions = (0..space.count())
            .map(|s| {
                let b = space.battery_of(s);
                let fresh = b >= 1
                    && thresholds
                        .get(b as usize)
                        .copied()
                        .flatten()
                        .is_some_and(|t| space.cache_age_of(s) >= t);
                Action::from_bit(fresh)
            })
            .collect();
        Policy::new(actions, Some(space.params().fingerprint()))
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action(&self, state: usize) -> Action {
        self.actions[state]
    }

    /// Writes `# params_fingerprint=<hex>` followed by `state_index,action` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# params_fingerprint={}", self.fingerprint.as_deref().unwrap_or(""))?;
        writeln!(w, "state_index,action")?;
        for (s, a) in self.actions.iter().enumerate() {
            writeln!(w, "{s},{}", a.bit())?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, SolverError> {
        let (fingerprint, rows) = read_indexed_csv(r)?;
        let actions = rows
            .into_iter()
            .map(|(line, field)| match field.as_str() {
                "0" => Ok(Action::ServeCached),
                "1" => Ok(Action::RequestFresh),
                other => Err(SolverError::Parse {
                    line,
                    msg: format!("action must be 0 or 1, got {other:?}"),
                }),
            })
            .collect::<Result<_, _>>()?;
        Ok(Policy::new(actions, fingerprint))
    }

    /// Checks length and fingerprint against `params`.
    pub fn check_against(&self, params: &SystemParams, expected_len: usize) -> Result<(), SolverError> {
        if self.actions.len() != expected_len {
            return Err(SolverError::PolicyLength {
                expected: expected_len,
                got: self.actions.len(),
            });
        }
        let expected = params.fingerprint();
        match &self.fingerprint {
            Some(found) if *found != expected => Err(SolverError::Fingerprint {
                expected,
                found: found.clone(),
            }),
            _ => Ok(()),
        }
    }
}

impl ValueFunction {
    /// Writes `# params_fingerprint=<hex>` followed by `state_index,value` rows (17 significant digits).
    pub fn write_csv<W: Write>(&self, mut w: W, fingerprint: &str) -> io::Result<()> {
        writeln!(w, "# params_fingerprint={fingerprint}")?;
        writeln!(w, "state_index,value")?;
        for (s, v) in self.values.iter().enumerate() {
            writeln!(w, "{s},{v:.16e}")?;
        }
        Ok(())
    }

    /// Returns the values and the fingerprint recorded in the file.
    pub fn read_csv<R: BufRead>(r: R) -> Result<(Self, Option<String>), SolverError> {
        let (fingerprint, rows) = read_indexed_csv(r)?;
        let values = rows
            .into_iter()
            .map(|(line, field)| {
                field.parse::<f64>().map_err(|e| SolverError::Parse {
                    line,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok((ValueFunction { values }, fingerprint))
    }
}

/// Fingerprint from the header comment, and `(line number, field)` per row.
type IndexedCsv = (Option<String>, Vec<(usize, String)>);

/// Parses the shared `# params_fingerprint=` + `state_index,<field>` layout.
/// Rows must be dense and in index order.
fn read_indexed_csv<R: BufRead>(r: R) -> Result<IndexedCsv, SolverError> {
    let mut fingerprint = None;
    let mut rows = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(fp) = rest.trim().strip_prefix("params_fingerprint=") {
                fingerprint = Some(fp.to_string()).filter(|s| !s.is_empty());
            }
            continue;
        }
        if line.starts_with("state_index") {
            continue;
        }
        let (idx, field) = line.split_once(',').ok_or_else(|| SolverError::Parse {
            line: lineno,
            msg: "expected two comma-separated fields".into(),
        })?;
        let idx: usize = idx.parse().map_err(|_| SolverError::Parse {
            line: lineno,
            msg: format!("bad state index {idx:?}"),
        })?;
        if idx != rows.len() {
            return Err(SolverError::Parse {
                line: lineno,
                msg: format!("expected state index {}, got {idx}", rows.len()),
            });
        }
        rows.push((lineno, field.to_string()));
    }
    Ok((fingerprint, rows))
}

/// `Delta V(s) = E[V | s, fresh] - E[V | s, cached]`; zero for inactive states.
pub fn action_advantage(kernel: &TransitionKernel, values: &ValueFunction, exec: Execution) -> Vec<f64> {
    let v = &values.values;
    exec::map_range(exec, kernel.num_states(), |s| {
        if kernel.is_active(s) {
            kernel.expect(s, Action::RequestFresh, v) - kernel.expect(s, Action::ServeCached, v)
        } else {
            0.0
        }
    })
}

/// Greedy policy with respect to `values`: request iff `Delta V < -tie_tolerance`.
///
/// Ties go to serving from the cache, so empty-battery states (identical
/// rows, `Delta V = 0` exactly) always serve from the cache.
pub fn extract_policy(
    values: &ValueFunction,
    kernel: &TransitionKernel,
    tie_tolerance: f64,
    exec: Execution,
) -> Policy {
    let actions = action_advantage(kernel, values, exec)
        .into_iter()
        .map(|dv| Action::from_bit(dv < -tie_tolerance))
        .collect();
    Policy::new(actions, None)
}

/// Everything produced by a full solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub space: StateSpace,
    pub kernel: TransitionKernel,
    pub costs: Vec<f64>,
    pub values: ValueFunction,
    pub policy: Policy,
    pub report: SolveReport,
}

/// Builds the kernel, runs relative value iteration and extracts the optimal policy.
pub fn solve(params: &SystemParams, settings: &SolverSettings) -> Result<Solution, SolverError> {
    let opts = KernelOptions {
        exec: settings.exec,
        ..KernelOptions::default()
    };
    solve_with_kernel_options(params, settings, &opts)
}

pub fn solve_with_kernel_options(
    params: &SystemParams,
    settings: &SolverSettings,
    opts: &KernelOptions,
) -> Result<Solution, SolverError> {
    let (space, kernel) = build_kernel_with(params, opts)?;
    let costs = space.costs();
    let (values, report) = relative_value_iteration(&kernel, &costs, settings)?;
    let mut policy = extract_policy(&values, &kernel, settings.tie_tolerance, settings.exec);
    policy.fingerprint = Some(params.fingerprint());
    Ok(Solution {
        space,
        kernel,
        costs,
        values,
        policy,
        report,
    })
}
