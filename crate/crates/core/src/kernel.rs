//! State enumeration, the per-outcome transition map and the sparse kernel.

use std::io::{self, Write};
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::model::{outcome_distribution, Action, EnvOutcome, ParamError, State, SystemParams};
use crate::sparse::{merge_duplicates, SparseRows};

/// Default cap on the number of enumerated states.
pub const DEFAULT_MAX_STATES: usize = 5_000_000;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("state space has {count} states, above the limit of {limit}")]
    TooLarge { count: u128, limit: usize },
    #[error("state index {index} out of range [0, {count})")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("state component {what} = {value} out of range (max {max})")]
    Component { what: String, value: u64, max: u64 },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Mixed-radix enumeration of `(b, delta_1..delta_K, delta_c)`.
///
/// The battery is the most significant digit and `delta_c` the least.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    params: SystemParams,
    count: usize,
    age_radix: usize,
}

impl StateSpace {
    pub fn new(params: &SystemParams) -> Result<Self, KernelError> {
        Self::with_limit(params, DEFAULT_MAX_STATES)
    }

    /// Like [`StateSpace::new`] with an explicit size guard.
    pub fn with_limit(params: &SystemParams, limit: usize) -> Result<Self, KernelError> {
        params.validate()?;
        let count = Self::state_count(params);
        if count > limit as u128 {
            return Err(KernelError::TooLarge { count, limit });
        }
        Ok(StateSpace {
            params: params.clone(),
            count: count as usize,
            age_radix: params.delta_max as usize + 1,
        })
    }

    /// `(B+1) * (delta_max+1)^(K+1)` without overflow.
    pub fn state_count(params: &SystemParams) -> u128 {
        let radix = params.delta_max as u128 + 1;
        (0..=params.nodes).fold(params.battery_capacity as u128 + 1, |acc, _| acc.saturating_mul(radix))
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn encode(&self, s: &State) -> Result<usize, KernelError> {
        let p = &self.params;
        let check = |what: String, value: u32, max: u32| {
            if value > max {
                Err(KernelError::Component {
                    what,
                    value: value as u64,
                    max: max as u64,
                })
            } else {
                Ok(())
            }
        };
        if s.node_ages.len() != p.nodes {
            return Err(KernelError::Component {
                what: "node count".into(),
                value: s.node_ages.len() as u64,
                max: p.nodes as u64,
            });
        }
        check("battery".into(), s.battery, p.battery_capacity)?;
        for (k, &d) in s.node_ages.iter().enumerate() {
            check(format!("delta[{k}]"), d, p.delta_max)?;
        }
        check("delta_c".into(), s.cache_age, p.delta_max)?;
        Ok(self.encode_unchecked(s))
    }

    #[inline]
    pub(crate) fn encode_unchecked(&self, s: &State) -> usize {
        let r = self.age_radix;
        let idx = s
            .node_ages
            .iter()
            .fold(s.battery as usize, |acc, &d| acc * r + d as usize);
        idx * r + s.cache_age as usize
    }

    pub fn decode(&self, index: usize) -> Result<State, KernelError> {
        if index >= self.count {
            return Err(KernelError::IndexOutOfRange {
                index,
                count: self.count,
            });
        }
        let mut s = State::zero(self.params.nodes);
        self.decode_into(index, &mut s);
        Ok(s)
    }

    /// Decodes into an existing buffer of the right node count.
    #[inline]
    pub(crate) fn decode_into(&self, mut index: usize, out: &mut State) {
        let r = self.age_radix;
        out.cache_age = (index % r) as u32;
        index /= r;
        for d in out.node_ages.iter_mut().rev() {
            *d = (index % r) as u32;
            index /= r;
        }
        out.battery = index as u32;
    }

    /// Iterates over all states in index order.
    pub fn states(&self) -> impl Iterator<Item = State> + '_ {
        (0..self.count).map(move |i| {
            let mut s = State::zero(self.params.nodes);
            self.decode_into(i, &mut s);
            s
        })
    }

    /// Battery level of the state at `index` without a full decode.
    #[inline]
    pub fn battery_of(&self, index: usize) -> u32 {
        (index / self.age_radix.pow(self.params.nodes as u32 + 1)) as u32
    }

    /// Aggregator age of the state at `index`.
    #[inline]
    pub fn cache_age_of(&self, index: usize) -> u32 {
        (index % self.age_radix) as u32
    }

    /// Per-state cost vector.
    pub fn costs(&self) -> Vec<f64> {
        self.states().map(|s| s.avg_age()).collect()
    }

    /// Per-state causality flags.
    pub fn causal_mask(&self) -> Vec<bool> {
        self.states().map(|s| s.is_causal()).collect()
    }
}

/// Deterministic successor of `s` under action `a` and outcome `o`.
///
/// Gossip reads pre-transition ages for every node. Ages are capped at
/// `delta_max` and the battery at `B`.
pub fn next_state(s: &State, a: Action, o: &EnvOutcome, p: &SystemParams) -> State {
    let mut out = s.clone();
    next_state_into(s, a, o, p, &mut out);
    out
}

#[inline]
pub(crate) fn next_state_into(s: &State, a: Action, o: &EnvOutcome, p: &SystemParams, out: &mut State) {
    let z = o.change as u32;
    let e = o.energy as u32;
    let cap = p.delta_max;
    for node in 0..p.nodes {
        let own = s.node_ages[node];
        let base = if o.gossips(node) {
            own.min(s.node_ages[p.predecessor(node)])
        } else {
            own
        };
        out.node_ages[node] = (base + z).min(cap);
    }
    match o.served_node() {
        Some(i) if a == Action::RequestFresh && s.battery >= 1 => {
            out.battery = (s.battery - 1 + e).min(p.battery_capacity);
            out.cache_age = z;
            out.node_ages[i] = z;
        }
        Some(i) => {
            out.battery = (s.battery + e).min(p.battery_capacity);
            out.cache_age = (s.cache_age + z).min(cap);
            out.node_ages[i] = out.cache_age;
        }
        None => {
            out.battery = (s.battery + e).min(p.battery_capacity);
            out.cache_age = (s.cache_age + z).min(cap);
        }
    }
}

/// Kernel construction options.
#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    pub max_states: usize,
    /// Only build rows for causal states; other rows are left empty (inactive).
    pub causal_only: bool,
    pub exec: Execution,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            max_states: DEFAULT_MAX_STATES,
            causal_only: false,
            exec: Execution::Parallel,
        }
    }
}

/// `P[s' | s, a]` for every state and both actions, with merged successors.
///
/// Row `2*s + a` holds the successors of `(s, a)`. An empty row marks an
/// inactive state (only produced in causal-only mode).
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    num_states: usize,
    rows: SparseRows,
}

impl TransitionKernel {
    /// Wraps explicit rows, `rows[s] = [row for a=0, row for a=1]`.
    pub fn from_rows(rows: Vec<[Vec<(u32, f64)>; 2]>) -> Self {
        let num_states = rows.len();
        let rows = SparseRows::from_rows(rows.into_iter().flatten());
        TransitionKernel { num_states, rows }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn nnz(&self) -> usize {
        self.rows.nnz()
    }

    #[inline]
    pub fn row(&self, state: usize, a: Action) -> (&[u32], &[f64]) {
        self.rows.row(2 * state + a as usize)
    }

    /// `sum_{s'} P[s'|s,a] v[s']`.
    #[inline]
    pub fn expect(&self, state: usize, a: Action, v: &[f64]) -> f64 {
        self.rows.dot(2 * state + a as usize, v)
    }

    #[inline]
    pub fn is_active(&self, state: usize) -> bool {
        !self.row(state, Action::ServeCached).0.is_empty()
    }

    /// Largest `|row sum - 1|` over active rows.
    pub fn max_row_error(&self) -> f64 {
        (0..self.num_states)
            .filter(|&s| self.is_active(s))
            .flat_map(|s| Action::ALL.map(|a| (self.rows.row_sum(2 * s + a as usize) - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// Writes `state_index,action,next_state_index,probability` as gzipped CSV.
    pub fn write_csv_gz(&self, path: &Path) -> Result<(), KernelError> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(GzEncoder::new(file, Compression::default()));
        writeln!(w, "state_index,action,next_state_index,probability")?;
        for s in 0..self.num_states {
            for a in Action::ALL {
                let (t, p) = self.row(s, a);
                for (&j, &pj) in t.iter().zip(p) {
                    writeln!(w, "{s},{},{j},{pj:e}", a.bit())?;
                }
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.finish()?;
        Ok(())
    }
}

/// Builds the full kernel with default options.
pub fn build_kernel(params: &SystemParams) -> Result<(StateSpace, TransitionKernel), KernelError> {
    build_kernel_with(params, &KernelOptions::default())
}

pub fn build_kernel_with(
    params: &SystemParams,
    opts: &KernelOptions,
) -> Result<(StateSpace, TransitionKernel), KernelError> {
    let space = StateSpace::with_limit(params, opts.max_states)?;
    let outcomes = outcome_distribution(params)?;
    let per_state = exec::map_range(opts.exec, space.count(), |s| {
        state_rows(&space, &outcomes, s, opts.causal_only)
    });
    let nnz = per_state.iter().map(|[a, b]| a.len() + b.len()).sum();
    let mut rows = SparseRows::with_capacity(2 * space.count(), nnz);
    for [r0, r1] in &per_state {
        rows.push_row(r0);
        rows.push_row(r1);
    }
    let kernel = TransitionKernel {
        num_states: space.count(),
        rows,
    };
    Ok((space, kernel))
}

fn state_rows(
    space: &StateSpace,
    outcomes: &[(EnvOutcome, f64)],
    index: usize,
    causal_only: bool,
) -> [Vec<(u32, f64)>; 2] {
    let p = space.params();
    let mut s = State::zero(p.nodes);
    space.decode_into(index, &mut s);
    if causal_only && !s.is_causal() {
        return [Vec::new(), Vec::new()];
    }
    let mut scratch = s.clone();
    let mut row_for = |a: Action| {
        let mut entries: Vec<(u32, f64)> = outcomes
            .iter()
            .map(|(o, prob)| {
                next_state_into(&s, a, o, p, &mut scratch);
                (space.encode_unchecked(&scratch) as u32, *prob)
            })
            .collect();
        merge_duplicates(&mut entries);
        entries
    };
    let idle = row_for(Action::ServeCached);
    // An empty battery makes both actions identical; share the row bit for bit.
    let fresh = if s.battery == 0 {
        idle.clone()
    } else {
        row_for(Action::RequestFresh)
    };
    [idle, fresh]
}
