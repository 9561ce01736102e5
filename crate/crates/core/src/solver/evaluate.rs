//! Exact long-run average cost of a fixed stationary policy.

use nalgebra::{DMatrix, DVector};

use crate::exec::{self, Execution};
use crate::graph::strongly_connected;
use crate::kernel::TransitionKernel;
use crate::model::Action;
use crate::sparse::{merge_duplicates, SparseRows};

use super::{Policy, SolverError};

/// Reachable sets up to this size are solved with dense LU; larger ones by power iteration.
pub const DIRECT_SOLVE_LIMIT: usize = 1500;

const POWER_TOLERANCE: f64 = 1e-13;
const POWER_MAX_ITER: usize = 2_000_000;
/// Self-loop weight that makes the iterated chain aperiodic without moving its limit.
const POWER_LAZINESS: f64 = 0.05;

/// Row access for a Markov chain.
pub trait ChainRows: Sync {
    fn num_states(&self) -> usize;
    fn row(&self, state: usize) -> (&[u32], &[f64]);
}

/// A standalone Markov chain in sparse row form.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    rows: SparseRows,
}

impl MarkovChain {
    pub fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        MarkovChain {
            rows: SparseRows::from_rows(rows),
        }
    }
}

impl ChainRows for MarkovChain {
    fn num_states(&self) -> usize {
        self.rows.num_rows()
    }

    fn row(&self, state: usize) -> (&[u32], &[f64]) {
        self.rows.row(state)
    }
}

/// The chain induced by a deterministic policy, borrowing the kernel rows.
pub struct PolicyView<'a> {
    pub kernel: &'a TransitionKernel,
    pub actions: &'a [Action],
}

impl ChainRows for PolicyView<'_> {
    fn num_states(&self) -> usize {
        self.kernel.num_states()
    }

    fn row(&self, state: usize) -> (&[u32], &[f64]) {
        self.kernel.row(state, self.actions[state])
    }
}

impl TransitionKernel {
    pub fn induced_chain<'a>(&'a self, policy: &'a Policy) -> PolicyView<'a> {
        PolicyView {
            kernel: self,
            actions: &policy.actions,
        }
    }

    /// Randomized policy requesting a fresh update with probability `p_fresh` in every state.
    pub fn mixture_chain(&self, p_fresh: f64) -> MarkovChain {
        let rows = (0..self.num_states())
            .map(|s| {
                let mut entries: Vec<(u32, f64)> = Vec::new();
                for (a, w) in [(Action::ServeCached, 1.0 - p_fresh), (Action::RequestFresh, p_fresh)] {
                    if w > 0.0 {
                        let (t, p) = self.row(s, a);
                        entries.extend(t.iter().zip(p).map(|(&j, &pj)| (j, w * pj)));
                    }
                }
                merge_duplicates(&mut entries);
                entries
            })
            .collect();
        MarkovChain::from_rows(rows)
    }
}

/// Long-run average cost of `policy` from `start`.
pub fn policy_average_cost(
    policy: &Policy,
    kernel: &TransitionKernel,
    costs: &[f64],
    start: usize,
    exec: Execution,
) -> Result<f64, SolverError> {
    if policy.len() != kernel.num_states() {
        return Err(SolverError::PolicyLength {
            expected: kernel.num_states(),
            got: policy.len(),
        });
    }
    average_cost(&kernel.induced_chain(policy), costs, start, exec)
}

/// Long-run average cost of a Markov chain started in `start`.
///
/// Small reachable sets are solved exactly: closed classes by their
/// stationary distribution, transient states by the absorption equations.
/// Larger ones use power iteration on a slightly lazy copy of the chain.
pub fn average_cost<C: ChainRows>(chain: &C, costs: &[f64], start: usize, exec: Execution) -> Result<f64, SolverError> {
    let n = chain.num_states();
    if start >= n || chain.row(start).0.is_empty() {
        return Err(SolverError::BadStart(start));
    }
    let reach = reachable(chain, start)?;
    if reach.len() <= DIRECT_SOLVE_LIMIT {
        direct(chain, costs, &reach)
    } else {
        power(chain, costs, &reach, exec)
    }
}

/// States reachable from `start` in discovery order (`start` first).
fn reachable<C: ChainRows>(chain: &C, start: usize) -> Result<Vec<usize>, SolverError> {
    let mut seen = vec![false; chain.num_states()];
    let mut order = vec![start];
    seen[start] = true;
    let mut head = 0;
    while head < order.len() {
        let s = order[head];
        head += 1;
        let (targets, _) = chain.row(s);
        if targets.is_empty() {
            return Err(SolverError::BadStart(s));
        }
        for &t in targets {
            let t = t as usize;
            if !seen[t] {
                seen[t] = true;
                order.push(t);
            }
        }
    }
    Ok(order)
}

fn local_index(reach: &[usize], n: usize) -> Vec<u32> {
    let mut local = vec![u32::MAX; n];
    for (i, &s) in reach.iter().enumerate() {
        local[s] = i as u32;
    }
    local
}

fn direct<C: ChainRows>(chain: &C, costs: &[f64], reach: &[usize]) -> Result<f64, SolverError> {
    let m = reach.len();
    let local = local_index(reach, chain.num_states());
    let mut p = DMatrix::<f64>::zeros(m, m);
    for (i, &s) in reach.iter().enumerate() {
        let (t, pr) = chain.row(s);
        for (&j, &pj) in t.iter().zip(pr) {
            p[(i, local[j as usize] as usize)] += pj;
        }
    }
    let comps = strongly_connected(m, |i, out| {
        out.extend((0..m).filter(|&j| p[(i, j)] > 0.0));
    });

    // Gain of every closed class from its stationary distribution.
    let mut class_gain = vec![f64::NAN; comps.count];
    for c in comps.closed_ids() {
        let members: Vec<usize> = (0..m).filter(|&i| comps.component[i] == c).collect();
        let k = members.len();
        // pi (P_cc - I) = 0 with the last equation replaced by sum(pi) = 1.
        let mut a = DMatrix::<f64>::zeros(k, k);
        for (r, &i) in members.iter().enumerate() {
            for (col, &j) in members.iter().enumerate() {
                a[(col, r)] = p[(i, j)] - if i == j { 1.0 } else { 0.0 };
            }
        }
        for r in 0..k {
            a[(k - 1, r)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(k);
        rhs[k - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| SolverError::Singular(format!("stationary system of a {k}-state class")))?;
        class_gain[c] = members.iter().zip(pi.iter()).map(|(&i, &w)| w * costs[reach[i]]).sum();
    }

    if comps.closed[comps.component[0]] {
        return Ok(class_gain[comps.component[0]]);
    }

    // Transient states: h = P_tt h + P_tc g.
    let transient: Vec<usize> = (0..m).filter(|&i| !comps.closed[comps.component[i]]).collect();
    let mut tpos = vec![usize::MAX; m];
    for (r, &i) in transient.iter().enumerate() {
        tpos[i] = r;
    }
    let k = transient.len();
    let mut a = DMatrix::<f64>::identity(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for (r, &i) in transient.iter().enumerate() {
        for j in 0..m {
            let pij = p[(i, j)];
            if pij == 0.0 {
                continue;
            }
            if tpos[j] != usize::MAX {
                a[(r, tpos[j])] -= pij;
            } else {
                rhs[r] += pij * class_gain[comps.component[j]];
            }
        }
    }
    let h = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SolverError::Singular(format!("absorption system over {k} transient states")))?;
    Ok(h[tpos[0]])
}

fn power<C: ChainRows>(chain: &C, costs: &[f64], reach: &[usize], exec: Execution) -> Result<f64, SolverError> {
    let m = reach.len();
    let local = local_index(reach, chain.num_states());
    let forward = SparseRows::from_rows(reach.iter().map(|&s| {
        let (t, p) = chain.row(s);
        t.iter()
            .zip(p)
            .map(|(&j, &pj)| (local[j as usize], pj))
            .collect::<Vec<_>>()
    }));
    let backward = forward.transpose(m);
    let local_costs: Vec<f64> = reach.iter().map(|&s| costs[s]).collect();

    let mut mu = vec![0.0; m];
    mu[0] = 1.0;
    let mut next = vec![0.0; m];
    for _ in 0..POWER_MAX_ITER {
        {
            let mu = &mu;
            exec::fill_indexed(exec, &mut next, |j| {
                POWER_LAZINESS * mu[j] + (1.0 - POWER_LAZINESS) * backward.dot(j, mu)
            });
        }
        let change: f64 = mu.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut mu, &mut next);
        if change < POWER_TOLERANCE {
            let total: f64 = mu.iter().sum();
            return Ok(mu.iter().zip(&local_costs).map(|(w, c)| w * c).sum::<f64>() / total);
        }
    }
    Err(SolverError::EvaluationStalled(POWER_MAX_ITER))
}
