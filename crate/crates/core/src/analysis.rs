//! Structural checks on the solved MDP.
//!
//! * accessibility: the action-union transition graph has one closed
//!   communicating class, everything else is transient;
//! * on causal states the optimal action depends only on `(b, delta_c)`;
//! * for each battery level the action is a single 0 -> 1 step in `delta_c`;
//! * the value function grows with `delta_c` when the served node moves with it.
//!
//! Only causal states are considered for the policy and value checks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::strongly_connected;
use crate::kernel::{StateSpace, TransitionKernel};
use crate::model::{Action, State};
use crate::solver::{Policy, ValueFunction};

/// Default slack for the value monotonicity check.
pub const MONOTONE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("policy depends on node ages on {0} causal state(s); thresholds are undefined")]
    NotAgeIndependent(usize),
    #[error("policy has {got} entries, expected {expected}")]
    PolicyLength { expected: usize, got: usize },
    #[error("value function has {got} entries, expected {expected}")]
    ValueLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessibilityReport {
    pub closed_classes: usize,
    /// Sizes of the closed classes.
    pub class_sizes: Vec<usize>,
    pub transient_states: usize,
    /// Every state with some `delta_k < delta_c` is transient.
    pub noncausal_transient: bool,
    /// Every state with all `delta_k > delta_c` is transient.
    pub uncovered_transient: bool,
    pub pass: bool,
    /// Members of each closed class, by state index.
    #[serde(skip)]
    pub closed_members: Vec<Vec<usize>>,
}

/// Communicating structure of the graph with an edge `s -> s'` whenever
/// some action moves `s` to `s'` with positive probability.
pub fn check_weak_accessibility(kernel: &TransitionKernel, space: &StateSpace) -> AccessibilityReport {
    let n = kernel.num_states();
    let comps = strongly_connected(n, |s, out| {
        for a in Action::ALL {
            out.extend(kernel.row(s, a).0.iter().map(|&t| t as usize));
        }
        out.sort_unstable();
        out.dedup();
    });
    let closed_ids = comps.closed_ids();
    let mut slot = vec![usize::MAX; comps.count];
    for (k, &c) in closed_ids.iter().enumerate() {
        slot[c] = k;
    }
    let mut closed_members = vec![Vec::new(); closed_ids.len()];
    let mut in_closed = vec![false; n];
    for s in 0..n {
        let k = slot[comps.component[s]];
        if k != usize::MAX {
            closed_members[k].push(s);
            in_closed[s] = true;
        }
    }
    let mut noncausal_transient = true;
    let mut uncovered_transient = true;
    for (s, state) in space.states().enumerate() {
        if !in_closed[s] {
            continue;
        }
        if state.node_ages.iter().any(|&d| d < state.cache_age) {
            noncausal_transient = false;
        }
        if state.node_ages.iter().all(|&d| d > state.cache_age) {
            uncovered_transient = false;
        }
    }
    let transient_states = in_closed.iter().filter(|&&c| !c).count();
    AccessibilityReport {
        closed_classes: closed_members.len(),
        class_sizes: closed_members.iter().map(Vec::len).collect(),
        transient_states,
        noncausal_transient,
        uncovered_transient,
        pass: closed_members.len() == 1,
        closed_members,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub pass: bool,
    /// `(first state seen in the (b, delta_c) group, disagreeing state)`.
    pub violations: Vec<(usize, usize)>,
    pub groups: usize,
}

/// Verifies that on causal states the action is constant within every `(b, delta_c)` group.
pub fn check_delta_independence(policy: &Policy, space: &StateSpace) -> Result<IndependenceReport, AnalysisError> {
    check_len(policy, space)?;
    let radix = space.params().delta_max as usize + 1;
    let mut first: Vec<Option<(usize, Action)>> = vec![None; (space.params().battery_capacity as usize + 1) * radix];
    let mut violations = Vec::new();
    for (s, state) in space.states().enumerate() {
        if !state.is_causal() {
            continue;
        }
        let key = state.battery as usize * radix + state.cache_age as usize;
        match first[key] {
            None => first[key] = Some((s, policy.action(s))),
            Some((rep, a)) if a != policy.action(s) => violations.push((rep, s)),
            Some(_) => {}
        }
    }
    Ok(IndependenceReport {
        pass: violations.is_empty(),
        groups: first.iter().filter(|g| g.is_some()).count(),
        violations,
    })
}

/// Per-battery thresholds on the aggregator age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    /// `thresholds[b]`: least `delta_c` with action 1, `None` if the action is always 0.
    pub thresholds: Vec<Option<u32>>,
    /// `(b, delta_c)` where the action drops back from 1 to 0, or any action 1 at `b = 0`.
    pub violations: Vec<(u32, u32)>,
    pub pass: bool,
    /// Informational: thresholds do not increase with the battery level (`None` counts as infinite).
    pub non_increasing_in_battery: bool,
}

impl ThresholdTable {
    /// `b,threshold` rows, with `none` for a missing threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("b,threshold\n");
        for (b, t) in self.thresholds.iter().enumerate() {
            match t {
                Some(t) => writeln!(out, "{b},{t}").unwrap(),
                None => writeln!(out, "{b},none").unwrap(),
            }
        }
        out
    }
}

/// Reduces the causal part of `policy` to a function of `(b, delta_c)` and reads off thresholds.
pub fn extract_thresholds(policy: &Policy, space: &StateSpace) -> Result<ThresholdTable, AnalysisError> {
    let independence = check_delta_independence(policy, space)?;
    if !independence.pass {
        return Err(AnalysisError::NotAgeIndependent(independence.violations.len()));
    }
    let p = space.params();
    let mut thresholds = Vec::with_capacity(p.battery_capacity as usize + 1);
    let mut violations = Vec::new();
    for b in 0..=p.battery_capacity {
        let row: Vec<Action> = (0..=p.delta_max)
            .map(|c| {
                // Any causal state of the group will do; take all nodes at delta_c.
                let s = space.encode_unchecked(&State::new(b, vec![c; p.nodes], c));
                policy.action(s)
            })
            .collect();
        if b == 0 {
            violations.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, &a)| a == Action::RequestFresh)
                    .map(|(c, _)| (0, c as u32)),
            );
            thresholds.push(None);
            continue;
        }
        for c in 1..row.len() {
            if row[c - 1] == Action::RequestFresh && row[c] == Action::ServeCached {
                violations.push((b, c as u32));
            }
        }
        thresholds.push(row.iter().position(|&a| a == Action::RequestFresh).map(|c| c as u32));
    }
    let as_level = |t: &Option<u32>| t.map_or(u64::MAX, u64::from);
    let non_increasing_in_battery = thresholds[1..].windows(2).all(|w| as_level(&w[1]) <= as_level(&w[0]));
    Ok(ThresholdTable {
        pass: violations.is_empty(),
        thresholds,
        violations,
        non_increasing_in_battery,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub pass: bool,
    /// `(lower state, higher state)` pairs where the value decreased.
    pub violations: Vec<(usize, usize)>,
    pub pairs_checked: usize,
    pub tolerance: f64,
}

/// Checks `V(b, .., delta_i = c1, .., c1) <= V(b, .., delta_i = c2, .., c2) + tol`
/// for every node `i`, every `c1 < c2` and every assignment of the other
/// nodes that keeps both states causal.
pub fn check_value_monotone_in_delta_c(
    values: &ValueFunction,
    space: &StateSpace,
    tolerance: f64,
) -> Result<MonotonicityReport, AnalysisError> {
    if values.values.len() != space.count() {
        return Err(AnalysisError::ValueLength {
            expected: space.count(),
            got: values.values.len(),
        });
    }
    let p = space.params();
    let radix = p.delta_max as u64 + 1;
    let others = radix.pow(p.nodes as u32 - 1);
    let mut violations = Vec::new();
    let mut pairs_checked = 0;
    let mut state = State::zero(p.nodes);
    for b in 0..=p.battery_capacity {
        state.battery = b;
        for i in 0..p.nodes {
            for code in 0..others {
                // Fill the other nodes from the digits of `code`.
                let mut rest = code;
                let mut floor = p.delta_max;
                for k in (0..p.nodes).filter(|&k| k != i) {
                    let d = (rest % radix) as u32;
                    rest /= radix;
                    state.node_ages[k] = d;
                    floor = floor.min(d);
                }
                let value_at = |state: &mut State, c: u32| {
                    state.node_ages[i] = c;
                    state.cache_age = c;
                    let s = space.encode_unchecked(state);
                    (s, values.values[s])
                };
                for c2 in 1..=floor {
                    let (s2, v2) = value_at(&mut state, c2);
                    for c1 in 0..c2 {
                        let (s1, v1) = value_at(&mut state, c1);
                        pairs_checked += 1;
                        if v1 > v2 + tolerance {
                            violations.push((s1, s2));
                        }
                    }
                }
            }
        }
    }
    Ok(MonotonicityReport {
        pass: violations.is_empty(),
        violations,
        pairs_checked,
        tolerance,
    })
}

/// All structural checks in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub params_fingerprint: String,
    pub accessibility: AccessibilityReport,
    /// Action 0 on every empty-battery state.
    pub empty_battery_idle: bool,
    pub delta_independence: IndependenceReport,
    /// Absent when the policy is not age-independent.
    pub thresholds: Option<ThresholdTable>,
    /// Absent when no value function was supplied.
    pub monotonicity: Option<MonotonicityReport>,
    pub pass: bool,
}

pub fn structure_report(
    kernel: &TransitionKernel,
    space: &StateSpace,
    policy: &Policy,
    values: Option<&ValueFunction>,
) -> Result<StructureReport, AnalysisError> {
    let accessibility = check_weak_accessibility(kernel, space);
    let delta_independence = check_delta_independence(policy, space)?;
    let thresholds = if delta_independence.pass {
        Some(extract_thresholds(policy, space)?)
    } else {
        None
    };
    let monotonicity = values
        .map(|v| check_value_monotone_in_delta_c(v, space, MONOTONE_TOLERANCE))
        .transpose()?;
    let empty_battery_idle =
        (0..space.count()).all(|s| space.battery_of(s) >= 1 || policy.action(s) == Action::ServeCached);
    let pass = accessibility.pass
        && empty_battery_idle
        && delta_independence.pass
        && thresholds.as_ref().is_some_and(|t| t.pass)
        && monotonicity.as_ref().is_none_or(|m| m.pass);
    Ok(StructureReport {
        params_fingerprint: space.params().fingerprint(),
        accessibility,
        empty_battery_idle,
        delta_independence,
        thresholds,
        monotonicity,
        pass,
    })
}

fn check_len(policy: &Policy, space: &StateSpace) -> Result<(), AnalysisError> {
    if policy.len() != space.count() {
        return Err(AnalysisError::PolicyLength {
            expected: space.count(),
            got: policy.len(),
        });
    }
    Ok(())
}
