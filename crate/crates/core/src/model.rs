//! System parameters, states, actions and the exogenous per-slot randomness.
//!
//! One time slot draws four independent quantities: an energy arrival `e`,
//! a source state change `z`, at most one served request `r` (node `i` or
//! nobody) and a gossip vector `g` over the uni-directional ring, where
//! node `k` pulls from its predecessor `k-1` (node 0 pulls from node `K-1`).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Slack allowed on `sum(q) <= 1` to absorb decimal round-off such as `3 * (1/3)`.
const REQUEST_SUM_SLACK: f64 = 1e-12;

/// Parameter-domain violations reported by [`SystemParams::validate`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("K must be at least 1")]
    NoNodes,
    #[error("B must be at least 1")]
    NoBattery,
    #[error("delta_max must be at least 1")]
    NoAgeRange,
    #[error("K = {0} is too large for the gossip outcome encoding (max 63)")]
    TooManyNodes(usize),
    #[error("beta out of (0,1): {0}")]
    Beta(f64),
    #[error("p_t out of (0,1]: {0}")]
    ChangeProb(f64),
    #[error("{name} has length {got}, expected K = {expected}")]
    Length {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("q[{node}] out of (0,1): {value}")]
    RequestProb { node: usize, value: f64 },
    #[error("sum(q) > 1: {0}")]
    RequestSum(f64),
    #[error("lambda[{node}] out of [0,1]: {value}")]
    GossipProb { node: usize, value: f64 },
}

/// All model constants. Serializes with the keys `K, B, delta_max, beta, p_t, q, lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    /// Number of destination nodes on the ring.
    #[serde(rename = "K")]
    pub nodes: usize,
    /// Battery capacity in energy units.
    #[serde(rename = "B")]
    pub battery_capacity: u32,
    /// Cap on every Version AoI.
    pub delta_max: u32,
    /// Per-slot energy arrival probability.
    pub beta: f64,
    /// Per-slot source state change probability.
    pub p_t: f64,
    /// `q[k]`: probability that the request of node `k` is served in a slot.
    pub q: Vec<f64>,
    /// `lambda[k]`: probability that node `k` is updated by its predecessor.
    pub lambda: Vec<f64>,
}

impl SystemParams {
    /// Builds and validates a parameter set.
    pub fn new(
        nodes: usize,
        battery_capacity: u32,
        delta_max: u32,
        beta: f64,
        p_t: f64,
        q: Vec<f64>,
        lambda: Vec<f64>,
    ) -> Result<Self, ParamError> {
        let p = SystemParams {
            nodes,
            battery_capacity,
            delta_max,
            beta,
            p_t,
            q,
            lambda,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks every parameter-domain constraint; the error names the first violation.
    ///
    /// `p_t = 1`, `lambda_k` in `{0, 1}` and `sum(q) = 1` are accepted;
    /// `beta` must lie strictly inside `(0, 1)`.
    pub fn validate(&self) -> Result<(), ParamError> {
        if self.nodes == 0 {
            return Err(ParamError::NoNodes);
        }
        if self.nodes > 63 {
            return Err(ParamError::TooManyNodes(self.nodes));
        }
        if self.battery_capacity == 0 {
            return Err(ParamError::NoBattery);
        }
        if self.delta_max == 0 {
            return Err(ParamError::NoAgeRange);
        }
        // Written as negated ranges so NaN is rejected too.
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(ParamError::Beta(self.beta));
        }
        if !(self.p_t > 0.0 && self.p_t <= 1.0) {
            return Err(ParamError::ChangeProb(self.p_t));
        }
        for (name, v) in [("q", &self.q), ("lambda", &self.lambda)] {
            if v.len() != self.nodes {
                return Err(ParamError::Length {
                    name,
                    expected: self.nodes,
                    got: v.len(),
                });
            }
        }
        for (node, &value) in self.q.iter().enumerate() {
            if !(value > 0.0 && value < 1.0) {
                return Err(ParamError::RequestProb { node, value });
            }
        }
        let total: f64 = self.q.iter().sum();
        if total > 1.0 + REQUEST_SUM_SLACK {
            return Err(ParamError::RequestSum(total));
        }
        for (node, &value) in self.lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ParamError::GossipProb { node, value });
            }
        }
        Ok(())
    }

    /// Probability that no request is served in a slot.
    pub fn no_request_prob(&self) -> f64 {
        (1.0 - self.q.iter().sum::<f64>()).max(0.0)
    }

    /// Short hex digest of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("params always serialize");
        hex_prefix(&Sha256::digest(&json), 8)
    }

    /// Predecessor of `node` on the ring (0-based).
    #[inline]
    pub fn predecessor(&self, node: usize) -> usize {
        (node + self.nodes - 1) % self.nodes
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

/// Aggregator decision for a served request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    /// Serve the request from the cache.
    ServeCached = 0,
    /// Ask the sensor for a fresh update (costs one energy unit).
    RequestFresh = 1,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::ServeCached, Action::RequestFresh];

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Action::RequestFresh
        } else {
            Action::ServeCached
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }
}

/// System state: battery level, per-node Version AoI, and the aggregator's Version AoI.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    pub battery: u32,
    pub node_ages: Vec<u32>,
    pub cache_age: u32,
}

impl State {
    pub fn new(battery: u32, node_ages: Vec<u32>, cache_age: u32) -> Self {
        State {
            battery,
            node_ages,
            cache_age,
        }
    }

    /// All ages zero, empty battery.
    pub fn zero(nodes: usize) -> Self {
        State::new(0, vec![0; nodes], 0)
    }

    /// Every node is at least as stale as the aggregator.
    pub fn is_causal(&self) -> bool {
        self.node_ages.iter().all(|&d| d >= self.cache_age)
    }

    /// Per-slot cost: mean Version AoI over the nodes.
    pub fn avg_age(&self) -> f64 {
        cost(self)
    }
}

/// Instantaneous cost of a state, the mean node Version AoI. Ignores the
/// action and the aggregator's own age.
pub fn cost(state: &State) -> f64 {
    let sum: u64 = state.node_ages.iter().map(|&d| d as u64).sum();
    sum as f64 / state.node_ages.len() as f64
}

/// One joint realization of the per-slot randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnvOutcome {
    /// 0 = no request, `i` in `1..=K` = request from node `i` (1-based).
    pub request: usize,
    /// Bit `k` set iff node `k` (0-based) pulls from its predecessor.
    pub gossip: u64,
    pub energy: bool,
    pub change: bool,
}

impl EnvOutcome {
    #[inline]
    pub fn gossips(&self, node: usize) -> bool {
        self.gossip >> node & 1 == 1
    }

    /// The served node, 0-based.
    #[inline]
    pub fn served_node(&self) -> Option<usize> {
        self.request.checked_sub(1)
    }
}

/// Probability of a given gossip vector: independent Bernoulli(lambda_k) per node.
pub fn gossip_prob(lambda: &[f64], gossip: u64) -> f64 {
    lambda
        .iter()
        .enumerate()
        .map(|(k, &l)| if gossip >> k & 1 == 1 { l } else { 1.0 - l })
        .product()
}

/// Enumerates every joint outcome with positive probability.
///
/// Ordering is request-major, then gossip vector, energy, change. The
/// probability of each outcome is `P_z * P_e * P_g * P_r`.
pub fn outcome_distribution(params: &SystemParams) -> Result<Vec<(EnvOutcome, f64)>, ParamError> {
    params.validate()?;
    let k = params.nodes;
    let request_probs: Vec<f64> = std::iter::once(params.no_request_prob())
        .chain(params.q.iter().copied())
        .collect();
    let mut out = Vec::with_capacity((k + 1) << (k + 2));
    for (request, &pr) in request_probs.iter().enumerate() {
        for gossip in 0..(1u64 << k) {
            let pg = gossip_prob(&params.lambda, gossip);
            for energy in [false, true] {
                let pe = if energy { params.beta } else { 1.0 - params.beta };
                for change in [false, true] {
                    let pz = if change { params.p_t } else { 1.0 - params.p_t };
                    let p = pz * pe * pg * pr;
                    if p > 0.0 {
                        out.push((
                            EnvOutcome {
                                request,
                                gossip,
                                energy,
                                change,
                            },
                            p,
                        ));
                    }
                }
            }
        }
    }
    Ok(out)
}
