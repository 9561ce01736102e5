//! Compares the sparse kernel against a dense reference built directly from
//! the slot dynamics, with its own state indexing and outcome enumeration.

use std::collections::HashMap;

use proptest::prelude::*;
use vaoi_core::{build_kernel, Action, State, SystemParams};

type Key = (u32, Vec<u32>, u32);

/// Every state as a tuple, enumerated independently of `StateSpace`.
fn all_states(p: &SystemParams) -> Vec<Key> {
    let mut out = vec![];
    let per = p.delta_max + 1;
    let combos = (per as usize).pow(p.nodes as u32);
    for b in 0..=p.battery_capacity {
        for mut c in 0..combos {
            let mut ages = vec![0; p.nodes];
            for a in ages.iter_mut() {
                *a = (c % per as usize) as u32;
                c /= per as usize;
            }
            for dc in 0..per {
                out.push((b, ages.clone(), dc));
            }
        }
    }
    out
}

/// Distribution of the successor of `(b, ages, dc)` under `action`.
fn reference_row(p: &SystemParams, s: &Key, action: u8) -> HashMap<Key, f64> {
    let (b, ages, dc) = s;
    let k = p.nodes;
    let cap = |x: u32| x.min(p.delta_max);
    let mut row = HashMap::new();
    for z in [0u32, 1] {
        let pz = if z == 1 { p.p_t } else { 1.0 - p.p_t };
        for e in [0u32, 1] {
            let pe = if e == 1 { p.beta } else { 1.0 - p.beta };
            for g in 0..(1u32 << k) {
                let mut pg = 1.0;
                for i in 0..k {
                    pg *= if g >> i & 1 == 1 {
                        p.lambda[i]
                    } else {
                        1.0 - p.lambda[i]
                    };
                }
                // Gossip reads ages from the start of the slot; node i listens to node i-1 (ring).
                let gossiped: Vec<u32> = (0..k)
                    .map(|i| {
                        let left = ages[(i + k - 1) % k];
                        let own = ages[i];
                        let base = if g >> i & 1 == 1 { own.min(left) } else { own };
                        cap(base + z)
                    })
                    .collect();
                for r in 0..=k {
                    let pr = if r == 0 {
                        1.0 - p.q.iter().sum::<f64>()
                    } else {
                        p.q[r - 1]
                    };
                    let prob = pz * pe * pg * pr;
                    if prob == 0.0 {
                        continue;
                    }
                    let mut new_ages = gossiped.clone();
                    let (nb, ndc);
                    if r == 0 {
                        nb = (*b + e).min(p.battery_capacity);
                        ndc = cap(dc + z);
                    } else if action == 1 && *b > 0 {
                        nb = (*b - 1 + e).min(p.battery_capacity);
                        ndc = z;
                        new_ages[r - 1] = z;
                    } else {
                        nb = (*b + e).min(p.battery_capacity);
                        ndc = cap(dc + z);
                        new_ages[r - 1] = ndc;
                    }
                    *row.entry((nb, new_ages, ndc)).or_insert(0.0) += prob;
                }
            }
        }
    }
    row
}

fn compare(p: &SystemParams) {
    let (space, kernel) = build_kernel(p).unwrap();
    let states = all_states(p);
    assert_eq!(states.len(), space.count());
    for s in &states {
        let st = State::new(s.0, s.1.clone(), s.2);
        let idx = space.encode(&st).unwrap();
        for a in Action::ALL {
            let want = reference_row(p, s, a.bit());
            let (targets, probs) = kernel.row(idx, a);
            let mut got: HashMap<Key, f64> = HashMap::new();
            for (&t, &pr) in targets.iter().zip(probs) {
                let d = space.decode(t as usize).unwrap();
                *got.entry((d.battery, d.node_ages, d.cache_age)).or_insert(0.0) += pr;
            }
            assert_eq!(got.len(), targets.len(), "duplicate successors in row {idx}/{a:?}");
            for (key, &w) in &want {
                let g = got.get(key).copied().unwrap_or(0.0);
                assert!((g - w).abs() < 1e-12, "state {s:?} action {a:?} -> {key:?}: {g} vs {w}");
            }
            for key in got.keys() {
                assert!(
                    want.contains_key(key),
                    "state {s:?} action {a:?}: spurious successor {key:?}"
                );
            }
        }
    }
}

#[test]
fn single_node_hand_checked_instance() {
    compare(&SystemParams::new(1, 1, 2, 0.5, 0.5, vec![0.5], vec![0.0]).unwrap());
}

#[test]
fn three_node_ring() {
    compare(&SystemParams::new(3, 1, 2, 0.3, 0.6, vec![0.1, 0.2, 0.3], vec![0.2, 0.5, 0.7]).unwrap());
}

fn small_params() -> impl Strategy<Value = SystemParams> {
    (1usize..=2, 1u32..=2, 1u32..=3)
        .prop_flat_map(|(k, b, dmax)| {
            (
                Just(k),
                Just(b),
                Just(dmax),
                0.01f64..0.99,
                0.01f64..0.99,
                proptest::collection::vec(0.01f64..0.45, k),
                proptest::collection::vec(0.0f64..1.0, k),
            )
        })
        .prop_map(|(k, b, dmax, beta, pt, q, lambda)| SystemParams::new(k, b, dmax, beta, pt, q, lambda).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matches_reference_on_random_instances(p in small_params()) {
        compare(&p);
    }
}
