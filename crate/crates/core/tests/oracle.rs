//! Brute-force equivalence: every inference quantity matches full
//! hidden-state enumeration on small trees.

mod common;

use hmt_core::inference::{
    increment, log_likelihood, masked_log_density, posterior_marginal, posterior_pair,
    ObservationMask,
};
use hmt_core::model::{EmissionFamily, EmissionParams, HmtTheta, ModelSpec};
use hmt_core::simulate::{sample, RootLaw};
use hmt_core::tree::{tree_up_to, VertexId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn random_model(rng: &mut ChaCha12Rng, s: usize) -> (ModelSpec, HmtTheta) {
    let eps = 1e-3;
    let scale = 1.0 - s as f64 * eps;
    let transition: Vec<Vec<f64>> = (0..s)
        .map(|_| {
            let raw: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..1.0f64)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|v| scale * v / t + eps).collect()
        })
        .collect();
    let mu: Vec<f64> = (0..s).map(|j| j as f64 - 0.5 + rng.random_range(-0.4..0.4)).collect();
    let sigma: Vec<f64> = (0..s).map(|_| rng.random_range(0.5..1.4)).collect();
    (
        ModelSpec { states: s, emission: EmissionFamily::Gaussian, epsilon_floor: eps },
        HmtTheta { transition, emission: EmissionParams::Gaussian { mu, sigma } },
    )
}

fn random_mask(rng: &mut ChaCha12Rng, depth: usize) -> Vec<VertexId> {
    tree_up_to(depth)
        .iter()
        .filter(|_| rng.random_range(0..3u8) > 0)
        .cloned()
        .collect()
}

#[test]
fn likelihood_matches_enumeration() {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    for (depth, s) in [(1usize, 2usize), (2, 2), (2, 3), (3, 2), (3, 3)] {
        for _ in 0..3 {
            let (spec, theta) = random_model(&mut rng, s);
            let data = sample(&spec, &theta, depth, &RootLaw::Stationary, rng.random()).unwrap();
            for x in 0..s {
                let fast = log_likelihood(&theta, &data, x).unwrap();
                let mask: Vec<VertexId> =
                    data.records.iter().map(|r| r.path.clone()).collect();
                let slow = common::brute_log_density(
                    &theta,
                    &data,
                    &mask,
                    &VertexId::root(),
                    x,
                    &[],
                );
                assert!(
                    (fast - slow).abs() < 1e-9,
                    "depth={depth} S={s} x={x}: {fast} vs {slow}"
                );
            }
        }
    }
}

#[test]
fn masked_density_matches_enumeration() {
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    for _ in 0..10 {
        let s = rng.random_range(2..=3);
        let depth = rng.random_range(1..=3);
        let (spec, theta) = random_model(&mut rng, s);
        let data = sample(&spec, &theta, depth, &RootLaw::Stationary, rng.random()).unwrap();
        let mask_v = random_mask(&mut rng, depth);
        let x = rng.random_range(0..s);
        let mask = ObservationMask::new(mask_v.clone(), VertexId::root(), x).unwrap();
        let fast = masked_log_density(&theta, &data, &mask).unwrap();
        let slow = if mask_v.is_empty() {
            0.0
        } else {
            common::brute_log_density(&theta, &data, &mask.vertices, &VertexId::root(), x, &[])
        };
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }
}

#[test]
fn marginals_and_pairs_match_enumeration() {
    let mut rng = ChaCha12Rng::seed_from_u64(303);
    for _ in 0..8 {
        let s = rng.random_range(2..=3);
        let depth = rng.random_range(2..=3);
        let (spec, theta) = random_model(&mut rng, s);
        let data = sample(&spec, &theta, depth, &RootLaw::Stationary, rng.random()).unwrap();
        let all = tree_up_to(depth);
        let mask_v = random_mask(&mut rng, depth);
        let x = rng.random_range(0..s);
        let mask = ObservationMask::new(mask_v.clone(), VertexId::root(), x).unwrap();
        let v = all.vertices()[rng.random_range(0..all.len())].clone();
        let w = all.vertices()[rng.random_range(0..all.len())].clone();

        let fast = posterior_marginal(&theta, &data, &v, &mask).unwrap();
        let slow = common::brute_marginal(&theta, &data, &v, &mask.vertices, &VertexId::root(), x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-9, "marginal {a} vs {b}");
        }

        let fast = posterior_pair(&theta, &data, &v, &w, &mask).unwrap();
        let slow =
            common::brute_pair(&theta, &data, &v, &w, &mask.vertices, &VertexId::root(), x);
        for (ra, rb) in fast.iter().zip(slow.iter()) {
            for (a, b) in ra.iter().zip(rb.iter()) {
                assert!((a - b).abs() < 1e-9, "pair {a} vs {b}");
            }
        }
    }
}

#[test]
fn increments_match_enumeration() {
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    for _ in 0..10 {
        let s = rng.random_range(2..=3);
        let depth = rng.random_range(1..=3);
        let (spec, theta) = random_model(&mut rng, s);
        let data = sample(&spec, &theta, depth, &RootLaw::Stationary, rng.random()).unwrap();
        let all = tree_up_to(depth);
        let u = all.vertices()[rng.random_range(0..all.len())].clone();
        let k = rng.random_range(0..=u.height());
        let x = rng.random_range(0..s);
        let inc = increment(&theta, &data, &u, k, x, None).unwrap();
        let anchor = u.ancestor(k).unwrap();
        let d = hmt_core::tree::delta(&u, k, None).unwrap();
        let slow_delta =
            common::brute_log_density(&theta, &data, d.set.vertices(), &anchor, x, &[]);
        assert!((inc.log_delta - slow_delta).abs() < 1e-9);
        if k > 0 {
            let ds = hmt_core::tree::delta_star(&u, k, None).unwrap();
            let slow_star =
                common::brute_log_density(&theta, &data, ds.set.vertices(), &anchor, x, &[]);
            assert!((inc.log_delta_star - slow_star).abs() < 1e-9);
        }
    }
}
