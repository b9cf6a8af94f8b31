//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with its headline numbers. Exact-inequality suites admit zero
//! violations; statistical suites use the pre-registered thresholds from
//! the experiment configs.

mod common;

use std::time::Instant;

use hmt_core::estimation::{observed_information, score, InfoMethod};
use hmt_core::experiments::{
    run_consistency, run_contrast, run_coupling, run_ergodic, run_mle_clt, run_observed_info,
    run_score_clt, run_verify_suite, ExperimentConfig, ExperimentKind, VerifySuite,
};
use hmt_core::inference::{log_likelihood, posterior_marginal, posterior_pair, ObservationMask};
use hmt_core::model::{
    stationary_distribution, EmissionFamily, EmissionParams, HmtTheta, ModelSpec, Packing,
};
use hmt_core::simulate::{sample, RootLaw};
use hmt_core::tree::{tree_up_to, VertexId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn random_gaussian_model(rng: &mut ChaCha12Rng, s: usize) -> (ModelSpec, HmtTheta) {
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

fn report_line(criterion: &str, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// Criterion 1: exact oracle equivalence of likelihoods, marginals, pairs,
/// and increments against brute-force enumeration on n <= 3, S <= 3.
#[test]
fn criterion_01_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0xC1);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for (depth, s, reps) in
        [(1usize, 2usize, 4usize), (2, 2, 4), (2, 3, 4), (3, 2, 4), (3, 3, 2)]
    {
        for _ in 0..reps {
            let (spec, theta) = random_gaussian_model(&mut rng, s);
            let data = sample(&spec, &theta, depth, &RootLaw::Stationary, rng.random()).unwrap();
            let x = rng.random_range(0..s);
            let all = tree_up_to(depth);
            let mask_v: Vec<VertexId> = all.vertices().to_vec();

            let fast = log_likelihood(&theta, &data, x).unwrap();
            let slow =
                common::brute_log_density(&theta, &data, &mask_v, &VertexId::root(), x, &[]);
            worst = worst.max((fast - slow).abs());

            let mask = ObservationMask::new(mask_v.clone(), VertexId::root(), x).unwrap();
            let v = all.vertices()[rng.random_range(0..all.len())].clone();
            let w = all.vertices()[rng.random_range(0..all.len())].clone();
            let m_fast = posterior_marginal(&theta, &data, &v, &mask).unwrap();
            let m_slow =
                common::brute_marginal(&theta, &data, &v, &mask_v, &VertexId::root(), x);
            for (a, b) in m_fast.iter().zip(m_slow.iter()) {
                worst = worst.max((a - b).abs());
            }
            let p_fast = posterior_pair(&theta, &data, &v, &w, &mask).unwrap();
            let p_slow =
                common::brute_pair(&theta, &data, &v, &w, &mask_v, &VertexId::root(), x);
            for (ra, rb) in p_fast.iter().zip(p_slow.iter()) {
                for (a, b) in ra.iter().zip(rb.iter()) {
                    worst = worst.max((a - b).abs());
                }
            }

            let u = all.vertices()[rng.random_range(0..all.len())].clone();
            let k = rng.random_range(0..=u.height());
            let inc = hmt_core::inference::increment(&theta, &data, &u, k, x, None).unwrap();
            let anchor = u.ancestor(k).unwrap();
            let d = hmt_core::tree::delta(&u, k, None).unwrap();
            let slow_delta =
                common::brute_log_density(&theta, &data, d.set.vertices(), &anchor, x, &[]);
            worst = worst.max((inc.log_delta - slow_delta).abs());
            cases += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report_line(
        "1 (oracle equivalence)",
        worst < 1e-9 && secs < 30.0,
        &format!("{cases} cases, worst abs err {worst:.3e}, runtime {secs:.1}s"),
    );
}

/// Criterion 2: vertex and block telescoping identities.
#[test]
fn criterion_02_telescoping() {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::default_for_suite(VerifySuite::Telescoping);
    cfg.knobs.cases = 200;
    let vertex = run_verify_suite(VerifySuite::Telescoping, &cfg).unwrap();
    let mut cfg_b = ExperimentConfig::default_for_suite(VerifySuite::Block);
    cfg_b.knobs.cases = 100;
    let block = run_verify_suite(VerifySuite::Block, &cfg_b).unwrap();
    let secs = started.elapsed().as_secs_f64();
    report_line(
        "2 (telescoping)",
        vertex.pass() && block.pass() && secs < 60.0,
        &format!(
            "{} vertex rows, {} block rows, {} violations, runtime {secs:.1}s",
            vertex.total,
            block.total,
            vertex.violations + block.violations
        ),
    );
}

/// Criterion 3: exponential forgetting of the root state.
#[test]
fn criterion_03_forgetting() {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::default_for_suite(VerifySuite::Forgetting);
    cfg.knobs.cases = 1000;
    let report = run_verify_suite(VerifySuite::Forgetting, &cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    report_line(
        "3 (forgetting bound)",
        report.pass() && secs < 60.0,
        &format!("{} cases, {} violations, runtime {secs:.1}s", report.total, report.violations),
    );
}

/// Criterion 4: uniform increment bounds (Cauchy and absolute).
#[test]
fn criterion_04_increment_bounds() {
    let mut cfg = ExperimentConfig::default_for_suite(VerifySuite::Cauchy);
    cfg.knobs.cases = 500;
    let report = run_verify_suite(VerifySuite::Cauchy, &cfg).unwrap();
    report_line(
        "4 (increment bounds)",
        report.pass(),
        &format!("{} rows, {} violations", report.total, report.violations),
    );
}

/// Criterion 5: backward bound and the two-vertex coupling bounds.
#[test]
fn criterion_05_backward_and_two_vertex() {
    let mut cfg = ExperimentConfig::default_for_suite(VerifySuite::Backward);
    cfg.knobs.cases = 500;
    let backward = run_verify_suite(VerifySuite::Backward, &cfg).unwrap();
    let mut cfg2 = ExperimentConfig::default_for_suite(VerifySuite::TwoVertex);
    cfg2.knobs.cases = 500;
    let two = run_verify_suite(VerifySuite::TwoVertex, &cfg2).unwrap();
    report_line(
        "5 (backward + two-vertex bounds)",
        backward.pass() && two.pass(),
        &format!(
            "{} backward rows, {} two-vertex rows, {} violations",
            backward.total,
            two.total,
            backward.violations + two.violations
        ),
    );
}

/// Criterion 6: Dobrushin submultiplicativity and the Doeblin bound.
#[test]
fn criterion_06_dobrushin() {
    let mut cfg = ExperimentConfig::default_for_suite(VerifySuite::Dobrushin);
    cfg.knobs.cases = 10_000;
    let report = run_verify_suite(VerifySuite::Dobrushin, &cfg).unwrap();
    report_line(
        "6 (Dobrushin/Doeblin)",
        report.pass(),
        &format!("{} rows, {} violations", report.total, report.violations),
    );
}

/// Criterion 7: analytic score vs central differences; Louis assembly vs
/// finite-difference Hessian.
#[test]
fn criterion_07_gradient_hessian_oracles() {
    let mut rng = ChaCha12Rng::seed_from_u64(0xC7);
    let mut worst_score = 0.0f64;
    for _ in 0..100 {
        let s = rng.random_range(2..=3);
        let depth = rng.random_range(1..=3);
        let (spec, theta) = random_gaussian_model(&mut rng, s);
        let data = sample(&spec, &theta, depth, &RootLaw::Stationary, rng.random()).unwrap();
        let x = rng.random_range(0..s);
        let packing = Packing::new(spec.clone());
        let packed = packing.pack(&theta).unwrap().values;
        let analytic = score(&spec, &theta, &data, x).unwrap().packed;
        for j in 0..packing.dim() {
            let h = 1e-5 * (1.0 + packed[j].abs());
            let mut up = packed.clone();
            up[j] += h;
            let mut dn = packed.clone();
            dn[j] -= h;
            let f_up = log_likelihood(&packing.unpack(&up).unwrap(), &data, x).unwrap();
            let f_dn = log_likelihood(&packing.unpack(&dn).unwrap(), &data, x).unwrap();
            let numeric = (f_up - f_dn) / (2.0 * h);
            worst_score =
                worst_score.max((numeric - analytic[j]).abs() / (1.0 + numeric.abs()));
        }
    }

    let mut worst_hess = 0.0f64;
    for _ in 0..50 {
        let s = rng.random_range(2..=3);
        let depth = rng.random_range(1..=3);
        let (spec, theta) = random_gaussian_model(&mut rng, s);
        let data = sample(&spec, &theta, depth, &RootLaw::Stationary, rng.random()).unwrap();
        let x = rng.random_range(0..s);
        let louis = observed_information(&spec, &theta, &data, x, InfoMethod::Louis, 16).unwrap();
        let fd =
            observed_information(&spec, &theta, &data, x, InfoMethod::FiniteDiff, 16).unwrap();
        let scale = louis.matrix.iter().cloned().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..louis.matrix.nrows() {
            for j in 0..louis.matrix.ncols() {
                worst_hess =
                    worst_hess.max((louis.matrix[(i, j)] - fd.matrix[(i, j)]).abs() / scale);
            }
        }
    }
    report_line(
        "7 (gradient/Hessian oracles)",
        worst_score < 1e-6 && worst_hess < 1e-4,
        &format!("score rel err {worst_score:.3e}, hessian rel err {worst_hess:.3e}"),
    );
}

/// Criterion 8: the stationary distribution is a fixed point to 1e-12.
#[test]
fn criterion_08_stationarity() {
    let mut rng = ChaCha12Rng::seed_from_u64(0xC8);
    let mut worst = 0.0f64;
    let mut kernels: Vec<Vec<Vec<f64>>> = vec![
        vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        vec![vec![0.6, 0.4], vec![0.45, 0.55]],
        vec![vec![0.999, 0.001], vec![0.001, 0.999]],
    ];
    for _ in 0..200 {
        let s = rng.random_range(2..=6usize);
        kernels.push(
            (0..s)
                .map(|_| {
                    let raw: Vec<f64> = (0..s).map(|_| rng.random_range(0.01..1.0f64)).collect();
                    let t: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / t).collect()
                })
                .collect(),
        );
    }
    for q in &kernels {
        let pi = stationary_distribution(q).unwrap();
        let mut l1 = 0.0;
        for j in 0..q.len() {
            let mut pj = 0.0;
            for i in 0..q.len() {
                pj += pi[i] * q[i][j];
            }
            l1 += (pj - pi[j]).abs();
        }
        worst = worst.max(l1);
    }
    report_line(
        "8 (stationarity)",
        worst < 1e-12,
        &format!("{} kernels, worst residual {worst:.3e}", kernels.len()),
    );
}

/// Criterion 9: consistency sweep, stationary and dirac-root.
#[test]
fn criterion_09_consistency() {
    let started = Instant::now();
    let cfg = ExperimentConfig::default_for(ExperimentKind::Consistency);
    let report = run_consistency(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    for row in &report.rows {
        println!("  consistency row: {} measured={:.4} pass={}", row.case, row.measured, row.pass);
    }
    report_line(
        "9 (consistency)",
        report.pass(),
        &format!("{} rows, {} violations, runtime {secs:.0}s", report.total, report.violations),
    );
}

/// Criterion 10: score CLT.
#[test]
fn criterion_10_score_clt() {
    let started = Instant::now();
    let cfg = ExperimentConfig::default_for(ExperimentKind::ScoreClt);
    let report = run_score_clt(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    for row in report.rows.iter().filter(|r| !r.pass) {
        println!("  failing row: {} measured={:.5} bound={:.5}", row.case, row.measured, row.bound_or_reference);
    }
    report_line(
        "10 (score CLT)",
        report.pass(),
        &format!("{} rows, {} violations, runtime {secs:.0}s", report.total, report.violations),
    );
}

/// Criterion 11: MLE CLT (coverage) plus observed information and the
/// Fisher identity.
#[test]
fn criterion_11_mle_clt_and_observed_info() {
    let started = Instant::now();
    let cfg = ExperimentConfig::default_for(ExperimentKind::MleClt);
    let mle = run_mle_clt(&cfg).unwrap();
    let cfg2 = ExperimentConfig::default_for(ExperimentKind::ObservedInfo);
    let info = run_observed_info(&cfg2).unwrap();
    let secs = started.elapsed().as_secs_f64();
    for row in mle.rows.iter().chain(info.rows.iter()).filter(|r| !r.pass) {
        println!("  failing row: {} measured={:.5} bound={:.5}", row.case, row.measured, row.bound_or_reference);
    }
    report_line(
        "11 (MLE CLT + observed information)",
        mle.pass() && info.pass(),
        &format!(
            "{} rows, {} violations, runtime {secs:.0}s",
            mle.total + info.total,
            mle.violations + info.violations
        ),
    );
}

/// Criterion 12: the contrast is maximized at the truth; permuted truth
/// ties.
#[test]
fn criterion_12_contrast() {
    let started = Instant::now();
    let cfg = ExperimentConfig::default_for(ExperimentKind::Contrast);
    let report = run_contrast(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    for row in report.rows.iter().filter(|r| !r.pass) {
        println!("  failing row: {} measured={:.5} bound={:.5}", row.case, row.measured, row.bound_or_reference);
    }
    report_line(
        "12 (contrast maximum)",
        report.pass(),
        &format!("{} rows, {} violations, runtime {secs:.0}s", report.total, report.violations),
    );
}

/// Criterion 13: coupling construction statistics.
#[test]
fn criterion_13_coupling() {
    let started = Instant::now();
    let cfg = ExperimentConfig::default_for(ExperimentKind::Coupling);
    let report = run_coupling(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    for row in &report.rows {
        println!("  coupling row: {} measured={:.4} pass={}", row.case, row.measured, row.pass);
    }
    report_line(
        "13 (coupling)",
        report.pass(),
        &format!("{} rows, {} violations, runtime {secs:.0}s", report.total, report.violations),
    );
}

/// Criterion 14: exact shape uniformity and geometric L2 decay of the
/// ergodic averages.
#[test]
fn criterion_14_ergodic() {
    let started = Instant::now();
    let cfg = ExperimentConfig::default_for(ExperimentKind::Ergodic);
    let report = run_ergodic(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    for row in report.rows.iter().filter(|r| !r.pass) {
        println!("  failing row: {} measured={:.5} bound={:.5}", row.case, row.measured, row.bound_or_reference);
    }
    report_line(
        "14 (ergodic theorems)",
        report.pass(),
        &format!("{} rows, {} violations, runtime {secs:.0}s", report.total, report.violations),
    );
}
