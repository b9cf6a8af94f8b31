//! Maximum likelihood for HMT models: EM with an exact constrained M-step,
//! quasi-Newton polish in packed coordinates, the analytic score through
//! the Fisher identity, observed information through the Louis
//! decomposition (or finite differences of the score), and Monte Carlo
//! estimation of the limiting Fisher information by re-rooting.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HmtError, Result};
use crate::inference::{
    log_likelihood, masked_additive_moments, past_moments, posterior_tables, ObservationMask,
};
use crate::model::{
    EmissionFamily, EmissionParams, HmtTheta, ModelSpec, Obs, Packing, TransitionGrads,
};
use crate::simulate::{sample, RootLaw, Sample};
use crate::tree::{generation, tree_up_to, Spine, VertexId};

/// Analytic score in packed coordinates.
#[derive(Clone, Debug, Serialize)]
pub struct ScoreVector {
    pub packed: Vec<f64>,
    pub descriptor: Vec<String>,
}

/// How an observed-information matrix was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoMethod {
    Louis,
    FiniteDiff,
}

/// `-∇²ℓ` (raw) or `-|T_n|⁻¹ ∇²ℓ` (normalized), symmetric.
#[derive(Clone, Debug)]
pub struct InfoMatrix {
    pub matrix: DMatrix<f64>,
    pub method: InfoMethod,
    pub normalized: bool,
}

impl InfoMatrix {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.matrix.nrows())
            .map(|i| (0..self.matrix.ncols()).map(|j| self.matrix[(i, j)]).collect())
            .collect()
    }

    pub fn condition_number(&self) -> f64 {
        let eig = self.matrix.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        if min.abs() < 1e-300 {
            f64::INFINITY
        } else {
            (max / min).abs()
        }
    }
}

/// The score edge function `φ_θ(x', x, y) = ∇ log [q(x',x) g(x,y)]` written
/// into the packed-coordinate layout.
pub struct EdgeGradients<'a> {
    packing: &'a Packing,
    theta: &'a HmtTheta,
    tables: TransitionGrads,
}

impl<'a> EdgeGradients<'a> {
    pub fn new(packing: &'a Packing, theta: &'a HmtTheta) -> Self {
        EdgeGradients { packing, theta, tables: packing.transition_grad_tables(theta) }
    }

    pub fn dim(&self) -> usize {
        self.packing.dim()
    }

    /// `φ` into `out` (length `dim`).
    pub fn phi(&self, sp: usize, sc: usize, y: &Obs, out: &mut [f64]) {
        let s = self.packing.spec.states;
        let o = self.packing.transition_offset(sp);
        out[o..o + s - 1].copy_from_slice(&self.tables.grad[sp][sc]);
        let eo = self.packing.emission_offset(sc);
        let bl = self.packing.emission_block_len();
        self.packing.emission_grad(self.theta, sc, y, &mut out[eo..eo + bl]);
    }

    /// `∇² log [q g]` as a flattened `dim x dim` block matrix into `out`.
    pub fn varphi(&self, sp: usize, sc: usize, y: &Obs, out: &mut [f64]) {
        let s = self.packing.spec.states;
        let d = self.dim();
        let o = self.packing.transition_offset(sp);
        for i in 0..s - 1 {
            for l in 0..s - 1 {
                out[(o + i) * d + (o + l)] = self.tables.hess[sp][sc][i][l];
            }
        }
        let eo = self.packing.emission_offset(sc);
        let bl = self.packing.emission_block_len();
        let mut scratch = vec![0.0; bl * bl];
        self.packing.emission_hess(self.theta, sc, y, &mut scratch);
        for i in 0..bl {
            for l in 0..bl {
                out[(eo + i) * d + (eo + l)] = scratch[i * bl + l];
            }
        }
    }
}

/// `∇ℓ_{n,x}(θ)` through the Fisher identity: the root emission gradient
/// plus the conditional expectation of `Σ φ` over all edges.
pub fn score(
    spec: &ModelSpec,
    theta: &HmtTheta,
    sample: &Sample,
    x_root: usize,
) -> Result<ScoreVector> {
    let tree = crate::inference::MaskedTree::from_sample_full(theta, sample)?;
    let y_root = *sample.obs(&VertexId::root()).expect("root observation");
    score_in(spec, theta, &tree, &y_root, x_root)
}

/// [`score`] over a prebuilt (already theta-refreshed) full-tree engine.
pub fn score_in(
    spec: &ModelSpec,
    theta: &HmtTheta,
    tree: &crate::inference::MaskedTree,
    y_root: &Obs,
    x_root: usize,
) -> Result<ScoreVector> {
    let packing = Packing::new(spec.clone());
    let grads = EdgeGradients::new(&packing, theta);
    let d = grads.dim();
    let mut phi = |sp: usize, sc: usize, y: &Obs, out: &mut [f64]| grads.phi(sp, sc, y, out);
    let (mut first, _) =
        crate::inference::additive_moments(theta, tree, x_root, d, &mut phi, false)?;
    let eo = packing.emission_offset(x_root);
    let bl = packing.emission_block_len();
    let mut root_grad = vec![0.0; bl];
    packing.emission_grad(theta, x_root, y_root, &mut root_grad);
    for (i, g) in root_grad.iter().enumerate() {
        first[eo + i] += g;
    }
    Ok(ScoreVector { packed: first, descriptor: packing.descriptor() })
}

/// Score increment `ḣ_{u,k,x}`: for `k = 0` the emission gradient at
/// `(x, Y_u)`, otherwise the difference of the conditional `Σ φ`
/// expectations over `Δ(u,k)` and `Δ*(u,k)`.
pub fn score_increment(
    spec: &ModelSpec,
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    k: usize,
    x: usize,
    spine: Option<&Spine>,
) -> Result<Vec<f64>> {
    let packing = Packing::new(spec.clone());
    let grads = EdgeGradients::new(&packing, theta);
    let d = grads.dim();
    if k == 0 {
        let mut out = vec![0.0; d];
        let eo = packing.emission_offset(x);
        let bl = packing.emission_block_len();
        let y = sample
            .obs(u)
            .ok_or_else(|| HmtError::MaskOutsideSample(u.to_string()))?;
        packing.emission_grad(theta, x, y, &mut out[eo..eo + bl]);
        return Ok(out);
    }
    let mut phi = |sp: usize, sc: usize, y: &Obs, out: &mut [f64]| grads.phi(sp, sc, y, out);
    let m = past_moments(theta, sample, u, k, x, spine, d, &mut phi, false)?;
    Ok(m.first_delta.iter().zip(m.first_star.iter()).map(|(a, b)| a - b).collect())
}

/// `Λ_{u,k,x}` and `Γ_{u,k,x}`: the second-derivative and conditional
/// variance increments of the Louis decomposition (matrices `d x d`).
pub fn louis_increments(
    spec: &ModelSpec,
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    k: usize,
    x: usize,
    spine: Option<&Spine>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let packing = Packing::new(spec.clone());
    let grads = EdgeGradients::new(&packing, theta);
    let d = grads.dim();

    let mut varphi = |sp: usize, sc: usize, y: &Obs, out: &mut [f64]| grads.varphi(sp, sc, y, out);
    let lam = past_moments(theta, sample, u, k, x, spine, d * d, &mut varphi, false)?;
    let lambda = DMatrix::from_fn(d, d, |i, j| {
        lam.first_delta[i * d + j] - lam.first_star[i * d + j]
    });

    let mut phi = |sp: usize, sc: usize, y: &Obs, out: &mut [f64]| grads.phi(sp, sc, y, out);
    let gam = past_moments(theta, sample, u, k, x, spine, d, &mut phi, true)?;
    let vd = gam.var_delta.expect("second moments requested");
    let vs = gam.var_star.expect("second moments requested");
    let gamma = DMatrix::from_fn(d, d, |i, j| vd[i][j] - vs[i][j]);
    Ok((lambda, gamma))
}

/// Observed information `-∇²ℓ_{n,x}(θ)`.
///
/// `Louis` assembles the root emission Hessian, the conditional expectation
/// of `Σ ∇² log[q g]`, and the conditional variance of `Σ φ`, exactly on
/// the tree; `FiniteDiff` differentiates the analytic score centrally.
pub fn observed_information(
    spec: &ModelSpec,
    theta: &HmtTheta,
    sample: &Sample,
    x_root: usize,
    method: InfoMethod,
    louis_depth_cap: usize,
) -> Result<InfoMatrix> {
    let packing = Packing::new(spec.clone());
    let d = packing.dim();
    match method {
        InfoMethod::Louis => {
            if sample.depth > louis_depth_cap {
                return Err(HmtError::MethodUnavailable {
                    method: "louis".into(),
                    reason: format!(
                        "sample depth {} exceeds the configured cap {louis_depth_cap}",
                        sample.depth
                    ),
                });
            }
            let grads = EdgeGradients::new(&packing, theta);
            let mask = ObservationMask::full_tree(sample, x_root);

            let mut varphi =
                |sp: usize, sc: usize, y: &Obs, out: &mut [f64]| grads.varphi(sp, sc, y, out);
            let (lam, _) =
                masked_additive_moments(theta, sample, &mask, d * d, &mut varphi, false)?;

            let mut phi = |sp: usize, sc: usize, y: &Obs, out: &mut [f64]| grads.phi(sp, sc, y, out);
            let (_, var) = masked_additive_moments(theta, sample, &mask, d, &mut phi, true)?;
            let var = var.expect("second moments requested");

            let mut hess = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    hess[(i, j)] = lam[i * d + j] + var[i][j];
                }
            }
            let eo = packing.emission_offset(x_root);
            let bl = packing.emission_block_len();
            let y_root = sample.obs(&VertexId::root()).expect("root observation");
            let mut root_hess = vec![0.0; bl * bl];
            packing.emission_hess(theta, x_root, y_root, &mut root_hess);
            for i in 0..bl {
                for j in 0..bl {
                    hess[(eo + i, eo + j)] += root_hess[i * bl + j];
                }
            }
            // Exact assembly is symmetric up to roundoff; symmetrize.
            let sym = (&hess + hess.transpose()) * 0.5;
            Ok(InfoMatrix { matrix: -sym, method, normalized: false })
        }
        InfoMethod::FiniteDiff => {
            let packed = packing.pack(theta)?;
            let mut hess = DMatrix::zeros(d, d);
            for j in 0..d {
                let h = 1e-5 * (1.0 + packed.values[j].abs());
                let mut up = packed.values.clone();
                up[j] += h;
                let mut dn = packed.values.clone();
                dn[j] -= h;
                let s_up = score(spec, &packing.unpack(&up)?, sample, x_root)?;
                let s_dn = score(spec, &packing.unpack(&dn)?, sample, x_root)?;
                for i in 0..d {
                    hess[(i, j)] = (s_up.packed[i] - s_dn.packed[i]) / (2.0 * h);
                }
            }
            let sym = (&hess + hess.transpose()) * 0.5;
            Ok(InfoMatrix { matrix: -sym, method, normalized: false })
        }
    }
}

/// `-|T_n|⁻¹ ∇²ℓ(θ̂)`: the normalized observed information.
pub fn fisher_estimate(
    spec: &ModelSpec,
    theta: &HmtTheta,
    sample: &Sample,
    x_root: usize,
    method: InfoMethod,
    louis_depth_cap: usize,
) -> Result<InfoMatrix> {
    let info = observed_information(spec, theta, sample, x_root, method, louis_depth_cap)?;
    let n = sample.len() as f64;
    Ok(InfoMatrix { matrix: info.matrix / n, method, normalized: true })
}

/// Monte Carlo estimate of the limiting Fisher information
/// `I(θ) = E[ḣ ḣᵀ]` by the re-rooting identity: average
/// `ḣ_{U_k,k,x} ḣ_{U_k,k,x}ᵀ` over fresh stationary samples of `T_k` with
/// `U_k` uniform on `G_k`. Returns the estimate and entrywise MC standard
/// errors.
pub fn fisher_limit_estimate(
    spec: &ModelSpec,
    theta: &HmtTheta,
    k: usize,
    reps: usize,
    seed: u64,
    x: usize,
) -> Result<(InfoMatrix, DMatrix<f64>)> {
    use rayon::prelude::*;
    let packing = Packing::new(spec.clone());
    let d = packing.dim();
    let mut master = ChaCha12Rng::seed_from_u64(seed);
    let rep_seeds: Vec<u64> = (0..reps).map(|_| master.random()).collect();
    let gen_k = generation(k);

    let outers: Vec<Result<DMatrix<f64>>> = rep_seeds
        .par_iter()
        .map(|&rs| {
            let s = sample(spec, theta, k, &RootLaw::Stationary, rs)?;
            let mut rng = ChaCha12Rng::seed_from_u64(rs ^ 0x9e3779b97f4a7c15);
            let u = &gen_k.vertices()[rng.random_range(0..gen_k.len())];
            let inc = score_increment(spec, theta, &s, u, k, x, None)?;
            Ok(DMatrix::from_fn(d, d, |i, j| inc[i] * inc[j]))
        })
        .collect();

    let mut mean = DMatrix::zeros(d, d);
    let mut m2 = DMatrix::zeros(d, d);
    let mut count = 0.0;
    for o in outers {
        let o = o?;
        count += 1.0;
        let delta = &o - &mean;
        mean += &delta / count;
        let delta2 = &o - &mean;
        m2 += delta.component_mul(&delta2);
    }
    let se = if count > 1.0 {
        (m2 / (count - 1.0)).map(|v| (v / count).sqrt())
    } else {
        DMatrix::zeros(d, d)
    };
    Ok((InfoMatrix { matrix: mean, method: InfoMethod::Louis, normalized: true }, se))
}

/// Exact constrained M-step for one transition row: maximize
/// `Σ_j c_j log q_j` over the simplex with `q_j >= floor` (waterfilling on
/// the active set).
fn constrained_row(counts: &[f64], floor: f64) -> Vec<f64> {
    let s = counts.len();
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / s as f64; s];
    }
    let mut pinned = vec![false; s];
    loop {
        let pinned_mass: f64 = pinned.iter().filter(|&&p| p).count() as f64 * floor;
        let free_counts: f64 = counts
            .iter()
            .zip(pinned.iter())
            .filter(|(_, &p)| !p)
            .map(|(c, _)| c)
            .sum();
        if free_counts <= 0.0 {
            // Everything pinned except zero-count entries: spread the rest.
            let free = pinned.iter().filter(|&&p| !p).count();
            return pinned
                .iter()
                .map(|&p| if p { floor } else { (1.0 - pinned_mass) / free as f64 })
                .collect();
        }
        let lambda = free_counts / (1.0 - pinned_mass);
        let mut changed = false;
        for j in 0..s {
            if !pinned[j] && counts[j] / lambda < floor {
                pinned[j] = true;
                changed = true;
            }
        }
        if !changed {
            return (0..s)
                .map(|j| if pinned[j] { floor } else { counts[j] / lambda })
                .collect();
        }
    }
}

const SIGMA2_FLOOR: f64 = 1e-8;

/// One EM step conditioned on `X_∂ = x_root`. Returns the new parameters,
/// the log-likelihood of the *input* parameters, and warnings (variance
/// floor hits).
pub fn em_step(
    spec: &ModelSpec,
    theta: &HmtTheta,
    sample: &Sample,
    x_root: usize,
) -> Result<(HmtTheta, f64, Vec<String>)> {
    let tree = crate::inference::MaskedTree::from_sample_full(theta, sample)?;
    em_step_in(spec, theta, &tree, sample, x_root)
}

/// [`em_step`] over a prebuilt (already theta-refreshed) full-tree engine.
pub fn em_step_in(
    spec: &ModelSpec,
    theta: &HmtTheta,
    tree: &crate::inference::MaskedTree,
    sample: &Sample,
    x_root: usize,
) -> Result<(HmtTheta, f64, Vec<String>)> {
    let s = spec.states;
    let tables = crate::inference::posterior_tables_in(theta, tree, x_root)?;
    let mut warnings = Vec::new();

    let mut counts = vec![vec![0.0; s]; s];
    for edge in &tables.edges {
        for (sp, row) in edge.iter().enumerate() {
            for (sc, &p) in row.iter().enumerate() {
                counts[sp][sc] += p;
            }
        }
    }
    let transition: Vec<Vec<f64>> =
        counts.iter().map(|row| constrained_row(row, spec.epsilon_floor)).collect();

    let emission = match &theta.emission {
        EmissionParams::Gaussian { .. } => {
            let mut w = vec![0.0; s];
            let mut wy = vec![0.0; s];
            for (rank, m) in tables.marginals.iter().enumerate() {
                let y = sample.records[rank].y.as_f64();
                for state in 0..s {
                    w[state] += m[state];
                    wy[state] += m[state] * y;
                }
            }
            let mu: Vec<f64> = (0..s)
                .map(|state| if w[state] > 0.0 { wy[state] / w[state] } else { 0.0 })
                .collect();
            let mut wv = vec![0.0; s];
            for (rank, m) in tables.marginals.iter().enumerate() {
                let y = sample.records[rank].y.as_f64();
                for state in 0..s {
                    wv[state] += m[state] * (y - mu[state]) * (y - mu[state]);
                }
            }
            let sigma: Vec<f64> = (0..s)
                .map(|state| {
                    let v = if w[state] > 0.0 { wv[state] / w[state] } else { 1.0 };
                    if v < SIGMA2_FLOOR {
                        warnings.push(
                            HmtError::DegenerateVariance { state, floor: SIGMA2_FLOOR }
                                .to_string(),
                        );
                        SIGMA2_FLOOR.sqrt()
                    } else {
                        v.sqrt()
                    }
                })
                .collect();
            EmissionParams::Gaussian { mu, sigma }
        }
        EmissionParams::Categorical { rows } => {
            let m = rows[0].len();
            let mut acc = vec![vec![0.0; m]; s];
            for (rank, marg) in tables.marginals.iter().enumerate() {
                let cat = sample.records[rank].y.category()?;
                for state in 0..s {
                    acc[state][cat] += marg[state];
                }
            }
            let rows: Vec<Vec<f64>> = acc
                .iter()
                .map(|row| {
                    let adjusted: Vec<f64> = row.iter().map(|&v| v.max(1e-12)).collect();
                    let total: f64 = adjusted.iter().sum();
                    adjusted.iter().map(|v| v / total).collect()
                })
                .collect();
            EmissionParams::Categorical { rows }
        }
    };

    Ok((HmtTheta { transition, emission }, tables.log_likelihood, warnings))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub polish: bool,
    pub polish_iters: usize,
    pub multi_start: usize,
    /// Optional box on packed coordinates (compactness guard).
    pub packed_box: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 500,
            tol: 1e-8,
            polish: true,
            polish_iters: 40,
            multi_start: 0,
            packed_box: None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Init {
    Random(u64),
    Moment,
    Given(HmtTheta),
}

#[derive(Clone, Debug, Serialize)]
pub struct FitResult {
    pub theta_hat: HmtTheta,
    pub packed: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub x_root: usize,
    pub warnings: Vec<String>,
}

fn moment_init(spec: &ModelSpec, sample: &Sample) -> HmtTheta {
    let s = spec.states;
    let transition = vec![vec![1.0 / s as f64; s]; s];
    let emission = match spec.emission {
        EmissionFamily::Gaussian => {
            let ys: Vec<f64> = sample.records.iter().map(|r| r.y.as_f64()).collect();
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / ys.len() as f64;
            let sd = var.sqrt().max(1e-3);
            let mu = (0..s)
                .map(|j| mean + sd * (2.0 * j as f64 / (s as f64 - 1.0) - 1.0))
                .collect();
            EmissionParams::Gaussian { mu, sigma: vec![sd; s] }
        }
        EmissionFamily::Categorical { outcomes } => {
            let mut freq = vec![1e-3; outcomes];
            for r in &sample.records {
                if let Ok(c) = r.y.category() {
                    if c < outcomes {
                        freq[c] += 1.0;
                    }
                }
            }
            let rows = (0..s)
                .map(|state| {
                    let mut row = freq.clone();
                    row[state % outcomes] += 0.25 * sample.len() as f64 / outcomes as f64;
                    let total: f64 = row.iter().sum();
                    row.iter().map(|v| v / total).collect()
                })
                .collect();
            EmissionParams::Categorical { rows }
        }
    };
    HmtTheta { transition, emission }
}

fn random_init(spec: &ModelSpec, sample: &Sample, seed: u64) -> Result<HmtTheta> {
    let packing = Packing::new(spec.clone());
    let base = packing.pack(&moment_init(spec, sample))?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let jittered: Vec<f64> = base
        .values
        .iter()
        .map(|v| {
            let n = rand_distr::Normal::new(0.0, 0.5).unwrap();
            v + rand_distr::Distribution::sample(&n, &mut rng)
        })
        .collect();
    packing.unpack(&jittered)
}

/// Quasi-Newton (BFGS) ascent on the packed coordinates with backtracking
/// line search.
fn bfgs_polish(
    spec: &ModelSpec,
    theta: &HmtTheta,
    engine: &mut crate::inference::MaskedTree,
    y_root: &Obs,
    x_root: usize,
    iters: usize,
    packed_box: Option<f64>,
) -> Result<(HmtTheta, Vec<f64>)> {
    let packing = Packing::new(spec.clone());
    let d = packing.dim();
    let clamp = |x: &mut Vec<f64>| {
        if let Some(b) = packed_box {
            x.iter_mut().for_each(|v| *v = v.clamp(-b, b));
        }
    };
    let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let th = packing.unpack(x)?;
        engine.refresh_theta(&th);
        let ll = crate::inference::masked_log_density_tree(&th, engine, x_root);
        let g = score_in(spec, &th, engine, y_root, x_root)?;
        Ok((ll, g.packed))
    };

    let mut x = packing.pack(theta)?.values;
    clamp(&mut x);
    let (mut f, mut g) = eval(&x)?;
    let mut h_inv = DMatrix::<f64>::identity(d, d);
    let mut trace = Vec::new();

    for _ in 0..iters {
        let gv = DMatrix::from_column_slice(d, 1, &g);
        let dir = &h_inv * &gv; // ascent direction
        let slope: f64 = (0..d).map(|i| g[i] * dir[(i, 0)]).sum();
        if slope.abs() < 1e-12 || !slope.is_finite() {
            break;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = (0..d).map(|i| x[i] + step * dir[(i, 0)]).collect();
            clamp(&mut xn);
            if let Ok((fn_, gn)) = eval(&xn) {
                if fn_.is_finite() && fn_ >= f + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        // BFGS inverse-Hessian update on the negated problem.
        let s_vec = DMatrix::from_fn(d, 1, |i, _| xn[i] - x[i]);
        let y_vec = DMatrix::from_fn(d, 1, |i, _| -(gn[i] - g[i]));
        let sy = (s_vec.transpose() * &y_vec)[(0, 0)];
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i_mat = DMatrix::<f64>::identity(d, d);
            let left = &i_mat - &(&s_vec * y_vec.transpose()) * rho;
            let right = &i_mat - &(&y_vec * s_vec.transpose()) * rho;
            h_inv = &left * h_inv * right + &(&s_vec * s_vec.transpose()) * rho;
        }
        let improvement = fn_ - f;
        x = xn;
        f = fn_;
        g = gn;
        trace.push(f);
        if improvement < 1e-12 {
            break;
        }
    }
    let packing = Packing::new(spec.clone());
    Ok((packing.unpack(&x)?, trace))
}

/// Fit by EM (monotone, exact constrained M-step) with an optional BFGS
/// polish; multi-start takes the best final log-likelihood.
pub fn fit_mle(
    sample: &Sample,
    x_root: usize,
    spec: &ModelSpec,
    init: Init,
    opts: &FitOptions,
) -> Result<FitResult> {
    let starts: Vec<HmtTheta> = match &init {
        Init::Given(t) => vec![t.clone()],
        Init::Moment => vec![moment_init(spec, sample)],
        Init::Random(seed) => {
            let mut v = vec![random_init(spec, sample, *seed)?];
            for extra in 0..opts.multi_start {
                v.push(random_init(spec, sample, seed.wrapping_add(extra as u64 + 1))?);
            }
            v
        }
    };

    let mut best: Option<FitResult> = None;
    let mut engine = crate::inference::MaskedTree::from_sample_full(&starts[0], sample)?;
    let y_root = *sample.obs(&VertexId::root()).expect("root observation");
    for theta0 in starts {
        let mut theta = theta0;
        let mut trace: Vec<f64> = Vec::new();
        let mut warnings = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..opts.max_iter {
            engine.refresh_theta(&theta);
            let (next, ll, warn) = em_step_in(spec, &theta, &engine, sample, x_root)?;
            warnings.extend(warn);
            if let Some(&prev) = trace.last() {
                if ll < prev - 1e-10 {
                    warnings.push(format!("EM decreased the log-likelihood at iteration {it}"));
                }
                if (ll - prev).abs() < opts.tol {
                    converged = true;
                    trace.push(ll);
                    theta = next;
                    iterations = it + 1;
                    break;
                }
            }
            trace.push(ll);
            theta = next;
            iterations = it + 1;
        }
        if let Some(b) = opts.packed_box {
            // Project onto the compact packed-coordinate box before polish.
            let packing = Packing::new(spec.clone());
            let mut packed = packing.pack(&theta)?.values;
            packed.iter_mut().for_each(|v| *v = v.clamp(-b, b));
            theta = packing.unpack(&packed)?;
        }
        if opts.polish {
            let (polished, polish_trace) = bfgs_polish(
                spec,
                &theta,
                &mut engine,
                &y_root,
                x_root,
                opts.polish_iters,
                opts.packed_box,
            )?;
            theta = polished;
            trace.extend(polish_trace);
        }
        engine.refresh_theta(&theta);
        let final_ll =
            crate::inference::masked_log_density_tree(&theta, &engine, x_root);
        trace.push(final_ll);
        let packing = Packing::new(spec.clone());
        let candidate = FitResult {
            packed: packing.pack(&theta)?.values,
            theta_hat: theta,
            loglik_trace: trace,
            converged,
            iterations,
            x_root,
            warnings,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                candidate.loglik_trace.last().unwrap() > b.loglik_trace.last().unwrap()
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one start"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: Vec<usize>) -> Vec<Vec<usize>> {
        if remaining.is_empty() {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for (i, &v) in remaining.iter().enumerate() {
            let mut rest = remaining.clone();
            rest.remove(i);
            for mut tail in rec(rest) {
                tail.insert(0, v);
                out.push(tail);
            }
        }
        out
    }
    rec((0..n).collect())
}

/// Apply a state relabeling `perm` (new state i corresponds to old state
/// `perm[i]`).
pub fn permute_theta(theta: &HmtTheta, perm: &[usize]) -> HmtTheta {
    let s = theta.num_states();
    let transition =
        (0..s).map(|i| (0..s).map(|j| theta.transition[perm[i]][perm[j]]).collect()).collect();
    let emission = match &theta.emission {
        EmissionParams::Gaussian { mu, sigma } => EmissionParams::Gaussian {
            mu: perm.iter().map(|&p| mu[p]).collect(),
            sigma: perm.iter().map(|&p| sigma[p]).collect(),
        },
        EmissionParams::Categorical { rows } => {
            EmissionParams::Categorical { rows: perm.iter().map(|&p| rows[p].clone()).collect() }
        }
    };
    HmtTheta { transition, emission }
}

/// Euclidean distance between natural parameters (transition entries and
/// emission parameters concatenated).
pub fn natural_distance(a: &HmtTheta, b: &HmtTheta) -> f64 {
    let mut acc = 0.0;
    for (ra, rb) in a.transition.iter().zip(b.transition.iter()) {
        for (x, y) in ra.iter().zip(rb.iter()) {
            acc += (x - y) * (x - y);
        }
    }
    match (&a.emission, &b.emission) {
        (
            EmissionParams::Gaussian { mu: m1, sigma: s1 },
            EmissionParams::Gaussian { mu: m2, sigma: s2 },
        ) => {
            for (x, y) in m1.iter().zip(m2.iter()).chain(s1.iter().zip(s2.iter())) {
                acc += (x - y) * (x - y);
            }
        }
        (EmissionParams::Categorical { rows: r1 }, EmissionParams::Categorical { rows: r2 }) => {
            for (ra, rb) in r1.iter().zip(r2.iter()) {
                for (x, y) in ra.iter().zip(rb.iter()) {
                    acc += (x - y) * (x - y);
                }
            }
        }
        _ => acc = f64::INFINITY,
    }
    acc.sqrt()
}

/// Align `theta_hat` to `theta_star` by the state permutation minimizing the
/// natural-parameter distance. Returns the aligned parameters, the
/// permutation, and the distance.
pub fn align_to(theta_hat: &HmtTheta, theta_star: &HmtTheta) -> (HmtTheta, Vec<usize>, f64) {
    let s = theta_hat.num_states();
    let mut best: Option<(HmtTheta, Vec<usize>, f64)> = None;
    for perm in permutations(s) {
        let candidate = permute_theta(theta_hat, &perm);
        let dist = natural_distance(&candidate, theta_star);
        if best.as_ref().map_or(true, |(_, _, d)| dist < *d) {
            best = Some((candidate, perm, dist));
        }
    }
    best.expect("at least the identity permutation")
}

/// Total observation count `|T_n|` of a sample.
pub fn sample_size(sample: &Sample) -> usize {
    tree_up_to(sample.depth).len()
}
