//! Parametric HMT model family: finite hidden state space, row-stochastic
//! transition kernel with an epsilon floor, gaussian or categorical
//! emissions, the bijective packing to unconstrained coordinates, and the
//! mixing diagnostics (`σ⁻`, `σ⁺`, `ρ`, Dobrushin coefficients).
//!
//! The reference measure on the hidden space is the uniform probability, so
//! the transition density is `q(x,x') = S·Q(x,x')` and the density bounds
//! are `σ⁻ = S·min Q`, `σ⁺ = S·max Q` with mixing rate `ρ = 1 - σ⁻/σ⁺`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HmtError, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// One observed value: real for gaussian emissions, integer outcome index
/// for categorical emissions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Obs {
    Int(i64),
    Real(f64),
}

impl Obs {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Obs::Int(v) => v as f64,
            Obs::Real(v) => v,
        }
    }

    pub fn category(&self) -> Result<usize> {
        match *self {
            Obs::Int(v) if v >= 0 => Ok(v as usize),
            _ => Err(HmtError::InvalidInput(format!(
                "observation {self:?} is not a category index"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum EmissionFamily {
    Gaussian,
    Categorical { outcomes: usize },
}

/// Static description of a model family instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub states: usize,
    pub emission: EmissionFamily,
    #[serde(default = "default_epsilon")]
    pub epsilon_floor: f64,
}

fn default_epsilon() -> f64 {
    1e-3
}

impl ModelSpec {
    pub fn new(states: usize, emission: EmissionFamily, epsilon_floor: f64) -> Result<Self> {
        let spec = ModelSpec { states, emission, epsilon_floor };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states < 2 {
            return Err(HmtError::InvalidInput("need at least 2 hidden states".into()));
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor * (self.states as f64) < 1.0) {
            return Err(HmtError::InvalidInput(format!(
                "epsilon_floor {} outside (0, 1/S)",
                self.epsilon_floor
            )));
        }
        if let EmissionFamily::Categorical { outcomes } = self.emission {
            if outcomes < 2 {
                return Err(HmtError::InvalidInput("categorical needs >= 2 outcomes".into()));
            }
        }
        Ok(())
    }

    /// Dimension of the packed parameter vector.
    pub fn packed_dim(&self) -> usize {
        let s = self.states;
        s * (s - 1)
            + match self.emission {
                EmissionFamily::Gaussian => 2 * s,
                EmissionFamily::Categorical { outcomes } => s * (outcomes - 1),
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmissionParams {
    Gaussian { mu: Vec<f64>, sigma: Vec<f64> },
    Categorical { rows: Vec<Vec<f64>> },
}

/// Full parameter vector: transition matrix plus per-state emission
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmtTheta {
    pub transition: Vec<Vec<f64>>,
    pub emission: EmissionParams,
}

impl HmtTheta {
    pub fn num_states(&self) -> usize {
        self.transition.len()
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let s = spec.states;
        if self.transition.len() != s {
            return Err(HmtError::InvalidInput(format!(
                "transition has {} rows, expected {s}",
                self.transition.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != s {
                return Err(HmtError::InvalidInput(format!("transition row {i} has wrong length")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(HmtError::NotStochastic { row: i, sum });
            }
            if row.iter().any(|&q| q < spec.epsilon_floor - 1e-12) {
                return Err(HmtError::InvalidInput(format!(
                    "transition row {i} has an entry below the epsilon floor {}",
                    spec.epsilon_floor
                )));
            }
        }
        match (&self.emission, spec.emission) {
            (EmissionParams::Gaussian { mu, sigma }, EmissionFamily::Gaussian) => {
                if mu.len() != s || sigma.len() != s {
                    return Err(HmtError::InvalidInput("gaussian parameter length mismatch".into()));
                }
                if sigma.iter().any(|&v| !(v > 0.0)) {
                    return Err(HmtError::InvalidInput("gaussian sigma must be positive".into()));
                }
            }
            (EmissionParams::Categorical { rows }, EmissionFamily::Categorical { outcomes }) => {
                if rows.len() != s {
                    return Err(HmtError::InvalidInput("categorical needs one row per state".into()));
                }
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != outcomes {
                        return Err(HmtError::InvalidInput(format!(
                            "categorical row {i} has wrong length"
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(HmtError::NotStochastic { row: i, sum });
                    }
                    if row.iter().any(|&p| !(p > 0.0)) {
                        return Err(HmtError::InvalidInput(format!(
                            "categorical row {i} has a non-positive entry"
                        )));
                    }
                }
            }
            _ => {
                return Err(HmtError::InvalidInput(
                    "emission parameters do not match the model spec".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn log_emission(&self, state: usize, y: &Obs) -> f64 {
        match &self.emission {
            EmissionParams::Gaussian { mu, sigma } => {
                let z = (y.as_f64() - mu[state]) / sigma[state];
                -0.5 * z * z - sigma[state].ln() - 0.5 * LN_2PI
            }
            EmissionParams::Categorical { rows } => {
                rows[state][y.category().expect("categorical observation")].ln()
            }
        }
    }

    /// `b⁻(y) = ∫ g(x,y) λ(dx)` with `λ` uniform: the state-average density.
    pub fn b_minus(&self, y: &Obs) -> f64 {
        let s = self.num_states();
        (0..s).map(|x| self.log_emission(x, y).exp()).sum::<f64>() / s as f64
    }

    /// `b⁺ = 1 ∨ sup_{x,y} g(x,y)`.
    pub fn b_plus(&self) -> f64 {
        let sup = match &self.emission {
            EmissionParams::Gaussian { sigma, .. } => sigma
                .iter()
                .map(|&s| 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt()))
                .fold(f64::MIN, f64::max),
            EmissionParams::Categorical { rows } => rows
                .iter()
                .flat_map(|r| r.iter().copied())
                .fold(f64::MIN, f64::max),
        };
        sup.max(1.0)
    }

    /// SHA-256 digest of the canonical JSON encoding, used for provenance.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("theta serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Density-bound diagnostics for the hidden kernel: `σ⁻ = S·min Q`,
/// `σ⁺ = S·max Q`, `ρ = 1 - σ⁻/σ⁺`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingProfile {
    pub sigma_minus: f64,
    pub sigma_plus: f64,
    pub rho: f64,
}

fn check_stochastic(q: &[Vec<f64>]) -> Result<()> {
    for (i, row) in q.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(HmtError::NotStochastic { row: i, sum });
        }
    }
    Ok(())
}

pub fn mixing_profile(q: &[Vec<f64>]) -> Result<MixingProfile> {
    check_stochastic(q)?;
    let s = q.len() as f64;
    let min = q.iter().flat_map(|r| r.iter().copied()).fold(f64::MAX, f64::min);
    let max = q.iter().flat_map(|r| r.iter().copied()).fold(f64::MIN, f64::max);
    let sigma_minus = s * min;
    let sigma_plus = s * max;
    Ok(MixingProfile { sigma_minus, sigma_plus, rho: 1.0 - sigma_minus / sigma_plus })
}

/// Dobrushin coefficient: the maximal total-variation distance between two
/// rows of a stochastic matrix.
pub fn dobrushin(k: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..k.len() {
        for j in (i + 1)..k.len() {
            let tv = 0.5
                * k[i]
                    .iter()
                    .zip(k[j].iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            worst = worst.max(tv);
        }
    }
    worst
}

/// Matrix product of stochastic matrices (row-vector convention).
pub fn kernel_product(k: &[Vec<f64>], r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = k.len();
    let m = r[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for l in 0..r.len() {
            let w = k[i][l];
            for j in 0..m {
                out[i][j] += w * r[l][j];
            }
        }
    }
    out
}

/// Unique invariant distribution of a strictly positive stochastic matrix.
///
/// Dense linear solve for small matrices, power iteration above 64 states;
/// either way the result is polished by power steps until
/// `‖πQ - π‖₁ < 1e-13`.
pub fn stationary_distribution(q: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_stochastic(q)?;
    let s = q.len();
    let mut pi = if s <= 64 {
        // Solve (Qᵀ - I) π = 0 with the last equation replaced by Σπ = 1.
        let mut a = DMatrix::zeros(s, s);
        for i in 0..s {
            for j in 0..s {
                a[(i, j)] = q[j][i] - if i == j { 1.0 } else { 0.0 };
            }
        }
        for j in 0..s {
            a[(s - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(s);
        b[s - 1] = 1.0;
        match a.lu().solve(&b) {
            Some(x) => x.iter().copied().collect::<Vec<f64>>(),
            None => vec![1.0 / s as f64; s],
        }
    } else {
        vec![1.0 / s as f64; s]
    };

    let step = |pi: &[f64]| -> Vec<f64> {
        let mut next = vec![0.0; s];
        for i in 0..s {
            for j in 0..s {
                next[j] += pi[i] * q[i][j];
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        next
    };
    let residual = |pi: &[f64]| -> f64 {
        step(pi).iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).sum()
    };

    let mut iters = 0;
    while residual(&pi) >= 1e-13 && iters < 100_000 {
        pi = step(&pi);
        iters += 1;
    }
    if pi.iter().any(|v| !v.is_finite()) || residual(&pi) >= 1e-12 {
        return Err(HmtError::NonFinite { context: "stationary distribution solve".into() });
    }
    Ok(pi)
}

/// One named assumption check produced by [`validate_assumptions`].
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub assumption: String,
    pub pass: bool,
    pub detail: String,
}

/// Diagnostic checks of the density assumptions on a concrete `(θ, data)`
/// pair: positivity of the transition density, positivity of the emission
/// density at every observed value, and finiteness proxies for `b⁻`, `b⁺`.
pub fn validate_assumptions(
    spec: &ModelSpec,
    theta: &HmtTheta,
    observations: &[Obs],
) -> Vec<AssumptionCheck> {
    let mut checks = Vec::new();
    let min_q = theta
        .transition
        .iter()
        .flat_map(|r| r.iter().copied())
        .fold(f64::MAX, f64::min);
    checks.push(AssumptionCheck {
        assumption: "2(i) transition density bounded below".into(),
        pass: min_q >= spec.epsilon_floor - 1e-12 && min_q > 0.0,
        detail: format!("min Q = {min_q:.6e}, sigma_minus = {:.6e}", theta.num_states() as f64 * min_q),
    });

    let mut emission_positive = true;
    let mut min_b = f64::MAX;
    for y in observations {
        for s in 0..theta.num_states() {
            if !theta.log_emission(s, y).is_finite() {
                emission_positive = false;
            }
        }
        min_b = min_b.min(theta.b_minus(y));
    }
    checks.push(AssumptionCheck {
        assumption: "2(iii) emission density positive at observed data".into(),
        pass: emission_positive,
        detail: format!("checked {} observations", observations.len()),
    });
    checks.push(AssumptionCheck {
        assumption: "3(i) b+ finite".into(),
        pass: theta.b_plus().is_finite(),
        detail: format!("b+ = {:.6e}", theta.b_plus()),
    });
    checks.push(AssumptionCheck {
        assumption: "3(ii) log b-(Y) finite on the data".into(),
        pass: observations.is_empty() || (min_b > 0.0 && min_b.ln().is_finite()),
        detail: format!("min b-(y) = {min_b:.6e}"),
    });
    checks
}

/// Unconstrained coordinates for a [`HmtTheta`] with a recorded layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedTheta {
    pub values: Vec<f64>,
    pub descriptor: Vec<String>,
}

/// The bijective map between [`HmtTheta`] and unconstrained packed
/// coordinates.
///
/// Transition rows go through a logit with the last coordinate pinned and an
/// epsilon-floor blend `Q_row = (1 - S·ε)·softmax + ε`; gaussian scales are
/// log-transformed; categorical rows use the plain pinned logit.
#[derive(Clone, Debug)]
pub struct Packing {
    pub spec: ModelSpec,
}

impl Packing {
    pub fn new(spec: ModelSpec) -> Self {
        Packing { spec }
    }

    pub fn dim(&self) -> usize {
        self.spec.packed_dim()
    }

    pub fn transition_offset(&self, row: usize) -> usize {
        row * (self.spec.states - 1)
    }

    pub fn emission_offset(&self, state: usize) -> usize {
        let s = self.spec.states;
        s * (s - 1)
            + match self.spec.emission {
                EmissionFamily::Gaussian => 2 * state,
                EmissionFamily::Categorical { outcomes } => state * (outcomes - 1),
            }
    }

    pub fn emission_block_len(&self) -> usize {
        match self.spec.emission {
            EmissionFamily::Gaussian => 2,
            EmissionFamily::Categorical { outcomes } => outcomes - 1,
        }
    }

    pub fn descriptor(&self) -> Vec<String> {
        let s = self.spec.states;
        let mut names = Vec::with_capacity(self.dim());
        for row in 0..s {
            for j in 0..s - 1 {
                names.push(format!("logit_q[{row}][{j}]"));
            }
        }
        match self.spec.emission {
            EmissionFamily::Gaussian => {
                for state in 0..s {
                    names.push(format!("mu[{state}]"));
                    names.push(format!("log_sigma[{state}]"));
                }
            }
            EmissionFamily::Categorical { outcomes } => {
                for state in 0..s {
                    for j in 0..outcomes - 1 {
                        names.push(format!("logit_g[{state}][{j}]"));
                    }
                }
            }
        }
        names
    }

    pub fn pack(&self, theta: &HmtTheta) -> Result<PackedTheta> {
        theta.validate(&self.spec)?;
        let s = self.spec.states;
        let eps = self.spec.epsilon_floor;
        let scale = 1.0 - s as f64 * eps;
        let mut values = Vec::with_capacity(self.dim());
        for row in &theta.transition {
            // Entries exactly at the floor are clamped just inside before the
            // logit so the map stays finite.
            let p: Vec<f64> = row
                .iter()
                .map(|&q| ((q.max(eps + 1e-12)) - eps) / scale)
                .collect();
            let pin = p[s - 1].ln();
            for item in p.iter().take(s - 1) {
                values.push(item.ln() - pin);
            }
        }
        match &theta.emission {
            EmissionParams::Gaussian { mu, sigma } => {
                for state in 0..s {
                    values.push(mu[state]);
                    values.push(sigma[state].ln());
                }
            }
            EmissionParams::Categorical { rows } => {
                for row in rows {
                    let m = row.len();
                    let pin = row[m - 1].max(1e-300).ln();
                    for &r in row.iter().take(m - 1) {
                        values.push(r.max(1e-300).ln() - pin);
                    }
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HmtError::NonFinite { context: "packed theta".into() });
        }
        Ok(PackedTheta { values, descriptor: self.descriptor() })
    }

    pub fn unpack(&self, packed: &[f64]) -> Result<HmtTheta> {
        if packed.len() != self.dim() {
            return Err(HmtError::InvalidInput(format!(
                "packed vector has length {}, expected {}",
                packed.len(),
                self.dim()
            )));
        }
        if packed.iter().any(|v| !v.is_finite()) {
            return Err(HmtError::NonFinite { context: "packed theta".into() });
        }
        let s = self.spec.states;
        let eps = self.spec.epsilon_floor;
        let scale = 1.0 - s as f64 * eps;
        let mut transition = Vec::with_capacity(s);
        for row in 0..s {
            let z = &packed[self.transition_offset(row)..self.transition_offset(row) + s - 1];
            let p = pinned_softmax(z);
            transition.push(p.iter().map(|&pi| scale * pi + eps).collect());
        }
        let emission = match self.spec.emission {
            EmissionFamily::Gaussian => {
                let mut mu = Vec::with_capacity(s);
                let mut sigma = Vec::with_capacity(s);
                for state in 0..s {
                    let off = self.emission_offset(state);
                    mu.push(packed[off]);
                    sigma.push(packed[off + 1].exp());
                }
                EmissionParams::Gaussian { mu, sigma }
            }
            EmissionFamily::Categorical { outcomes } => {
                let mut rows = Vec::with_capacity(s);
                for state in 0..s {
                    let off = self.emission_offset(state);
                    rows.push(pinned_softmax(&packed[off..off + outcomes - 1]));
                }
                EmissionParams::Categorical { rows }
            }
        };
        Ok(HmtTheta { transition, emission })
    }

    /// Per-theta derivative tables of `log Q(row, col)` with respect to the
    /// packed coordinates of `row`.
    pub fn transition_grad_tables(&self, theta: &HmtTheta) -> TransitionGrads {
        let s = self.spec.states;
        let eps = self.spec.epsilon_floor;
        let scale = 1.0 - s as f64 * eps;
        let mut grad = vec![vec![vec![0.0; s - 1]; s]; s];
        let mut hess = vec![vec![vec![vec![0.0; s - 1]; s - 1]; s]; s];
        for row in 0..s {
            let q = &theta.transition[row];
            let p: Vec<f64> = q.iter().map(|&v| (v - eps) / scale).collect();
            for col in 0..s {
                let g = &mut grad[row][col];
                for i in 0..s - 1 {
                    let delta = if i == col { 1.0 } else { 0.0 };
                    g[i] = scale * p[col] * (delta - p[i]) / q[col];
                }
                for i in 0..s - 1 {
                    let di = if i == col { 1.0 } else { 0.0 };
                    for l in 0..s - 1 {
                        let dl = if l == col { 1.0 } else { 0.0 };
                        let dil = if i == l { 1.0 } else { 0.0 };
                        let second = scale
                            * (p[col] * (dl - p[l]) * (di - p[i]) - p[col] * p[i] * (dil - p[l]))
                            / q[col];
                        hess[row][col][i][l] = second - g[i] * g[l];
                    }
                }
            }
        }
        TransitionGrads { grad, hess }
    }

    /// Gradient of `log g(state, y)` in the state's emission block.
    pub fn emission_grad(&self, theta: &HmtTheta, state: usize, y: &Obs, out: &mut [f64]) {
        match &theta.emission {
            EmissionParams::Gaussian { mu, sigma } => {
                let d = (y.as_f64() - mu[state]) / sigma[state];
                out[0] = d / sigma[state];
                out[1] = d * d - 1.0;
            }
            EmissionParams::Categorical { rows } => {
                let row = &rows[state];
                let m = row.len();
                let cat = y.category().expect("categorical observation");
                for i in 0..m - 1 {
                    let delta = if i == cat { 1.0 } else { 0.0 };
                    out[i] = delta - row[i];
                }
            }
        }
    }

    /// Hessian of `log g(state, y)` in the state's emission block
    /// (row-major `block_len x block_len`).
    pub fn emission_hess(&self, theta: &HmtTheta, state: usize, y: &Obs, out: &mut [f64]) {
        match &theta.emission {
            EmissionParams::Gaussian { mu, sigma } => {
                let s2 = sigma[state] * sigma[state];
                let d = y.as_f64() - mu[state];
                out[0] = -1.0 / s2;
                out[1] = -2.0 * d / s2;
                out[2] = out[1];
                out[3] = -2.0 * d * d / s2;
            }
            EmissionParams::Categorical { rows } => {
                let row = &rows[state];
                let m = row.len() - 1;
                for i in 0..m {
                    for l in 0..m {
                        let dil = if i == l { 1.0 } else { 0.0 };
                        out[i * m + l] = -row[i] * (dil - row[l]);
                    }
                }
            }
        }
    }
}

/// Derivatives of `log Q[row][col]` with respect to the packed logits of
/// `row`: `grad[row][col][i]` and `hess[row][col][i][l]`.
pub struct TransitionGrads {
    pub grad: Vec<Vec<Vec<f64>>>,
    pub hess: Vec<Vec<Vec<Vec<f64>>>>,
}

fn pinned_softmax(z: &[f64]) -> Vec<f64> {
    let mut full: Vec<f64> = z.to_vec();
    full.push(0.0);
    let max = full.iter().cloned().fold(f64::MIN, f64::max);
    let mut exps: Vec<f64> = full.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter_mut().for_each(|v| *v /= total);
    exps
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn gaussian_spec(states: usize) -> ModelSpec {
        ModelSpec::new(states, EmissionFamily::Gaussian, 1e-3).unwrap()
    }

    fn two_state_theta() -> HmtTheta {
        HmtTheta {
            transition: vec![vec![0.6, 0.4], vec![0.45, 0.55]],
            emission: EmissionParams::Gaussian { mu: vec![-1.0, 1.0], sigma: vec![1.0, 1.0] },
        }
    }

    #[test]
    fn stationary_examples() {
        let pi = stationary_distribution(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-12 && (pi[1] - 0.5).abs() < 1e-12);

        let pi = stationary_distribution(&[vec![0.6, 0.4], vec![0.45, 0.55]]).unwrap();
        assert!((pi[0] - 9.0 / 17.0).abs() < 1e-12);
        assert!((pi[1] - 8.0 / 17.0).abs() < 1e-12);

        let e = 1e-3;
        let pi = stationary_distribution(&[vec![1.0 - e, e], vec![e, 1.0 - e]]).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-12);

        assert!(matches!(
            stationary_distribution(&[vec![0.7, 0.4], vec![0.5, 0.5]]),
            Err(HmtError::NotStochastic { .. })
        ));
    }

    #[test]
    fn stationary_is_fixed_point_on_random_kernels() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for s in 2..=5usize {
            for _ in 0..50 {
                let q: Vec<Vec<f64>> = (0..s)
                    .map(|_| {
                        let raw: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..1.0)).collect();
                        let t: f64 = raw.iter().sum();
                        raw.iter().map(|v| v / t).collect()
                    })
                    .collect();
                let pi = stationary_distribution(&q).unwrap();
                let l1: f64 = kernel_product(&[pi.clone()], &q)[0]
                    .iter()
                    .zip(pi.iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(l1 < 1e-12, "residual {l1}");
            }
        }
    }

    #[test]
    fn mixing_profile_examples() {
        let p = mixing_profile(&[vec![0.6, 0.4], vec![0.45, 0.55]]).unwrap();
        assert!((p.sigma_minus - 0.8).abs() < 1e-15);
        assert!((p.sigma_plus - 1.2).abs() < 1e-15);
        assert!((p.rho - 1.0 / 3.0).abs() < 1e-15);

        let p = mixing_profile(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        assert!((p.rho - 4.0 / 7.0).abs() < 1e-15);

        let p = mixing_profile(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!(p.rho.abs() < 1e-15);
    }

    #[test]
    fn dobrushin_examples() {
        assert!((dobrushin(&[vec![0.6, 0.4], vec![0.45, 0.55]]) - 0.15).abs() < 1e-15);
        assert!(dobrushin(&[vec![0.3, 0.7], vec![0.3, 0.7]]).abs() < 1e-15);
        assert!((dobrushin(&[vec![1.0, 0.0], vec![0.0, 1.0]]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dobrushin_submultiplicative_and_doeblin() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..500 {
            let s = rng.random_range(2..5usize);
            let make = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<Vec<f64>> {
                (0..s)
                    .map(|_| {
                        let raw: Vec<f64> = (0..s).map(|_| rng.random_range(0.01..1.0)).collect();
                        let t: f64 = raw.iter().sum();
                        raw.iter().map(|v| v / t).collect()
                    })
                    .collect()
            };
            let k = make(&mut rng);
            let r = make(&mut rng);
            assert!(dobrushin(&kernel_product(&k, &r)) <= dobrushin(&k) * dobrushin(&r) + 1e-12);
            let min_k = k.iter().flat_map(|r| r.iter().copied()).fold(f64::MAX, f64::min);
            assert!(dobrushin(&k) <= 1.0 - s as f64 * min_k + 1e-12);
        }
    }

    #[test]
    fn geometric_ergodicity_bound() {
        // ‖Q^n(x,·) - π‖_TV ≤ (1 - σ⁻)^n.
        let q = vec![vec![0.6, 0.4], vec![0.45, 0.55]];
        let pi = stationary_distribution(&q).unwrap();
        let profile = mixing_profile(&q).unwrap();
        let mut power = q.clone();
        for n in 1..12 {
            for (x, row) in power.iter().enumerate() {
                let tv: f64 =
                    0.5 * row.iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
                assert!(
                    tv <= (1.0 - profile.sigma_minus).powi(n) + 1e-12,
                    "n={n} x={x} tv={tv}"
                );
            }
            power = kernel_product(&power, &q);
        }
    }

    #[test]
    fn pack_roundtrip() {
        let spec = gaussian_spec(2);
        let packing = Packing::new(spec);
        let theta = two_state_theta();
        let packed = packing.pack(&theta).unwrap();
        assert_eq!(packed.values.len(), packing.dim());
        let back = packing.unpack(&packed.values).unwrap();
        for (a, b) in theta.transition.iter().flatten().zip(back.transition.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        if let (
            EmissionParams::Gaussian { mu: m1, sigma: s1 },
            EmissionParams::Gaussian { mu: m2, sigma: s2 },
        ) = (&theta.emission, &back.emission)
        {
            for (a, b) in m1.iter().chain(s1.iter()).zip(m2.iter().chain(s2.iter())) {
                assert!((a - b).abs() < 1e-12);
            }
        } else {
            panic!("emission family changed in round trip");
        }
    }

    #[test]
    fn unpack_zero_vector_is_uniformish() {
        let spec = gaussian_spec(2);
        let packing = Packing::new(spec);
        let theta = packing.unpack(&vec![0.0; packing.dim()]).unwrap();
        for row in &theta.transition {
            for &q in row {
                // (1 - S·ε)/S + ε = 1/S
                assert!((q - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pack_clamps_floor_entries() {
        let spec = gaussian_spec(2);
        let packing = Packing::new(spec.clone());
        let theta = HmtTheta {
            transition: vec![vec![1.0 - 1e-3, 1e-3], vec![0.5, 0.5]],
            emission: EmissionParams::Gaussian { mu: vec![0.0, 1.0], sigma: vec![1.0, 1.0] },
        };
        let packed = packing.pack(&theta).unwrap();
        assert!(packed.values.iter().all(|v| v.is_finite()));
        let back = packing.unpack(&packed.values).unwrap();
        assert!((back.transition[0][1] - 1e-3).abs() <= 2e-12);
    }

    #[test]
    fn transition_grads_match_finite_differences() {
        let spec = gaussian_spec(3);
        let packing = Packing::new(spec);
        let theta = HmtTheta {
            transition: vec![
                vec![0.5, 0.3, 0.2],
                vec![0.2, 0.5, 0.3],
                vec![0.25, 0.3, 0.45],
            ],
            emission: EmissionParams::Gaussian {
                mu: vec![-1.0, 0.0, 1.0],
                sigma: vec![0.8, 1.0, 1.2],
            },
        };
        let packed = packing.pack(&theta).unwrap();
        let tables = packing.transition_grad_tables(&theta);
        let h = 1e-6;
        for row in 0..3 {
            for col in 0..3 {
                for i in 0..2 {
                    let idx = packing.transition_offset(row) + i;
                    let mut up = packed.values.clone();
                    up[idx] += h;
                    let mut dn = packed.values.clone();
                    dn[idx] -= h;
                    let f = |v: &[f64]| packing.unpack(v).unwrap().transition[row][col].ln();
                    let num = (f(&up) - f(&dn)) / (2.0 * h);
                    assert!(
                        (num - tables.grad[row][col][i]).abs() < 1e-6,
                        "grad mismatch row={row} col={col} i={i}: {num} vs {}",
                        tables.grad[row][col][i]
                    );
                    for l in 0..2 {
                        let h2 = 1e-4;
                        let jdx = packing.transition_offset(row) + l;
                        let mut pp = packed.values.clone();
                        pp[idx] += h2;
                        pp[jdx] += h2;
                        let mut pm = packed.values.clone();
                        pm[idx] += h2;
                        pm[jdx] -= h2;
                        let mut mp = packed.values.clone();
                        mp[idx] -= h2;
                        mp[jdx] += h2;
                        let mut mm = packed.values.clone();
                        mm[idx] -= h2;
                        mm[jdx] -= h2;
                        let num2 = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h2 * h2);
                        assert!(
                            (num2 - tables.hess[row][col][i][l]).abs() < 1e-4,
                            "hess mismatch row={row} col={col} i={i} l={l}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn emission_grads_match_finite_differences() {
        let spec = gaussian_spec(2);
        let packing = Packing::new(spec);
        let theta = two_state_theta();
        let packed = packing.pack(&theta).unwrap();
        let y = Obs::Real(0.37);
        let h = 1e-6;
        for state in 0..2 {
            let mut g = [0.0; 2];
            packing.emission_grad(&theta, state, &y, &mut g);
            let mut hm = [0.0; 4];
            packing.emission_hess(&theta, state, &y, &mut hm);
            for i in 0..2 {
                let idx = packing.emission_offset(state) + i;
                let f = |v: &[f64]| packing.unpack(v).unwrap().log_emission(state, &y);
                let mut up = packed.values.clone();
                up[idx] += h;
                let mut dn = packed.values.clone();
                dn[idx] -= h;
                let num = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-6);
                let h2 = 1e-4;
                let mut up2 = packed.values.clone();
                up2[idx] += h2;
                let mut dn2 = packed.values.clone();
                dn2[idx] -= h2;
                let num2 = (f(&up2)
                    - 2.0 * packing.unpack(&packed.values).unwrap().log_emission(state, &y)
                    + f(&dn2))
                    / (h2 * h2);
                assert!((num2 - hm[i * 2 + i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn categorical_grads_match_finite_differences() {
        let spec = ModelSpec::new(2, EmissionFamily::Categorical { outcomes: 3 }, 1e-3).unwrap();
        let packing = Packing::new(spec);
        let theta = HmtTheta {
            transition: vec![vec![0.6, 0.4], vec![0.45, 0.55]],
            emission: EmissionParams::Categorical {
                rows: vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.2, 0.7]],
            },
        };
        let packed = packing.pack(&theta).unwrap();
        let y = Obs::Int(1);
        let h = 1e-6;
        for state in 0..2 {
            let mut g = [0.0; 2];
            packing.emission_grad(&theta, state, &y, &mut g);
            for i in 0..2 {
                let idx = packing.emission_offset(state) + i;
                let f = |v: &[f64]| packing.unpack(v).unwrap().log_emission(state, &y);
                let mut up = packed.values.clone();
                up[idx] += h;
                let mut dn = packed.values.clone();
                dn[idx] -= h;
                let num = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-6, "state={state} i={i}");
            }
        }
    }

    #[test]
    fn validate_assumptions_flags_bad_inputs() {
        let spec = gaussian_spec(2);
        let theta = two_state_theta();
        let obs = vec![Obs::Real(0.0), Obs::Real(2.5)];
        assert!(validate_assumptions(&spec, &theta, &obs).iter().all(|c| c.pass));

        let bad = HmtTheta {
            transition: vec![vec![0.9995, 0.0005], vec![0.5, 0.5]],
            emission: theta.emission.clone(),
        };
        let checks = validate_assumptions(&spec, &bad, &obs);
        assert!(!checks[0].pass);

        let cat_spec =
            ModelSpec::new(2, EmissionFamily::Categorical { outcomes: 2 }, 1e-3).unwrap();
        let cat = HmtTheta {
            transition: vec![vec![0.6, 0.4], vec![0.45, 0.55]],
            emission: EmissionParams::Categorical { rows: vec![vec![1.0, 0.0], vec![0.5, 0.5]] },
        };
        let checks = validate_assumptions(&cat_spec, &cat, &[Obs::Int(1)]);
        assert!(!checks[1].pass);
    }

    #[test]
    fn model_spec_json_schema() {
        let json = r#"{"states":2,"emission":{"family":"gaussian"},"epsilon_floor":0.001}"#;
        let spec: ModelSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.states, 2);
        let back = serde_json::to_string(&spec).unwrap();
        let again: ModelSpec = serde_json::from_str(&back).unwrap();
        assert_eq!(spec, again);

        let cat = r#"{"states":3,"emission":{"family":"categorical","outcomes":4}}"#;
        let spec: ModelSpec = serde_json::from_str(cat).unwrap();
        assert_eq!(spec.emission, EmissionFamily::Categorical { outcomes: 4 });
        assert_eq!(spec.epsilon_floor, 1e-3);
    }
}
