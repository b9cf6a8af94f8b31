//! Exact log-domain message passing on anchored subtrees: masked
//! likelihoods, root-conditioned posteriors, log-likelihood increments
//! `h_{u,k,x}`, block increments, total-variation gaps, and conditional
//! moments of additive edge functionals (used for the score and the
//! observed information).
//!
//! Everything is driven by one generic sum-product pass over an
//! ancestor-closed vertex set where unobserved vertices contribute factor 1
//! and clamped vertices have their state support restricted.

use std::collections::HashMap;

use crate::error::{HmtError, Result};
use crate::model::{HmtTheta, Obs};
use crate::simulate::Sample;
use crate::tree::{
    block_delta, block_past, delta, delta_star, PastCoords, Spine, VertexId,
};

pub(crate) const NEG_INF: f64 = f64::NEG_INFINITY;

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Observation subset conditioned on, anchored at a vertex whose hidden
/// state is fixed.
#[derive(Clone, Debug)]
pub struct ObservationMask {
    pub vertices: Vec<VertexId>,
    pub anchor: VertexId,
    pub anchor_state: usize,
}

impl ObservationMask {
    pub fn new(mut vertices: Vec<VertexId>, anchor: VertexId, anchor_state: usize) -> Result<Self> {
        vertices.sort();
        vertices.dedup();
        for v in &vertices {
            if !anchor.is_ancestor_of(v) {
                return Err(HmtError::MaskOutsideSample(v.to_string()));
            }
        }
        Ok(ObservationMask { vertices, anchor, anchor_state })
    }

    pub fn full_tree(sample: &Sample, anchor_state: usize) -> Self {
        ObservationMask {
            vertices: sample.records.iter().map(|r| r.path.clone()).collect(),
            anchor: VertexId::root(),
            anchor_state,
        }
    }
}

struct Node {
    parent: Option<usize>,
    children: Vec<usize>,
    /// log g(s, y) per state when observed.
    log_g: Option<Vec<f64>>,
    obs: Option<Obs>,
    clamp: Option<usize>,
}

/// An anchored computation tree: the ancestor closure of the masked and
/// query vertices, in local coordinates (the anchor is the local root).
pub struct MaskedTree {
    nodes: Vec<Node>,
    index: HashMap<VertexId, usize>,
    num_states: usize,
}

impl MaskedTree {
    /// Build from local-coordinate vertex lists and an observation lookup.
    ///
    /// `observed` must resolve every vertex of `mask_local`; `extras` are
    /// structural query vertices that do not contribute density factors.
    pub fn build(
        theta: &HmtTheta,
        mask_local: &[VertexId],
        extras: &[VertexId],
        observed: &dyn Fn(&VertexId) -> Option<Obs>,
    ) -> Result<MaskedTree> {
        let s = theta.num_states();
        let mut all: Vec<VertexId> = Vec::new();
        for v in mask_local.iter().chain(extras.iter()) {
            let mut cur = v.clone();
            loop {
                all.push(cur.clone());
                if cur.is_root() {
                    break;
                }
                cur = cur.parent()?;
            }
        }
        if all.is_empty() {
            all.push(VertexId::root());
        }
        all.sort();
        all.dedup();

        let index: HashMap<VertexId, usize> =
            all.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
        let mask_set: std::collections::HashSet<&VertexId> = mask_local.iter().collect();
        let mut nodes: Vec<Node> = Vec::with_capacity(all.len());
        for v in &all {
            let (obs, log_g) = if mask_set.contains(v) {
                let y = observed(v).ok_or_else(|| HmtError::MaskOutsideSample(v.to_string()))?;
                let lg = (0..s).map(|state| theta.log_emission(state, &y)).collect();
                (Some(y), Some(lg))
            } else {
                (None, None)
            };
            let parent = if v.is_root() { None } else { Some(index[&v.parent()?]) };
            nodes.push(Node { parent, children: Vec::new(), log_g, obs, clamp: None });
        }
        for i in 1..nodes.len() {
            let p = nodes[i].parent.unwrap();
            nodes[p].children.push(i);
        }
        Ok(MaskedTree { nodes, index, num_states: s })
    }

    /// Recompute the per-vertex emission tables for new parameters; the
    /// structure (and the stored observations) stay fixed. Lets fitting
    /// loops reuse one tree across iterations.
    pub fn refresh_theta(&mut self, theta: &HmtTheta) {
        let s = self.num_states;
        for node in &mut self.nodes {
            if let Some(y) = node.obs.as_ref() {
                node.log_g = Some((0..s).map(|state| theta.log_emission(state, y)).collect());
            }
        }
    }

    /// Build the full-tree engine for a sample (every vertex observed).
    pub fn from_sample_full(theta: &HmtTheta, sample: &Sample) -> Result<MaskedTree> {
        let mask = ObservationMask::full_tree(sample, 0);
        build_from_sample(theta, sample, &mask, &[])
    }

    pub fn clamp(&mut self, v: &VertexId, state: usize) -> Result<()> {
        let i = *self
            .index
            .get(v)
            .ok_or_else(|| HmtError::MaskOutsideSample(v.to_string()))?;
        self.nodes[i].clamp = Some(state);
        Ok(())
    }

    pub fn clear_clamps(&mut self) {
        for n in &mut self.nodes {
            n.clamp = None;
        }
    }

    pub fn local_index(&self, v: &VertexId) -> Result<usize> {
        self.index
            .get(v)
            .copied()
            .ok_or_else(|| HmtError::MaskOutsideSample(v.to_string()))
    }

    fn factor(&self, i: usize, state: usize) -> f64 {
        if let Some(c) = self.nodes[i].clamp {
            if c != state {
                return NEG_INF;
            }
        }
        match &self.nodes[i].log_g {
            Some(lg) => lg[state],
            None => 0.0,
        }
    }

    /// Upward pass: `beta[i][s] = log p(masked obs in subtree(i) | X_i = s)`
    /// and the child-to-parent messages.
    fn upward(&self, log_q: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let s = self.num_states;
        let n = self.nodes.len();
        let mut beta = vec![0.0; n * s];
        let mut msg = vec![0.0; n * s];
        let mut scratch = vec![0.0; s];
        for i in (0..n).rev() {
            for state in 0..s {
                let mut b = self.factor(i, state);
                for &c in &self.nodes[i].children {
                    b += msg[c * s + state];
                }
                beta[i * s + state] = b;
            }
            if self.nodes[i].parent.is_some() {
                for state in 0..s {
                    for (sc, slot) in scratch.iter_mut().enumerate() {
                        *slot = log_q[state][sc] + beta[i * s + sc];
                    }
                    msg[i * s + state] = log_sum_exp(&scratch);
                }
            }
        }
        (beta, msg)
    }

    /// Downward pass: `alpha[i][s] = log p(masked obs outside subtree(i),
    /// X_i = s | X_anchor = x)`.
    fn downward(
        &self,
        log_q: &[Vec<f64>],
        msg: &[f64],
        anchor_state: usize,
    ) -> Vec<f64> {
        let s = self.num_states;
        let n = self.nodes.len();
        let mut alpha = vec![NEG_INF; n * s];
        alpha[anchor_state] = 0.0;
        let mut scratch = vec![0.0; s];
        for i in 0..n {
            let mut total = vec![0.0; s];
            for state in 0..s {
                for &c in &self.nodes[i].children {
                    total[state] += msg[c * s + state];
                }
            }
            for &c in &self.nodes[i].children {
                for sc in 0..s {
                    for (sp, slot) in scratch.iter_mut().enumerate() {
                        *slot = alpha[i * s + sp]
                            + self.factor(i, sp)
                            + total[sp]
                            - msg[c * s + sp]
                            + log_q[sp][sc];
                    }
                    alpha[c * s + sc] = log_sum_exp(&scratch);
                }
            }
        }
        alpha
    }
}

fn log_transition(theta: &HmtTheta) -> Vec<Vec<f64>> {
    theta
        .transition
        .iter()
        .map(|row| row.iter().map(|&q| q.ln()).collect())
        .collect()
}

/// Exact `log p(Y_mask | X_anchor = x)` over the finite hidden state space.
/// The empty mask gives 0.
pub fn masked_log_density(theta: &HmtTheta, sample: &Sample, mask: &ObservationMask) -> Result<f64> {
    if mask.vertices.is_empty() {
        return Ok(0.0);
    }
    let tree = build_from_sample(theta, sample, mask, &[])?;
    Ok(masked_log_density_tree(theta, &tree, mask.anchor_state))
}

pub(crate) fn masked_log_density_tree(
    theta: &HmtTheta,
    tree: &MaskedTree,
    anchor_state: usize,
) -> f64 {
    let log_q = log_transition(theta);
    let (beta, _) = tree.upward(&log_q);
    beta[anchor_state]
}

fn build_from_sample(
    theta: &HmtTheta,
    sample: &Sample,
    mask: &ObservationMask,
    extras: &[VertexId],
) -> Result<MaskedTree> {
    let anchor = mask.anchor.clone();
    let local: Vec<VertexId> = mask
        .vertices
        .iter()
        .map(|v| v.relative_to(&anchor))
        .collect::<Result<_>>()?;
    let extras_local: Vec<VertexId> = extras
        .iter()
        .map(|v| v.relative_to(&anchor))
        .collect::<Result<_>>()?;
    let lookup = |local_v: &VertexId| -> Option<Obs> {
        sample.obs(&anchor.join(local_v)).copied()
    };
    MaskedTree::build(theta, &local, &extras_local, &lookup)
}

/// `ℓ_{n,x}(θ)`: the log-likelihood of all observations conditioned on the
/// root state.
pub fn log_likelihood(theta: &HmtTheta, sample: &Sample, x_root: usize) -> Result<f64> {
    masked_log_density(theta, sample, &ObservationMask::full_tree(sample, x_root))
}

/// A log-likelihood increment `h_{u,k,x}` with its two constituent masked
/// log-densities.
#[derive(Clone, Debug)]
pub struct Increment {
    pub u: VertexId,
    pub k: usize,
    pub x: usize,
    pub value: f64,
    pub log_delta: f64,
    pub log_delta_star: f64,
}

/// Resolve the observation masks of `Δ(u,k)` / `Δ*(u,k)` into a
/// [`MaskedTree`] pair in anchor-local coordinates.
///
/// For `k > h(u)` a spine is required; observations above the original root
/// are synthesized by a fresh stationary simulation seeded from
/// `(sample seed, spine)`, which keeps the result deterministic in the
/// inputs.
fn localize(set: &crate::tree::VertexSet, coords: &PastCoords) -> Result<Vec<VertexId>> {
    match coords {
        PastCoords::Absolute { anchor } => set.iter().map(|v| v.relative_to(anchor)).collect(),
        PastCoords::Virtual { .. } => Ok(set.vertices().to_vec()),
    }
}

fn build_delta_pair(
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    k: usize,
    spine: Option<&Spine>,
    extras_local: &[VertexId],
) -> Result<(MaskedTree, MaskedTree, VertexId)> {
    let d = delta(u, k, spine)?;
    let ds = delta_star(u, k, spine)?;
    let lookup = past_lookup(theta, sample, &d.coords, k, spine)?;
    let d_local = localize(&d.set, &d.coords)?;
    let ds_local = localize(&ds.set, &ds.coords)?;
    let t1 = MaskedTree::build(theta, &d_local, extras_local, &*lookup)?;
    let t2 = MaskedTree::build(theta, &ds_local, extras_local, &*lookup)?;
    let u_local = match &d.coords {
        PastCoords::Absolute { anchor } => u.relative_to(anchor)?,
        PastCoords::Virtual { .. } => d.u_local.clone(),
    };
    Ok((t1, t2, u_local))
}

type ObsLookup<'a> = Box<dyn Fn(&VertexId) -> Option<Obs> + 'a>;

fn past_lookup<'a>(
    theta: &HmtTheta,
    sample: &'a Sample,
    coords: &PastCoords,
    k: usize,
    spine: Option<&Spine>,
) -> Result<ObsLookup<'a>> {
    match coords {
        PastCoords::Absolute { anchor } => {
            let anchor = anchor.clone();
            Ok(Box::new(move |local: &VertexId| sample.obs(&anchor.join(local)).copied()))
        }
        PastCoords::Virtual { root_below_anchor, .. } => {
            let root_rel = root_below_anchor.clone();
            let spine = spine.expect("virtual coords imply a spine");
            let synth_seed = derive_spine_seed(sample.meta.seed, spine);
            let pi = crate::model::stationary_distribution(&theta.transition)?;
            let synth = crate::simulate::sample_states_and_obs(theta, k, &pi, synth_seed)?;
            Ok(Box::new(move |local: &VertexId| {
                if root_rel.is_ancestor_of(local) {
                    let abs = local.relative_to(&root_rel).expect("checked ancestor");
                    sample.obs(&abs).copied()
                } else {
                    synth.obs(local).copied()
                }
            }))
        }
    }
}

fn derive_spine_seed(seed: u64, spine: &Spine) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"spine");
    h.update(spine.bits());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// `h_{u,k,x}(θ)`: the log-likelihood contribution of `u` with a past of
/// `k` generations. `h_{u,0,x} = log g(x, y_u)`.
pub fn increment(
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    k: usize,
    x: usize,
    spine: Option<&Spine>,
) -> Result<Increment> {
    let (t_delta, t_star, _) = build_delta_pair(theta, sample, u, k, spine, &[])?;
    let log_delta = masked_log_density_tree(theta, &t_delta, x);
    let log_delta_star = if k == 0 { 0.0 } else { masked_log_density_tree(theta, &t_star, x) };
    Ok(Increment {
        u: u.clone(),
        k,
        x,
        value: log_delta - log_delta_star,
        log_delta,
        log_delta_star,
    })
}

/// Block increment `h_{T(u,m),k,x}`: the contribution of the block subtree
/// `T(u,m)` given the union of the preceding blocks, anchored `k(m+1)`
/// generations above `u`.
pub fn block_increment(
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    m: usize,
    k: usize,
    x: usize,
    spine: Option<&Spine>,
) -> Result<f64> {
    let d = block_delta(u, m, k, spine)?;
    let ds = block_past(u, m, k, spine)?;
    let lookup = past_lookup(theta, sample, &d.coords, k * (m + 1), spine)?;
    let d_local = localize(&d.set, &d.coords)?;
    let t1 = MaskedTree::build(theta, &d_local, &[], &*lookup)?;
    let v1 = masked_log_density_tree(theta, &t1, x);
    let v2 = if ds.set.is_empty() {
        0.0
    } else {
        let ds_local = localize(&ds.set, &ds.coords)?;
        let t2 = MaskedTree::build(theta, &ds_local, &[], &*lookup)?;
        masked_log_density_tree(theta, &t2, x)
    };
    Ok(v1 - v2)
}

fn normalized_from_log(scores: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(scores);
    scores.iter().map(|&v| (v - z).exp()).collect()
}

/// Exact conditional law of `X_v` given the masked observations and the
/// anchor state.
pub fn posterior_marginal(
    theta: &HmtTheta,
    sample: &Sample,
    v: &VertexId,
    mask: &ObservationMask,
) -> Result<Vec<f64>> {
    let tree = build_from_sample(theta, sample, mask, std::slice::from_ref(v))?;
    let local = v.relative_to(&mask.anchor)?;
    marginal_in_tree(theta, &tree, &local, mask.anchor_state)
}

pub(crate) fn marginal_in_tree(
    theta: &HmtTheta,
    tree: &MaskedTree,
    local: &VertexId,
    anchor_state: usize,
) -> Result<Vec<f64>> {
    let s = theta.num_states();
    let log_q = log_transition(theta);
    let (beta, msg) = tree.upward(&log_q);
    let alpha = tree.downward(&log_q, &msg, anchor_state);
    let i = tree.local_index(local)?;
    let joint: Vec<f64> = (0..s).map(|st| alpha[i * s + st] + beta[i * s + st]).collect();
    Ok(normalized_from_log(&joint))
}

/// Exact joint conditional law of `(X_v, X_w)`, computed by clamping the
/// pair and re-running the upward pass.
pub fn posterior_pair(
    theta: &HmtTheta,
    sample: &Sample,
    v: &VertexId,
    w: &VertexId,
    mask: &ObservationMask,
) -> Result<Vec<Vec<f64>>> {
    let s = theta.num_states();
    if v == w {
        let m = posterior_marginal(theta, sample, v, mask)?;
        let mut table = vec![vec![0.0; s]; s];
        for (i, &p) in m.iter().enumerate() {
            table[i][i] = p;
        }
        return Ok(table);
    }
    let mut tree = build_from_sample(theta, sample, mask, &[v.clone(), w.clone()])?;
    let (vl, wl) = (v.relative_to(&mask.anchor)?, w.relative_to(&mask.anchor)?);
    let mut logs = vec![NEG_INF; s * s];
    for a in 0..s {
        for b in 0..s {
            tree.clear_clamps();
            tree.clamp(&vl, a)?;
            tree.clamp(&wl, b)?;
            logs[a * s + b] = masked_log_density_tree(theta, &tree, mask.anchor_state);
        }
    }
    let flat = normalized_from_log(&logs);
    Ok((0..s).map(|a| flat[a * s..(a + 1) * s].to_vec()).collect())
}

/// Joint law of two parent-child pairs `((p(v),v),(p(w),w))` as an
/// `S² x S²` table indexed by `(x_{p(v)}, x_v)` and `(x_{p(w)}, x_w)`.
pub fn posterior_edge_pair(
    theta: &HmtTheta,
    sample: &Sample,
    v: &VertexId,
    w: &VertexId,
    mask: &ObservationMask,
) -> Result<Vec<Vec<f64>>> {
    let s = theta.num_states();
    let (pv, pw) = (v.parent()?, w.parent()?);
    let mut tree =
        build_from_sample(theta, sample, mask, &[v.clone(), w.clone(), pv.clone(), pw.clone()])?;
    let locals: Vec<VertexId> = [&pv, v, &pw, w]
        .iter()
        .map(|t| t.relative_to(&mask.anchor))
        .collect::<Result<_>>()?;
    let mut logs = vec![NEG_INF; s * s * s * s];
    for a in 0..s {
        for b in 0..s {
            for c in 0..s {
                for d in 0..s {
                    let states = [a, b, c, d];
                    // Overlapping vertices with conflicting states get
                    // probability zero.
                    let mut consistent = true;
                    let mut assign: HashMap<&VertexId, usize> = HashMap::new();
                    for (vertex, &st) in locals.iter().zip(states.iter()) {
                        if let Some(&prev) = assign.get(vertex) {
                            if prev != st {
                                consistent = false;
                                break;
                            }
                        } else {
                            assign.insert(vertex, st);
                        }
                    }
                    if !consistent {
                        continue;
                    }
                    tree.clear_clamps();
                    for (vertex, st) in assign {
                        tree.clamp(vertex, st)?;
                    }
                    logs[((a * s + b) * s + c) * s + d] =
                        masked_log_density_tree(theta, &tree, mask.anchor_state);
                }
            }
        }
    }
    let flat = normalized_from_log(&logs);
    Ok((0..s * s).map(|r| flat[r * s * s..(r + 1) * s * s].to_vec()).collect())
}

fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total-variation distance between the filtered laws of `X_u` under two
/// root states.
pub fn filter_tv_gap(
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    x: usize,
    x_alt: usize,
    mask_vertices: &[VertexId],
) -> Result<f64> {
    let m1 = ObservationMask::new(mask_vertices.to_vec(), VertexId::root(), x)?;
    let m2 = ObservationMask::new(mask_vertices.to_vec(), VertexId::root(), x_alt)?;
    let p = posterior_marginal(theta, sample, u, &m1)?;
    let q = posterior_marginal(theta, sample, u, &m2)?;
    Ok(tv_distance(&p, &q))
}

/// Total-variation distance between the laws of `X_v` given `Y_{Δ(u,k)}`
/// versus `Y_{Δ*(u,k)}`, both anchored at `X_{p^k(u)} = x`. For
/// `k > h(u)`, `v` is interpreted in anchor-local coordinates.
pub fn backward_tv_gap(
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    k: usize,
    v: &VertexId,
    x: usize,
    spine: Option<&Spine>,
) -> Result<f64> {
    let d = delta(u, k, spine)?;
    let v_local = match &d.coords {
        PastCoords::Absolute { anchor } => v.relative_to(anchor)?,
        PastCoords::Virtual { .. } => v.clone(),
    };
    let (t1, t2, _) =
        build_delta_pair(theta, sample, u, k, spine, std::slice::from_ref(&v_local))?;
    let p = marginal_in_tree(theta, &t1, &v_local, x)?;
    let q = marginal_in_tree(theta, &t2, &v_local, x)?;
    Ok(tv_distance(&p, &q))
}

/// Joint version of [`backward_tv_gap`] for two query vertices.
pub fn backward_tv_gap_pair(
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    k: usize,
    v: &VertexId,
    w: &VertexId,
    x: usize,
    spine: Option<&Spine>,
) -> Result<f64> {
    let s = theta.num_states();
    let d = delta(u, k, spine)?;
    let to_local = |t: &VertexId| -> Result<VertexId> {
        match &d.coords {
            PastCoords::Absolute { anchor } => t.relative_to(anchor),
            PastCoords::Virtual { .. } => Ok(t.clone()),
        }
    };
    let (vl, wl) = (to_local(v)?, to_local(w)?);
    let extras = [vl.clone(), wl.clone()];
    let (mut t1, mut t2, _) = build_delta_pair(theta, sample, u, k, spine, &extras)?;
    let joint = |tree: &mut MaskedTree| -> Result<Vec<f64>> {
        let mut logs = vec![NEG_INF; s * s];
        for a in 0..s {
            for b in 0..s {
                if vl == wl && a != b {
                    continue;
                }
                tree.clear_clamps();
                tree.clamp(&vl, a)?;
                tree.clamp(&wl, b)?;
                logs[a * s + b] = masked_log_density_tree(theta, tree, x);
            }
        }
        Ok(normalized_from_log(&logs))
    };
    let p = joint(&mut t1)?;
    let q = joint(&mut t2)?;
    Ok(tv_distance(&p, &q))
}

/// Joint filtered law of `(X_u, X_v)` given all observations and the root
/// state, then the TV gap between two root states (the two-vertex forward
/// coupling quantity).
pub fn forward_tv_gap_pair(
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    v: &VertexId,
    x: usize,
    x_alt: usize,
    mask_vertices: &[VertexId],
) -> Result<f64> {
    let m1 = ObservationMask::new(mask_vertices.to_vec(), VertexId::root(), x)?;
    let m2 = ObservationMask::new(mask_vertices.to_vec(), VertexId::root(), x_alt)?;
    let p = posterior_pair(theta, sample, u, v, &m1)?;
    let q = posterior_pair(theta, sample, u, v, &m2)?;
    let pf: Vec<f64> = p.into_iter().flatten().collect();
    let qf: Vec<f64> = q.into_iter().flatten().collect();
    Ok(tv_distance(&pf, &qf))
}

/// Full-tree smoothing tables conditioned on `X_∂ = x_root`: log-likelihood,
/// per-vertex marginals, and per-edge pairwise posteriors.
pub struct PosteriorTables {
    pub log_likelihood: f64,
    /// `marginals[rank][s] = P(X_v = s | Y, X_∂ = x)` indexed by BFS rank.
    pub marginals: Vec<Vec<f64>>,
    /// `edges[rank][sp][sc]` for every non-root vertex: the joint law of
    /// `(X_{p(v)}, X_v)`.
    pub edges: Vec<Vec<Vec<f64>>>,
}

pub fn posterior_tables(theta: &HmtTheta, sample: &Sample, x_root: usize) -> Result<PosteriorTables> {
    let mask = ObservationMask::full_tree(sample, x_root);
    let tree = build_from_sample(theta, sample, &mask, &[])?;
    posterior_tables_in(theta, &tree, x_root)
}

/// [`posterior_tables`] over a prebuilt (already theta-refreshed) engine.
pub fn posterior_tables_in(
    theta: &HmtTheta,
    tree: &MaskedTree,
    x_root: usize,
) -> Result<PosteriorTables> {
    let s = theta.num_states();
    let log_q = log_transition(theta);
    let (beta, msg) = tree.upward(&log_q);
    let alpha = tree.downward(&log_q, &msg, x_root);
    let ll = beta[x_root];

    let n = tree.nodes.len();
    let mut marginals = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    for i in 0..n {
        let joint: Vec<f64> = (0..s).map(|st| alpha[i * s + st] + beta[i * s + st]).collect();
        marginals.push(normalized_from_log(&joint));
        if let Some(p) = tree.nodes[i].parent {
            let mut pair = vec![NEG_INF; s * s];
            for sp in 0..s {
                let mut others = 0.0;
                for &c in &tree.nodes[p].children {
                    others += msg[c * s + sp];
                }
                others -= msg[i * s + sp];
                for sc in 0..s {
                    pair[sp * s + sc] = alpha[p * s + sp]
                        + tree.factor(p, sp)
                        + others
                        + log_q[sp][sc]
                        + beta[i * s + sc];
                }
            }
            let flat = normalized_from_log(&pair);
            edges.push((0..s).map(|a| flat[a * s..(a + 1) * s].to_vec()).collect());
        } else {
            edges.push(Vec::new());
        }
    }
    Ok(PosteriorTables { log_likelihood: ll, marginals, edges })
}

/// Conditional first (and optionally second) moments of the additive edge
/// functional `F = Σ_{v != anchor} f(x_{p(v)}, x_v, y_v)` given the masked
/// observations and the anchor state.
///
/// Returns `(E[F | ·], Var[F | ·])`, exact on the tree in one upward
/// recursion over per-branch moments.
pub fn additive_moments(
    theta: &HmtTheta,
    tree: &MaskedTree,
    anchor_state: usize,
    dim: usize,
    edge_fn: &mut dyn FnMut(usize, usize, &Obs, &mut [f64]),
    want_second: bool,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
    let s = theta.num_states();
    let log_q = log_transition(theta);
    let (beta, msg) = tree.upward(&log_q);
    let n = tree.nodes.len();

    // m[i][state] = E[F_subtree(i) | X_i = state, obs], laid out flat.
    let mut m = vec![0.0; n * s * dim];
    let mut q2 = if want_second { vec![0.0; n * s * dim * dim] } else { Vec::new() };
    let mut f_buf = vec![0.0; dim];

    for i in (0..n).rev() {
        let children = tree.nodes[i].children.clone();
        for state in 0..s {
            let mi = (i * s + state) * dim;
            let mut branch_first: Vec<Vec<f64>> = Vec::with_capacity(children.len());
            let mut branch_second: Vec<Vec<f64>> = Vec::with_capacity(children.len());
            for &c in &children {
                // w(sc) = P(X_c = sc | X_i = state, obs below c)
                let mut w = vec![0.0; s];
                for sc in 0..s {
                    w[sc] = (log_q[state][sc] + beta[c * s + sc] - msg[c * s + state]).exp();
                }
                let y = tree.nodes[c].obs;
                let mut first = vec![0.0; dim];
                let mut second = if want_second { vec![0.0; dim * dim] } else { Vec::new() };
                for sc in 0..s {
                    if w[sc] == 0.0 {
                        continue;
                    }
                    f_buf.iter_mut().for_each(|v| *v = 0.0);
                    if let Some(y) = y.as_ref() {
                        edge_fn(state, sc, y, &mut f_buf);
                    }
                    let mc = (c * s + sc) * dim;
                    for d in 0..dim {
                        first[d] += w[sc] * (f_buf[d] + m[mc + d]);
                    }
                    if want_second {
                        let qc = (c * s + sc) * dim * dim;
                        for a in 0..dim {
                            let fa = f_buf[a] + m[mc + a];
                            for b in 0..dim {
                                let fb = f_buf[b] + m[mc + b];
                                // E[(f+S_c)(f+S_c)ᵀ | X_c = sc] =
                                //   (f+m)(f+m)ᵀ + (q_c - m m ᵀ)
                                second[a * dim + b] += w[sc]
                                    * (fa * fb + q2[qc + a * dim + b]
                                        - m[mc + a] * m[mc + b]);
                            }
                        }
                    }
                }
                branch_first.push(first);
                branch_second.push(second);
            }
            for first in &branch_first {
                for d in 0..dim {
                    m[mi + d] += first[d];
                }
            }
            if want_second {
                let qi = (i * s + state) * dim * dim;
                // Σ_c M2_c + Σ_{c≠c'} E_c E_{c'}ᵀ, with independent branches.
                let mut sum_first = vec![0.0; dim];
                for first in &branch_first {
                    for d in 0..dim {
                        sum_first[d] += first[d];
                    }
                }
                for a in 0..dim {
                    for b in 0..dim {
                        let mut v = sum_first[a] * sum_first[b];
                        for (first, second) in branch_first.iter().zip(branch_second.iter()) {
                            v += second[a * dim + b] - first[a] * first[b];
                        }
                        q2[qi + a * dim + b] = v;
                    }
                }
            }
        }
    }

    let first = m[(anchor_state) * dim..(anchor_state + 1) * dim].to_vec();
    let second = if want_second {
        let qi = anchor_state * dim * dim;
        let mut var = vec![vec![0.0; dim]; dim];
        for a in 0..dim {
            for b in 0..dim {
                var[a][b] = q2[qi + a * dim + b] - first[a] * first[b];
            }
        }
        Some(var)
    } else {
        None
    };
    Ok((first, second))
}

/// Convenience: conditional moments over a mask taken from a sample.
pub fn masked_additive_moments(
    theta: &HmtTheta,
    sample: &Sample,
    mask: &ObservationMask,
    dim: usize,
    edge_fn: &mut dyn FnMut(usize, usize, &Obs, &mut [f64]),
    want_second: bool,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
    let tree = build_from_sample(theta, sample, mask, &[])?;
    additive_moments(theta, &tree, mask.anchor_state, dim, edge_fn, want_second)
}

/// Conditional moments over the `Δ(u,k)` / `Δ*(u,k)` pair; returns the
/// difference of the first moments and optionally of the second-moment
/// blocks (used for score increments and the Λ/Γ terms).
pub struct PastMoments {
    pub first_delta: Vec<f64>,
    pub first_star: Vec<f64>,
    pub var_delta: Option<Vec<Vec<f64>>>,
    pub var_star: Option<Vec<Vec<f64>>>,
}

pub fn past_moments(
    theta: &HmtTheta,
    sample: &Sample,
    u: &VertexId,
    k: usize,
    x: usize,
    spine: Option<&Spine>,
    dim: usize,
    edge_fn: &mut dyn FnMut(usize, usize, &Obs, &mut [f64]),
    want_second: bool,
) -> Result<PastMoments> {
    let (t_delta, t_star, _) = build_delta_pair(theta, sample, u, k, spine, &[])?;
    let (f1, v1) = additive_moments(theta, &t_delta, x, dim, edge_fn, want_second)?;
    let (f2, v2) = if k == 0 {
        (vec![0.0; dim], want_second.then(|| vec![vec![0.0; dim]; dim]))
    } else {
        additive_moments(theta, &t_star, x, dim, edge_fn, want_second)?
    };
    Ok(PastMoments { first_delta: f1, first_star: f2, var_delta: v1, var_star: v2 })
}
