//! Forward sampling of HMT processes on `T_n` and the coupled-pair
//! construction for the non-stationary analysis.
//!
//! Reproducibility contract: every vertex draws from its own RNG stream
//! keyed by `(seed, path, role)`, so samples at different depths nest, and
//! generation order (sequential or parallel) cannot change the output.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HmtError, Result};
use crate::model::{stationary_distribution, EmissionParams, HmtTheta, ModelSpec, Obs};
use crate::tree::{tree_size, tree_up_to, VertexId};

/// Root law for the hidden chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RootLaw {
    Stationary,
    Dirac(usize),
    Custom(Vec<f64>),
}

impl RootLaw {
    pub fn describe(&self) -> String {
        match self {
            RootLaw::Stationary => "stationary".into(),
            RootLaw::Dirac(x) => format!("dirac:{x}"),
            RootLaw::Custom(_) => "custom".into(),
        }
    }

    pub fn distribution(&self, theta: &HmtTheta) -> Result<Vec<f64>> {
        let s = theta.num_states();
        match self {
            RootLaw::Stationary => stationary_distribution(&theta.transition),
            RootLaw::Dirac(x) => {
                if *x >= s {
                    return Err(HmtError::InvalidRootLaw(format!("dirac state {x} out of range")));
                }
                let mut v = vec![0.0; s];
                v[*x] = 1.0;
                Ok(v)
            }
            RootLaw::Custom(zeta) => {
                if zeta.len() != s
                    || zeta.iter().any(|&p| p < 0.0)
                    || (zeta.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return Err(HmtError::InvalidRootLaw(
                        "custom root law is not a probability vector".into(),
                    ));
                }
                Ok(zeta.clone())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Record {
    pub path: VertexId,
    pub y: Obs,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub depth: usize,
    pub seed: u64,
    pub theta_digest: String,
    pub root_law: String,
    pub states: usize,
}

/// One realized tree of observations (and hidden states) down to depth `n`,
/// records in breadth-first order.
#[derive(Clone, Debug)]
pub struct Sample {
    pub depth: usize,
    pub records: Vec<Record>,
    pub meta: Provenance,
}

impl Sample {
    pub fn obs(&self, v: &VertexId) -> Option<&Obs> {
        if v.height() > self.depth {
            return None;
        }
        Some(&self.records[v.bfs_rank()].y)
    }

    pub fn state(&self, v: &VertexId) -> Option<usize> {
        if v.height() > self.depth {
            return None;
        }
        self.records[v.bfs_rank()].x
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn observations(&self) -> Vec<Obs> {
        self.records.iter().map(|r| r.y).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            meta: &'a Provenance,
        }
        serde_json::to_writer(&mut w, &Header { meta: &self.meta })?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Sample> {
        #[derive(Deserialize)]
        struct Header {
            meta: Provenance,
        }
        let mut lines = r.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(HmtError::InvalidInput("empty sample file".into())),
        };
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<Record>(&line)?);
        }
        let expected = tree_size(header.meta.depth);
        if records.len() != expected {
            return Err(HmtError::InvalidInput(format!(
                "sample has {} records, expected |T_{}| = {expected}",
                records.len(),
                header.meta.depth
            )));
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        for (rank, rec) in records.iter().enumerate() {
            if rec.path.bfs_rank() != rank {
                return Err(HmtError::InvalidInput(format!(
                    "sample paths do not form the full tree (missing rank {rank})"
                )));
            }
        }
        Ok(Sample { depth: header.meta.depth, records, meta: header.meta })
    }
}

/// Role discriminators for the per-vertex RNG streams.
mod stream {
    pub const STATE: u8 = 1;
    pub const EMIT: u8 = 2;
    pub const COUPLE: u8 = 3;
    pub const STATE_ALT: u8 = 4;
    pub const EMIT_ALT: u8 = 5;
}

/// Deterministic per-vertex RNG: `ChaCha12` seeded by
/// `SHA-256(seed || role || path)`.
pub fn vertex_rng(seed: u64, path: &VertexId, role: u8) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([role]);
    h.update((path.height() as u64).to_le_bytes());
    h.update(path.bits());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

fn draw_discrete<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn draw_emission<R: Rng>(theta: &HmtTheta, state: usize, rng: &mut R) -> Obs {
    match &theta.emission {
        EmissionParams::Gaussian { mu, sigma } => {
            let n = rand_distr::Normal::new(mu[state], sigma[state]).expect("valid sigma");
            Obs::Real(rand_distr::Distribution::sample(&n, rng))
        }
        EmissionParams::Categorical { rows } => Obs::Int(draw_discrete(&rows[state], rng) as i64),
    }
}

/// Draw one HMT realization on `T_n`.
pub fn sample(
    spec: &ModelSpec,
    theta: &HmtTheta,
    depth: usize,
    root_law: &RootLaw,
    seed: u64,
) -> Result<Sample> {
    theta.validate(spec)?;
    let root_dist = root_law.distribution(theta)?;
    let vertices = tree_up_to(depth);
    let mut states: Vec<usize> = Vec::with_capacity(vertices.len());
    let mut records: Vec<Record> = Vec::with_capacity(vertices.len());
    for v in vertices.iter() {
        let mut rng = vertex_rng(seed, v, stream::STATE);
        let x = if v.is_root() {
            draw_discrete(&root_dist, &mut rng)
        } else {
            let parent_state = states[v.parent()?.bfs_rank()];
            draw_discrete(&theta.transition[parent_state], &mut rng)
        };
        states.push(x);
        let mut erng = vertex_rng(seed, v, stream::EMIT);
        let y = draw_emission(theta, x, &mut erng);
        records.push(Record { path: v.clone(), y, x: Some(x) });
    }
    Ok(Sample {
        depth,
        records,
        meta: Provenance {
            depth,
            seed,
            theta_digest: theta.digest(),
            root_law: root_law.describe(),
            states: spec.states,
        },
    })
}

/// Sampler from an explicit root distribution without provenance checks,
/// used to synthesize virtual pasts for spine-extended queries.
pub(crate) fn sample_states_and_obs(
    theta: &HmtTheta,
    depth: usize,
    root_dist: &[f64],
    seed: u64,
) -> Result<Sample> {
    let vertices = tree_up_to(depth);
    let mut states: Vec<usize> = Vec::with_capacity(vertices.len());
    let mut records: Vec<Record> = Vec::with_capacity(vertices.len());
    for v in vertices.iter() {
        let mut rng = vertex_rng(seed, v, stream::STATE);
        let x = if v.is_root() {
            draw_discrete(root_dist, &mut rng)
        } else {
            let parent_state = states[v.parent()?.bfs_rank()];
            draw_discrete(&theta.transition[parent_state], &mut rng)
        };
        states.push(x);
        let mut erng = vertex_rng(seed, v, stream::EMIT);
        let y = draw_emission(theta, x, &mut erng);
        records.push(Record { path: v.clone(), y, x: Some(x) });
    }
    Ok(Sample {
        depth,
        records,
        meta: Provenance {
            depth,
            seed,
            theta_digest: String::new(),
            root_law: "synthetic".into(),
            states: theta.num_states(),
        },
    })
}

/// Root coupling flavor for [`sample_coupled`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootCoupling {
    /// Maximal coupling of `(π, ζ)`: exact match with probability
    /// `1 - TV(π, ζ)`.
    Maximal,
    /// Independent draws from `π` and `ζ`.
    Independent,
}

/// A jointly constructed pair of HMT realizations: one stationary, one with
/// root law `ζ`, coupled so that equality propagates down the tree.
#[derive(Clone, Debug)]
pub struct CoupledPair {
    pub stationary: Sample,
    pub nonstationary: Sample,
    /// First generation at which the two samples agree everywhere, when it
    /// occurs within the simulated depth.
    pub coupling_time: Option<usize>,
    pub truncated: bool,
    /// Number of special vertices (`x_u != x'_u`) per generation.
    pub special_per_generation: Vec<usize>,
    /// Histogram of special-vertex offspring counts (parents strictly above
    /// the last generation).
    pub offspring_counts: [u64; 3],
}

/// Maximal coupling of two distributions: returns (x, x', matched).
fn maximal_couple<R: Rng>(p: &[f64], q: &[f64], rng: &mut R) -> (usize, usize, bool) {
    let overlap: f64 = p.iter().zip(q.iter()).map(|(a, b)| a.min(*b)).sum();
    let u: f64 = rng.random();
    if u < overlap {
        let common: Vec<f64> = p.iter().zip(q.iter()).map(|(a, b)| a.min(*b) / overlap).collect();
        let x = draw_discrete(&common, rng);
        (x, x, true)
    } else {
        let res_p: Vec<f64> =
            p.iter().zip(q.iter()).map(|(a, b)| (a - b).max(0.0) / (1.0 - overlap)).collect();
        let res_q: Vec<f64> =
            q.iter().zip(p.iter()).map(|(a, b)| (a - b).max(0.0) / (1.0 - overlap)).collect();
        let x = draw_discrete(&res_p, rng);
        let x2 = draw_discrete(&res_q, rng);
        (x, x2, false)
    }
}

/// Build a coupled pair on `T_n`.
///
/// Children of a value-matched parent are drawn once and shared; children of
/// a mismatched parent go through the maximal coupling of the two transition
/// rows, whose residuals have disjoint supports, so the match probability
/// conditional on parent mismatch is `1 - TV(Q(x,·), Q(x',·)) >= σ⁻`.
pub fn sample_coupled(
    spec: &ModelSpec,
    theta: &HmtTheta,
    zeta: &[f64],
    depth: usize,
    seed: u64,
    root_coupling: RootCoupling,
) -> Result<CoupledPair> {
    theta.validate(spec)?;
    let pi = stationary_distribution(&theta.transition)?;
    RootLaw::Custom(zeta.to_vec()).distribution(theta)?;

    let vertices = tree_up_to(depth);
    let mut xs: Vec<usize> = Vec::with_capacity(vertices.len());
    let mut xs2: Vec<usize> = Vec::with_capacity(vertices.len());
    let mut rec_a: Vec<Record> = Vec::with_capacity(vertices.len());
    let mut rec_b: Vec<Record> = Vec::with_capacity(vertices.len());
    let mut special_per_generation = vec![0usize; depth + 1];
    let mut offspring = [0u64; 3];
    let mut special_children: Vec<u8> = vec![0; vertices.len()];

    for v in vertices.iter() {
        let mut rng = vertex_rng(seed, v, stream::COUPLE);
        let (x, x2) = if v.is_root() {
            match root_coupling {
                RootCoupling::Maximal => {
                    let (a, b, _) = maximal_couple(&pi, zeta, &mut rng);
                    (a, b)
                }
                RootCoupling::Independent => {
                    let a = draw_discrete(&pi, &mut rng);
                    let mut rng2 = vertex_rng(seed, v, stream::STATE_ALT);
                    let b = draw_discrete(zeta, &mut rng2);
                    (a, b)
                }
            }
        } else {
            let parent = v.parent()?;
            let (px, px2) = (xs[parent.bfs_rank()], xs2[parent.bfs_rank()]);
            if px == px2 {
                let x = draw_discrete(&theta.transition[px], &mut rng);
                (x, x)
            } else {
                let (a, b, _) =
                    maximal_couple(&theta.transition[px], &theta.transition[px2], &mut rng);
                if a != b {
                    special_children[parent.bfs_rank()] += 1;
                }
                (a, b)
            }
        };
        if x != x2 {
            special_per_generation[v.height()] += 1;
        }
        xs.push(x);
        xs2.push(x2);

        let mut erng = vertex_rng(seed, v, stream::EMIT);
        let y = draw_emission(theta, x, &mut erng);
        let y2 = if x == x2 {
            y
        } else {
            let mut erng2 = vertex_rng(seed, v, stream::EMIT_ALT);
            draw_emission(theta, x2, &mut erng2)
        };
        rec_a.push(Record { path: v.clone(), y, x: Some(x) });
        rec_b.push(Record { path: v.clone(), y: y2, x: Some(x2) });
    }

    for v in vertices.iter() {
        if v.height() < depth && xs[v.bfs_rank()] != xs2[v.bfs_rank()] {
            offspring[special_children[v.bfs_rank()] as usize] += 1;
        }
    }

    let coupling_time = special_per_generation
        .iter()
        .position(|&c| c == 0)
        .filter(|&g| special_per_generation[g..].iter().all(|&c| c == 0));
    let truncated = coupling_time.is_none();

    let make = |records: Vec<Record>, law: String| Sample {
        depth,
        meta: Provenance {
            depth,
            seed,
            theta_digest: theta.digest(),
            root_law: law,
            states: spec.states,
        },
        records,
    };
    Ok(CoupledPair {
        stationary: make(rec_a, "stationary".into()),
        nonstationary: make(rec_b, "custom".into()),
        coupling_time,
        truncated,
        special_per_generation,
        offspring_counts: offspring,
    })
}

/// Summary of one coupled run tracked through its special vertices only;
/// equivalent to [`sample_coupled`] for the coupling statistics but usable
/// at depths where the full tree would not fit in memory.
#[derive(Clone, Debug)]
pub struct CouplingRun {
    pub root_special: bool,
    pub coupling_time: Option<usize>,
    pub truncated: bool,
    pub offspring_counts: [u64; 3],
    pub special_per_generation: Vec<usize>,
}

pub fn coupling_run(
    theta: &HmtTheta,
    zeta: &[f64],
    depth_cap: usize,
    seed: u64,
    root_coupling: RootCoupling,
) -> Result<CouplingRun> {
    let pi = stationary_distribution(&theta.transition)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let root_pair = match root_coupling {
        RootCoupling::Maximal => {
            let (a, b, _) = maximal_couple(&pi, zeta, &mut rng);
            (a, b)
        }
        RootCoupling::Independent => {
            let a = draw_discrete(&pi, &mut rng);
            let b = draw_discrete(zeta, &mut rng);
            (a, b)
        }
    };
    let mut frontier: Vec<(usize, usize)> =
        if root_pair.0 != root_pair.1 { vec![root_pair] } else { Vec::new() };
    let mut offspring = [0u64; 3];
    let mut special_per_generation = vec![frontier.len()];
    let mut generation = 0usize;
    while !frontier.is_empty() && generation < depth_cap {
        let mut next = Vec::new();
        for &(x, x2) in &frontier {
            let mut count = 0usize;
            for _ in 0..2 {
                let (a, b, _) =
                    maximal_couple(&theta.transition[x], &theta.transition[x2], &mut rng);
                if a != b {
                    count += 1;
                    next.push((a, b));
                }
            }
            offspring[count] += 1;
        }
        frontier = next;
        generation += 1;
        special_per_generation.push(frontier.len());
    }
    let (coupling_time, truncated) = if frontier.is_empty() {
        (Some(special_per_generation.iter().position(|&c| c == 0).unwrap()), false)
    } else {
        (None, true)
    };
    Ok(CouplingRun {
        root_special: root_pair.0 != root_pair.1,
        coupling_time,
        truncated,
        offspring_counts: offspring,
        special_per_generation,
    })
}
