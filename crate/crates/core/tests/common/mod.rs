//! Brute-force oracles: exhaustive enumeration over hidden-state
//! configurations, kept deliberately independent of the message-passing
//! implementation they check.

use hmt_core::model::HmtTheta;
use hmt_core::simulate::Sample;
use hmt_core::tree::VertexId;

/// Enumerate every hidden configuration on the ancestor closure of
/// `mask ∪ clamps` (relative to `anchor`) and sum the exact probability
/// `Π q(x_parent, x_v) · Π_{v in mask} g(x_v, y_v)` with the anchor state
/// fixed. Returns the log of the total.
pub fn brute_log_density(
    theta: &HmtTheta,
    sample: &Sample,
    mask: &[VertexId],
    anchor: &VertexId,
    anchor_state: usize,
    clamps: &[(VertexId, usize)],
) -> f64 {
    let s = theta.num_states();
    // ancestor closure, relative to anchor
    let mut verts: Vec<VertexId> = Vec::new();
    for v in mask.iter().chain(clamps.iter().map(|(v, _)| v)) {
        let mut cur = v.clone();
        loop {
            verts.push(cur.clone());
            if cur == *anchor {
                break;
            }
            cur = cur.parent().unwrap();
        }
    }
    verts.push(anchor.clone());
    verts.sort();
    verts.dedup();
    let index: std::collections::HashMap<&VertexId, usize> =
        verts.iter().enumerate().map(|(i, v)| (v, i)).collect();
    let observed: Vec<bool> = verts.iter().map(|v| mask.contains(v)).collect();
    let clamp: Vec<Option<usize>> = verts
        .iter()
        .map(|v| clamps.iter().find(|(c, _)| c == v).map(|(_, st)| *st))
        .collect();
    let parent_of: Vec<Option<usize>> = verts
        .iter()
        .map(|v| if v == anchor { None } else { Some(index[&v.parent().unwrap()]) })
        .collect();
    let n = verts.len();

    let mut states = vec![0usize; n];
    states[index[anchor]] = anchor_state;
    if let Some(cl) = clamp[index[anchor]] {
        if anchor_state != cl {
            return f64::NEG_INFINITY;
        }
    }
    // Clamped vertices keep a fixed state; enumerate the rest exhaustively.
    let mut free: Vec<usize> = Vec::new();
    for i in 0..n {
        if verts[i] == *anchor {
            continue;
        }
        match clamp[i] {
            Some(cl) => states[i] = cl,
            None => free.push(i),
        }
    }

    let mut total = 0.0f64;
    let combos = s.pow(free.len() as u32);
    for code in 0..combos {
        let mut c = code;
        for &i in &free {
            states[i] = c % s;
            c /= s;
        }
        let mut p = 1.0f64;
        for i in 0..n {
            if let Some(pi) = parent_of[i] {
                p *= theta.transition[states[pi]][states[i]];
            }
            if observed[i] {
                let y = sample.obs(&verts[i]).expect("mask vertex in sample");
                p *= theta.log_emission(states[i], y).exp();
            }
        }
        total += p;
    }
    total.ln()
}

/// Exact conditional marginal of `X_v` by enumeration.
pub fn brute_marginal(
    theta: &HmtTheta,
    sample: &Sample,
    v: &VertexId,
    mask: &[VertexId],
    anchor: &VertexId,
    anchor_state: usize,
) -> Vec<f64> {
    let s = theta.num_states();
    let logs: Vec<f64> = (0..s)
        .map(|st| {
            brute_log_density(theta, sample, mask, anchor, anchor_state, &[(v.clone(), st)])
        })
        .collect();
    normalize_logs(&logs)
}

/// Exact conditional pair law of `(X_v, X_w)` by enumeration.
pub fn brute_pair(
    theta: &HmtTheta,
    sample: &Sample,
    v: &VertexId,
    w: &VertexId,
    mask: &[VertexId],
    anchor: &VertexId,
    anchor_state: usize,
) -> Vec<Vec<f64>> {
    let s = theta.num_states();
    let mut logs = vec![f64::NEG_INFINITY; s * s];
    for a in 0..s {
        for b in 0..s {
            if v == w && a != b {
                continue;
            }
            logs[a * s + b] = brute_log_density(
                theta,
                sample,
                mask,
                anchor,
                anchor_state,
                &[(v.clone(), a), (w.clone(), b)],
            );
        }
    }
    let flat = normalize_logs(&logs);
    (0..s).map(|a| flat[a * s..(a + 1) * s].to_vec()).collect()
}

fn normalize_logs(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}
