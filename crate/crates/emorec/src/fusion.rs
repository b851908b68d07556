//! Uncertainty-gated late fusion. Two single-hidden-layer classifiers read
//! the concatenated per-label means and the concatenated per-label standard
//! deviations respectively; their probability outputs are blended by a
//! per-sample scalar gate. During training the gate is the mean absolute
//! error between the info classifier's probabilities and the ground-truth
//! labels; at inference, where labels are unavailable, it is the mean binary
//! entropy of those probabilities normalized to [0, 1].

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::config::{ClsCfg, FusionCfg};
use crate::emotion_space::PROB_EPS;
use crate::error::{EmorecError, Result};
use crate::optim;
use rand_chacha::ChaCha8Rng;

pub fn init_fusion_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    q: usize,
    d_h: usize,
    hidden: usize,
) {
    let in_dim = 3 * q * (d_h / 2);
    for branch in ["mu", "sigma"] {
        store.insert(&format!("clsf.{branch}.w1"), optim::xavier(rng, in_dim, hidden));
        store.insert(&format!("clsf.{branch}.b1"), optim::zeros(&[hidden]));
        store.insert(&format!("clsf.{branch}.w2"), optim::xavier(rng, hidden, q));
        store.insert(&format!("clsf.{branch}.b2"), optim::zeros(&[q]));
    }
}

/// One fusion branch: the three `[q x d_h/2]` blocks (means or standard
/// deviations across modalities) are concatenated, flattened, and classified.
/// Returns `[1 x q]` probabilities.
pub fn branch_probs(
    g: &mut Graph,
    store: &ParamStore,
    branch: &str,
    blocks: [NodeId; 3],
) -> NodeId {
    let joined = g.concat_cols(&blocks);
    let shape = g.value(joined).shape().to_vec();
    let flat = g.reshape(joined, &[1, shape[0] * shape[1]]);
    let w1 = g.param(store, &format!("clsf.{branch}.w1"));
    let b1 = g.param(store, &format!("clsf.{branch}.b1"));
    let w2 = g.param(store, &format!("clsf.{branch}.w2"));
    let b2 = g.param(store, &format!("clsf.{branch}.b2"));
    let h = g.linear(flat, w1, b1);
    let act = g.gelu(h);
    let logits = g.linear(act, w2, b2);
    g.sigmoid(logits)
}

/// Training-time gate: mean absolute error between predicted probabilities
/// and binary labels. Pure version; errors on non-binary labels.
pub fn uncertainty_score(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(EmorecError::Shape(format!(
            "uncertainty score: {} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(EmorecError::Validation("labels must be 0 or 1".into()));
    }
    let q = probs.len() as f64;
    Ok(probs.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / q)
}

/// Same gate inside the graph: `mean(|probs - labels|)`, scalar node.
pub fn uncertainty_node(g: &mut Graph, probs: NodeId, labels: &[f64]) -> NodeId {
    let y = ndarray::Array2::from_shape_vec((1, labels.len()), labels.to_vec())
        .unwrap()
        .into_dyn();
    let neg = y.mapv(|v| -v);
    let diff = g.add_const_arr(probs, neg);
    let a = g.abs(diff);
    g.mean(a)
}

/// Inference-time gate: mean binary entropy of the probabilities, divided by
/// ln 2 so the maximum (all probabilities at 0.5) is exactly 1.
pub fn inference_uncertainty(probs: &[f64]) -> f64 {
    let q = probs.len() as f64;
    probs
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) / std::f64::consts::LN_2
        })
        .sum::<f64>()
        / q
}

/// Blend the two branch outputs with the scalar gate: `d * mu_branch +
/// (1 - d) * sigma_branch`, or the reverse when `swap_gate` is set. The drop
/// flags bypass the gate entirely and return the surviving branch.
pub fn fuse(
    g: &mut Graph,
    mu_probs: NodeId,
    sigma_probs: NodeId,
    d: NodeId,
    fusion: &FusionCfg,
    cls: &ClsCfg,
) -> NodeId {
    if cls.drop_mu {
        return sigma_probs;
    }
    if cls.drop_sigma {
        return mu_probs;
    }
    let (first, second) = if fusion.swap_gate {
        (sigma_probs, mu_probs)
    } else {
        (mu_probs, sigma_probs)
    };
    let dm = g.mul_scalar(first, d);
    let rest = g.one_minus(d);
    let ds = g.mul_scalar(second, rest);
    g.add(dm, ds)
}

/// Mean binary cross-entropy from probabilities inside the graph, clamped to
/// [PROB_EPS, 1 - PROB_EPS]. Scalar node.
pub fn bce_probs_mean(g: &mut Graph, probs: NodeId, targets: &[f64]) -> NodeId {
    let n = targets.len();
    let y = ndarray::Array2::from_shape_vec((1, n), targets.to_vec())
        .unwrap()
        .into_dyn();
    let not_y = y.mapv(|v| 1.0 - v);
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = g.ln(p);
    let one_m = g.one_minus(p);
    let ln_1m = g.ln(one_m);
    let t1 = g.mul_const_arr(ln_p, y);
    let t2 = g.mul_const_arr(ln_1m, not_y);
    let s = g.add(t1, t2);
    let total = g.mean(s);
    g.scale(total, -1.0)
}
