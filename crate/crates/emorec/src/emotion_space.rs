//! Emotion-space modeling: trainable label embeddings attend over encoded
//! frames to pool one feature vector per label and modality, and an info
//! classifier predicts label probabilities from the pooled features of all
//! three modalities.
//!
//! Attention logits are plain dot products between projected label embeddings
//! and projected frames; each label's weights are a softmax over frames. With
//! the label-embedding path disabled, logits come from a per-modality linear
//! head on the projected frames instead (the embeddings go unused, which the
//! ablation tests assert via zero gradients).

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::config::EmotionCfg;
use crate::optim;
use rand_chacha::ChaCha8Rng;

fn modality_key(m: usize) -> &'static str {
    ["v", "a", "t"][m]
}

pub fn init_emotion_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &EmotionCfg,
    q: usize,
    enc_width: usize,
) {
    store.insert("esm.labels", optim::normal(rng, &[q, cfg.label_dim], 0.02));
    store.insert(
        "esm.label_proj.w",
        optim::xavier(rng, cfg.label_dim, cfg.proj_dim),
    );
    store.insert("esm.label_proj.b", optim::zeros(&[cfg.proj_dim]));
    for m in 0..3 {
        let k = modality_key(m);
        store.insert(
            &format!("esm.frame_proj.{k}.w"),
            optim::xavier(rng, enc_width, cfg.proj_dim),
        );
        store.insert(&format!("esm.frame_proj.{k}.b"), optim::zeros(&[cfg.proj_dim]));
        store.insert(
            &format!("esm.alt_attn.{k}.w"),
            optim::xavier(rng, cfg.proj_dim, q),
        );
        store.insert(&format!("esm.alt_attn.{k}.b"), optim::zeros(&[q]));
        store.insert(
            &format!("esm.out.{k}.w"),
            optim::xavier(rng, cfg.proj_dim, cfg.d_h),
        );
        store.insert(&format!("esm.out.{k}.b"), optim::zeros(&[cfg.d_h]));
    }
    let fused = 3 * q * cfg.d_h;
    store.insert("info.w1", optim::xavier(rng, fused, cfg.info_hidden));
    store.insert("info.b1", optim::zeros(&[cfg.info_hidden]));
    store.insert("info.w2", optim::xavier(rng, cfg.info_hidden, q));
    store.insert("info.b2", optim::zeros(&[q]));
}

pub struct Attended {
    /// Row-stochastic attention over valid frames, `[q x s]`.
    pub attn: NodeId,
    /// Pooled per-label features, `[q x d_h]`.
    pub z: NodeId,
}

/// Pool encoded frames (`[s x enc_width]`) into per-label features for one
/// modality.
pub fn attend(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EmotionCfg,
    modality: usize,
    frames: NodeId,
) -> Attended {
    let k = modality_key(modality);
    let wf = g.param(store, &format!("esm.frame_proj.{k}.w"));
    let bf = g.param(store, &format!("esm.frame_proj.{k}.b"));
    let projected = g.linear(frames, wf, bf); // [s x p]

    let logits = if cfg.esm_enabled {
        let labels = g.param(store, "esm.labels");
        let wl = g.param(store, "esm.label_proj.w");
        let bl = g.param(store, "esm.label_proj.b");
        let queries = g.linear(labels, wl, bl); // [q x p]
        let pt = g.transpose(projected);
        g.matmul(queries, pt) // [q x s]
    } else {
        let wa = g.param(store, &format!("esm.alt_attn.{k}.w"));
        let ba = g.param(store, &format!("esm.alt_attn.{k}.b"));
        let frame_logits = g.linear(projected, wa, ba); // [s x q]
        g.transpose(frame_logits)
    };
    let attn = g.softmax_rows(logits);
    let pooled = g.matmul(attn, projected); // [q x p]
    let wz = g.param(store, &format!("esm.out.{k}.w"));
    let bz = g.param(store, &format!("esm.out.{k}.b"));
    let z = g.linear(pooled, wz, bz);
    Attended { attn, z }
}

/// Info-classifier logits from the three pooled feature blocks: the
/// `[q x d_h]` blocks are concatenated and flattened so every label's
/// prediction can draw on every pooled feature, then passed through one
/// hidden layer. Returns `[1 x q]`.
pub fn info_logits(g: &mut Graph, store: &ParamStore, zs: [NodeId; 3]) -> NodeId {
    let fused = g.concat_cols(&zs); // [q x 3 d_h]
    let shape = g.value(fused).shape().to_vec();
    let flat = g.reshape(fused, &[1, shape[0] * shape[1]]);
    let w1 = g.param(store, "info.w1");
    let b1 = g.param(store, "info.b1");
    let w2 = g.param(store, "info.w2");
    let b2 = g.param(store, "info.b2");
    let h = g.linear(flat, w1, b1);
    let act = g.gelu(h);
    g.linear(act, w2, b2)
}

/// Numerically stable mean binary cross-entropy from logits:
/// mean_j [ softplus(x_j) - x_j * y_j ]. Returns a scalar node.
pub fn bce_with_logits_mean(g: &mut Graph, logits: NodeId, targets: &[f64]) -> NodeId {
    let y = ndarray::Array2::from_shape_vec((1, targets.len()), targets.to_vec())
        .unwrap()
        .into_dyn();
    let sp = g.softplus(logits);
    let xy = g.mul_const_arr(logits, y);
    let diff = g.sub(sp, xy);
    g.mean(diff)
}

pub const PROB_EPS: f64 = 1e-7;

/// Mean binary cross-entropy from probabilities, clamped to
/// [PROB_EPS, 1 - PROB_EPS]. Pure reference used by tests and reports.
pub fn bce_mean_probs(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len());
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}
