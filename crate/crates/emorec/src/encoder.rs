//! Per-modality transformer encoders.
//!
//! Each modality owns an independent stack: input projection to the shared
//! width, learned absolute positional embeddings, then pre-norm blocks
//! (LayerNorm -> multi-head self-attention -> residual, LayerNorm -> GELU MLP
//! -> residual) and a final LayerNorm. Encoders only ever see the valid
//! frames of a sample, so padding can never leak into attention.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::config::EncoderCfg;
use crate::data::MODALITY_NAMES;
use crate::optim;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;

fn modality_key(m: usize) -> &'static str {
    match m {
        0 => "v",
        1 => "a",
        2 => "t",
        _ => panic!("modality index {m} out of range"),
    }
}

pub fn init_encoder_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &EncoderCfg,
    dims: [usize; 3],
    max_seq_len: usize,
) {
    let w = cfg.width;
    for m in 0..3 {
        let k = modality_key(m);
        store.insert(&format!("enc.{k}.in.w"), optim::xavier(rng, dims[m], w));
        store.insert(&format!("enc.{k}.in.b"), optim::zeros(&[w]));
        store.insert(
            &format!("enc.{k}.pos"),
            optim::normal(rng, &[max_seq_len, w], 0.02),
        );
        for l in 0..cfg.layers[m] {
            let p = format!("enc.{k}.l{l}");
            store.insert(&format!("{p}.ln1.g"), optim::ones(&[w]));
            store.insert(&format!("{p}.ln1.b"), optim::zeros(&[w]));
            for proj in ["wq", "wk", "wv", "wo"] {
                store.insert(&format!("{p}.attn.{proj}"), optim::xavier(rng, w, w));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                store.insert(&format!("{p}.attn.{bias}"), optim::zeros(&[w]));
            }
            store.insert(&format!("{p}.ln2.g"), optim::ones(&[w]));
            store.insert(&format!("{p}.ln2.b"), optim::zeros(&[w]));
            store.insert(&format!("{p}.ff.w1"), optim::xavier(rng, w, cfg.ff_width));
            store.insert(&format!("{p}.ff.b1"), optim::zeros(&[cfg.ff_width]));
            store.insert(&format!("{p}.ff.w2"), optim::xavier(rng, cfg.ff_width, w));
            store.insert(&format!("{p}.ff.b2"), optim::zeros(&[w]));
        }
        store.insert(&format!("enc.{k}.ln_f.g"), optim::ones(&[w]));
        store.insert(&format!("enc.{k}.ln_f.b"), optim::zeros(&[w]));
    }
}

fn dropout_mask(g: &mut Graph, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 - rate;
    let mask = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    g.mul_const_arr(x, mask)
}

fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> NodeId {
    let width = g.value(x).shape()[1];
    assert_eq!(width % heads, 0, "width must divide into heads");
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let wq = g.param(store, &format!("{prefix}.attn.wq"));
    let wk = g.param(store, &format!("{prefix}.attn.wk"));
    let wv = g.param(store, &format!("{prefix}.attn.wv"));
    let wo = g.param(store, &format!("{prefix}.attn.wo"));
    let bq = g.param(store, &format!("{prefix}.attn.bq"));
    let bk = g.param(store, &format!("{prefix}.attn.bk"));
    let bv = g.param(store, &format!("{prefix}.attn.bv"));
    let bo = g.param(store, &format!("{prefix}.attn.bo"));

    let q = g.linear(x, wq, bq);
    let k = g.linear(x, wk, bk);
    let v = g.linear(x, wv, bv);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd);
        let kh = g.slice_cols(k, h * hd, hd);
        let vh = g.slice_cols(v, h * hd, hd);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_rows(scaled);
        head_outs.push(g.matmul(attn, vh));
    }
    let ctx = if heads == 1 {
        head_outs[0]
    } else {
        g.concat_cols(&head_outs)
    };
    g.linear(ctx, wo, bo)
}

/// Encode the valid frames of one sample in one modality: `[s x d_m]` in,
/// `[s x width]` out. `dropout_rng` enables dropout (training mode only).
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderCfg,
    modality: usize,
    frames: &Array2<f64>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> NodeId {
    let s = frames.nrows();
    assert!(s > 0, "cannot encode an empty sequence");
    let k = modality_key(modality);
    let _ = MODALITY_NAMES; // canonical order documented in data module

    let x = g.constant(frames.clone().into_dyn());
    let w_in = g.param(store, &format!("enc.{k}.in.w"));
    let b_in = g.param(store, &format!("enc.{k}.in.b"));
    let mut h = g.linear(x, w_in, b_in);

    let pos = g.param(store, &format!("enc.{k}.pos"));
    let pos_rows = g.slice_rows(pos, 0, s);
    h = g.add(h, pos_rows);

    for l in 0..cfg.layers[modality] {
        let p = format!("enc.{k}.l{l}");
        let ln1g = g.param(store, &format!("{p}.ln1.g"));
        let ln1b = g.param(store, &format!("{p}.ln1.b"));
        let normed = g.layer_norm(h, ln1g, ln1b, LN_EPS);
        let mut attn = self_attention(g, store, &p, normed, cfg.heads);
        if cfg.dropout > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                attn = dropout_mask(g, attn, cfg.dropout, rng);
            }
        }
        h = g.add(h, attn);

        let ln2g = g.param(store, &format!("{p}.ln2.g"));
        let ln2b = g.param(store, &format!("{p}.ln2.b"));
        let normed2 = g.layer_norm(h, ln2g, ln2b, LN_EPS);
        let w1 = g.param(store, &format!("{p}.ff.w1"));
        let b1 = g.param(store, &format!("{p}.ff.b1"));
        let w2 = g.param(store, &format!("{p}.ff.w2"));
        let b2 = g.param(store, &format!("{p}.ff.b2"));
        let ff1 = g.linear(normed2, w1, b1);
        let act = g.gelu(ff1);
        let mut ff2 = g.linear(act, w2, b2);
        if cfg.dropout > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                ff2 = dropout_mask(g, ff2, cfg.dropout, rng);
            }
        }
        h = g.add(h, ff2);
    }

    let lfg = g.param(store, &format!("enc.{k}.ln_f.g"));
    let lfb = g.param(store, &format!("enc.{k}.ln_f.b"));
    g.layer_norm(h, lfg, lfb, LN_EPS)
}
