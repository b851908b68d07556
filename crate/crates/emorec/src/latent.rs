//! Latent Gaussian decoupling and the contrastive machinery on top of it.
//!
//! Each pooled per-label feature row is split into a mean and a standard
//! deviation through a small MLP trunk with two separate heads. The pair is
//! flattened into a single "distribution vector" whose halves are normalized
//! independently, so the dot product of two such vectors is a sum of two
//! cosines in [-2, 2]. A FIFO queue of recent vectors enlarges the pool the
//! supervised contrastive loss draws positives and negatives from.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::config::SclCfg;
use crate::error::{EmorecError, Result};
use crate::optim;
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Additive floor keeping every standard deviation strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Added to row norms during normalization so near-zero rows stay finite.
pub const NORM_EPS: f64 = 1e-12;

pub fn init_latent_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_h: usize) {
    assert!(d_h % 2 == 0, "latent width must be even");
    store.insert("dec.trunk.w", optim::xavier(rng, d_h, d_h));
    store.insert("dec.trunk.b", optim::zeros(&[d_h]));
    store.insert("dec.mu.w", optim::xavier(rng, d_h, d_h / 2));
    store.insert("dec.mu.b", optim::zeros(&[d_h / 2]));
    store.insert("dec.sigma.w", optim::xavier(rng, d_h, d_h / 2));
    store.insert("dec.sigma.b", optim::zeros(&[d_h / 2]));
}

pub struct Decoupled {
    /// Per-label means, `[q x d_h/2]`.
    pub mu: NodeId,
    /// Per-label standard deviations, `[q x d_h/2]`, strictly positive.
    pub sigma: NodeId,
}

/// Split pooled features `[q x d_h]` into Gaussian parameters. The sigma head
/// goes through softplus plus a small floor so it can never reach zero.
pub fn decouple(g: &mut Graph, store: &ParamStore, z: NodeId) -> Decoupled {
    let wt = g.param(store, "dec.trunk.w");
    let bt = g.param(store, "dec.trunk.b");
    let h0 = g.linear(z, wt, bt);
    let h = g.gelu(h0);
    let wm = g.param(store, "dec.mu.w");
    let bm = g.param(store, "dec.mu.b");
    let mu = g.linear(h, wm, bm);
    let ws = g.param(store, "dec.sigma.w");
    let bs = g.param(store, "dec.sigma.b");
    let raw = g.linear(h, ws, bs);
    let sp = g.softplus(raw);
    let sigma = g.add_const(sp, SIGMA_FLOOR);
    Decoupled { mu, sigma }
}

/// Which parts of (mu, sigma) make up the contrastive vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorKind {
    Full,
    MuOnly,
    SigmaOnly,
}

impl VectorKind {
    pub fn from_cfg(cfg: &SclCfg) -> Self {
        match (cfg.use_mu_only, cfg.use_sigma_only) {
            (true, false) => VectorKind::MuOnly,
            (false, true) => VectorKind::SigmaOnly,
            _ => VectorKind::Full,
        }
    }
}

/// Rows of per-label distribution vectors from decoupled parameters, shaped
/// `[q x d_h]` for the full kind and `[q x d_h/2]` for the single-half kinds.
pub fn distribution_rows(g: &mut Graph, dec: &Decoupled, kind: VectorKind) -> NodeId {
    match kind {
        VectorKind::Full => {
            let nm = g.normalize_rows(dec.mu, NORM_EPS);
            let ns = g.normalize_rows(dec.sigma, NORM_EPS);
            g.concat_cols(&[nm, ns])
        }
        VectorKind::MuOnly => g.normalize_rows(dec.mu, NORM_EPS),
        VectorKind::SigmaOnly => g.normalize_rows(dec.sigma, NORM_EPS),
    }
}

/// Pure counterpart of [`distribution_rows`] for a single label: both halves
/// normalized by their own Euclidean norms.
pub fn to_vector(mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nm = norm(mu);
    let ns = norm(sigma);
    if nm == 0.0 {
        return Err(EmorecError::Validation("zero-norm mean vector".into()));
    }
    if ns == 0.0 {
        return Err(EmorecError::Validation(
            "zero-norm standard-deviation vector".into(),
        ));
    }
    let mut e = Vec::with_capacity(mu.len() + sigma.len());
    e.extend(mu.iter().map(|x| x / (nm + NORM_EPS)));
    e.extend(sigma.iter().map(|x| x / (ns + NORM_EPS)));
    Ok(e)
}

/// Where a distribution vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VectorIdentity {
    pub sample: String,
    pub modality: usize,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub id: VectorIdentity,
    /// Whether the source sample carries the entry's label.
    pub positive: bool,
    pub e: Vec<f64>,
}

/// FIFO buffer of recent distribution vectors, detached from gradient flow.
#[derive(Debug)]
pub struct ContrastQueue {
    capacity: usize,
    buf: VecDeque<QueueEntry>,
    pushed: u64,
}

impl ContrastQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        ContrastQueue {
            capacity,
            buf: VecDeque::with_capacity(capacity.min(4096)),
            pushed: 0,
        }
    }

    pub fn push(&mut self, entry: QueueEntry) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(entry);
        self.pushed += 1;
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total entries ever pushed, including evicted ones.
    pub fn push_count(&self) -> u64 {
        self.pushed
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.buf.iter()
    }
}

fn positive_sets(
    batch: &[(VectorIdentity, bool)],
    queue: &ContrastQueue,
) -> (Vec<Vec<usize>>, usize) {
    let n_b = batch.len();
    let n_cand = n_b + queue.len();
    let mut key = Vec::with_capacity(n_cand);
    for (id, positive) in batch {
        key.push(((id.modality, id.label), *positive));
    }
    for entry in queue.iter() {
        key.push(((entry.id.modality, entry.id.label), entry.positive));
    }
    let positives: Vec<Vec<usize>> = (0..n_b)
        .map(|i| {
            (0..n_cand)
                .filter(|&j| j != i && key[j].1 && key[j].0 == key[i].0)
                .collect()
        })
        .collect();
    (positives, n_cand)
}

/// Supervised contrastive loss over a batch of flagged vectors against the
/// batch plus the queue. Anchors are the positive-flagged batch rows; their
/// positives are the other positive-flagged candidates with the same
/// (modality, label), and everything else, including same-slot rows whose
/// sample lacks the label, lands in the denominator as a negative. Per
/// anchor: log-sum-exp of scaled similarities over every candidate except
/// itself, minus the mean scaled similarity to its positives; the batch loss
/// is the sum over anchors. Anchors with no positives are skipped; returns
/// None when no anchor has any.
pub fn supcon_graph(
    g: &mut Graph,
    batch_node: NodeId,
    batch_ids: &[(VectorIdentity, bool)],
    queue: &ContrastQueue,
    tau: f64,
) -> Option<NodeId> {
    assert!(tau > 0.0, "temperature must be positive");
    let n_b = batch_ids.len();
    if n_b == 0 {
        return None;
    }
    let dim = g.value(batch_node).shape()[1];
    assert_eq!(g.value(batch_node).shape()[0], n_b);

    let (positives, n_cand) = positive_sets(batch_ids, queue);
    let anchors: Vec<usize> = (0..n_b)
        .filter(|&i| batch_ids[i].1 && !positives[i].is_empty())
        .collect();
    if anchors.is_empty() {
        return None;
    }

    let cand = if queue.is_empty() {
        batch_node
    } else {
        let mut qm = ndarray::Array2::<f64>::zeros((queue.len(), dim));
        for (r, entry) in queue.iter().enumerate() {
            assert_eq!(entry.e.len(), dim, "queue entry width mismatch");
            for (c, &v) in entry.e.iter().enumerate() {
                qm[[r, c]] = v;
            }
        }
        let qc = g.constant(qm.into_dyn());
        g.concat_rows(&[batch_node, qc])
    };

    let a = g.gather_rows(batch_node, &anchors);
    let ct = g.transpose(cand);
    let sims = g.matmul(a, ct);
    let s = g.scale(sims, 1.0 / tau);

    let mut mask = ArrayD::<f64>::zeros(ndarray::IxDyn(&[anchors.len(), n_cand]));
    let mut w_pos = ArrayD::<f64>::zeros(ndarray::IxDyn(&[anchors.len(), n_cand]));
    for (k, &i) in anchors.iter().enumerate() {
        mask[[k, i]] = -1e30;
        let w = 1.0 / positives[i].len() as f64;
        for &p in &positives[i] {
            w_pos[[k, p]] = w;
        }
    }
    let masked = g.add_const_arr(s, mask);
    let lse = g.row_logsumexp(masked);
    let lse_sum = g.sum(lse);
    let pos = g.mul_const_arr(s, w_pos);
    let pos_sum = g.sum(pos);
    Some(g.sub(lse_sum, pos_sum))
}

/// Loop-based reference for [`supcon_graph`].
pub fn supcon_reference(
    batch: &[(VectorIdentity, bool, Vec<f64>)],
    queue: &ContrastQueue,
    tau: f64,
) -> f64 {
    assert!(tau > 0.0);
    let ids: Vec<(VectorIdentity, bool)> = batch
        .iter()
        .map(|(id, positive, _)| (id.clone(), *positive))
        .collect();
    let (positives, n_cand) = positive_sets(&ids, queue);
    let vec_of = |j: usize| -> &[f64] {
        if j < batch.len() {
            &batch[j].2
        } else {
            &queue.iter().nth(j - batch.len()).unwrap().e
        }
    };
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    for i in 0..batch.len() {
        if !batch[i].1 || positives[i].is_empty() {
            continue;
        }
        let zs: Vec<f64> = (0..n_cand)
            .filter(|&j| j != i)
            .map(|j| dot(&batch[i].2, vec_of(j)) / tau)
            .collect();
        let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + zs.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let mean_pos = positives[i]
            .iter()
            .map(|&p| dot(&batch[i].2, vec_of(p)) / tau)
            .sum::<f64>()
            / positives[i].len() as f64;
        total += lse - mean_pos;
    }
    total
}
