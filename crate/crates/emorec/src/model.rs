//! The assembled model: per-modality encoders, label-query pooling, the info
//! classifier, Gaussian decoupling, the two fusion branches, and the
//! uncertainty gate, wired into one graph per batch.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::calibration;
use crate::config::Config;
use crate::data::{Batch, Manifest, ModalityDims};
use crate::emotion_space;
use crate::encoder;
use crate::error::{EmorecError, Result};
use crate::fusion;
use crate::latent::{self, VectorKind};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How the fusion gate is computed: from ground-truth labels during training,
/// from prediction entropy when labels are unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Train,
    Inference,
}

pub struct Model {
    pub cfg: Config,
    pub q: usize,
    pub dims: ModalityDims,
    pub label_names: Vec<String>,
    pub params: ParamStore,
}

impl Model {
    pub fn init(cfg: Config, manifest: &Manifest) -> Result<Self> {
        Model::from_parts(
            cfg,
            manifest.q,
            manifest.dims.clone(),
            manifest.label_names.clone(),
        )
    }

    /// Seeded random initialization; parameter creation order is the
    /// contract both the optimizer state and checkpoints rely on.
    pub fn from_parts(
        cfg: Config,
        q: usize,
        dims: ModalityDims,
        label_names: Vec<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        if label_names.len() != q {
            return Err(EmorecError::Validation(format!(
                "{} label names for q = {q}",
                label_names.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut params = ParamStore::new();
        encoder::init_encoder_params(&mut params, &mut rng, &cfg.encoder, dims.as_array(), cfg.max_seq_len);
        emotion_space::init_emotion_params(&mut params, &mut rng, &cfg.emotion, q, cfg.encoder.width);
        latent::init_latent_params(&mut params, &mut rng, cfg.emotion.d_h);
        fusion::init_fusion_params(&mut params, &mut rng, q, cfg.emotion.d_h, cfg.cls.hidden);
        Ok(Model {
            cfg,
            q,
            dims,
            label_names,
            params,
        })
    }

    pub fn vector_kind(&self) -> VectorKind {
        VectorKind::from_cfg(&self.cfg.scl)
    }

    /// Run the whole pipeline for one batch, building a fresh graph.
    pub fn forward(
        &self,
        batch: &Batch,
        mode: GateMode,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(EmorecError::Validation("empty batch".into()));
        }
        let mut g = Graph::new();
        let kind = self.vector_kind();
        let mut samples = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let labels: Vec<f64> = (0..self.q).map(|j| batch.labels[[i, j]]).collect();

            let mut zs = [NodeId::default(); 3];
            let mut mu = [NodeId::default(); 3];
            let mut sigma = [NodeId::default(); 3];
            let mut dist = [NodeId::default(); 3];
            for m in 0..3 {
                let frames = batch.sample_frames(i, m);
                let rng_ref = dropout_rng.as_deref_mut();
                let enc = encoder::encode(&mut g, &self.params, &self.cfg.encoder, m, &frames, rng_ref);
                let att = emotion_space::attend(&mut g, &self.params, &self.cfg.emotion, m, enc);
                zs[m] = att.z;
                let dec = latent::decouple(&mut g, &self.params, att.z);
                mu[m] = dec.mu;
                sigma[m] = dec.sigma;
                dist[m] = latent::distribution_rows(&mut g, &dec, kind);
            }

            let info_logits = emotion_space::info_logits(&mut g, &self.params, zs);
            let info_probs = g.sigmoid(info_logits);
            let prob_vals: Vec<f64> = g.value(info_probs).iter().copied().collect();
            let inference_gate = fusion::inference_uncertainty(&prob_vals);

            let gate = match mode {
                GateMode::Train => fusion::uncertainty_node(&mut g, info_probs, &labels),
                GateMode::Inference => g.scalar_const(inference_gate),
            };
            let gate_value = g.scalar(gate);

            let mu_probs = fusion::branch_probs(&mut g, &self.params, "mu", mu);
            let sigma_probs = fusion::branch_probs(&mut g, &self.params, "sigma", sigma);
            let fused = fusion::fuse(&mut g, mu_probs, sigma_probs, gate, &self.cfg.fusion, &self.cfg.cls);
            let inv_sigma_norm = calibration::inverse_sigma_norm(&mut g, sigma);

            samples.push(SampleForward {
                labels,
                info_logits,
                info_probs,
                mu,
                sigma,
                dist,
                mu_probs,
                sigma_probs,
                fused,
                gate,
                gate_value,
                inference_gate,
                inv_sigma_norm,
            });
        }
        Ok(BatchForward { graph: g, samples })
    }
}

#[derive(Debug)]
pub struct SampleForward {
    pub labels: Vec<f64>,
    pub info_logits: NodeId,
    /// `[1 x q]` info-classifier probabilities.
    pub info_probs: NodeId,
    /// Per modality `[q x d_h/2]`.
    pub mu: [NodeId; 3],
    pub sigma: [NodeId; 3],
    /// Per modality rows of contrastive vectors.
    pub dist: [NodeId; 3],
    pub mu_probs: NodeId,
    pub sigma_probs: NodeId,
    /// `[1 x q]` fused probabilities.
    pub fused: NodeId,
    /// Scalar gate node feeding the fusion blend.
    pub gate: NodeId,
    pub gate_value: f64,
    /// Entropy-based gate, always computed for logging.
    pub inference_gate: f64,
    /// Scalar node 1/||sigma|| over all modalities and labels.
    pub inv_sigma_norm: NodeId,
}

pub struct BatchForward {
    pub graph: Graph,
    pub samples: Vec<SampleForward>,
}

impl BatchForward {
    /// Fused probabilities as plain values, `[batch x q]`.
    pub fn fused_probs(&self) -> ndarray::Array2<f64> {
        let q = self.samples[0].labels.len();
        let mut out = ndarray::Array2::zeros((self.samples.len(), q));
        for (i, s) in self.samples.iter().enumerate() {
            let row = self.graph.value(s.fused);
            for j in 0..q {
                out[[i, j]] = row[[0, j]];
            }
        }
        out
    }

    pub fn info_probs(&self, i: usize) -> Vec<f64> {
        self.graph.value(self.samples[i].info_probs).iter().copied().collect()
    }
}
