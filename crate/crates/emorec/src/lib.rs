//! Multimodal multi-label emotion recognition with per-label latent Gaussian
//! distributions, contrastive latent structuring, and uncertainty-calibrated
//! fusion.
//!
//! The pipeline: per-modality transformer encoders produce frame features,
//! label-query attention pools them into per-label semantics, a decoupling
//! head splits each pooled feature into a Gaussian (mu, sigma), and two
//! classifier branches (mu-based, sigma-based) are fused by a per-sample
//! uncertainty gate. Auxiliary losses shape the latent space: a supervised
//! contrastive loss over normalized distribution vectors with a FIFO memory
//! queue, and a soft-ranking KL calibration loss aligning sigma norms and
//! prediction errors with running per-sample correctness.
//!
//! Everything runs in f64 on a small reverse-mode tape so analytic gradients
//! can be verified against central finite differences end to end.

pub mod autodiff;
pub mod calibration;
pub mod config;
pub mod data;
pub mod emotion_space;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod train;

pub use error::{EmorecError, Result};
