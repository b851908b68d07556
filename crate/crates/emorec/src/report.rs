//! Run reports beyond the core metrics: embedding export for external
//! visualization, the calibration table, and label-correlation comparison
//! between predictions and ground truth.

use crate::calibration::CorrectnessTracker;
use crate::data::{make_batches, Dataset, MODALITY_NAMES};
use crate::error::Result;
use crate::fusion;
use crate::metrics::{self, spearman};
use crate::model::{GateMode, Model};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub modality: String,
    pub label: String,
    pub vector: Vec<f64>,
}

/// Write one JSONL record per positive (sample, modality, label) with its
/// distribution vector. Samples without active labels produce nothing.
/// Returns the record count.
pub fn export_embeddings(model: &Model, ds: &Dataset, split: &str, out: &Path) -> Result<usize> {
    let records = collect_embeddings(model, ds, split)?;
    let mut file = std::fs::File::create(out)?;
    for rec in &records {
        writeln!(file, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(records.len())
}

pub fn collect_embeddings(model: &Model, ds: &Dataset, split: &str) -> Result<Vec<EmbeddingRecord>> {
    let batches = make_batches(ds, split, model.cfg.train.batch_size, model.cfg.max_seq_len, None)?;
    let mut records = Vec::new();
    for batch in &batches {
        let fwd = model.forward(batch, GateMode::Inference, None)?;
        for (i, s) in fwd.samples.iter().enumerate() {
            for m in 0..3 {
                let rows = fwd.graph.value(s.dist[m]);
                for (j, &y) in s.labels.iter().enumerate() {
                    if y < 0.5 {
                        continue;
                    }
                    records.push(EmbeddingRecord {
                        id: batch.ids[i].clone(),
                        modality: MODALITY_NAMES[m].to_string(),
                        label: model.label_names[j].clone(),
                        vector: (0..rows.shape()[1]).map(|c| rows[[j, c]]).collect(),
                    });
                }
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibRow {
    pub id: String,
    pub sigma_norm: f64,
    /// Gate under the training rule (needs labels).
    pub gate_train: f64,
    /// Gate under the inference rule (entropy proxy).
    pub gate_inference: f64,
    /// Tracked correctness proportion (0.5 prior for never-trained samples).
    pub r: f64,
    pub planted_noise: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibReport {
    pub split: String,
    pub rows: Vec<CalibRow>,
    /// Spearman between 1/||sigma|| and r.
    pub spearman_s_r: f64,
    /// Spearman between 1 - gate and r.
    pub spearman_d_r: f64,
    /// Spearman between ||sigma|| and the planted noise level, when present.
    pub spearman_sigma_noise: Option<f64>,
}

pub fn calib_report(
    model: &Model,
    ds: &Dataset,
    split: &str,
    tracker: &CorrectnessTracker,
) -> Result<CalibReport> {
    let batches = make_batches(ds, split, model.cfg.train.batch_size, model.cfg.max_seq_len, None)?;
    let mut rows = Vec::new();
    for batch in &batches {
        let fwd = model.forward(batch, GateMode::Inference, None)?;
        for (i, s) in fwd.samples.iter().enumerate() {
            let info = fwd.info_probs(i);
            rows.push(CalibRow {
                id: batch.ids[i].clone(),
                sigma_norm: 1.0 / fwd.graph.scalar(s.inv_sigma_norm),
                gate_train: fusion::uncertainty_score(&info, &s.labels)?,
                gate_inference: s.inference_gate,
                r: tracker.ratio(batch.indices[i])?,
                planted_noise: batch.noise[i],
            });
        }
    }
    let s: Vec<f64> = rows.iter().map(|r| 1.0 / r.sigma_norm).collect();
    let d: Vec<f64> = rows.iter().map(|r| 1.0 - r.gate_train).collect();
    let r: Vec<f64> = rows.iter().map(|r| r.r).collect();
    let spearman_sigma_noise = if !rows.is_empty() && rows.iter().all(|r| r.planted_noise.is_some())
    {
        let norms: Vec<f64> = rows.iter().map(|r| r.sigma_norm).collect();
        let eps: Vec<f64> = rows.iter().map(|r| r.planted_noise.unwrap()).collect();
        Some(spearman(&norms, &eps))
    } else {
        None
    };
    Ok(CalibReport {
        split: split.to_string(),
        spearman_s_r: spearman(&s, &r),
        spearman_d_r: spearman(&d, &r),
        spearman_sigma_noise,
        rows,
    })
}

impl CalibReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "calibration table for split {} ({} samples)\n{:<10} {:>12} {:>12} {:>12} {:>8} {:>10}\n",
            self.split,
            self.rows.len(),
            "id",
            "sigma_norm",
            "gate_train",
            "gate_infer",
            "r",
            "noise"
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>12.5} {:>12.5} {:>12.5} {:>8.4} {:>10}\n",
                row.id,
                row.sigma_norm,
                row.gate_train,
                row.gate_inference,
                row.r,
                row.planted_noise
                    .map_or("-".to_string(), |n| format!("{n:.4}")),
            ));
        }
        out.push_str(&format!(
            "spearman(1/|sigma|, r) {:.4}   spearman(1-d, r) {:.4}\n",
            self.spearman_s_r, self.spearman_d_r
        ));
        if let Some(s) = self.spearman_sigma_noise {
            out.push_str(&format!("spearman(|sigma|, planted noise) {s:.4}\n"));
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub split: String,
    /// Pearson correlation matrix over predicted label columns.
    pub predicted: Vec<Vec<f64>>,
    /// Same matrix over ground-truth label columns.
    pub truth: Vec<Vec<f64>>,
    /// Cosine similarity between the two matrices, flattened.
    pub cosine: f64,
}

pub fn correlation_report(model: &Model, ds: &Dataset, split: &str, threshold: f64) -> Result<CorrelationReport> {
    let batches = make_batches(ds, split, model.cfg.train.batch_size, model.cfg.max_seq_len, None)?;
    let q = model.q;
    let mut pred_rows: Vec<Vec<u8>> = Vec::new();
    let mut truth_rows: Vec<Vec<u8>> = Vec::new();
    for batch in &batches {
        let fwd = model.forward(batch, GateMode::Inference, None)?;
        let fused = fwd.fused_probs();
        for (i, s) in fwd.samples.iter().enumerate() {
            pred_rows.push((0..q).map(|j| u8::from(fused[[i, j]] >= threshold)).collect());
            truth_rows.push(s.labels.iter().map(|&y| u8::from(y >= 0.5)).collect());
        }
    }
    let to_m = |rows: &[Vec<u8>]| Array2::from_shape_fn((rows.len(), q), |(i, j)| rows[i][j]);
    let mp = metrics::label_correlation(&to_m(&pred_rows));
    let mt = metrics::label_correlation(&to_m(&truth_rows));
    let cosine = metrics::matrix_cosine(&mp, &mt);
    let flatten = |m: &Array2<f64>| {
        (0..q)
            .map(|a| (0..q).map(|b| m[[a, b]]).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    Ok(CorrelationReport {
        split: split.to_string(),
        predicted: flatten(&mp),
        truth: flatten(&mt),
        cosine,
    })
}
