//! Training loop, loss composition, checkpointing, and evaluation.

use crate::autodiff::{Graph, NodeId};
use crate::calibration::{self, CorrectnessTracker};
use crate::config::Config;
use crate::data::{make_batches, Batch, Dataset, ModalityDims};
use crate::emotion_space;
use crate::error::{EmorecError, Result};
use crate::fusion;
use crate::latent::{supcon_graph, ContrastQueue, QueueEntry, VectorIdentity};
use crate::metrics::{self, MetricsReport};
use crate::model::{BatchForward, GateMode, Model};
use crate::optim::{lr_at, Adam};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CKPT_FORMAT: &str = "emorec.ckpt.v1";

/// Weighted sum of the component losses. Absent components simply drop out.
pub fn total_loss(
    g: &mut Graph,
    l_cls: NodeId,
    l_ocl: Option<NodeId>,
    l_scl: Option<NodeId>,
    l_dir: Option<NodeId>,
    lambda: f64,
    beta: f64,
    gamma: f64,
) -> Result<NodeId> {
    if lambda < 0.0 || beta < 0.0 || gamma < 0.0 {
        return Err(EmorecError::Config(
            "loss weights must be non-negative".into(),
        ));
    }
    let mut total = l_cls;
    for (node, w) in [(l_ocl, lambda), (l_scl, beta), (l_dir, gamma)] {
        if let Some(n) = node {
            if w > 0.0 {
                let scaled = g.scale(n, w);
                total = g.add(total, scaled);
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub dir: f64,
    pub scl: f64,
    pub ocl: f64,
}

pub struct StepLosses {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Detached positive vectors for the queue, in batch order.
    pub scl_vectors: Vec<(VectorIdentity, Vec<f64>)>,
}

fn mean_of(g: &mut Graph, parts: &[NodeId]) -> NodeId {
    let stacked = g.stack_scalars(parts);
    g.mean(stacked)
}

/// Every (sample, modality, label) vector of a forward pass as one
/// `[n x dim]` node plus flagged identities. Rows whose sample carries the
/// label are flagged positive; the rest participate only as negatives.
fn batch_vectors(
    fwd: &mut BatchForward,
    batch: &Batch,
) -> Option<(NodeId, Vec<(VectorIdentity, bool)>)> {
    let mut parts = Vec::new();
    let mut ids = Vec::new();
    for (i, s) in fwd.samples.iter().enumerate() {
        for m in 0..3 {
            parts.push(s.dist[m]);
            for (j, &y) in s.labels.iter().enumerate() {
                ids.push((
                    VectorIdentity {
                        sample: batch.ids[i].clone(),
                        modality: m,
                        label: j,
                    },
                    y >= 0.5,
                ));
            }
        }
    }
    if parts.is_empty() {
        return None;
    }
    let node = fwd.graph.concat_rows(&parts);
    Some((node, ids))
}

/// Assemble every loss for one training batch. `r` must hold the tracker
/// ratios aligned with the batch.
pub fn batch_losses(
    model: &Model,
    fwd: &mut BatchForward,
    batch: &Batch,
    queue: &ContrastQueue,
    r: &[f64],
) -> Result<StepLosses> {
    let cfg = &model.cfg;
    let n = fwd.samples.len();
    assert_eq!(r.len(), n);

    let mut cls_parts = Vec::with_capacity(n);
    let mut dir_parts = Vec::with_capacity(n);
    for s in &fwd.samples {
        let cls = fusion::bce_probs_mean(&mut fwd.graph, s.fused, &s.labels);
        cls_parts.push(cls);
        let dir = emotion_space::bce_with_logits_mean(&mut fwd.graph, s.info_logits, &s.labels);
        dir_parts.push(dir);
    }
    let l_cls = mean_of(&mut fwd.graph, &cls_parts);
    let l_dir = mean_of(&mut fwd.graph, &dir_parts);

    let scl_active = cfg.scl.enabled && cfg.train.beta > 0.0;
    let mut scl_vectors = Vec::new();
    let l_scl = if scl_active {
        match batch_vectors(fwd, batch) {
            Some((node, ids)) => {
                let values = fwd.graph.value(node).clone();
                let dim = values.shape()[1];
                for (row, (id, positive)) in ids.iter().enumerate() {
                    if !positive {
                        continue;
                    }
                    let e: Vec<f64> = (0..dim).map(|c| values[[row, c]]).collect();
                    scl_vectors.push((id.clone(), e));
                }
                supcon_graph(&mut fwd.graph, node, &ids, queue, cfg.scl.tau)
            }
            None => None,
        }
    } else {
        None
    };

    let ocl_active = cfg.ocl.enabled && cfg.train.lambda > 0.0;
    let l_ocl = if ocl_active && n >= 2 {
        let s_parts: Vec<NodeId> = fwd.samples.iter().map(|s| s.inv_sigma_norm).collect();
        let d_parts: Vec<NodeId> = fwd
            .samples
            .iter()
            .map(|s| s.gate)
            .collect::<Vec<_>>()
            .iter()
            .map(|&gate| fwd.graph.one_minus(gate))
            .collect();
        let s_vec = fwd.graph.stack_scalars(&s_parts);
        let d_vec = fwd.graph.stack_scalars(&d_parts);
        Some(calibration::loss_ocl(&mut fwd.graph, s_vec, d_vec, r, &cfg.ocl))
    } else {
        None
    };

    let total = total_loss(
        &mut fwd.graph,
        l_cls,
        l_ocl,
        l_scl,
        Some(l_dir),
        cfg.train.lambda,
        cfg.train.beta,
        cfg.train.gamma,
    )?;
    let breakdown = LossBreakdown {
        total: fwd.graph.scalar(total),
        cls: fwd.graph.scalar(l_cls),
        dir: fwd.graph.scalar(l_dir),
        scl: l_scl.map_or(0.0, |n| fwd.graph.scalar(n)),
        ocl: l_ocl.map_or(0.0, |n| fwd.graph.scalar(n)),
    };
    Ok(StepLosses {
        total,
        breakdown,
        scl_vectors,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub last_lr: f64,
    pub val: MetricsReport,
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub best_epoch: usize,
    pub best_mi_f1: f64,
    pub epochs: Vec<EpochRecord>,
    pub queue_pushes: u64,
    /// Best-validation checkpoint, the one `eval` normally consumes.
    pub checkpoint: PathBuf,
    /// State after the last epoch. Calibration diagnostics read this one:
    /// the sigma geometry keeps moving long after validation miF1 peaks.
    pub final_checkpoint: PathBuf,
}

pub fn train(model: &mut Model, ds: &Dataset, out_dir: &Path) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = model.cfg.clone();
    let n_train = ds.split_ids("train")?.len();
    let steps_per_epoch = n_train.div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.epochs;

    let mut tracker = CorrectnessTracker::new(ds.len());
    let mut queue = ContrastQueue::new(cfg.scl.queue_size);
    let mut adam = Adam::new(&model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x9e37_79b9));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x7f4a_7c15));

    let ckpt_path = out_dir.join("ckpt.json");
    let final_path = out_dir.join("ckpt_final.json");
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut records = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.train.epochs {
        let shuffle_seed = shuffle_rng.gen::<u64>();
        let batches = make_batches(ds, "train", cfg.train.batch_size, cfg.max_seq_len, Some(shuffle_seed))?;
        let mut sums = LossBreakdown::default();
        let mut last_lr = 0.0;
        for batch in &batches {
            let rng = (cfg.encoder.dropout > 0.0).then_some(&mut dropout_rng);
            let mut fwd = model.forward(batch, GateMode::Train, rng)?;

            // update-then-read: this step's predictions fold into r before
            // the calibration loss consumes it
            let mut r = Vec::with_capacity(batch.len());
            for (i, &global) in batch.indices.iter().enumerate() {
                let probs = fwd.info_probs(i);
                let c = CorrectnessTracker::step_correctness(
                    &probs,
                    &fwd.samples[i].labels,
                    cfg.train.threshold,
                );
                tracker.update(global, c)?;
                r.push(tracker.ratio(global)?);
            }

            let losses = batch_losses(model, &mut fwd, batch, &queue, &r)?;
            let b = losses.breakdown;
            if !(b.total.is_finite() && b.cls.is_finite() && b.dir.is_finite()
                && b.scl.is_finite() && b.ocl.is_finite())
            {
                return Err(EmorecError::NonFinite {
                    step,
                    detail: format!(
                        "cls {} dir {} scl {} ocl {} total {}",
                        b.cls, b.dir, b.scl, b.ocl, b.total
                    ),
                });
            }
            sums.total += b.total;
            sums.cls += b.cls;
            sums.dir += b.dir;
            sums.scl += b.scl;
            sums.ocl += b.ocl;

            let bw = fwd.graph.backward(losses.total);
            last_lr = lr_at(step, total_steps, cfg.train.lr, cfg.train.warmup);
            adam.step(&mut model.params, &bw.params, last_lr);
            step += 1;

            for (id, e) in losses.scl_vectors {
                queue.push(QueueEntry {
                    id,
                    positive: true,
                    e,
                });
            }
        }

        let k = batches.len() as f64;
        let mean_loss = LossBreakdown {
            total: sums.total / k,
            cls: sums.cls / k,
            dir: sums.dir / k,
            scl: sums.scl / k,
            ocl: sums.ocl / k,
        };
        let val = evaluate(model, ds, "val", cfg.train.threshold, false)?;
        if val.classification.mi_f1 > best {
            best = val.classification.mi_f1;
            best_epoch = epoch;
            save_checkpoint(&ckpt_path, model, &tracker, epoch, best)?;
        }
        records.push(EpochRecord {
            epoch,
            mean_loss,
            last_lr,
            val,
        });
        if epoch + 1 == cfg.train.epochs {
            let last = records.last().expect("just pushed");
            save_checkpoint(&final_path, model, &tracker, epoch, last.val.classification.mi_f1)?;
        }
    }

    let mut metrics_file = std::fs::File::create(out_dir.join("metrics.jsonl"))?;
    for rec in &records {
        writeln!(metrics_file, "{}", serde_json::to_string(rec)?)?;
    }
    let mut report = String::new();
    for rec in &records {
        report.push_str(&format!(
            "epoch {:>3}  loss {:.4} (cls {:.4} dir {:.4} scl {:.4} ocl {:.4})  lr {:.3e}\n{}\n",
            rec.epoch,
            rec.mean_loss.total,
            rec.mean_loss.cls,
            rec.mean_loss.dir,
            rec.mean_loss.scl,
            rec.mean_loss.ocl,
            rec.last_lr,
            rec.val.table()
        ));
    }
    report.push_str(&format!(
        "best val miF1 {best:.4} at epoch {best_epoch}; checkpoint {}\n",
        ckpt_path.display()
    ));
    std::fs::write(out_dir.join("report.txt"), report)?;

    Ok(TrainArtifacts {
        best_epoch,
        best_mi_f1: best,
        epochs: records,
        queue_pushes: queue.push_count(),
        checkpoint: ckpt_path,
        final_checkpoint: final_path,
    })
}

/// Forward a whole split in inference mode and score it. With `diagnostics`
/// set, also computes the embedding silhouette and, where the data carries
/// planted noise levels, the rank correlation between sigma norms and noise.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    split: &str,
    threshold: f64,
    diagnostics: bool,
) -> Result<MetricsReport> {
    let batches = make_batches(ds, split, model.cfg.train.batch_size, model.cfg.max_seq_len, None)?;
    let q = model.q;
    let mut pred_rows = Vec::new();
    let mut truth_rows = Vec::new();
    let mut gate_train_sum = 0.0;
    let mut gate_inf_sum = 0.0;
    let mut n = 0usize;
    let mut points = Vec::new();
    let mut clusters = Vec::new();
    let mut sigma_norms = Vec::new();
    let mut noises = Vec::new();

    for batch in &batches {
        let fwd = model.forward(batch, GateMode::Inference, None)?;
        let fused = fwd.fused_probs();
        for (i, s) in fwd.samples.iter().enumerate() {
            pred_rows.push((0..q).map(|j| fused[[i, j]]).collect::<Vec<f64>>());
            truth_rows.push(s.labels.clone());
            let info = fwd.info_probs(i);
            gate_train_sum += fusion::uncertainty_score(&info, &s.labels)?;
            gate_inf_sum += s.inference_gate;
            n += 1;

            if diagnostics {
                let inv = fwd.graph.scalar(s.inv_sigma_norm);
                sigma_norms.push(1.0 / inv);
                noises.push(batch.noise[i]);
                for m in 0..3 {
                    let rows = fwd.graph.value(s.dist[m]);
                    for (j, &y) in s.labels.iter().enumerate() {
                        if y >= 0.5 {
                            points.push((0..rows.shape()[1]).map(|c| rows[[j, c]]).collect());
                            clusters.push(m * q + j);
                        }
                    }
                }
            }
        }
    }

    let to_matrix = |rows: &[Vec<f64>]| {
        ndarray::Array2::from_shape_fn((rows.len(), q), |(i, j)| rows[i][j])
    };
    let probs = to_matrix(&pred_rows);
    let truth_f = to_matrix(&truth_rows);
    let pred = metrics::threshold_probs(&probs, threshold);
    let truth = truth_f.mapv(|v| u8::from(v >= 0.5));
    let classification = metrics::classification_metrics(&pred, &truth, &model.label_names);
    let silhouette = (diagnostics && !points.is_empty())
        .then(|| metrics::silhouette(&points, &clusters));
    let sigma_noise_spearman = if diagnostics && noises.iter().all(|n| n.is_some()) && !noises.is_empty() {
        let eps: Vec<f64> = noises.iter().map(|n| n.unwrap()).collect();
        Some(metrics::spearman(&sigma_norms, &eps))
    } else {
        None
    };
    let co = metrics::cooccurrence(&truth);
    Ok(MetricsReport {
        split: split.to_string(),
        samples: n,
        classification,
        mean_gate_train: Some(gate_train_sum / n as f64),
        mean_gate_inference: gate_inf_sum / n as f64,
        silhouette,
        sigma_noise_spearman,
        cooccurrence: (0..q)
            .map(|a| (0..q).map(|b| co[[a, b]]).collect())
            .collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct ParamBlob {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: BTreeMap<String, String>,
    pub q: usize,
    pub dims: ModalityDims,
    pub label_names: Vec<String>,
    pub epoch: usize,
    pub val_mi_f1: f64,
    params: BTreeMap<String, ParamBlob>,
    tracker: CorrectnessTracker,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    tracker: &CorrectnessTracker,
    epoch: usize,
    val_mi_f1: f64,
) -> Result<()> {
    let mut params = BTreeMap::new();
    for (name, value) in model.params.iter() {
        params.insert(
            name.to_string(),
            ParamBlob {
                shape: value.shape().to_vec(),
                data: value.iter().copied().collect(),
            },
        );
    }
    let ckpt = Checkpoint {
        format: CKPT_FORMAT.to_string(),
        config: model.cfg.to_flat().0,
        q: model.q,
        dims: model.dims.clone(),
        label_names: model.label_names.clone(),
        epoch,
        val_mi_f1,
        params,
        tracker: tracker.clone(),
    };
    let text = serde_json::to_string(&ckpt)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CorrectnessTracker, usize, f64)> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format != CKPT_FORMAT {
        return Err(EmorecError::Format(format!(
            "unsupported checkpoint format {:?}, expected {CKPT_FORMAT:?}",
            ckpt.format
        )));
    }
    let cfg = Config::from_flat(&crate::config::FlatConfig(ckpt.config.clone()))?;
    let mut model = Model::from_parts(cfg, ckpt.q, ckpt.dims.clone(), ckpt.label_names.clone())?;
    let expected = model.params.names();
    if expected.len() != ckpt.params.len() {
        return Err(EmorecError::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            ckpt.params.len(),
            expected.len()
        )));
    }
    for name in expected {
        let blob = ckpt.params.get(&name).ok_or_else(|| {
            EmorecError::Format(format!("checkpoint missing parameter {name}"))
        })?;
        let target = model.params.get_mut(&name);
        if target.shape() != blob.shape.as_slice() {
            return Err(EmorecError::Format(format!(
                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                blob.shape,
                target.shape()
            )));
        }
        let arr = ndarray::ArrayD::from_shape_vec(blob.shape.clone(), blob.data.clone())
            .map_err(|e| EmorecError::Format(format!("parameter {name}: {e}")))?;
        target.assign(&arr);
    }
    Ok((model, ckpt.tracker, ckpt.epoch, ckpt.val_mi_f1))
}
