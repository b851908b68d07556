//! Evaluation metrics for multi-label predictions plus the embedding-space
//! diagnostics (silhouette, rank correlation, label correlation matrices).
//!
//! "Accuracy" here is sample-wise Jaccard overlap between the predicted and
//! true label sets, with empty-vs-empty counting as 1. Precision, recall, and
//! F1 are micro-averaged over all (sample, label) decisions, with 0/0 defined
//! as 0.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelStats {
    pub name: String,
    #[serde(flatten)]
    pub counts: MicroCounts,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub mi_f1: f64,
    pub confusion: MicroCounts,
    pub per_label: Vec<LabelStats>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn threshold_probs(probs: &Array2<f64>, threshold: f64) -> Array2<u8> {
    probs.mapv(|p| u8::from(p >= threshold))
}

pub fn classification_metrics(
    pred: &Array2<u8>,
    truth: &Array2<u8>,
    label_names: &[String],
) -> ClassificationMetrics {
    assert_eq!(pred.dim(), truth.dim(), "prediction/label shape mismatch");
    let (n, q) = pred.dim();
    assert_eq!(label_names.len(), q, "label name count");

    let mut acc_sum = 0.0;
    let mut per_label = vec![MicroCounts::default(); q];
    for i in 0..n {
        let mut inter = 0u64;
        let mut union = 0u64;
        for j in 0..q {
            let (p, y) = (pred[[i, j]] != 0, truth[[i, j]] != 0);
            match (p, y) {
                (true, true) => {
                    per_label[j].tp += 1;
                    inter += 1;
                    union += 1;
                }
                (true, false) => {
                    per_label[j].fp += 1;
                    union += 1;
                }
                (false, true) => {
                    per_label[j].fn_ += 1;
                    union += 1;
                }
                (false, false) => per_label[j].tn += 1,
            }
        }
        acc_sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }

    let mut total = MicroCounts::default();
    for c in &per_label {
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
        total.tn += c.tn;
    }
    let precision = ratio(total.tp, total.tp + total.fp);
    let recall = ratio(total.tp, total.tp + total.fn_);
    let mi_f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassificationMetrics {
        acc: if n == 0 { 0.0 } else { acc_sum / n as f64 },
        precision,
        recall,
        mi_f1,
        confusion: total,
        per_label: per_label
            .into_iter()
            .zip(label_names)
            .map(|(counts, name)| LabelStats {
                name: name.clone(),
                precision: ratio(counts.tp, counts.tp + counts.fp),
                recall: ratio(counts.tp, counts.tp + counts.fn_),
                counts,
            })
            .collect(),
    }
}

/// Spearman rank correlation with average ranks for ties; 0 when either side
/// is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return 0.0;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("non-finite rank input"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Mean silhouette over all points with Euclidean distance. Points in
/// singleton clusters score 0, as does the degenerate single-cluster case.
pub fn silhouette(points: &[Vec<f64>], cluster: &[usize]) -> f64 {
    assert_eq!(points.len(), cluster.len());
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let clusters: std::collections::BTreeSet<usize> = cluster.iter().copied().collect();
    if clusters.len() < 2 {
        return 0.0;
    }
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = cluster[i];
        let own_size = cluster.iter().filter(|&&c| c == own).count();
        if own_size == 1 {
            continue; // contributes 0
        }
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            let members: Vec<usize> = (0..n).filter(|&k| cluster[k] == c && k != i).collect();
            if members.is_empty() {
                continue;
            }
            let mean: f64 = members
                .iter()
                .map(|&k| dist(&points[i], &points[k]))
                .sum::<f64>()
                / members.len() as f64;
            if c == own {
                a = mean;
            } else if mean < b {
                b = mean;
            }
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Pearson correlation matrix over label columns of a binary matrix. Any pair
/// involving a constant column is set to 0.
pub fn label_correlation(m: &Array2<u8>) -> Array2<f64> {
    let (n, q) = m.dim();
    let mut out = Array2::<f64>::zeros((q, q));
    if n == 0 {
        return out;
    }
    let cols: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..n).map(|i| m[[i, j]] as f64).collect())
        .collect();
    for a in 0..q {
        for b in 0..q {
            out[[a, b]] = pearson(&cols[a], &cols[b]);
        }
    }
    out
}

/// Cosine similarity between two matrices flattened to vectors; 0 when
/// either has zero norm.
pub fn matrix_cosine(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Label co-occurrence counts: entry (a, b) is the number of samples where
/// both labels are active.
pub fn cooccurrence(labels: &Array2<u8>) -> Array2<u64> {
    let (n, q) = labels.dim();
    let mut out = Array2::<u64>::zeros((q, q));
    for i in 0..n {
        for a in 0..q {
            if labels[[i, a]] == 0 {
                continue;
            }
            for b in 0..q {
                if labels[[i, b]] != 0 {
                    out[[a, b]] += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub samples: usize,
    #[serde(flatten)]
    pub classification: ClassificationMetrics,
    pub mean_gate_train: Option<f64>,
    pub mean_gate_inference: f64,
    pub silhouette: Option<f64>,
    pub sigma_noise_spearman: Option<f64>,
    pub cooccurrence: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "split {}: {} samples\n  acc {:.4}  precision {:.4}  recall {:.4}  miF1 {:.4}\n",
            self.split,
            self.samples,
            self.classification.acc,
            self.classification.precision,
            self.classification.recall,
            self.classification.mi_f1
        ));
        out.push_str(&format!(
            "  confusion tp {} fp {} fn {} tn {}\n",
            self.classification.confusion.tp,
            self.classification.confusion.fp,
            self.classification.confusion.fn_,
            self.classification.confusion.tn
        ));
        for l in &self.classification.per_label {
            out.push_str(&format!(
                "  label {:<12} precision {:.4} recall {:.4} (tp {} fp {} fn {})\n",
                l.name, l.precision, l.recall, l.counts.tp, l.counts.fp, l.counts.fn_
            ));
        }
        if let Some(d) = self.mean_gate_train {
            out.push_str(&format!("  mean gate (train rule) {d:.4}\n"));
        }
        out.push_str(&format!(
            "  mean gate (inference rule) {:.4}\n",
            self.mean_gate_inference
        ));
        if let Some(s) = self.silhouette {
            out.push_str(&format!("  embedding silhouette {s:.4}\n"));
        }
        if let Some(s) = self.sigma_noise_spearman {
            out.push_str(&format!("  spearman(sigma norm, planted noise) {s:.4}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(q: usize) -> Vec<String> {
        (0..q).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn frozen_confusion_example() {
        let truth = arr2(&[[1u8, 0, 1], [0, 1, 0]]);
        let pred = arr2(&[[1u8, 0, 0], [0, 1, 1]]);
        let m = classification_metrics(&pred, &truth, &names(3));
        assert_eq!(m.confusion.tp, 2);
        assert_eq!(m.confusion.fp, 1);
        assert_eq!(m.confusion.fn_, 1);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mi_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_degenerate_predictions() {
        let truth = arr2(&[[1u8, 0], [0, 1], [1, 1]]);
        let m = classification_metrics(&truth, &truth, &names(2));
        assert_eq!((m.acc, m.precision, m.recall, m.mi_f1), (1.0, 1.0, 1.0, 1.0));

        let zeros = Array2::<u8>::zeros((3, 2));
        let m = classification_metrics(&zeros, &truth, &names(2));
        assert_eq!((m.precision, m.recall, m.mi_f1), (0.0, 0.0, 0.0));

        // empty prediction vs empty truth counts as a full match
        let truth = arr2(&[[0u8, 0]]);
        let m = classification_metrics(&zeros.slice(ndarray::s![0..1, ..]).to_owned(), &truth, &names(2));
        assert_eq!(m.acc, 1.0);
    }

    // deliberately separate implementation: per-sample label sets and loops
    fn oracle(pred: &Array2<u8>, truth: &Array2<u8>) -> (f64, f64, f64, f64) {
        let (n, q) = pred.dim();
        let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
        let mut acc = 0.0;
        for i in 0..n {
            let ps: std::collections::HashSet<usize> =
                (0..q).filter(|&j| pred[[i, j]] == 1).collect();
            let ts: std::collections::HashSet<usize> =
                (0..q).filter(|&j| truth[[i, j]] == 1).collect();
            let inter = ps.intersection(&ts).count();
            let union = ps.union(&ts).count();
            acc += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            tp += inter as u64;
            fp += (ps.len() - inter) as u64;
            fnn += (ts.len() - inter) as u64;
        }
        acc /= n as f64;
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fnn == 0 { 0.0 } else { tp as f64 / (tp + fnn) as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (acc, p, r, f1)
    }

    #[test]
    fn matches_brute_force_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let q = rng.gen_range(1..8);
            let pred = Array2::from_shape_fn((n, q), |_| rng.gen_range(0..=1u8));
            let truth = Array2::from_shape_fn((n, q), |_| rng.gen_range(0..=1u8));
            let m = classification_metrics(&pred, &truth, &names(q));
            let (acc, p, r, f1) = oracle(&pred, &truth);
            assert!((m.acc - acc).abs() < 1e-12);
            assert!((m.precision - p).abs() < 1e-12);
            assert!((m.recall - r).abs() < 1e-12);
            assert!((m.mi_f1 - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20;
        let pred = Array2::from_shape_fn((n, 4), |_| rng.gen_range(0..=1u8));
        let truth = Array2::from_shape_fn((n, 4), |_| rng.gen_range(0..=1u8));
        let base = classification_metrics(&pred, &truth, &names(4));
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.swap(3, 11);
        let perm = |m: &Array2<u8>| {
            Array2::from_shape_fn((n, 4), |(i, j)| m[[order[i], j]])
        };
        let shuffled = classification_metrics(&perm(&pred), &perm(&truth), &names(4));
        assert_eq!(base.acc, shuffled.acc);
        assert_eq!(base.confusion, shuffled.confusion);
        assert_eq!(base.mi_f1, shuffled.mi_f1);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), 0.0);
        // ties get average ranks: x = [1,1,2] -> ranks [1.5, 1.5, 3]
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!((r - 1.5 / 3.0f64.sqrt()).abs() < 1e-12, "{r}");
    }

    #[test]
    fn silhouette_separates_tight_clusters() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.1],
            vec![10.0, 10.0],
            vec![10.0, 10.1],
        ];
        let s = silhouette(&points, &[0, 0, 1, 1]);
        assert!(s > 0.95, "{s}");

        // mixed assignment scores poorly
        let s_bad = silhouette(&points, &[0, 1, 0, 1]);
        assert!(s_bad < 0.0, "{s_bad}");

        // single cluster or singleton-only structure degenerates to 0
        assert_eq!(silhouette(&points, &[0, 0, 0, 0]), 0.0);
        let s_single = silhouette(&points[..2].to_vec().as_slice(), &[0, 1]);
        assert_eq!(s_single, 0.0);
    }

    #[test]
    fn label_correlation_cases() {
        // perfectly co-occurring labels
        let m = arr2(&[[1u8, 1], [0, 0], [1, 1], [0, 0]]);
        let c = label_correlation(&m);
        assert!((c[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((c[[0, 0]] - 1.0).abs() < 1e-12);

        // constant column zeroes its pairs
        let m = arr2(&[[1u8, 1], [1, 0], [1, 1]]);
        let c = label_correlation(&m);
        assert_eq!(c[[0, 0]], 0.0);
        assert_eq!(c[[0, 1]], 0.0);
        assert_eq!(c[[1, 0]], 0.0);
        assert!((c[[1, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_labels_decorrelate() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let m = Array2::from_shape_fn((10000, 3), |_| u8::from(rng.gen_bool(0.4)));
        let c = label_correlation(&m);
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert!(c[[a, b]].abs() < 0.05, "corr[{a},{b}] = {}", c[[a, b]]);
                }
            }
        }
        let cos = matrix_cosine(&c, &c);
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cooccurrence_counts() {
        let m = arr2(&[[1u8, 1, 0], [1, 0, 0], [0, 1, 1]]);
        let c = cooccurrence(&m);
        assert_eq!(c[[0, 0]], 2);
        assert_eq!(c[[0, 1]], 1);
        assert_eq!(c[[1, 2]], 1);
        assert_eq!(c[[2, 0]], 0);
    }

    #[test]
    fn report_serializes_round_trip() {
        let truth = arr2(&[[1u8, 0], [0, 1]]);
        let report = MetricsReport {
            split: "val".into(),
            samples: 2,
            classification: classification_metrics(&truth, &truth, &names(2)),
            mean_gate_train: Some(0.1),
            mean_gate_inference: 0.4,
            silhouette: None,
            sigma_noise_spearman: Some(0.7),
            cooccurrence: vec![vec![1, 0], vec![0, 1]],
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.split, "val");
        assert_eq!(back.classification.confusion.tp, 2);
        assert!(back.table().contains("miF1"));
    }
}
