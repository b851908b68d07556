//! Dataset types, the on-disk format, batching, and the synthetic generator.
//!
//! A dataset directory holds `manifest.json` plus one `<split>.jsonl` file per
//! split, one record per line. Records spell features as nested arrays of
//! decimal numbers so the format stays language-agnostic and round-trips
//! bit-for-bit (serde_json emits shortest-round-trip floats).

use crate::error::{EmorecError, Result};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

pub const MODALITY_NAMES: [&str; 3] = ["visual", "audio", "text"];

#[derive(Debug, Clone)]
pub struct MultimodalSample {
    pub id: String,
    /// Multi-hot emotion labels, each 0 or 1.
    pub labels: Vec<u8>,
    /// Frame features per modality, `[frames x dim]`, canonical order v/a/t.
    pub feats: [Array2<f64>; 3],
    /// Free-form metadata. Synthetic samples store the planted noise level
    /// under "noise" and per-label intensities under "intensity".
    pub meta: Option<BTreeMap<String, serde_json::Value>>,
}

impl MultimodalSample {
    pub fn planted_noise(&self) -> Option<f64> {
        self.meta.as_ref()?.get("noise")?.as_f64()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModalityDims {
    pub visual: usize,
    pub audio: usize,
    pub text: usize,
}

impl ModalityDims {
    pub fn as_array(&self) -> [usize; 3] {
        [self.visual, self.audio, self.text]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub q: usize,
    pub label_names: Vec<String>,
    pub dims: ModalityDims,
    /// True when every sample has equal sequence lengths across modalities.
    pub aligned: bool,
    pub splits: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    labels: Vec<u8>,
    visual: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<BTreeMap<String, serde_json::Value>>,
}

fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str, id: &str) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(EmorecError::Validation(format!(
            "sample {id}: {what} has no frames"
        )));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(EmorecError::Validation(format!(
            "sample {id}: {what} rows have unequal widths"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat)
        .map_err(|e| EmorecError::Shape(format!("sample {id}: {what}: {e}")))
}

impl From<&MultimodalSample> for SampleRecord {
    fn from(s: &MultimodalSample) -> Self {
        SampleRecord {
            id: s.id.clone(),
            labels: s.labels.clone(),
            visual: matrix_to_rows(&s.feats[0]),
            audio: matrix_to_rows(&s.feats[1]),
            text: matrix_to_rows(&s.feats[2]),
            meta: s.meta.clone(),
        }
    }
}

impl SampleRecord {
    fn into_sample(self) -> Result<MultimodalSample> {
        let id = self.id;
        Ok(MultimodalSample {
            feats: [
                rows_to_matrix(&self.visual, "visual", &id)?,
                rows_to_matrix(&self.audio, "audio", &id)?,
                rows_to_matrix(&self.text, "text", &id)?,
            ],
            labels: self.labels,
            meta: self.meta,
            id,
        })
    }
}

/// A loaded dataset. Numeric invariants are checked lazily on first access to
/// each sample; structural problems (bad JSON, split/record mismatches) fail
/// at load time.
pub struct Dataset {
    pub manifest: Manifest,
    samples: HashMap<String, MultimodalSample>,
    ids_in_order: Vec<String>,
    index_of: HashMap<String, usize>,
    validated: RefCell<BTreeSet<String>>,
}

impl Dataset {
    pub fn from_parts(manifest: Manifest, samples: Vec<MultimodalSample>) -> Result<Dataset> {
        let mut map = HashMap::new();
        for s in samples {
            if map.insert(s.id.clone(), s).is_some() {
                return Err(EmorecError::Format("duplicate sample id".into()));
            }
        }
        let mut seen = BTreeSet::new();
        let mut ids_in_order = Vec::new();
        for (split, ids) in &manifest.splits {
            for id in ids {
                if !seen.insert(id.clone()) {
                    return Err(EmorecError::Format(format!(
                        "sample id {id} appears in more than one split"
                    )));
                }
                if !map.contains_key(id) {
                    return Err(EmorecError::Lookup(format!(
                        "split {split} lists unknown sample id {id}"
                    )));
                }
                ids_in_order.push(id.clone());
            }
        }
        if manifest.label_names.len() != manifest.q {
            return Err(EmorecError::Format(format!(
                "manifest lists {} label names for q = {}",
                manifest.label_names.len(),
                manifest.q
            )));
        }
        let index_of = ids_in_order
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Dataset {
            manifest,
            samples: map,
            ids_in_order,
            index_of,
            validated: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path).map_err(|e| {
                EmorecError::Format(format!("cannot read {}: {e}", manifest_path.display()))
            })?,
        )?;
        let mut samples = Vec::new();
        for (split, ids) in &manifest.splits {
            let path = dir.join(format!("{split}.jsonl"));
            let file = std::fs::File::open(&path).map_err(|e| {
                EmorecError::Format(format!("cannot open {}: {e}", path.display()))
            })?;
            let mut in_file = BTreeSet::new();
            for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
                    EmorecError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
                in_file.insert(rec.id.clone());
                samples.push(rec.into_sample()?);
            }
            let listed: BTreeSet<String> = ids.iter().cloned().collect();
            if listed != in_file {
                return Err(EmorecError::Format(format!(
                    "{}: record ids do not match the manifest split list",
                    path.display()
                )));
            }
        }
        Dataset::from_parts(manifest, samples)
    }

    /// Fetch a sample, validating its numeric invariants on first access.
    pub fn get(&self, id: &str) -> Result<&MultimodalSample> {
        let s = self
            .samples
            .get(id)
            .ok_or_else(|| EmorecError::Lookup(format!("unknown sample id {id}")))?;
        if self.validated.borrow().contains(id) {
            return Ok(s);
        }
        self.validate_sample(s)?;
        self.validated.borrow_mut().insert(id.to_string());
        Ok(s)
    }

    fn validate_sample(&self, s: &MultimodalSample) -> Result<()> {
        let m = &self.manifest;
        if s.labels.len() != m.q {
            return Err(EmorecError::Validation(format!(
                "sample {}: {} labels, expected q = {}",
                s.id,
                s.labels.len(),
                m.q
            )));
        }
        if s.labels.iter().any(|&l| l > 1) {
            return Err(EmorecError::Validation(format!(
                "sample {}: labels must be 0 or 1",
                s.id
            )));
        }
        let dims = m.dims.as_array();
        for (mi, feat) in s.feats.iter().enumerate() {
            if feat.nrows() == 0 {
                return Err(EmorecError::Validation(format!(
                    "sample {}: {} has no frames",
                    s.id, MODALITY_NAMES[mi]
                )));
            }
            if feat.ncols() != dims[mi] {
                return Err(EmorecError::Validation(format!(
                    "sample {}: {} dim {} != manifest dim {}",
                    s.id,
                    MODALITY_NAMES[mi],
                    feat.ncols(),
                    dims[mi]
                )));
            }
            if feat.iter().any(|v| !v.is_finite()) {
                return Err(EmorecError::Validation(format!(
                    "sample {}: {} contains non-finite values",
                    s.id, MODALITY_NAMES[mi]
                )));
            }
        }
        Ok(())
    }

    pub fn split_ids(&self, split: &str) -> Result<&[String]> {
        self.manifest
            .splits
            .get(split)
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                EmorecError::Lookup(format!(
                    "unknown split {split} (have: {})",
                    self.manifest
                        .splits
                        .keys()
                        .cloned()
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }

    /// Stable global index of a sample (position in manifest split order).
    pub fn global_index(&self, id: &str) -> Result<usize> {
        self.index_of
            .get(id)
            .copied()
            .ok_or_else(|| EmorecError::Lookup(format!("unknown sample id {id}")))
    }

    pub fn len(&self) -> usize {
        self.ids_in_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids_in_order.is_empty()
    }
}

pub fn write_dataset(dir: &Path, manifest: &Manifest, samples: &[MultimodalSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let by_id: HashMap<&str, &MultimodalSample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let manifest_json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join("manifest.json"), manifest_json + "\n")?;
    for (split, ids) in &manifest.splits {
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("{split}.jsonl")),
        )?);
        for id in ids {
            let s = by_id.get(id.as_str()).ok_or_else(|| {
                EmorecError::Lookup(format!("split {split} lists unknown sample id {id}"))
            })?;
            let rec = SampleRecord::from(*s);
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

/// A padded minibatch. Feature blocks are zero-padded to the longest sequence
/// in the batch per modality; `masks` mark valid frames. Downstream code must
/// consult `lens`/`masks` so padded frames never reach any computation.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Global dataset indices, aligned with `ids`.
    pub indices: Vec<usize>,
    /// Multi-hot labels as f64, `[batch x q]`.
    pub labels: Array2<f64>,
    pub feats: [Array3<f64>; 3],
    pub masks: [Array2<bool>; 3],
    pub lens: [Vec<usize>; 3],
    /// Planted noise levels where sample metadata carries them.
    pub noise: Vec<Option<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Valid (unpadded) frames of one sample in one modality.
    pub fn sample_frames(&self, i: usize, modality: usize) -> Array2<f64> {
        let len = self.lens[modality][i];
        self.feats[modality]
            .slice(ndarray::s![i, ..len, ..])
            .to_owned()
    }
}

/// Deterministically batch a split. With `shuffle_seed` set, the id order is
/// permuted by a seeded RNG first; the multiset of ids is preserved either
/// way and a trailing partial batch is kept.
pub fn make_batches(
    ds: &Dataset,
    split: &str,
    batch_size: usize,
    max_seq_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(EmorecError::Config("batch_size must be >= 1".into()));
    }
    let mut ids: Vec<String> = ds.split_ids(split)?.to_vec();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
    }
    let q = ds.manifest.q;
    let dims = ds.manifest.dims.as_array();
    let mut out = Vec::with_capacity(ids.len().div_ceil(batch_size));
    for chunk in ids.chunks(batch_size) {
        let n = chunk.len();
        let mut lens: [Vec<usize>; 3] = [vec![0; n], vec![0; n], vec![0; n]];
        for (i, id) in chunk.iter().enumerate() {
            let s = ds.get(id)?;
            for m in 0..3 {
                lens[m][i] = s.feats[m].nrows().min(max_seq_len);
            }
        }
        let mut feats: [Array3<f64>; 3] = std::array::from_fn(|m| {
            Array3::zeros((n, *lens[m].iter().max().unwrap(), dims[m]))
        });
        let mut masks: [Array2<bool>; 3] =
            std::array::from_fn(|m| Array2::from_elem((n, *lens[m].iter().max().unwrap()), false));
        let mut labels = Array2::<f64>::zeros((n, q));
        let mut indices = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for (i, id) in chunk.iter().enumerate() {
            let s = ds.get(id)?;
            for m in 0..3 {
                let len = lens[m][i];
                feats[m]
                    .slice_mut(ndarray::s![i, ..len, ..])
                    .assign(&s.feats[m].slice(ndarray::s![..len, ..]));
                for f in 0..len {
                    masks[m][(i, f)] = true;
                }
            }
            for (j, &l) in s.labels.iter().enumerate() {
                labels[(i, j)] = l as f64;
            }
            indices.push(ds.global_index(id)?);
            noise.push(s.planted_noise());
        }
        out.push(Batch {
            ids: chunk.to_vec(),
            indices,
            labels,
            feats,
            masks,
            lens,
            noise,
        });
    }
    Ok(out)
}

/// Synthetic data with planted structure: each (modality, label) pair owns a
/// fixed random unit direction; every frame of a sample is the intensity-
/// weighted sum of directions for its active labels plus isotropic Gaussian
/// noise scaled by a per-sample level drawn from `noise`. The noise level and
/// intensities land in sample metadata so calibration claims can be checked
/// against ground truth.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub name: String,
    pub n: usize,
    pub q: usize,
    pub dims: [usize; 3],
    /// Inclusive frame-count range per sequence.
    pub seq_len: (usize, usize),
    pub aligned: bool,
    /// Per-label Bernoulli marginals.
    pub marginals: Vec<f64>,
    /// Per-sample noise level range (inclusive).
    pub noise: (f64, f64),
    /// Per-(sample, label) signal intensity range (inclusive).
    pub intensity: (f64, f64),
    /// Train/val fractions; the remainder is the test split.
    pub split_fracs: (f64, f64),
    pub seed: u64,
}

pub fn default_marginals(q: usize) -> Vec<f64> {
    (0..q)
        .map(|j| {
            if q == 1 {
                0.35
            } else {
                0.35 - 0.15 * j as f64 / (q - 1) as f64
            }
        })
        .collect()
}

impl SynthConfig {
    pub fn new(n: usize, q: usize, seed: u64) -> Self {
        SynthConfig {
            name: "synthetic".into(),
            n,
            q,
            dims: [8, 6, 10],
            seq_len: (4, 8),
            aligned: false,
            marginals: default_marginals(q),
            noise: (0.1, 1.0),
            intensity: (0.8, 1.2),
            split_fracs: (0.7, 0.15),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EmorecError::Config(m));
        if self.n < 3 {
            return err("need at least 3 samples to populate all splits".into());
        }
        if self.q == 0 {
            return err("q must be >= 1".into());
        }
        if self.dims.iter().any(|&d| d == 0) {
            return err("feature dims must be >= 1".into());
        }
        if self.seq_len.0 == 0 || self.seq_len.0 > self.seq_len.1 {
            return err(format!("bad seq_len range {:?}", self.seq_len));
        }
        if self.marginals.len() != self.q {
            return err(format!(
                "{} marginals for q = {}",
                self.marginals.len(),
                self.q
            ));
        }
        if self.marginals.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return err("marginals must lie in [0, 1]".into());
        }
        if self.noise.0 < 0.0 || self.noise.0 > self.noise.1 {
            return err(format!("bad noise range {:?}", self.noise));
        }
        if self.intensity.0 > self.intensity.1 {
            return err(format!("bad intensity range {:?}", self.intensity));
        }
        let (ft, fv) = self.split_fracs;
        if ft <= 0.0 || fv <= 0.0 || ft + fv >= 1.0 {
            return err("split fractions must be positive and leave room for a test split".into());
        }
        Ok(())
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Manifest, Vec<MultimodalSample>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // fixed unit direction per (modality, label)
    let mut dirs: Vec<Vec<ndarray::Array1<f64>>> = Vec::with_capacity(3);
    for m in 0..3 {
        let mut per_label = Vec::with_capacity(cfg.q);
        for _ in 0..cfg.q {
            let mut v = crate::optim::normal(&mut rng, &[cfg.dims[m]], 1.0)
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let norm = v.dot(&v).sqrt();
            v.mapv_inplace(|t| t / norm);
            per_label.push(v);
        }
        dirs.push(per_label);
    }

    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let labels: Vec<u8> = cfg
            .marginals
            .iter()
            .map(|&p| u8::from(rng.gen::<f64>() < p))
            .collect();
        let eps = rng.gen_range(cfg.noise.0..=cfg.noise.1);
        let intensity: Vec<f64> = (0..cfg.q)
            .map(|_| rng.gen_range(cfg.intensity.0..=cfg.intensity.1))
            .collect();
        let shared_len = rng.gen_range(cfg.seq_len.0..=cfg.seq_len.1);
        let mut feats: Vec<Array2<f64>> = Vec::with_capacity(3);
        for m in 0..3 {
            let len = if cfg.aligned {
                shared_len
            } else {
                rng.gen_range(cfg.seq_len.0..=cfg.seq_len.1)
            };
            let mut signal = ndarray::Array1::<f64>::zeros(cfg.dims[m]);
            for j in 0..cfg.q {
                if labels[j] == 1 {
                    signal = signal + &(&dirs[m][j] * intensity[j]);
                }
            }
            let mut mat = Array2::<f64>::zeros((len, cfg.dims[m]));
            for f in 0..len {
                let noise_vec = crate::optim::normal(&mut rng, &[cfg.dims[m]], 1.0)
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let row = &signal + &(noise_vec * eps);
                mat.row_mut(f).assign(&row);
            }
            feats.push(mat);
        }
        let mut meta = BTreeMap::new();
        meta.insert("noise".to_string(), serde_json::json!(eps));
        meta.insert("intensity".to_string(), serde_json::json!(intensity));
        let feats: [Array2<f64>; 3] = feats.try_into().unwrap();
        samples.push(MultimodalSample {
            id: format!("s{i:06}"),
            labels,
            feats,
            meta: Some(meta),
        });
    }

    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    ids.shuffle(&mut rng);
    let n_train = ((cfg.n as f64) * cfg.split_fracs.0).round() as usize;
    let n_val = ((cfg.n as f64) * cfg.split_fracs.1).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= cfg.n {
        return Err(EmorecError::Config(format!(
            "split fractions {:?} leave an empty split for n = {}",
            cfg.split_fracs, cfg.n
        )));
    }
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), ids[..n_train].to_vec());
    splits.insert("val".to_string(), ids[n_train..n_train + n_val].to_vec());
    splits.insert("test".to_string(), ids[n_train + n_val..].to_vec());

    let manifest = Manifest {
        name: cfg.name.clone(),
        q: cfg.q,
        label_names: (0..cfg.q).map(|j| format!("label_{j}")).collect(),
        dims: ModalityDims {
            visual: cfg.dims[0],
            audio: cfg.dims[1],
            text: cfg.dims[2],
        },
        aligned: cfg.aligned,
        splits,
    };
    Ok((manifest, samples))
}

/// Fixed (modality, label) directions for a generator seed; the independent
/// oracle for tests that check planted structure.
pub fn planted_directions(cfg: &SynthConfig) -> Vec<Vec<ndarray::Array1<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dirs = Vec::with_capacity(3);
    for m in 0..3 {
        let mut per_label = Vec::with_capacity(cfg.q);
        for _ in 0..cfg.q {
            let mut v = crate::optim::normal(&mut rng, &[cfg.dims[m]], 1.0)
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let norm = v.dot(&v).sqrt();
            v.mapv_inplace(|t| t / norm);
            per_label.push(v);
        }
        dirs.push(per_label);
    }
    dirs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SynthConfig {
        let mut cfg = SynthConfig::new(20, 3, 9);
        cfg.dims = [4, 3, 5];
        cfg.seq_len = (2, 4);
        cfg
    }

    #[test]
    fn generation_is_seed_deterministic_and_round_trips() {
        let cfg = tiny_config();
        let (m1, s1) = generate_synthetic(&cfg).unwrap();
        let (m2, s2) = generate_synthetic(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.labels, b.labels);
            for m in 0..3 {
                assert_eq!(a.feats[m], b.feats[m]);
            }
        }

        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &m1, &s1).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for s in &s1 {
            let loaded = ds.get(&s.id).unwrap();
            for m in 0..3 {
                // bit-for-bit: every f64 survives the decimal round trip
                assert_eq!(loaded.feats[m], s.feats[m], "sample {} modality {m}", s.id);
            }
            assert_eq!(loaded.labels, s.labels);
        }

        // regenerating and rewriting produces byte-identical files
        let dir2 = tempfile::tempdir().unwrap();
        let (m3, s3) = generate_synthetic(&cfg).unwrap();
        write_dataset(dir2.path(), &m3, &s3).unwrap();
        for f in ["manifest.json", "train.jsonl", "val.jsonl", "test.jsonl"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical generations");
        }
    }

    #[test]
    fn label_marginals_match_request_at_n2000() {
        let mut cfg = SynthConfig::new(2000, 4, 123);
        cfg.dims = [3, 3, 3];
        cfg.seq_len = (2, 3);
        let (_, samples) = generate_synthetic(&cfg).unwrap();
        for j in 0..cfg.q {
            let freq = samples.iter().filter(|s| s.labels[j] == 1).count() as f64 / 2000.0;
            assert!(
                (freq - cfg.marginals[j]).abs() <= 0.05,
                "label {j}: freq {freq} vs marginal {}",
                cfg.marginals[j]
            );
        }
    }

    #[test]
    fn zero_noise_single_label_frames_equal_the_planted_direction() {
        let mut cfg = SynthConfig::new(10, 1, 77);
        cfg.marginals = vec![1.0];
        cfg.noise = (0.0, 0.0);
        cfg.intensity = (1.0, 1.0);
        cfg.dims = [4, 4, 4];
        let dirs = planted_directions(&cfg);
        let (_, samples) = generate_synthetic(&cfg).unwrap();
        for s in &samples {
            for m in 0..3 {
                for row in s.feats[m].rows() {
                    assert_eq!(row.to_vec(), dirs[m][0].to_vec(), "sample {}", s.id);
                }
            }
        }
    }

    #[test]
    fn batches_keep_sizes_and_id_multiset() {
        let cfg = tiny_config();
        let (manifest, samples) = generate_synthetic(&cfg).unwrap();
        let train_ids: Vec<String> = manifest.splits["train"].clone();
        let ds = Dataset::from_parts(manifest, samples).unwrap();
        let batches = make_batches(&ds, "train", 2, 64, None).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        let expect_full = train_ids.len() / 2;
        assert!(sizes[..expect_full].iter().all(|&s| s == 2));
        assert_eq!(sizes.iter().sum::<usize>(), train_ids.len());

        let shuffled = make_batches(&ds, "train", 2, 64, Some(5)).unwrap();
        let mut seen: Vec<String> = shuffled.iter().flat_map(|b| b.ids.clone()).collect();
        let mut expected = train_ids.clone();
        seen.sort();
        expected.sort();
        assert_eq!(seen, expected);

        let again = make_batches(&ds, "train", 2, 64, Some(5)).unwrap();
        let order_a: Vec<String> = shuffled.iter().flat_map(|b| b.ids.clone()).collect();
        let order_b: Vec<String> = again.iter().flat_map(|b| b.ids.clone()).collect();
        assert_eq!(order_a, order_b, "same seed must give the same order");
    }

    #[test]
    fn five_samples_batch_two_gives_2_2_1() {
        let mut cfg = tiny_config();
        cfg.n = 8;
        cfg.split_fracs = (0.625, 0.25); // 5 train, 2 val, 1 test
        let (manifest, samples) = generate_synthetic(&cfg).unwrap();
        assert_eq!(manifest.splits["train"].len(), 5);
        let ds = Dataset::from_parts(manifest, samples).unwrap();
        let batches = make_batches(&ds, "train", 2, 64, None).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn masks_mark_exactly_the_valid_frames() {
        let cfg = tiny_config();
        let (manifest, samples) = generate_synthetic(&cfg).unwrap();
        let ds = Dataset::from_parts(manifest, samples).unwrap();
        for b in make_batches(&ds, "val", 3, 64, None).unwrap() {
            for m in 0..3 {
                for i in 0..b.len() {
                    let len = b.lens[m][i];
                    for f in 0..b.masks[m].ncols() {
                        assert_eq!(b.masks[m][(i, f)], f < len);
                    }
                    // padded region is exactly zero
                    for f in len..b.feats[m].shape()[1] {
                        assert!(b.feats[m].slice(ndarray::s![i, f, ..]).iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn non_finite_values_fail_validation_on_access() {
        let cfg = tiny_config();
        let (manifest, mut samples) = generate_synthetic(&cfg).unwrap();
        let victim = samples[0].id.clone();
        samples[0].feats[1][(0, 0)] = f64::NAN;
        let ds = Dataset::from_parts(manifest, samples).unwrap();
        let err = ds.get(&victim).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn unknown_ids_are_lookup_errors() {
        let cfg = tiny_config();
        let (manifest, samples) = generate_synthetic(&cfg).unwrap();
        let ds = Dataset::from_parts(manifest, samples).unwrap();
        assert!(ds.get("nope").is_err());
        assert!(make_batches(&ds, "nope", 2, 64, None).is_err());
    }

    #[test]
    fn truncation_respects_max_seq_len() {
        let cfg = tiny_config();
        let (manifest, samples) = generate_synthetic(&cfg).unwrap();
        let ds = Dataset::from_parts(manifest, samples).unwrap();
        for b in make_batches(&ds, "train", 4, 2, None).unwrap() {
            for m in 0..3 {
                assert!(b.lens[m].iter().all(|&l| l <= 2));
                assert!(b.feats[m].shape()[1] <= 2);
            }
        }
    }
}
