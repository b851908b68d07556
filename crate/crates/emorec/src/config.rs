//! Run configuration: a flat `key = value` document, typed accessors, and
//! validation. Unknown keys are errors so typos never silently fall back to
//! defaults.

use crate::error::{EmorecError, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Flat key-value config document. Lines are `key = value`; blank lines and
/// `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig(pub BTreeMap<String, String>);

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                EmorecError::Format(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(EmorecError::Format(format!(
                    "config line {}: empty key",
                    lineno + 1
                )));
            }
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(EmorecError::Format(format!(
                    "config line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        Ok(FlatConfig(map))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCfg {
    /// Transformer layers per modality: visual, audio, text.
    pub layers: [usize; 3],
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionCfg {
    /// Width of each pooled per-label feature; split in half into mu and sigma.
    pub d_h: usize,
    /// Shared projection width for label-query attention.
    pub proj_dim: usize,
    /// Width of the trainable label embeddings.
    pub label_dim: usize,
    /// When false, attention logits come from a per-frame linear head instead
    /// of label-embedding queries (the label embeddings go unused).
    pub esm_enabled: bool,
    pub info_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclCfg {
    pub enabled: bool,
    pub tau: f64,
    pub queue_size: usize,
    pub use_mu_only: bool,
    pub use_sigma_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsCfg {
    pub drop_mu: bool,
    pub drop_sigma: bool,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionCfg {
    /// Swap the fusion gate: weight the mu branch by (1 - d) instead of d.
    pub swap_gate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OclCfg {
    pub enabled: bool,
    pub temperature: f64,
    /// Keep only the S<->R KL pair.
    pub only_sr: bool,
    /// Keep only the D<->R KL pair.
    pub only_dr: bool,
    /// Keep only a D<->S KL pair (off by default; not part of the standard
    /// objective).
    pub only_ds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCfg {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: f64,
    pub seed: u64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub max_seq_len: usize,
    pub encoder: EncoderCfg,
    pub emotion: EmotionCfg,
    pub scl: SclCfg,
    pub cls: ClsCfg,
    pub fusion: FusionCfg,
    pub ocl: OclCfg,
    pub train: TrainCfg,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            max_seq_len: 64,
            encoder: EncoderCfg {
                layers: [3, 3, 3],
                width: 64,
                heads: 4,
                ff_width: 128,
                dropout: 0.0,
            },
            emotion: EmotionCfg {
                d_h: 128,
                proj_dim: 256,
                label_dim: 64,
                esm_enabled: true,
                info_hidden: 256,
            },
            scl: SclCfg {
                enabled: true,
                tau: 0.1,
                queue_size: 8192,
                use_mu_only: false,
                use_sigma_only: false,
            },
            cls: ClsCfg {
                drop_mu: false,
                drop_sigma: false,
                hidden: 256,
            },
            fusion: FusionCfg { swap_gate: false },
            ocl: OclCfg {
                enabled: true,
                temperature: 1.0,
                only_sr: false,
                only_dr: false,
                only_ds: false,
            },
            train: TrainCfg {
                lambda: 0.1,
                beta: 0.8,
                gamma: 0.1,
                lr: 2e-5,
                epochs: 30,
                batch_size: 128,
                warmup: 0.1,
                seed: 42,
                threshold: 0.5,
            },
        }
    }
}

struct Getter<'a> {
    map: &'a BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl<'a> Getter<'a> {
    fn raw(&mut self, key: &str) -> Option<&'a str> {
        let v = self.map.get(key).map(|s| s.as_str());
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| EmorecError::Config(format!("{key}: expected integer, got `{s}`"))),
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| EmorecError::Config(format!("{key}: expected integer, got `{s}`"))),
        }
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| EmorecError::Config(format!("{key}: expected number, got `{s}`"))),
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(s) => Err(EmorecError::Config(format!(
                "{key}: expected true/false, got `{s}`"
            ))),
        }
    }
}

impl Config {
    pub fn from_flat(flat: &FlatConfig) -> Result<Config> {
        let d = Config::default();
        let mut g = Getter {
            map: &flat.0,
            used: BTreeSet::new(),
        };
        let cfg = Config {
            max_seq_len: g.usize("data.max_seq_len", d.max_seq_len)?,
            encoder: EncoderCfg {
                layers: [
                    g.usize("encoder.layers.v", d.encoder.layers[0])?,
                    g.usize("encoder.layers.a", d.encoder.layers[1])?,
                    g.usize("encoder.layers.t", d.encoder.layers[2])?,
                ],
                width: g.usize("encoder.width", d.encoder.width)?,
                heads: g.usize("encoder.heads", d.encoder.heads)?,
                ff_width: g.usize("encoder.ff_width", d.encoder.ff_width)?,
                dropout: g.f64("encoder.dropout", d.encoder.dropout)?,
            },
            emotion: EmotionCfg {
                d_h: g.usize("emotion_space.d_h", d.emotion.d_h)?,
                proj_dim: g.usize("emotion_space.proj_dim", d.emotion.proj_dim)?,
                label_dim: g.usize("emotion_space.label_dim", d.emotion.label_dim)?,
                esm_enabled: g.bool("esm.enabled", d.emotion.esm_enabled)?,
                info_hidden: g.usize("info.hidden", d.emotion.info_hidden)?,
            },
            scl: SclCfg {
                enabled: g.bool("scl.enabled", d.scl.enabled)?,
                tau: g.f64("scl.tau", d.scl.tau)?,
                queue_size: g.usize("scl.queue_size", d.scl.queue_size)?,
                use_mu_only: g.bool("scl.use_mu_only", d.scl.use_mu_only)?,
                use_sigma_only: g.bool("scl.use_sigma_only", d.scl.use_sigma_only)?,
            },
            cls: ClsCfg {
                drop_mu: g.bool("cls.drop_mu", d.cls.drop_mu)?,
                drop_sigma: g.bool("cls.drop_sigma", d.cls.drop_sigma)?,
                hidden: g.usize("cls.hidden", d.cls.hidden)?,
            },
            fusion: FusionCfg {
                swap_gate: g.bool("fusion.swap_gate", d.fusion.swap_gate)?,
            },
            ocl: OclCfg {
                enabled: g.bool("ocl.enabled", d.ocl.enabled)?,
                temperature: g.f64("ocl.temperature", d.ocl.temperature)?,
                only_sr: g.bool("ocl.only_sr", d.ocl.only_sr)?,
                only_dr: g.bool("ocl.only_dr", d.ocl.only_dr)?,
                only_ds: g.bool("ocl.only_ds", d.ocl.only_ds)?,
            },
            train: TrainCfg {
                lambda: g.f64("train.lambda", d.train.lambda)?,
                beta: g.f64("train.beta", d.train.beta)?,
                gamma: g.f64("train.gamma", d.train.gamma)?,
                lr: g.f64("train.lr", d.train.lr)?,
                epochs: g.usize("train.epochs", d.train.epochs)?,
                batch_size: g.usize("train.batch_size", d.train.batch_size)?,
                warmup: g.f64("train.warmup", d.train.warmup)?,
                seed: g.u64("train.seed", d.train.seed)?,
                threshold: g.f64("train.threshold", d.train.threshold)?,
            },
        };
        let unknown: Vec<&String> = flat.0.keys().filter(|k| !g.used.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(EmorecError::Config(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("data.max_seq_len", self.max_seq_len.to_string());
        put("encoder.layers.v", self.encoder.layers[0].to_string());
        put("encoder.layers.a", self.encoder.layers[1].to_string());
        put("encoder.layers.t", self.encoder.layers[2].to_string());
        put("encoder.width", self.encoder.width.to_string());
        put("encoder.heads", self.encoder.heads.to_string());
        put("encoder.ff_width", self.encoder.ff_width.to_string());
        put("encoder.dropout", format_f64(self.encoder.dropout));
        put("emotion_space.d_h", self.emotion.d_h.to_string());
        put("emotion_space.proj_dim", self.emotion.proj_dim.to_string());
        put("emotion_space.label_dim", self.emotion.label_dim.to_string());
        put("esm.enabled", self.emotion.esm_enabled.to_string());
        put("info.hidden", self.emotion.info_hidden.to_string());
        put("scl.enabled", self.scl.enabled.to_string());
        put("scl.tau", format_f64(self.scl.tau));
        put("scl.queue_size", self.scl.queue_size.to_string());
        put("scl.use_mu_only", self.scl.use_mu_only.to_string());
        put("scl.use_sigma_only", self.scl.use_sigma_only.to_string());
        put("cls.drop_mu", self.cls.drop_mu.to_string());
        put("cls.drop_sigma", self.cls.drop_sigma.to_string());
        put("cls.hidden", self.cls.hidden.to_string());
        put("fusion.swap_gate", self.fusion.swap_gate.to_string());
        put("ocl.enabled", self.ocl.enabled.to_string());
        put("ocl.temperature", format_f64(self.ocl.temperature));
        put("ocl.only_sr", self.ocl.only_sr.to_string());
        put("ocl.only_dr", self.ocl.only_dr.to_string());
        put("ocl.only_ds", self.ocl.only_ds.to_string());
        put("train.lambda", format_f64(self.train.lambda));
        put("train.beta", format_f64(self.train.beta));
        put("train.gamma", format_f64(self.train.gamma));
        put("train.lr", format_f64(self.train.lr));
        put("train.epochs", self.train.epochs.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.warmup", format_f64(self.train.warmup));
        put("train.seed", self.train.seed.to_string());
        put("train.threshold", format_f64(self.train.threshold));
        FlatConfig(m)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(EmorecError::Config(msg));
        if self.max_seq_len == 0 {
            return err("data.max_seq_len must be >= 1".into());
        }
        for (i, &l) in self.encoder.layers.iter().enumerate() {
            if l == 0 {
                let m = ["v", "a", "t"][i];
                return err(format!("encoder.layers.{m} must be >= 1"));
            }
        }
        if self.encoder.heads == 0 {
            return err("encoder.heads must be >= 1".into());
        }
        if self.encoder.width == 0 || self.encoder.width % self.encoder.heads != 0 {
            return err(format!(
                "encoder.width ({}) must be a positive multiple of encoder.heads ({})",
                self.encoder.width, self.encoder.heads
            ));
        }
        if self.encoder.ff_width == 0 {
            return err("encoder.ff_width must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return err("encoder.dropout must be in [0, 1)".into());
        }
        if self.emotion.d_h < 2 || self.emotion.d_h % 2 != 0 {
            return err(format!(
                "emotion_space.d_h ({}) must be even and >= 2 (it is split into mu and sigma halves)",
                self.emotion.d_h
            ));
        }
        if self.emotion.proj_dim == 0 || self.emotion.label_dim == 0 || self.emotion.info_hidden == 0
        {
            return err("emotion_space.proj_dim, emotion_space.label_dim, info.hidden must be >= 1".into());
        }
        if self.scl.tau <= 0.0 {
            return err("scl.tau must be > 0".into());
        }
        if self.scl.use_mu_only && self.scl.use_sigma_only {
            return err("scl.use_mu_only and scl.use_sigma_only are mutually exclusive".into());
        }
        if self.cls.drop_mu && self.cls.drop_sigma {
            return err("cls.drop_mu and cls.drop_sigma are mutually exclusive".into());
        }
        if self.cls.hidden == 0 {
            return err("cls.hidden must be >= 1".into());
        }
        if self.ocl.temperature <= 0.0 {
            return err("ocl.temperature must be > 0".into());
        }
        let onlys = [self.ocl.only_sr, self.ocl.only_dr, self.ocl.only_ds];
        if onlys.iter().filter(|&&b| b).count() > 1 {
            return err("at most one of ocl.only_sr / ocl.only_dr / ocl.only_ds may be set".into());
        }
        let t = &self.train;
        if t.lambda < 0.0 || t.beta < 0.0 || t.gamma < 0.0 {
            return err("loss weights train.lambda/beta/gamma must be >= 0".into());
        }
        if t.lr <= 0.0 {
            return err("train.lr must be > 0".into());
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return err("train.epochs and train.batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&t.warmup) {
            return err("train.warmup must be in [0, 1]".into());
        }
        if !(0.0 < t.threshold && t.threshold < 1.0) {
            return err("train.threshold must be in (0, 1)".into());
        }
        Ok(())
    }

    /// Apply environment overrides. `EMOREC_SEED` replaces `train.seed`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("EMOREC_SEED") {
            self.train.seed = s.parse().map_err(|_| {
                EmorecError::Config(format!("EMOREC_SEED: expected integer, got `{s}`"))
            })?;
        }
        Ok(())
    }
}

fn format_f64(v: f64) -> String {
    // shortest round-trip representation
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}
