//! Run configuration: `key=value` files, flag overrides and a stable echo.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{SyntheticConfig, DEFAULT_THRESHOLD};
use crate::distill::{DistillConfig, DistillMode};
use crate::error::{Error, Result};
use crate::metrics::CandidateSet;
use crate::teacher::TeacherConfig;

/// Every knob of a run. Defaults follow the published setting where one
/// exists.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub unbiased: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub synthetic: bool,
    pub threshold: f64,
    /// Train/validation/test fractions of the unbiased log.
    pub split: (f64, f64, f64),

    pub dim: usize,
    pub envs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr_teacher: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup: usize,
    pub l2: f64,
    pub detach_inv_in_var: bool,
    pub init_std: f64,

    pub gamma: f64,
    pub lr_distill: f64,
    pub distill_epochs: usize,
    pub mode: DistillMode,

    pub ks: Vec<usize>,
    pub candidates: CandidateSet,
    pub stability_runs: usize,

    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    pub bias_strength: f64,
    pub exposure_skew: f64,
    pub label_tilt: f64,
    pub positives_per_user: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TeacherConfig::default();
        let d = DistillConfig::default();
        let s = SyntheticConfig::default();
        Self {
            seed: 0,
            data: None,
            unbiased: None,
            out: None,
            synthetic: false,
            threshold: DEFAULT_THRESHOLD,
            split: (0.05, 0.05, 0.90),
            dim: t.dim,
            envs: t.num_envs,
            alpha: t.alpha,
            beta: t.beta,
            lr_teacher: t.lr,
            epochs: t.epochs,
            batch: t.batch_size,
            warmup: t.warmup_epochs,
            l2: t.l2,
            detach_inv_in_var: t.detach_inv_in_var,
            init_std: t.init_std,
            gamma: d.gamma,
            lr_distill: d.lr,
            distill_epochs: d.epochs,
            mode: d.mode,
            ks: vec![5, 10],
            candidates: CandidateSet::TestItems,
            stability_runs: 10,
            users: s.num_users,
            items: s.num_items,
            latent_dim: s.latent_dim,
            bias_strength: s.bias_strength,
            exposure_skew: s.exposure_skew,
            label_tilt: s.label_tilt,
            positives_per_user: s.positives_per_user,
        }
    }
}

/// Keys in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "data",
    "unbiased",
    "out",
    "synthetic",
    "threshold",
    "split_train",
    "split_validation",
    "split_test",
    "dim",
    "envs",
    "alpha",
    "beta",
    "lr_teacher",
    "epochs",
    "batch",
    "warmup",
    "l2",
    "detach_inv_in_var",
    "init_std",
    "gamma",
    "lr_distill",
    "distill_epochs",
    "mode",
    "ks",
    "candidates",
    "stability_runs",
    "users",
    "items",
    "latent_dim",
    "bias_strength",
    "exposure_skew",
    "label_tilt",
    "positives_per_user",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

fn real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if !v.is_finite() {
        return Err(Error::InvalidConfig(format!("{key} must be finite")));
    }
    Ok(v)
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "seed" => self.seed = num(k, value)?,
            "data" => self.data = path(value),
            "unbiased" => self.unbiased = path(value),
            "out" => self.out = path(value),
            "synthetic" => self.synthetic = flag(k, value)?,
            "threshold" => self.threshold = real(k, value)?,
            "split_train" => self.split.0 = real(k, value)?,
            "split_validation" => self.split.1 = real(k, value)?,
            "split_test" => self.split.2 = real(k, value)?,
            "dim" => self.dim = num(k, value)?,
            "envs" => self.envs = num(k, value)?,
            "alpha" => self.alpha = real(k, value)?,
            "beta" => self.beta = real(k, value)?,
            "lr_teacher" => self.lr_teacher = real(k, value)?,
            "epochs" => self.epochs = num(k, value)?,
            "batch" => self.batch = num(k, value)?,
            "warmup" => self.warmup = num(k, value)?,
            "l2" => self.l2 = real(k, value)?,
            "detach_inv_in_var" => self.detach_inv_in_var = flag(k, value)?,
            "init_std" => self.init_std = real(k, value)?,
            "gamma" => self.gamma = real(k, value)?,
            "lr_distill" => self.lr_distill = real(k, value)?,
            "distill_epochs" => self.distill_epochs = num(k, value)?,
            "mode" => self.mode = value.parse()?,
            "ks" | "k" => {
                self.ks = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(k, s.trim()))
                    .collect::<Result<_>>()?
            }
            "candidates" => {
                self.candidates = match value {
                    "test" => CandidateSet::TestItems,
                    "catalog" => CandidateSet::FullCatalog,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "candidates: expected test or catalog, got {value:?}"
                        )))
                    }
                }
            }
            "stability_runs" => self.stability_runs = num(k, value)?,
            "users" => self.users = num(k, value)?,
            "items" => self.items = num(k, value)?,
            "latent_dim" => self.latent_dim = num(k, value)?,
            "bias_strength" => self.bias_strength = real(k, value)?,
            "exposure_skew" => self.exposure_skew = real(k, value)?,
            "label_tilt" => self.label_tilt = real(k, value)?,
            "positives_per_user" => self.positives_per_user = num(k, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "seed" => self.seed.to_string(),
            "data" => show_path(&self.data),
            "unbiased" => show_path(&self.unbiased),
            "out" => show_path(&self.out),
            "synthetic" => self.synthetic.to_string(),
            "threshold" => self.threshold.to_string(),
            "split_train" => self.split.0.to_string(),
            "split_validation" => self.split.1.to_string(),
            "split_test" => self.split.2.to_string(),
            "dim" => self.dim.to_string(),
            "envs" => self.envs.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "lr_teacher" => self.lr_teacher.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "warmup" => self.warmup.to_string(),
            "l2" => self.l2.to_string(),
            "detach_inv_in_var" => self.detach_inv_in_var.to_string(),
            "init_std" => self.init_std.to_string(),
            "gamma" => self.gamma.to_string(),
            "lr_distill" => self.lr_distill.to_string(),
            "distill_epochs" => self.distill_epochs.to_string(),
            "mode" => self.mode.to_string(),
            "ks" => self
                .ks
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "candidates" => match self.candidates {
                CandidateSet::TestItems => "test".into(),
                CandidateSet::FullCatalog => "catalog".into(),
            },
            "stability_runs" => self.stability_runs.to_string(),
            "users" => self.users.to_string(),
            "items" => self.items.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "bias_strength" => self.bias_strength.to_string(),
            "exposure_skew" => self.exposure_skew.to_string(),
            "label_tilt" => self.label_tilt.to_string(),
            "positives_per_user" => self.positives_per_user.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(idx + 1, format!("expected key=value, got {line:?}")))?;
            self.set(k, v).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// One `key=value` line per key, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k}={}", self.get(k).unwrap()).unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of everything except the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        Sha256::digest(c.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            dim: self.dim,
            num_envs: self.envs,
            alpha: self.alpha,
            beta: self.beta,
            lr: self.lr_teacher,
            epochs: self.epochs,
            batch_size: self.batch,
            warmup_epochs: self.warmup,
            l2: self.l2,
            seed: self.seed,
            detach_inv_in_var: self.detach_inv_in_var,
            init_std: self.init_std,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            gamma: self.gamma,
            lr: self.lr_distill,
            dim: self.dim,
            epochs: self.distill_epochs,
            batch_size: self.batch,
            l2: self.l2,
            seed: self.seed,
            mode: self.mode,
            init_std: self.init_std,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_users: self.users,
            num_items: self.items,
            latent_dim: self.latent_dim,
            num_envs: self.envs,
            bias_strength: self.bias_strength,
            exposure_skew: self.exposure_skew,
            label_tilt: self.label_tilt,
            positives_per_user: self.positives_per_user,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_config().validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidConfig("ks must be non-empty and >= 1".into()));
        }
        if self.synthetic {
            self.synthetic_config().validate()?;
        }
        Ok(())
    }
}
