//! Experiment configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{PretrainConfig, N_STAGES};
use crate::error::{Error, Result};
use crate::guidance::PoolOp;
use crate::invariance::{CiKind, Temperatures};
use crate::scm::{AugmentConfig, DatasetSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Reference checkpoint, relative to the work directory.
    pub reference: String,
    /// Start the online encoder from the reference encoder's weights.
    pub init_from_reference: bool,
    /// Projection dimension of the invariance projectors.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            reference: "reference.gckp".into(),
            init_from_reference: true,
            embed_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Guidance weight per stage (stages 1–4).
    pub lambda_g: Vec<f64>,
    /// Invariance weight per stage (stages 1–4).
    pub lambda_ci: Vec<f64>,
    pub tau: f64,
    pub tau_bar: f64,
    /// Support queue capacity K.
    pub queue_size: usize,
    /// Invariance terms are skipped until a queue holds this share of K.
    pub warmup_fill: f64,
    pub ci_kind: CiKind,
    /// Use the patch-grid invariance variant.
    pub dense: bool,
    /// Patch grid side n (N = n² patches).
    pub dense_grid: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_g: vec![0.0, 0.0, 1.0, 1.0],
            lambda_ci: vec![0.0, 0.0, 1.0, 1.0],
            tau: 0.12,
            tau_bar: 0.04,
            queue_size: 1024,
            warmup_fill: 0.25,
            ci_kind: CiKind::Relational,
            dense: false,
            dense_grid: 8,
        }
    }
}

impl LossConfig {
    pub fn temperatures(&self) -> Temperatures {
        Temperatures {
            tau: self.tau,
            tau_bar: self.tau_bar,
        }
    }

    /// 1-based stages with a positive invariance weight.
    pub fn ci_stages(&self) -> Vec<usize> {
        active(&self.lambda_ci)
    }

    /// 1-based stages with a positive guidance weight.
    pub fn guidance_stages(&self) -> Vec<usize> {
        active(&self.lambda_g)
    }
}

fn active(lambda: &[f64]) -> Vec<usize> {
    lambda
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0.0)
        .map(|(i, _)| i + 1)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub pool: PoolOp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// EMA momentum m of the target network.
    pub ema: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            ema: 0.996,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the match-rate stylisation.
    pub match_seed: u64,
    /// Compute match rate, CKA and reference-head accuracy after every
    /// epoch instead of only after the last.
    pub full_every_epoch: bool,
    /// Write a step record every this many steps (0 = only epoch records).
    pub log_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            match_seed: 2024,
            full_every_epoch: false,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of initialisation, batch order and augmentation.
    pub seed: u64,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub guidance: GuidanceConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    /// Recipe of the reference network (used by reference pretraining only).
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatasetSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            guidance: GuidanceConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, l) in [("lambda_g", &self.loss.lambda_g), ("lambda_ci", &self.loss.lambda_ci)] {
            if l.len() != N_STAGES {
                return bad(format!("loss.{name} needs {N_STAGES} stage weights, got {}", l.len()));
            }
            if l.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return bad(format!("loss.{name} weights must be finite and ≥ 0: {l:?}"));
            }
        }
        self.loss.temperatures().validate()?;
        if self.loss.queue_size < 2 {
            return bad(format!("loss.queue_size must be ≥ 2, got {}", self.loss.queue_size));
        }
        if !(0.0..=1.0).contains(&self.loss.warmup_fill) {
            return bad(format!("loss.warmup_fill must lie in [0, 1], got {}", self.loss.warmup_fill));
        }
        if self.loss.dense {
            let side = self.data.image_size;
            for l in self.loss.ci_stages() {
                let extent = side >> l;
                let g = self.loss.dense_grid;
                if g == 0 || extent % g != 0 {
                    return bad(format!(
                        "dense invariance: stage {l} maps are {extent}×{extent}, not divisible into a {g}×{g} grid"
                    ));
                }
            }
        }
        if !(self.optim.lr >= 0.0) || !self.optim.lr.is_finite() {
            return bad(format!("optim.lr must be finite and ≥ 0, got {}", self.optim.lr));
        }
        if !(0.0..=1.0).contains(&self.optim.ema) {
            return bad(format!("optim.ema must lie in [0, 1], got {}", self.optim.ema));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return bad(format!("optim.momentum must lie in [0, 1), got {}", self.optim.momentum));
        }
        if self.optim.batch_size == 0 {
            return bad("optim.batch_size must be positive".into());
        }
        if self.model.embed_dim == 0 {
            return bad("model.embed_dim must be positive".into());
        }
        if self.data.image_size == 0 || self.data.image_size % 16 != 0 {
            return bad(format!(
                "data.image_size must be a positive multiple of 16, got {}",
                self.data.image_size
            ));
        }
        if self.data.n_classes < 2 || self.data.n_classes > crate::scm::TASK_FAMILIES.len() {
            return bad(format!("data.n_classes must lie in [2, 6], got {}", self.data.n_classes));
        }
        if !(0.0..=1.0).contains(&self.augment.magnitude) {
            return bad(format!("augment.magnitude must lie in [0, 1], got {}", self.augment.magnitude));
        }
        Ok(())
    }

    /// Every settable dotted key, in file order.
    pub fn keys(&self) -> Result<Vec<String>> {
        fn walk(prefix: &str, t: &toml::Table, out: &mut Vec<String>) {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match v {
                    toml::Value::Table(inner) => walk(&key, inner, out),
                    _ => out.push(key),
                }
            }
        }
        let root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        walk("", &root, &mut out);
        Ok(out)
    }

    /// Apply a dotted override such as `guidance.pool = "sap"` or
    /// `loss.lambda_g = [0, 0, 1, 1]`. The value is parsed as a TOML value;
    /// bare words are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(value.into())),
            Err(_) => toml::Value::String(value.into()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
            if !table.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            if i + 1 == parts.len() {
                table.insert((*part).to_string(), parsed.clone());
                break;
            }
            slot = table.get_mut(*part).expect("checked above");
        }
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key} = {value}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}
