use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::default_orders;
use crate::controllers::{ClipConfig, LrControlConfig};
use crate::data::{SyntheticSpec, TaskKind};
use crate::dp::{ClipMode, DpAdamAcConfig, NoiseConfig};
use crate::error::{Error, Result};
use crate::harness::smooth::Smoothing;
use crate::models::{Head, ModelSpec};
use crate::optim::AdamHyper;

/// Noise multipliers swept by default.
pub const DEFAULT_SWEEP: [f64; 5] = [0.0, 0.1, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    Mlp2Layer,
    CharMlpLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    /// Embedding width for `char_mlp_lm`.
    pub embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { kind: ModelKind::LogisticRegression, hidden: 16, embed: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: TaskKind,
    /// Training examples `N`.
    pub n: usize,
    /// Feature dimension, or context window for `char_sequence`.
    pub dim: usize,
    pub vocab: usize,
    pub margin: f64,
    pub noise_std: f64,
    /// Held-out examples for EMA evaluation, generated after the training set.
    pub eval_n: usize,
    /// Load training data from a dataset text file instead of generating it.
    /// The held-out set is then the last `eval_n` lines of that file.
    pub file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            kind: s.kind,
            n: s.n,
            dim: s.dim,
            vocab: s.vocab,
            margin: s.margin,
            noise_std: s.noise_std,
            eval_n: 1000,
            file: None,
        }
    }
}

impl DataConfig {
    pub fn synthetic(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            kind: self.kind,
            n: self.n + self.eval_n,
            dim: self.dim,
            vocab: self.vocab,
            margin: self.margin,
            noise_std: self.noise_std,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    DpAdamAc,
    Adam,
    Adamw { weight_decay: f64 },
    SgdMomentum { momentum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    CosineWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base: f64,
    pub warmup_steps: u64,
    /// Floor of the cosine decay as a fraction of `base`.
    pub min_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { kind: ScheduleKind::Constant, base: 3e-4, warmup_steps: 0, min_factor: 0.0 }
    }
}

impl LrSchedule {
    /// Base rate at 1-based `step` of `total` steps.
    pub fn at(&self, step: u64, total: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::CosineWarmup => {
                if step <= self.warmup_steps {
                    return self.base * step as f64 / self.warmup_steps as f64;
                }
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.base * (self.min_factor + (1.0 - self.min_factor) * cosine)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::config(format!("base learning rate must be positive, got {}", self.base)));
        }
        if !(0.0..=1.0).contains(&self.min_factor) {
            return Err(Error::config("lr min_factor must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub epoch: u64,
    pub noise: u64,
    pub init: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 0, epoch: 1, noise: 2, init: 3 }
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self { data: seed, epoch: seed, noise: seed, init: seed }
    }
}

/// Everything a run needs. Serialized as JSON; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub sigma: f64,
    pub clip_mode: ClipMode,
    pub clip: ClipConfig,
    pub lr_control: LrControlConfig,
    pub ema_decay: f64,
    pub adam: AdamHyper,
    pub delta: f64,
    pub orders: Vec<u32>,
    pub seeds: Seeds,
    pub eval_every: u64,
    pub smoothing: Smoothing,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            optimizer: OptimizerKind::DpAdamAc,
            batch_size: 32,
            micro_batch: 8,
            epochs: 1,
            lr: LrSchedule::default(),
            sigma: 1.0,
            clip_mode: ClipMode::Alg1,
            clip: ClipConfig::default(),
            lr_control: LrControlConfig::default(),
            ema_decay: 0.999,
            adam: AdamHyper::default(),
            delta: 1e-5,
            orders: default_orders(),
            seeds: Seeds::default(),
            eval_every: 10,
            smoothing: Smoothing::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        let d = &self.data;
        match self.model.kind {
            ModelKind::LogisticRegression => ModelSpec::LogisticRegression { dim: d.dim },
            ModelKind::Mlp2Layer => ModelSpec::Mlp2 {
                dim: d.dim,
                hidden: self.model.hidden,
                head: if d.kind == TaskKind::Regression { Head::Squared } else { Head::Logistic },
            },
            ModelKind::CharMlpLm => ModelSpec::CharMlpLm {
                vocab: d.vocab,
                window: d.dim,
                embed: self.model.embed,
                hidden: self.model.hidden,
            },
        }
    }

    pub fn dp_config(&self) -> DpAdamAcConfig {
        DpAdamAcConfig {
            adam: self.adam,
            noise: NoiseConfig { sigma: self.sigma, seed: self.seeds.noise, clip_mode: self.clip_mode },
            clip: self.clip,
            lr_control: self.lr_control,
            ema_decay: self.ema_decay,
        }
    }

    /// Whether this run carries a privacy ledger.
    pub fn is_private(&self) -> bool {
        matches!(self.optimizer, OptimizerKind::DpAdamAc) && self.sigma > 0.0
    }

    /// Rejects any inconsistent field before a run touches data or disk.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(format!("run name {:?} must be a plain file name", self.name)));
        }
        let d = &self.data;
        if d.file.is_none() {
            self.data.synthetic(0).validate()?;
        }
        if d.n == 0 {
            return Err(Error::config("data.n must be >= 1"));
        }
        let spec = self.model_spec();
        spec.validate()?;
        let compatible = match self.model.kind {
            ModelKind::LogisticRegression => d.kind == TaskKind::BinaryClassification,
            ModelKind::Mlp2Layer => d.kind != TaskKind::CharSequence,
            ModelKind::CharMlpLm => d.kind == TaskKind::CharSequence,
        };
        if !compatible {
            return Err(Error::config(format!(
                "model {:?} cannot train on {} data",
                self.model.kind,
                d.kind.as_str()
            )));
        }
        if !(1 <= self.micro_batch && self.micro_batch <= self.batch_size && self.batch_size <= d.n) {
            return Err(Error::config(format!(
                "need 1 <= micro_batch ({}) <= batch_size ({}) <= data.n ({})",
                self.micro_batch, self.batch_size, d.n
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        self.lr.validate()?;
        self.dp_config().validate()?;
        match self.optimizer {
            OptimizerKind::Adamw { weight_decay } if !(weight_decay >= 0.0 && weight_decay.is_finite()) => {
                return Err(Error::config("weight_decay must be >= 0"));
            }
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::config("momentum must lie in [0, 1)"));
            }
            _ => {}
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.orders.is_empty() || self.orders.iter().any(|&a| a < 2) {
            return Err(Error::config("orders must be a non-empty set of integers >= 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        self.smoothing.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lr.base, 3e-4);
        assert_eq!(cfg.clip.initial, 3.0);
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.micro_batch, 8);
        assert_eq!(DEFAULT_SWEEP, [0.0, 0.1, 0.5, 0.7, 1.0]);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"sigma": 0.5, "data": {"n": 500}}"#).unwrap();
        assert_eq!(partial.sigma, 0.5);
        assert_eq!(partial.data.n, 500);
        assert_eq!(partial.batch_size, 32);
        assert!(RunConfig::from_json(r#"{"sigmaa": 0.5}"#).is_err());
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let bad = [
            RunConfig { micro_batch: 64, ..Default::default() },
            RunConfig { sigma: -1.0, ..Default::default() },
            RunConfig { delta: 1.0, ..Default::default() },
            RunConfig { orders: vec![1, 2], ..Default::default() },
            RunConfig { name: "a/b".into(), ..Default::default() },
            RunConfig {
                model: ModelConfig { kind: ModelKind::CharMlpLm, ..Default::default() },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = LrSchedule { kind: ScheduleKind::CosineWarmup, base: 1.0, warmup_steps: 10, min_factor: 0.1 };
        assert_eq!(s.at(5, 110), 0.5);
        assert_eq!(s.at(10, 110), 1.0);
        assert!((s.at(60, 110) - 0.55).abs() < 1e-12);
        assert!((s.at(110, 110) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::default().at(77, 100), 3e-4);
    }
}
