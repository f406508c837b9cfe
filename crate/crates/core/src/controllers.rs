//! The three DP-Adam-AC control loops.
//!
//! * [`ClipController`] keeps a bounded history of per-example ("unit")
//!   gradient norms and sets the clipping norm to the percentile of that
//!   history matching the target clip rate.
//! * [`LrController`] nudges a learning-rate multiplier up when too few
//!   microbatches are clipped and down when too many are.
//! * [`EmaShadow`] is the exponential moving average of the parameters used
//!   for evaluation and as the exported model. None of these touch the
//!   privacy ledger.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dp::MicrobatchReport;
use crate::error::{check_finite, check_len, Error, Result};
use crate::ParameterVector;

/// Fraction of microbatches whose pre-clip norm strictly exceeds `C·m_i`.
pub fn observed_clip_rate(report: &MicrobatchReport, clip_norm: f64) -> f64 {
    let clipped = report
        .pre_norms
        .iter()
        .zip(&report.sizes)
        .filter(|(&n, &m)| n > clip_norm * m as f64)
        .count();
    clipped as f64 / report.len() as f64
}

/// `q`-th percentile (q in [0, 100]) with linear interpolation between
/// closest ranks, i.e. sorted index `(q/100)·(n−1)`.
///
/// Returns `None` for an empty input.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q.clamp(0.0, 100.0) / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    pub target_rate: f64,
    pub history: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { initial: 3.0, min: 1e-3, max: 10.0, target_rate: 0.20, history: 512 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err(Error::config(format!(
                "clip bounds must satisfy 0 < min <= max, got [{}, {}]",
                self.min, self.max
            )));
        }
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::config(format!("initial clip norm must be positive, got {}", self.initial)));
        }
        if !(self.target_rate > 0.0 && self.target_rate < 1.0) {
            return Err(Error::config(format!(
                "target clip rate must lie in (0, 1), got {}",
                self.target_rate
            )));
        }
        if self.history == 0 {
            return Err(Error::config("clip history capacity must be >= 1"));
        }
        Ok(())
    }
}

/// History-percentile adaptive clipping norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipController {
    history: VecDeque<f64>,
    capacity: usize,
    clip_norm: f64,
    min: f64,
    max: f64,
    target_rate: f64,
}

impl ClipController {
    /// The initial norm is used as given for the first step; bounds apply
    /// from the first update on.
    pub fn new(config: &ClipConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            history: VecDeque::with_capacity(config.history),
            capacity: config.history,
            clip_norm: config.initial,
            min: config.min,
            max: config.max,
            target_rate: config.target_rate,
        })
    }

    pub fn clip_norm(&self) -> f64 {
        self.clip_norm
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.min, self.max)
    }

    pub fn target_rate(&self) -> f64 {
        self.target_rate
    }

    pub fn history(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    /// Percentile of the history that the controller tracks, `100·(1−ρ*)`.
    pub fn target_percentile(&self) -> f64 {
        100.0 * (1.0 - self.target_rate)
    }

    /// Appends one unit norm `n_i / max(1, m_i)` per microbatch and moves the
    /// clipping norm to the clamped target percentile of the history.
    pub fn record_and_update(&mut self, report: &MicrobatchReport) -> f64 {
        for (&n, &m) in report.pre_norms.iter().zip(&report.sizes) {
            if self.history.len() == self.capacity {
                self.history.pop_front();
            }
            self.history.push_back(n / m.max(1) as f64);
        }
        let (front, back) = self.history.as_slices();
        let values: Vec<f64> = front.iter().chain(back).copied().collect();
        if let Some(p) = percentile(&values, self.target_percentile()) {
            self.clip_norm = p.clamp(self.min, self.max);
        }
        self.clip_norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrControlConfig {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub up: f64,
    pub down: f64,
    pub rate_low: f64,
    pub rate_high: f64,
}

impl Default for LrControlConfig {
    fn default() -> Self {
        Self { gamma_min: 0.25, gamma_max: 4.0, up: 1.01, down: 0.995, rate_low: 0.10, rate_high: 0.30 }
    }
}

impl LrControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_min > 0.0 && self.gamma_min <= 1.0 && 1.0 <= self.gamma_max && self.gamma_max.is_finite()) {
            return Err(Error::config(format!(
                "multiplier bounds must satisfy 0 < gamma_min <= 1 <= gamma_max, got [{}, {}]",
                self.gamma_min, self.gamma_max
            )));
        }
        if !(self.up > 1.0 && self.up.is_finite()) {
            return Err(Error::config(format!("up factor must exceed 1, got {}", self.up)));
        }
        if !(self.down > 0.0 && self.down < 1.0) {
            return Err(Error::config(format!("down factor must lie in (0, 1), got {}", self.down)));
        }
        if !(0.0 <= self.rate_low && self.rate_low < self.rate_high && self.rate_high <= 1.0) {
            return Err(Error::config(format!(
                "clip-rate band must satisfy 0 <= low < high <= 1, got [{}, {}]",
                self.rate_low, self.rate_high
            )));
        }
        Ok(())
    }
}

/// Bounded learning-rate multiplier driven by the observed clip rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LrController {
    gamma: f64,
    config: LrControlConfig,
}

impl LrController {
    pub fn new(config: &LrControlConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { gamma: 1.0, config: *config })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn config(&self) -> &LrControlConfig {
        &self.config
    }

    pub fn update(&mut self, clip_rate: f64) -> f64 {
        let c = &self.config;
        if clip_rate < c.rate_low {
            self.gamma = c.gamma_max.min(self.gamma * c.up);
        } else if clip_rate > c.rate_high {
            self.gamma = c.gamma_min.max(self.gamma * c.down);
        }
        self.gamma
    }
}

/// Exponential moving average of the parameters, with an evaluation swap.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    shadow: ParameterVector,
    decay: f64,
    backup: Option<ParameterVector>,
}

impl EmaShadow {
    pub fn new(initial: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config(format!("ema decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { shadow: initial.to_vec().into(), decay, backup: None })
    }

    pub fn shadow(&self) -> &ParameterVector {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn is_swapped(&self) -> bool {
        self.backup.is_some()
    }

    /// `θ̂ ← d·θ̂ + (1−d)·θ`.
    pub fn update(&mut self, theta: &[f64]) -> Result<()> {
        check_len(self.shadow.len(), theta.len())?;
        check_finite(theta, "parameters")?;
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(theta) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }

    /// Saves `theta` and overwrites it with the shadow values.
    pub fn swap_in(&mut self, theta: &mut [f64]) -> Result<()> {
        check_len(self.shadow.len(), theta.len())?;
        if self.backup.is_some() {
            return Err(Error::SwapState("swap requested while a swap is pending"));
        }
        self.backup = Some(theta.to_vec().into());
        theta.copy_from_slice(&self.shadow);
        Ok(())
    }

    /// Writes the saved live parameters back into `theta`.
    pub fn restore(&mut self, theta: &mut [f64]) -> Result<()> {
        check_len(self.shadow.len(), theta.len())?;
        let backup = self.backup.take().ok_or(Error::SwapState("restore without a pending swap"))?;
        theta.copy_from_slice(&backup);
        Ok(())
    }
}
