//! Clipped microbatch aggregation, Gaussian privatization, and the full
//! DP-Adam-AC step.
//!
//! Two clipping modes exist because the microbatch threshold is ambiguous:
//! [`ClipMode::Alg1`] clips microbatch `i` at `C·|X_i|` (the main algorithm),
//! [`ClipMode::AppB`] clips every microbatch at `C`. Noise is `N(0, (σC)²)`
//! in both modes, so only `AppB` with single-example microbatches carries the
//! usual example-level DP-SGD sensitivity argument.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::controllers::{
    observed_clip_rate, ClipConfig, ClipController, EmaShadow, LrControlConfig, LrController,
};
use crate::error::{check_finite, check_len, Error, Result};
use crate::optim::{adam_update, AdamHyper, OptimizerState};
use crate::params::l2_norm;
use crate::ParameterVector;

/// Identifier recorded in run summaries for the noise generator.
pub const RNG_ALGORITHM: &str = "chacha20 (rand_chacha 0.9, seed_from_u64) + ziggurat StandardNormal (rand_distr 0.5)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Threshold `C·|X_i|` per microbatch.
    #[default]
    Alg1,
    /// Threshold `C` per microbatch.
    AppB,
}

impl ClipMode {
    pub fn threshold(self, clip_norm: f64, microbatch_size: usize) -> f64 {
        match self {
            ClipMode::Alg1 => clip_norm * microbatch_size as f64,
            ClipMode::AppB => clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
    pub clip_mode: ClipMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: 1.0, seed: 0, clip_mode: ClipMode::Alg1 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("noise multiplier must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Pre-clip norms and sizes, one entry per microbatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrobatchReport {
    pub pre_norms: Vec<f64>,
    pub sizes: Vec<usize>,
}

impl MicrobatchReport {
    pub fn new(pre_norms: Vec<f64>, sizes: Vec<usize>) -> Result<Self> {
        if pre_norms.is_empty() {
            return Err(Error::arg("microbatch report must have at least one entry"));
        }
        check_len(pre_norms.len(), sizes.len())?;
        if pre_norms.iter().any(|n| !(n.is_finite() && *n >= 0.0)) {
            return Err(Error::NonFinite("pre-clip norm"));
        }
        if sizes.contains(&0) {
            return Err(Error::arg("microbatch sizes must be positive"));
        }
        Ok(Self { pre_norms, sizes })
    }

    pub fn len(&self) -> usize {
        self.pre_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre_norms.is_empty()
    }

    pub fn total_examples(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// Scales `grad` in place by `min(1, threshold/‖grad‖₂)` and returns the
/// pre-clip norm.
pub fn clip_gradient(grad: &mut [f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::arg(format!("clip threshold must be positive, got {threshold}")));
    }
    check_finite(grad, "gradient")?;
    let norm = l2_norm(grad);
    if norm > threshold {
        let scale = threshold / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

/// Result of summing clipped microbatch gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub sum_grad: ParameterVector,
    pub report: MicrobatchReport,
    /// Size-weighted sum of the microbatch losses returned by the callback.
    pub loss_sum: f64,
}

/// Evaluates each microbatch into a zeroed buffer, clips it, and adds it to
/// the running sum in microbatch order.
///
/// `grad_fn(microbatch, buf)` must write the microbatch gradient into `buf`
/// and return `(loss, example_count)`.
pub fn aggregate_microbatches<M, F>(
    microbatches: &[M],
    dim: usize,
    clip_norm: f64,
    mode: ClipMode,
    mut grad_fn: F,
) -> Result<Aggregate>
where
    F: FnMut(&M, &mut [f64]) -> Result<(f64, usize)>,
{
    if microbatches.is_empty() {
        return Err(Error::arg("no microbatches to aggregate"));
    }
    if !(clip_norm > 0.0) {
        return Err(Error::arg(format!("clip norm must be positive, got {clip_norm}")));
    }
    let mut sum_grad = ParameterVector::zeros(dim);
    let mut buf = vec![0.0; dim];
    let mut pre_norms = Vec::with_capacity(microbatches.len());
    let mut sizes = Vec::with_capacity(microbatches.len());
    let mut loss_sum = 0.0;
    for mb in microbatches {
        buf.iter_mut().for_each(|g| *g = 0.0);
        let (loss, size) = grad_fn(mb, &mut buf)?;
        if size == 0 {
            return Err(Error::arg("empty microbatch"));
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("microbatch loss"));
        }
        let norm = clip_gradient(&mut buf, mode.threshold(clip_norm, size))?;
        for (s, g) in sum_grad.iter_mut().zip(&buf) {
            *s += g;
        }
        pre_norms.push(norm);
        sizes.push(size);
        loss_sum += loss * size as f64;
    }
    Ok(Aggregate { sum_grad, report: MicrobatchReport::new(pre_norms, sizes)?, loss_sum })
}

/// Adds `N(0, (σC)²)` to every coordinate (skipped entirely when σ = 0),
/// then divides by the logical batch size.
pub fn privatize<R: Rng + ?Sized>(
    sum_grad: &mut [f64],
    sigma: f64,
    clip_norm: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("noise multiplier must be >= 0, got {sigma}")));
    }
    if sigma > 0.0 {
        let std = sigma * clip_norm;
        for g in sum_grad.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *g += std * z;
        }
    }
    let b = batch_size as f64;
    sum_grad.iter_mut().for_each(|g| *g /= b);
    Ok(())
}

/// Full DP-Adam-AC configuration apart from the learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpAdamAcConfig {
    pub adam: AdamHyper,
    pub noise: NoiseConfig,
    pub clip: ClipConfig,
    pub lr_control: LrControlConfig,
    pub ema_decay: f64,
}

impl Default for DpAdamAcConfig {
    fn default() -> Self {
        Self {
            adam: AdamHyper::default(),
            noise: NoiseConfig::default(),
            clip: ClipConfig::default(),
            lr_control: LrControlConfig::default(),
            ema_decay: 0.999,
        }
    }
}

impl DpAdamAcConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.noise.validate()?;
        self.clip.validate()?;
        self.lr_control.validate()?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("ema decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Per-step telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTelemetry {
    pub step: u64,
    /// Batch-mean loss at the pre-update parameters.
    pub loss: f64,
    pub clip_rate: f64,
    /// Clipping norm used for this step.
    pub clip_norm: f64,
    /// Clipping norm for the next step.
    pub next_clip_norm: f64,
    /// Multiplier applied to this step's learning rate.
    pub lr_multiplier: f64,
    pub next_lr_multiplier: f64,
    pub effective_lr: f64,
    pub batch_size: usize,
    pub pre_norms: Vec<f64>,
}

/// DP-Adam-AC optimizer state: Adam moments, the three controllers, and the
/// noise generator.
#[derive(Debug, Clone)]
pub struct DpAdamAc {
    adam: AdamHyper,
    noise: NoiseConfig,
    state: OptimizerState,
    clip: ClipController,
    lr: LrController,
    ema: EmaShadow,
    rng: ChaCha20Rng,
}

impl DpAdamAc {
    pub fn new(theta: &[f64], config: &DpAdamAcConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: config.adam,
            noise: config.noise,
            state: OptimizerState::new(theta.len()),
            clip: ClipController::new(&config.clip)?,
            lr: LrController::new(&config.lr_control)?,
            ema: EmaShadow::new(theta, config.ema_decay)?,
            rng: ChaCha20Rng::seed_from_u64(config.noise.seed),
        })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn clip_controller(&self) -> &ClipController {
        &self.clip
    }

    pub fn lr_controller(&self) -> &LrController {
        &self.lr
    }

    pub fn ema(&self) -> &EmaShadow {
        &self.ema
    }

    pub fn ema_mut(&mut self) -> &mut EmaShadow {
        &mut self.ema
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    /// Runs one optimizer step over the given microbatches.
    ///
    /// `lr_base` is the schedule value for this step. `grad_fn(θ, mb, buf)`
    /// follows the [`aggregate_microbatches`] contract, evaluated at the
    /// current parameters. Either every piece of state (θ,
    /// moments, EMA, C, γ, step counter) advances, or nothing does.
    pub fn step<M, F>(
        &mut self,
        theta: &mut ParameterVector,
        microbatches: &[M],
        lr_base: f64,
        mut grad_fn: F,
    ) -> Result<StepTelemetry>
    where
        F: FnMut(&[f64], &M, &mut [f64]) -> Result<(f64, usize)>,
    {
        let dim = self.state.dim();
        check_len(dim, theta.len())?;
        if !(lr_base >= 0.0 && lr_base.is_finite()) {
            return Err(Error::arg(format!("base learning rate must be >= 0, got {lr_base}")));
        }
        if self.ema.is_swapped() {
            return Err(Error::SwapState("step while evaluation swap is pending"));
        }
        let clip_norm = self.clip.clip_norm();
        let Aggregate { sum_grad, report, loss_sum } =
            aggregate_microbatches(microbatches, dim, clip_norm, self.noise.clip_mode, |mb, buf| {
                grad_fn(theta, mb, buf)
            })?;
        let batch_size = report.total_examples();

        // Work on copies so a failure below leaves everything untouched.
        let mut rng = self.rng.clone();
        let mut grad = sum_grad;
        privatize(&mut grad, self.noise.sigma, clip_norm, batch_size, &mut rng)?;
        check_finite(&grad, "privatized gradient")?;

        let gamma = self.lr.gamma();
        let effective_lr = gamma * lr_base;
        let mut state = self.state.clone();
        let mut next_theta = theta.clone();
        adam_update(&mut next_theta, &grad, &mut state, effective_lr, &self.adam);
        if !next_theta.is_finite() {
            return Err(Error::NonFinite("updated parameters"));
        }
        let mut ema = self.ema.clone();
        ema.update(&next_theta)?;

        let clip_rate = observed_clip_rate(&report, clip_norm);
        let next_clip_norm = self.clip.record_and_update(&report);
        let next_gamma = self.lr.update(clip_rate);

        *theta = next_theta;
        self.state = state;
        self.ema = ema;
        self.rng = rng;

        Ok(StepTelemetry {
            step: self.state.step(),
            loss: loss_sum / batch_size as f64,
            clip_rate,
            clip_norm,
            next_clip_norm,
            lr_multiplier: gamma,
            next_lr_multiplier: next_gamma,
            effective_lr,
            batch_size,
            pre_norms: report.pre_norms,
        })
    }
}
