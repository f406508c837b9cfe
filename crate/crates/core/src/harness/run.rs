use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::{OrderEpsilon, PrivacyLedger};
use crate::controllers::EmaShadow;
use crate::data::{batches, gen_synthetic, Dataset, Sample};
use crate::dp::{DpAdamAc, RNG_ALGORITHM};
use crate::error::{Error, Result};
use crate::harness::config::{OptimizerKind, RunConfig, Seeds};
use crate::models::{microbatch_sum_grad, ModelSpec};
use crate::optim::{adam_step, adamw_step, sgd_momentum_step, OptimizerState};
use crate::ParameterVector;

/// One optimizer step in the log. `None` marks a value that was not
/// evaluated this step (EMA loss) or does not apply (DP quantities for
/// baselines, ε without noise).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub raw_loss: f64,
    pub eval_loss_ema: Option<f64>,
    pub clip_rate: Option<f64>,
    pub clip_norm: Option<f64>,
    pub lr_multiplier: Option<f64>,
    pub q_t: f64,
    pub cum_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeakMemory {
    Bytes(u64),
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub steps: u64,
    pub dataset_size: usize,
    pub sigma: f64,
    /// `None` when the run carries no DP guarantee (σ = 0 or a baseline).
    pub final_epsilon: Option<f64>,
    pub best_order: Option<u32>,
    pub delta: f64,
    pub initial_loss: f64,
    pub final_raw_loss: f64,
    pub final_smoothed_loss: f64,
    pub final_eval_loss_ema: Option<f64>,
    pub wall_clock_seconds: f64,
    /// Process high-water resident set size at the end of the run.
    pub peak_resident_memory: PeakMemory,
    pub seeds: Seeds,
    pub rng_algorithm: String,
    pub privacy_note: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<StepRow>,
    pub summary: RunSummary,
    /// Final EMA parameters (the exported model).
    pub ema_params: ParameterVector,
}

impl RunLog {
    pub fn raw_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.raw_loss).collect()
    }

    pub fn smoothed_losses(&self) -> Result<Vec<f64>> {
        self.summary.config.smoothing.apply(&self.raw_losses())
    }

    pub fn q_log(&self) -> Vec<(u64, f64)> {
        self.rows.iter().map(|r| (r.step, r.q_t)).collect()
    }
}

const PRIVACY_NOTE: &str = "Accounting assumes per-step noise N(0,(sigma*C)^2) against a sensitivity of C. \
That matches example-level DP only for clip_mode=appb with micro_batch=1; clip_mode=alg1 clips each \
microbatch at C*|X_i|. Adaptive clipping reads raw pre-clip norms, which this ledger does not account for. \
Noise comes from a seeded PRNG; use an OS entropy source for real deployments.";

/// Peak resident set size from `/proc/self/status`, when available.
pub fn peak_memory() -> PeakMemory {
    let probe = || -> Option<u64> {
        let status = std::fs::read_to_string("/proc/self/status").ok()?;
        let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
        let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
        Some(kb * 1024)
    };
    match probe() {
        Some(bytes) => PeakMemory::Bytes(bytes),
        None => PeakMemory::Unavailable("unavailable".into()),
    }
}

/// Training and held-out data for a config.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let mut all = match &config.data.file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Dataset::from_text(&text)?
        }
        None => gen_synthetic(&config.data.synthetic(config.seeds.data))?,
    };
    if config.data.eval_n == 0 {
        return Ok((all.clone(), all));
    }
    let eval = all.split_off(config.data.eval_n)?;
    Ok((all, eval))
}

fn step_err(step: u64, op: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Step { step, op, source: Box::new(e) }
}

enum Trainer {
    Private(Box<DpAdamAc>),
    Baseline { state: OptimizerState, ema: EmaShadow },
}

/// Executes one full training run.
pub fn run(config: &RunConfig) -> Result<RunLog> {
    config.validate()?;
    let started = Instant::now();
    let (train, eval) = load_data(config)?;
    let model = config.model_spec();
    model.check_dataset(&train)?;
    if train.len() < config.batch_size {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} training examples",
            config.batch_size,
            train.len()
        )));
    }
    let n = train.len();
    let eval_refs: Vec<&Sample> = eval.samples.iter().collect();

    let mut theta = model.init_params(config.seeds.init);
    let mut trainer = match config.optimizer {
        OptimizerKind::DpAdamAc => Trainer::Private(Box::new(DpAdamAc::new(&theta, &config.dp_config())?)),
        _ => Trainer::Baseline {
            state: OptimizerState::new(theta.len()),
            ema: EmaShadow::new(&theta, config.ema_decay)?,
        },
    };
    let mut ledger = if config.is_private() {
        Some(PrivacyLedger::new(config.sigma, &config.orders)?)
    } else {
        None
    };

    let per_epoch = n.div_ceil(config.batch_size) as u64;
    let total_steps = per_epoch * config.epochs as u64;
    let mut rows = Vec::with_capacity(total_steps as usize);
    let mut last_eps: Option<OrderEpsilon> = None;
    let mut grad = vec![0.0; theta.len()];
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let plan = batches(n, config.batch_size, config.micro_batch, config.seeds.epoch.wrapping_add(epoch as u64))?;
        for batch in plan {
            step += 1;
            let lr_base = config.lr.at(step, total_steps);
            let q_t = batch.sampling_rate(n);
            let (raw_loss, clip_rate, clip_norm, lr_multiplier) = match &mut trainer {
                Trainer::Private(opt) => {
                    let micro: Vec<Vec<&Sample>> =
                        batch.microbatches().into_iter().map(|ix| train.gather(ix)).collect();
                    let tel = opt
                        .step(&mut theta, &micro, lr_base, |th, mb, buf| microbatch_sum_grad(&model, th, mb, buf))
                        .map_err(step_err(step, "dp_adam_ac_step"))?;
                    (tel.loss, Some(tel.clip_rate), Some(tel.clip_norm), Some(tel.lr_multiplier))
                }
                Trainer::Baseline { state, ema } => {
                    let samples = train.gather(&batch.indices);
                    let loss = model
                        .loss_and_grad(&theta, &samples, &mut grad)
                        .map_err(step_err(step, "loss_and_grad"))?;
                    baseline_step(config, &mut theta, &grad, state, lr_base)
                        .map_err(step_err(step, "optimizer_step"))?;
                    ema.update(&theta).map_err(step_err(step, "ema_update"))?;
                    (loss, None, None, None)
                }
            };
            if let Some(ledger) = ledger.as_mut() {
                ledger.record_step(q_t).map_err(step_err(step, "ledger_record_step"))?;
                last_eps = Some(ledger.epsilon(config.delta).map_err(step_err(step, "ledger_epsilon"))?);
            }
            let eval_loss_ema = if step % config.eval_every == 0 || step == total_steps {
                let ema = match &mut trainer {
                    Trainer::Private(opt) => opt.ema_mut(),
                    Trainer::Baseline { ema, .. } => ema,
                };
                Some(evaluate_ema(&model, ema, &mut theta, &eval_refs).map_err(step_err(step, "evaluate"))?)
            } else {
                None
            };
            rows.push(StepRow {
                step,
                raw_loss,
                eval_loss_ema,
                clip_rate,
                clip_norm,
                lr_multiplier,
                q_t,
                cum_epsilon: last_eps.map(|e| e.epsilon),
            });
        }
    }

    let ema_params = match &trainer {
        Trainer::Private(opt) => opt.ema().shadow().clone(),
        Trainer::Baseline { ema, .. } => ema.shadow().clone(),
    };
    let raw: Vec<f64> = rows.iter().map(|r| r.raw_loss).collect();
    let smoothed = config.smoothing.apply(&raw)?;
    let summary = RunSummary {
        name: config.name.clone(),
        steps: step,
        dataset_size: n,
        sigma: config.sigma,
        final_epsilon: last_eps.map(|e| e.epsilon),
        best_order: last_eps.map(|e| e.best_order),
        delta: config.delta,
        initial_loss: raw[0],
        final_raw_loss: raw[raw.len() - 1],
        final_smoothed_loss: smoothed[smoothed.len() - 1],
        final_eval_loss_ema: rows.last().and_then(|r| r.eval_loss_ema),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        peak_resident_memory: peak_memory(),
        seeds: config.seeds,
        rng_algorithm: RNG_ALGORITHM.into(),
        privacy_note: PRIVACY_NOTE.into(),
        config: config.clone(),
    };
    Ok(RunLog { rows, summary, ema_params })
}

fn baseline_step(
    config: &RunConfig,
    theta: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    match config.optimizer {
        OptimizerKind::Adam => adam_step(theta, grad, state, lr, &config.adam),
        OptimizerKind::Adamw { weight_decay } => adamw_step(theta, grad, state, lr, &config.adam, weight_decay),
        OptimizerKind::SgdMomentum { momentum } => sgd_momentum_step(theta, grad, state, lr, momentum),
        OptimizerKind::DpAdamAc => unreachable!("private runs use DpAdamAc"),
    }
}

/// Mean loss of the EMA parameters, computed by swapping them into `theta`
/// and restoring the live values afterwards.
pub fn evaluate_ema(
    model: &ModelSpec,
    ema: &mut EmaShadow,
    theta: &mut ParameterVector,
    eval: &[&Sample],
) -> Result<f64> {
    ema.swap_in(theta)?;
    let loss = model.loss(theta, eval);
    ema.restore(theta)?;
    loss
}

/// One sweep entry: the σ it ran with and its log or failure message.
#[derive(Debug)]
pub struct SweepEntry {
    pub sigma: f64,
    pub config: RunConfig,
    pub outcome: Result<RunLog>,
}

/// Config for sweep entry `index`: data and epoch seeds are shared, the
/// noise seed is offset by the entry index.
pub fn sweep_config(base: &RunConfig, sigma: f64, index: usize) -> RunConfig {
    let mut cfg = base.clone();
    cfg.sigma = sigma;
    cfg.seeds.noise = base.seeds.noise.wrapping_add(index as u64);
    cfg.name = format!("{}-sigma{}", base.name, sigma);
    cfg
}

/// Runs every σ in order. A failed run is recorded and the sweep continues.
pub fn sweep(base: &RunConfig, sigmas: &[f64]) -> Result<Vec<SweepEntry>> {
    if sigmas.is_empty() {
        return Err(Error::config("sweep needs at least one noise multiplier"));
    }
    for (i, &sigma) in sigmas.iter().enumerate() {
        sweep_config(base, sigma, i).validate()?;
    }
    Ok(sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let config = sweep_config(base, sigma, i);
            let outcome = run(&config);
            SweepEntry { sigma, config, outcome }
        })
        .collect())
}
