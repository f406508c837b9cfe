//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially on a
//! single thread. Exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dp_adam_ac::accountant::{default_orders, rdp_subsampled_gaussian};
use dp_adam_ac::controllers::{
    observed_clip_rate, ClipConfig, ClipController, EmaShadow, LrControlConfig, LrController,
};
use dp_adam_ac::data::{batches, gen_synthetic, Sample, SyntheticSpec, TaskKind};
use dp_adam_ac::dp::{privatize, DpAdamAc, DpAdamAcConfig, MicrobatchReport, NoiseConfig};
use dp_adam_ac::harness::config::{ModelKind, Seeds};
use dp_adam_ac::harness::output::parse_steps_csv;
use dp_adam_ac::harness::{run, RunConfig};
use dp_adam_ac::models::{microbatch_sum_grad, Head, ModelSpec};
use dp_adam_ac::optim::{adam_step, AdamHyper, OptimizerState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{LogNormal, StandardNormal};

/// Batch size of the reconstructed ε configuration (N=10,000, δ=1e-5, one epoch).
const EPSILON_BATCH: usize = 128;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

fn oracle_equivalence() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/rdp_oracle.csv");
    let text = std::fs::read_to_string(path).expect("oracle fixture");
    let mut worst = 0.0f64;
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (alpha, q, sigma, want): (u32, f64, f64, f64) =
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap());
        worst = worst.max(rel(rdp_subsampled_gaussian(alpha, q, sigma).unwrap(), want));
        rows += 1;
    }
    outcome(rows == 1890 && worst <= 1e-10, format!("{rows} grid points, max rel err {worst:.2e} (tol 1e-10)"))
}

fn analytic_limits() -> Outcome {
    let rates = [0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0];
    let sigmas = [0.3, 0.5, 0.7, 1.0, 2.0, 10.0];
    let mut worst_full = 0.0f64;
    let mut zero_exact = true;
    let mut monotone = true;
    for alpha in default_orders() {
        for &s in &sigmas {
            let v: Vec<f64> = rates.iter().map(|&q| rdp_subsampled_gaussian(alpha, q, s).unwrap()).collect();
            zero_exact &= v[0] == 0.0;
            worst_full = worst_full.max(rel(v[6], f64::from(alpha) / (2.0 * s * s)));
            monotone &= v.windows(2).all(|w| w[0] <= w[1]);
        }
        for &q in &rates[1..] {
            let v: Vec<f64> = sigmas.iter().map(|&s| rdp_subsampled_gaussian(alpha, q, s).unwrap()).collect();
            monotone &= v.windows(2).all(|w| w[0] > w[1]);
        }
    }
    outcome(
        worst_full <= 1e-12 && zero_exact && monotone,
        format!("q=1 max rel err {worst_full:.1e}, q=0 exact: {zero_exact}, monotone: {monotone}"),
    )
}

fn epsilon_reproduction() -> Outcome {
    let targets = [(0.5, 12.0), (0.7, 4.0), (1.0, 2.0)];
    let mut eps = Vec::new();
    let mut detail = format!("B={EPSILON_BATCH}:");
    let mut within = true;
    for &(sigma, target) in &targets {
        let mut cfg = RunConfig::default();
        cfg.batch_size = EPSILON_BATCH;
        cfg.sigma = sigma;
        cfg.data.n = 10_000;
        cfg.delta = 1e-5;
        cfg.epochs = 1;
        cfg.eval_every = 1_000;
        let log = run(&cfg).unwrap();
        let e = log.summary.final_epsilon.unwrap();
        let dev = (e - target) / target;
        within &= dev.abs() <= 0.30;
        detail.push_str(&format!(" σ={sigma} ε={e:.3} ({:+.1}%)", 100.0 * dev));
        eps.push(e);
    }
    let decreasing = eps.windows(2).all(|w| w[0] > w[1]);
    outcome(within && decreasing, format!("{detail}; strictly decreasing: {decreasing}"))
}

fn sigma_zero_reduction() -> Outcome {
    let model = ModelSpec::Mlp2 { dim: 10, hidden: 16, head: Head::Squared };
    let data = gen_synthetic(&SyntheticSpec { kind: TaskKind::Regression, n: 3_200, dim: 10, seed: 5, ..SyntheticSpec::default() })
        .unwrap();
    let cfg = DpAdamAcConfig {
        noise: NoiseConfig { sigma: 0.0, ..NoiseConfig::default() },
        clip: ClipConfig { initial: 1e9, min: 1e9, max: 1e9, ..ClipConfig::default() },
        lr_control: LrControlConfig { gamma_min: 1.0, gamma_max: 1.0, ..LrControlConfig::default() },
        ..DpAdamAcConfig::default()
    };
    let lr = 1e-3;
    let theta0 = model.init_params(3);
    let mut theta = theta0.clone();
    let mut reference = theta0.clone();
    let mut opt = DpAdamAc::new(&theta, &cfg).unwrap();
    let mut ref_state = OptimizerState::new(theta.len());
    let mut worst = 0.0f64;
    let mut moved = 0.0f64;
    let mut steps = 0;
    for batch in batches(data.len(), 32, 8, 7).unwrap().take(100) {
        let micro: Vec<Vec<&Sample>> = batch.microbatches().iter().map(|mb| data.gather(mb)).collect();
        let tel = opt.step(&mut theta, &micro, lr, |th, mb, buf| microbatch_sum_grad(&model, th, mb, buf)).unwrap();
        assert_eq!(tel.clip_rate, 0.0);
        let mut g = vec![0.0; reference.len()];
        model.loss_and_grad(&reference, &data.gather(&batch.indices), &mut g).unwrap();
        adam_step(&mut reference, &g, &mut ref_state, lr, &AdamHyper::default()).unwrap();
        for (a, b) in theta.iter().zip(reference.iter()) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-12));
        }
        steps += 1;
    }
    for (a, b) in reference.iter().zip(theta0.iter()) {
        moved = moved.max((a - b).abs());
    }
    outcome(
        steps == 100 && worst <= 1e-6 && moved > 0.0,
        format!("{steps} steps, max rel param deviation {worst:.2e} (tol 1e-6)"),
    )
}

fn clip_convergence() -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    let unit = LogNormal::new(0.0, 0.5).unwrap();
    for (k, &target) in [0.1, 0.2, 0.4].iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(40 + k as u64);
        let mut ctl = ClipController::new(&ClipConfig { target_rate: target, ..ClipConfig::default() }).unwrap();
        let mut rates = Vec::with_capacity(500);
        for _ in 0..500 {
            let sizes = vec![8usize; 4];
            let norms: Vec<f64> = sizes.iter().map(|&m| rng.sample(unit) * m as f64).collect();
            let report = MicrobatchReport::new(norms, sizes).unwrap();
            rates.push(observed_clip_rate(&report, ctl.clip_norm()));
            ctl.record_and_update(&report);
        }
        let mean = rates[300..].iter().sum::<f64>() / 200.0;
        pass &= (mean - target).abs() <= 0.05;
        detail.push_str(&format!("ρ*={target}: {mean:.3}  "));
    }
    outcome(pass, format!("trailing-200 mean clip rate {}", detail.trim_end()))
}

fn controller_bounds() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..10_000 {
        let c_min = 10f64.powf(rng.random_range(-4.0..0.0));
        let c_max = c_min * 10f64.powf(rng.random_range(0.0..4.0));
        let clip_cfg = ClipConfig {
            initial: rng.random_range(c_min..=c_max),
            min: c_min,
            max: c_max,
            target_rate: rng.random_range(0.01..0.99),
            history: rng.random_range(1..600),
        };
        let lr_cfg = LrControlConfig {
            gamma_min: rng.random_range(0.01..=1.0),
            gamma_max: rng.random_range(1.0..=10.0),
            up: rng.random_range(1.0..2.0),
            down: rng.random_range(0.5..=1.0),
            rate_low: rng.random_range(0.0..0.5),
            rate_high: rng.random_range(0.5..1.0),
        };
        let mut clip = ClipController::new(&clip_cfg).unwrap();
        let mut lr = LrController::new(&lr_cfg).unwrap();
        for _ in 0..rng.random_range(1..50) {
            let k = rng.random_range(1..6);
            let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..32)).collect();
            let norms: Vec<f64> = (0..k)
                .map(|_| match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => 10f64.powf(rng.random_range(-12.0..12.0)),
                    _ => rng.random_range(0.0..20.0),
                })
                .collect();
            let report = MicrobatchReport::new(norms, sizes).unwrap();
            let rate = observed_clip_rate(&report, clip.clip_norm());
            let c = clip.record_and_update(&report);
            let g = lr.update(rate);
            if !(c >= c_min && c <= c_max && g >= lr_cfg.gamma_min && g <= lr_cfg.gamma_max) {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("10000 random sequences, {violations} bound violations"))
}

fn ema_closed_form() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for _ in 0..20 {
        let d = 16;
        let decay: f64 = rng.random_range(0.5..0.9999);
        let init: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let traj: Vec<Vec<f64>> =
            (0..200).map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect()).collect();
        let mut ema = EmaShadow::new(&init, decay).unwrap();
        traj.iter().for_each(|t| ema.update(t).unwrap());
        for k in 0..d {
            let mut expected = decay.powi(200) * init[k];
            for (j, t) in traj.iter().enumerate() {
                expected += (1.0 - decay) * decay.powi(199 - j as i32) * t[k];
            }
            worst = worst.max((ema.shadow()[k] - expected).abs() / expected.abs().max(1e-300));
        }
        let live = traj[199].clone();
        let mut theta = live.clone();
        ema.swap_in(&mut theta).unwrap();
        bitwise &= theta.iter().zip(ema.shadow().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        ema.restore(&mut theta).unwrap();
        bitwise &= theta.iter().zip(&live).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(worst <= 1e-10 && bitwise, format!("max rel err {worst:.2e} (tol 1e-10), swap/restore bitwise: {bitwise}"))
}

fn gradient_exactness() -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for (i, model) in common::gradcheck_models().iter().enumerate() {
        let err = common::max_gradcheck_error(model, 20, 200 + i as u64);
        pass &= err <= common::FD_TOL;
        let name = match model {
            ModelSpec::LogisticRegression { .. } => "logistic",
            ModelSpec::Mlp2 { head: Head::Logistic, .. } => "mlp/logistic",
            ModelSpec::Mlp2 { .. } => "mlp/squared",
            ModelSpec::CharMlpLm { .. } => "char_lm",
        };
        detail.push_str(&format!("{name} {err:.1e}  "));
    }
    outcome(pass, format!("max rel err at 20 points each: {}", detail.trim_end()))
}

fn noise_calibration() -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for (batch, expected) in [(1usize, 3.0), (4, 0.75)] {
        let mut rng = ChaCha20Rng::seed_from_u64(9 + batch as u64);
        let d = 4;
        let n = 1_000_000;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut g = vec![0.0; d];
        for _ in 0..n {
            g.iter_mut().for_each(|x| *x = 0.0);
            privatize(&mut g, 1.0, 3.0, batch, &mut rng).unwrap();
            for k in 0..d {
                sum[k] += g[k];
                sq[k] += g[k] * g[k];
            }
        }
        let nf = n as f64;
        let worst = (0..d)
            .map(|k| {
                let mean = sum[k] / nf;
                ((sq[k] - nf * mean * mean) / (nf - 1.0)).sqrt()
            })
            .map(|s| (s - expected).abs() / expected)
            .fold(0.0, f64::max);
        pass &= worst <= 0.01;
        detail.push_str(&format!("B={batch}: max rel dev {:.3}%  ", 100.0 * worst));
    }
    outcome(pass, format!("σ=1 C=3, 10^6 samples/coord: {}", detail.trim_end()))
}

fn privacy_utility_trend() -> Outcome {
    let sigmas = [0.0, 0.5, 1.0];
    let mut all_decrease = true;
    let mut medians = Vec::new();
    for &sigma in &sigmas {
        let mut finals = Vec::new();
        for seed in 0..5 {
            let mut cfg = RunConfig::default();
            cfg.model.kind = ModelKind::LogisticRegression;
            cfg.data.kind = TaskKind::BinaryClassification;
            cfg.data.n = 10_000;
            cfg.epochs = 1;
            cfg.sigma = sigma;
            cfg.seeds = Seeds::all(seed);
            let s = run(&cfg).unwrap().summary;
            all_decrease &= s.final_smoothed_loss < s.initial_loss;
            finals.push(s.final_smoothed_loss);
        }
        finals.sort_by(f64::total_cmp);
        medians.push(finals[2]);
    }
    let ordered = medians.windows(2).all(|w| w[0] <= w[1]);
    outcome(
        all_decrease && ordered,
        format!(
            "all 15 runs below initial loss: {all_decrease}; median final loss σ=0/0.5/1: {:.5}/{:.5}/{:.5}",
            medians[0], medians[1], medians[2]
        ),
    )
}

fn ledger_replay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.sigma = 0.7;
    cfg.data.n = 3_000;
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let runs = dir.path().join("runs");
    let status = Command::new(env!("CARGO_BIN_EXE_dpac"))
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&runs)
        .output()
        .unwrap();
    if !status.status.success() {
        return outcome(false, format!("run failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    let run_dir = std::fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    let rows = parse_steps_csv(&std::fs::read_to_string(run_dir.join("steps.csv")).unwrap()).unwrap();
    let logged = rows.last().and_then(|r| r.cum_epsilon);
    let out = Command::new(env!("CARGO_BIN_EXE_dpac"))
        .args(["epsilon", "--qlog"])
        .arg(run_dir.join("qlog.csv"))
        .arg("--summary")
        .arg(run_dir.join("summary.json"))
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap_or_default();
    let replayed = v["epsilon"].as_f64();
    outcome(
        logged.is_some() && replayed == logged,
        format!("{} steps, logged ε={logged:?}, replayed ε={replayed:?}", rows.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("accountant oracle equivalence", oracle_equivalence),
        ("accountant analytic limits and monotonicity", analytic_limits),
        ("epsilon reproduction", epsilon_reproduction),
        ("sigma=0 reduction to Adam", sigma_zero_reduction),
        ("clip-controller convergence", clip_convergence),
        ("controller bounds", controller_bounds),
        ("EMA closed form and swap/restore", ema_closed_form),
        ("gradient exactness", gradient_exactness),
        ("noise calibration", noise_calibration),
        ("privacy-utility trend", privacy_utility_trend),
        ("ledger replay", ledger_replay),
    ];
    let suite = Instant::now();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failures += usize::from(!result.pass);
        println!(
            "{} [{:>2}] {name}: {} ({:.2}s)",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    let total = suite.elapsed();
    let in_time = total < Duration::from_secs(600);
    failures += usize::from(!in_time);
    println!(
        "{} [12] whole suite under 10 minutes, single-threaded: {:.2}s",
        if in_time { "PASS" } else { "FAIL" },
        total.as_secs_f64()
    );
    println!("acceptance: {} of 12 criteria passed", 12 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
