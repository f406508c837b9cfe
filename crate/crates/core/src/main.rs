use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dp_adam_ac::accountant::default_orders;
use dp_adam_ac::data::gen_synthetic;
use dp_adam_ac::harness::output::{parse_qlog, replay_epsilon};
use dp_adam_ac::harness::run::RunSummary;
use dp_adam_ac::harness::{self, RunConfig, DEFAULT_SWEEP};
use dp_adam_ac::{Error, Result};

#[derive(Parser)]
#[command(name = "dpac", version, about = "DP-Adam-AC training runs, noise sweeps, and privacy accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Noise multiplier(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    sigma: Vec<f64>,
    /// Sets the data, epoch, noise, and init seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write steps.csv, summary.json, loss_series.csv, qlog.csv.
    Run(Common),
    /// Train once per noise multiplier and write a comparison table.
    Sweep(Common),
    /// Replay a q_t log through the accountant.
    Epsilon {
        /// `step,q` per line (a run's qlog.csv).
        #[arg(long)]
        qlog: PathBuf,
        /// summary.json of the run to take sigma, delta, and orders from.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Config file to take sigma, delta, and orders from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Rolling-median then moving-average smoothing of one CSV column.
    Smooth {
        #[arg(long)]
        input: PathBuf,
        /// Column to smooth; defaults to the only or second column.
        #[arg(long)]
        column: Option<String>,
        #[arg(long, default_value_t = 21)]
        median_window: usize,
        #[arg(long, default_value_t = 50)]
        ma_window: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic training set described by a config.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_overrides(common: &Common, single_sigma: bool) -> Result<RunConfig> {
    let mut cfg = load_config(common.config.as_ref())?;
    if let Some(seed) = common.seed {
        cfg.seeds = harness::config::Seeds::all(seed);
    }
    if single_sigma {
        match common.sigma.as_slice() {
            [] => {}
            [s] => cfg.sigma = *s,
            _ => return Err(Error::InvalidArgument("`run` takes a single --sigma".into())),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = apply_overrides(&common, true)?;
            let log = harness::run(&cfg)?;
            let dir = harness::write_outputs(&log, &common.out)?;
            let s = &log.summary;
            println!("run written to {}", dir.display());
            println!(
                "steps={} final_loss={} smoothed={} epsilon={}",
                s.steps,
                s.final_raw_loss,
                s.final_smoothed_loss,
                s.final_epsilon.map_or("NA".into(), |e| format!("{e} (alpha={}, delta={})", s.best_order.unwrap_or(0), s.delta))
            );
        }
        Command::Sweep(common) => {
            let cfg = apply_overrides(&common, false)?;
            let sigmas = if common.sigma.is_empty() { DEFAULT_SWEEP.to_vec() } else { common.sigma.clone() };
            let entries = harness::sweep(&cfg, &sigmas)?;
            let dir = harness::write_sweep(&cfg.name, &entries, &common.out)?;
            println!("sweep written to {}", dir.display());
            for e in &entries {
                match &e.outcome {
                    Ok(log) => println!(
                        "sigma={} final_smoothed_loss={} epsilon={}",
                        e.sigma,
                        log.summary.final_smoothed_loss,
                        log.summary.final_epsilon.map_or("NA".into(), |x| x.to_string())
                    ),
                    Err(err) => println!("sigma={} failed: {err}", e.sigma),
                }
            }
        }
        Command::Epsilon { qlog, summary, config, sigma, delta } => {
            let (mut s, mut d, orders) = match (summary, config) {
                (Some(p), _) => {
                    let summary: RunSummary = serde_json::from_str(&read(&p)?)?;
                    (Some(summary.sigma), summary.delta, summary.config.orders)
                }
                (None, Some(p)) => {
                    let cfg = RunConfig::load(&p)?;
                    (Some(cfg.sigma), cfg.delta, cfg.orders)
                }
                (None, None) => (None, RunConfig::default().delta, default_orders()),
            };
            s = sigma.or(s);
            d = delta.unwrap_or(d);
            let s = s.ok_or_else(|| Error::InvalidArgument("need --sigma, --summary, or --config".into()))?;
            let q = parse_qlog(&read(&qlog)?)?;
            let e = replay_epsilon(&q, s, &orders, d)?;
            println!("{}", serde_json::json!({
                "epsilon": e.epsilon,
                "best_order": e.best_order,
                "delta": e.delta,
                "sigma": s,
                "steps": q.len(),
            }));
        }
        Command::Smooth { input, column, median_window, ma_window, out } => {
            let text = read(&input)?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
            let idx = match &column {
                Some(c) => header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::InvalidArgument(format!("no column {c:?} in {}", input.display())))?,
                None if header.len() == 1 => 0,
                None => 1,
            };
            let values = lines
                .enumerate()
                .map(|(i, l)| {
                    l.split(',')
                        .nth(idx)
                        .and_then(|f| f.trim().parse::<f64>().ok())
                        .ok_or(Error::Parse { line: i + 2, msg: "missing or non-numeric value".into() })
                })
                .collect::<Result<Vec<f64>>>()?;
            let smoothed = harness::smooth_series(&values, median_window, ma_window)?;
            let mut csv = format!("index,{0},{0}_smoothed\n", header.get(idx).unwrap_or(&"value"));
            for (i, (v, s)) in values.iter().zip(&smoothed).enumerate() {
                csv.push_str(&format!("{i},{v},{s}\n"));
            }
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?,
                None => print!("{csv}"),
            }
        }
        Command::GenData { config, seed, out } => {
            let cfg = load_config(config.as_ref())?;
            let mut spec = cfg.data.synthetic(seed.unwrap_or(cfg.seeds.data));
            spec.n = cfg.data.n;
            let ds = gen_synthetic(&spec)?;
            std::fs::write(&out, ds.to_text()).map_err(|e| Error::Io { path: out.display().to_string(), source: e })?;
            println!("{} examples written to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
