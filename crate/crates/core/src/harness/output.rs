//! CSV / JSON run artifacts and the offline ledger replay.
//!
//! Each run gets its own directory holding `steps.csv`, `summary.json`,
//! `loss_series.csv` (raw and smoothed loss) and `qlog.csv` (`step,q` per
//! line). Files are written into a hidden staging directory that is renamed
//! into place once complete.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::accountant::{OrderEpsilon, PrivacyLedger};
use crate::error::{Error, Result};
use crate::harness::run::{RunLog, RunSummary, StepRow, SweepEntry};

pub const STEPS_HEADER: &str = "step,raw_loss,eval_loss_ema,clip_rate,clip_norm,lr_multiplier,q_t,cum_epsilon";
pub const NOT_APPLICABLE: &str = "NA";

fn opt(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |x| x.to_string())
}

/// `steps.csv` contents. Floats use the shortest representation that parses
/// back to the same value. A skipped evaluation is an empty field;
/// quantities that do not apply to the run are `NA`.
pub fn steps_csv(rows: &[StepRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 96);
    out.push_str(STEPS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.raw_loss,
            opt(r.eval_loss_ema, ""),
            opt(r.clip_rate, NOT_APPLICABLE),
            opt(r.clip_norm, NOT_APPLICABLE),
            opt(r.lr_multiplier, NOT_APPLICABLE),
            r.q_t,
            opt(r.cum_epsilon, NOT_APPLICABLE),
        );
    }
    out
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    match field {
        "" | NOT_APPLICABLE => Ok(None),
        s => s.parse().map(Some).map_err(|e| Error::Parse { line, msg: format!("{s:?}: {e}") }),
    }
}

pub fn parse_steps_csv(text: &str) -> Result<Vec<StepRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == STEPS_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: "unexpected steps.csv header".into() }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse { line, msg: format!("expected 8 fields, found {}", f.len()) });
            }
            let req = |s: &str| parse_opt(s, line)?.ok_or(Error::Parse { line, msg: "missing value".into() });
            Ok(StepRow {
                step: f[0].parse().map_err(|e| Error::Parse { line, msg: format!("step: {e}") })?,
                raw_loss: req(f[1])?,
                eval_loss_ema: parse_opt(f[2], line)?,
                clip_rate: parse_opt(f[3], line)?,
                clip_norm: parse_opt(f[4], line)?,
                lr_multiplier: parse_opt(f[5], line)?,
                q_t: req(f[6])?,
                cum_epsilon: parse_opt(f[7], line)?,
            })
        })
        .collect()
}

pub fn qlog_csv(q: &[(u64, f64)]) -> String {
    let mut out = String::from("step,q\n");
    for (step, q) in q {
        let _ = writeln!(out, "{step},{q}");
    }
    out
}

/// Parses `step,q` lines; a `step,q` header is optional.
pub fn parse_qlog(text: &str) -> Result<Vec<(u64, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(i, l)| !l.trim().is_empty() && !(*i == 0 && l.trim() == "step,q"))
        .map(|(i, l)| {
            let line = i + 1;
            let (s, q) = l.trim().split_once(',').ok_or(Error::Parse { line, msg: "expected step,q".into() })?;
            let bad = |e: String| Error::Parse { line, msg: e };
            Ok((s.parse().map_err(|e| bad(format!("step: {e}")))?, q.parse().map_err(|e| bad(format!("q: {e}")))?))
        })
        .collect()
}

/// Replays a sequence of sampling rates through a fresh ledger.
pub fn replay_epsilon(q: &[(u64, f64)], sigma: f64, orders: &[u32], delta: f64) -> Result<OrderEpsilon> {
    let mut ledger = PrivacyLedger::new(sigma, orders)?;
    for &(_, rate) in q {
        ledger.record_step(rate)?;
    }
    ledger.epsilon(delta)
}

pub fn loss_series_csv(raw: &[f64], smoothed: &[f64]) -> String {
    let mut out = String::from("step,raw_loss,smoothed_loss\n");
    for (i, (r, s)) in raw.iter().zip(smoothed).enumerate() {
        let _ = writeln!(out, "{},{r},{s}", i + 1);
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn unix_millis() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Creates `parent/<stem>` or, if taken, `parent/<stem>-<k>`. Never reuses
/// an existing path.
fn fresh_dir_name(parent: &Path, stem: &str) -> PathBuf {
    let mut candidate = parent.join(stem);
    let mut k = 1;
    while candidate.exists() {
        candidate = parent.join(format!("{stem}-{k}"));
        k += 1;
    }
    candidate
}

fn stage(parent: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(".{stem}.{}.{}.partial", std::process::id(), unix_millis()));
    fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
    Ok(staging)
}

fn commit(staging: &Path, parent: &Path, stem: &str) -> Result<PathBuf> {
    let target = fresh_dir_name(parent, stem);
    fs::rename(staging, &target).map_err(|e| Error::io(&target, e))?;
    Ok(target)
}

fn write_run_files(log: &RunLog, dir: &Path) -> Result<()> {
    let raw = log.raw_losses();
    let smoothed = log.smoothed_losses()?;
    write(&dir.join("steps.csv"), &steps_csv(&log.rows))?;
    write(&dir.join("loss_series.csv"), &loss_series_csv(&raw, &smoothed))?;
    write(&dir.join("qlog.csv"), &qlog_csv(&log.q_log()))?;
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&log.summary)?)?;
    Ok(())
}

/// Writes one run under `out_dir/<name>-<timestamp>` and returns that path.
pub fn write_outputs(log: &RunLog, out_dir: &Path) -> Result<PathBuf> {
    let stem = format!("{}-{}", log.summary.name, unix_millis());
    let staging = stage(out_dir, &stem)?;
    if let Err(e) = write_run_files(log, &staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    commit(&staging, out_dir, &stem)
}

pub const COMPARISON_HEADER: &str =
    "sigma,status,steps,initial_loss,final_raw_loss,final_smoothed_loss,final_eval_loss_ema,final_epsilon,best_order,run_dir";

/// Writes every successful run plus `comparison.csv` under
/// `out_dir/<name>-sweep-<timestamp>`.
pub fn write_sweep(base_name: &str, entries: &[SweepEntry], out_dir: &Path) -> Result<PathBuf> {
    let stem = format!("{base_name}-sweep-{}", unix_millis());
    let staging = stage(out_dir, &stem)?;
    let result = (|| -> Result<()> {
        let mut table = String::from(COMPARISON_HEADER);
        table.push('\n');
        for entry in entries {
            match &entry.outcome {
                Ok(log) => {
                    let dir = fresh_dir_name(&staging, &entry.config.name);
                    fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
                    write_run_files(log, &dir)?;
                    let s: &RunSummary = &log.summary;
                    let _ = writeln!(
                        table,
                        "{},ok,{},{},{},{},{},{},{},{}",
                        entry.sigma,
                        s.steps,
                        s.initial_loss,
                        s.final_raw_loss,
                        s.final_smoothed_loss,
                        opt(s.final_eval_loss_ema, NOT_APPLICABLE),
                        opt(s.final_epsilon, NOT_APPLICABLE),
                        s.best_order.map_or_else(|| NOT_APPLICABLE.to_string(), |a| a.to_string()),
                        dir.file_name().unwrap_or_default().to_string_lossy(),
                    );
                }
                Err(e) => {
                    let msg = e.to_string().replace([',', '\n'], ";");
                    let _ = writeln!(table, "{},failed: {msg},NA,NA,NA,NA,NA,NA,NA,NA", entry.sigma);
                }
            }
        }
        write(&staging.join("comparison.csv"), &table)
    })();
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    commit(&staging, out_dir, &stem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, eps: Option<f64>, eval: Option<f64>) -> StepRow {
        StepRow {
            step,
            raw_loss: 0.1 + 0.2,
            eval_loss_ema: eval,
            clip_rate: Some(0.25),
            clip_norm: Some(3.0),
            lr_multiplier: None,
            q_t: 0.0032,
            cum_epsilon: eps,
        }
    }

    #[test]
    fn steps_csv_round_trip() {
        let rows = vec![row(1, Some(1.0 / 3.0), None), row(2, None, Some(0.69))];
        let text = steps_csv(&rows);
        assert!(text.starts_with("step,raw_loss,eval_loss_ema,clip_rate,clip_norm,lr_multiplier,q_t,cum_epsilon\n"));
        assert!(text.contains("1,0.30000000000000004,,0.25,3,NA,0.0032,0.3333333333333333\n"));
        assert_eq!(parse_steps_csv(&text).unwrap(), rows);
    }

    #[test]
    fn steps_csv_rejects_wrong_header() {
        assert!(parse_steps_csv("step,loss\n1,2\n").is_err());
    }

    #[test]
    fn qlog_parses_with_or_without_header() {
        let q = vec![(1, 0.0032), (2, 0.0016)];
        assert_eq!(parse_qlog(&qlog_csv(&q)).unwrap(), q);
        assert_eq!(parse_qlog("1,0.0032\n2,0.0016\n").unwrap(), q);
        assert!(matches!(parse_qlog("1;0.5\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn fresh_names_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = fresh_dir_name(dir.path(), "x");
        fs::create_dir(&a).unwrap();
        let b = fresh_dir_name(dir.path(), "x");
        assert_ne!(a, b);
        assert!(b.ends_with("x-1"));
    }
}
