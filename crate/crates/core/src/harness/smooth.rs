//! Loss-curve smoothing: rolling median, then moving average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Smoothing {
    pub median_window: usize,
    pub ma_window: usize,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self { median_window: 21, ma_window: 50 }
    }
}

impl Smoothing {
    pub fn validate(&self) -> Result<()> {
        if self.median_window == 0 || self.median_window % 2 == 0 {
            return Err(Error::config(format!(
                "median window must be a positive odd integer, got {}",
                self.median_window
            )));
        }
        if self.ma_window == 0 {
            return Err(Error::config("moving-average window must be >= 1"));
        }
        Ok(())
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        smooth_series(values, self.median_window, self.ma_window)
    }
}

/// Index range of a centered window of `width` around `i`, shrunk equally on
/// both sides near the ends of a series of length `n`.
fn centered(i: usize, n: usize, width: usize) -> std::ops::Range<usize> {
    let left = (width - 1) / 2;
    let right = width / 2;
    let room = i.min(n - 1 - i);
    let (l, r) = if room >= right { (left, right) } else { (left.min(room), room) };
    i - l..i + r + 1
}

/// Rolling median over `median_window` points followed by a moving average
/// over `ma_window` points, both centered; windows shrink symmetrically at
/// the boundaries. Output length equals input length.
pub fn smooth_series(values: &[f64], median_window: usize, ma_window: usize) -> Result<Vec<f64>> {
    Smoothing { median_window, ma_window }.validate()?;
    let n = values.len();
    let mut scratch = Vec::with_capacity(median_window);
    let medians: Vec<f64> = (0..n)
        .map(|i| {
            scratch.clear();
            scratch.extend_from_slice(&values[centered(i, n, median_window)]);
            scratch.sort_by(f64::total_cmp);
            scratch[scratch.len() / 2]
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let w = &medians[centered(i, n, ma_window)];
            // offset by the first value so a flat window averages exactly
            let base = w[0];
            base + w.iter().map(|v| v - base).sum::<f64>() / w.len() as f64
        })
        .collect())
}
