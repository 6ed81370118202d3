//! Trace statistics.

use crate::error::{Error, Result};
use crate::fluid_oracle::GoodputPoint;

use super::RoundRecord;

/// Per-client mean of `x_i(t)` over the first `rounds` rounds.
pub fn empirical_average(trace: &[RoundRecord], rounds: usize) -> Result<GoodputPoint> {
    if rounds == 0 || rounds > trace.len() {
        return Err(Error::OutOfRange {
            index: rounds,
            len: trace.len(),
        });
    }
    let n = trace[0].goodput.len();
    let mut sums = vec![0.0; n];
    for record in &trace[..rounds] {
        for (s, &x) in sums.iter_mut().zip(&record.goodput) {
            *s += x as f64;
        }
    }
    Ok(GoodputPoint::new(sums.into_iter().map(|s| s / rounds as f64).collect()))
}

/// Trailing moving average and sample standard deviation. The first `window - 1`
/// entries use however many points are available.
pub fn ma_smooth(series: &[f64], window: usize) -> (Vec<f64>, Vec<f64>) {
    let window = window.max(1);
    let mut means = Vec::with_capacity(series.len());
    let mut stds = Vec::with_capacity(series.len());
    for end in 1..=series.len() {
        let slice = &series[end.saturating_sub(window)..end];
        let k = slice.len() as f64;
        let mean = slice.iter().sum::<f64>() / k;
        let var = if slice.len() > 1 {
            slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Sample standard deviation of the last `window` entries (all of them if shorter).
pub fn trailing_std(series: &[f64], window: usize) -> Option<f64> {
    if series.is_empty() {
        return None;
    }
    let start = series.len().saturating_sub(window.max(1));
    ma_smooth(&series[start..], window).1.last().copied()
}
