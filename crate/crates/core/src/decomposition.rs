//! Recursive multi-period seasonal/trend decomposition with pooling.
//!
//! Periods are processed from short to long. Round `j` splits the running
//! trend with a moving average of width `p_j`; its seasonal part is then
//! average-pooled with window and stride `max(1, p_{j-1} / 2)` (`p_0 = 2`,
//! so the first season keeps full resolution). The final trend is pooled
//! with `p_k / 2` and kept as one more component, giving `k + 1` series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Series;

/// Bookkeeping for one decomposed component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodSpec {
    /// Period length in original time steps.
    pub p: usize,
    /// Pooled component length.
    pub iota: usize,
    /// Pooled period length, used as token size.
    pub tau: usize,
    /// Pooled horizon length.
    pub eta: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
}

fn pooled_len(len: usize, window: usize, stride: usize) -> usize {
    if len < window {
        return 1;
    }
    (len - window).div_ceil(stride) + 1
}

impl PeriodSpec {
    /// Spec for a component with period `p` pooled by `pool` (window = stride).
    pub fn new(p: usize, pool: usize, context: usize, horizon: usize) -> Self {
        let pool = pool.max(1);
        let iota = pooled_len(context, pool, pool);
        let eta = pooled_len(horizon, pool, pool);
        let scaled = (iota as f64 / context as f64 * p as f64).round() as usize;
        let tau = scaled.max(2).min(iota);
        PeriodSpec {
            p,
            iota,
            tau,
            eta,
            pool_window: pool,
            pool_stride: pool,
        }
    }

    /// Spec of a series used without decomposition: full resolution, token
    /// size `p`.
    pub fn raw(p: usize, context: usize, horizon: usize) -> Self {
        PeriodSpec {
            p,
            iota: context,
            tau: p.clamp(2, context),
            eta: horizon,
            pool_window: 1,
            pool_stride: 1,
        }
    }
}

/// Output of [`mpsd`]: `k + 1` pooled components in ascending period order,
/// the last one being the pooled final trend.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesGroup {
    pub components: Vec<Series>,
    pub specs: Vec<PeriodSpec>,
}

/// Pre-pooling result of the recursion: `x == sum(seasons) + trend`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub seasons: Vec<Series>,
    pub trend: Series,
}

/// Windowed mean along time.
///
/// Stride 1 replicates edge values (`(w-1)/2` on the left, the rest on the
/// right) so the output keeps length `L`. Larger strides do not pad and
/// emit `ceil((L-w)/s) + 1` windows, the last one averaged over its actual
/// overlap with the series.
pub fn moving_average(x: &Series, window: usize, stride: usize) -> Result<Series> {
    if window == 0 || stride == 0 {
        return Err(Error::contract(
            "moving average window and stride must be >= 1",
        ));
    }
    if window > x.len() {
        return Err(Error::Window {
            window,
            len: x.len(),
        });
    }
    if stride == 1 {
        x.map_rows(|row| centered_mean(row, window))
    } else {
        x.map_rows(|row| pooled_mean(row, window, stride))
    }
}

fn centered_mean(row: &[f64], window: usize) -> Vec<f64> {
    let len = row.len();
    let left = (window - 1) / 2;
    let padded_at = |i: usize| -> f64 {
        // index into the virtual padded sequence
        row[i.saturating_sub(left).min(len - 1)]
    };
    let mut prefix = Vec::with_capacity(len + window);
    prefix.push(0.0);
    let mut acc = 0.0;
    for i in 0..len + window - 1 {
        acc += padded_at(i);
        prefix.push(acc);
    }
    let w = window as f64;
    (0..len)
        .map(|i| (prefix[i + window] - prefix[i]) / w)
        .collect()
}

fn pooled_mean(row: &[f64], window: usize, stride: usize) -> Vec<f64> {
    let len = row.len();
    let count = pooled_len(len, window, stride);
    (0..count)
        .map(|i| {
            let start = i * stride;
            let end = (start + window).min(len);
            row[start..end].iter().sum::<f64>() / (end - start) as f64
        })
        .collect()
}

/// Splits `t` into `(season, trend)` with a width-`period` moving average.
pub fn series_decomp(t: &Series, period: usize) -> Result<(Series, Series)> {
    if period < 2 {
        return Err(Error::contract(format!(
            "decomposition period must be >= 2, got {period}"
        )));
    }
    let trend = moving_average(t, period, 1)?;
    let season = t.zip_with(&trend, |a, b| a - b)?;
    Ok((season, trend))
}

fn check_periods(periods: &[usize], len: usize) -> Result<()> {
    if periods.is_empty() {
        return Err(Error::contract("at least one period is required"));
    }
    if periods.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract(format!(
            "periods must be ascending, got {periods:?}"
        )));
    }
    if let Some(&p) = periods.iter().find(|&&p| p < 2 || p > len) {
        return Err(Error::contract(format!("period {p} outside [2, {len}]")));
    }
    Ok(())
}

/// Seasons and final trend before pooling.
pub fn recursive_decomp(x: &Series, periods: &[usize]) -> Result<Decomposition> {
    check_periods(periods, x.len())?;
    let mut trend = x.clone();
    let mut seasons = Vec::with_capacity(periods.len());
    for &p in periods {
        let (s, t) = series_decomp(&trend, p)?;
        seasons.push(s);
        trend = t;
    }
    Ok(Decomposition { seasons, trend })
}

/// Pool window of every component for ascending `periods`.
fn pool_windows(periods: &[usize]) -> Vec<usize> {
    let mut windows = Vec::with_capacity(periods.len() + 1);
    let mut prev = 2;
    for &p in periods {
        windows.push((prev / 2).max(1));
        prev = p;
    }
    windows.push((prev / 2).max(1));
    windows
}

/// Component specs for a context `L`, horizon `H` and ascending periods.
pub fn plan(context: usize, horizon: usize, periods: &[usize]) -> Result<Vec<PeriodSpec>> {
    check_periods(periods, context)?;
    let pools = pool_windows(periods);
    let last = *periods.last().expect("non-empty");
    Ok(pools
        .iter()
        .enumerate()
        .map(|(j, &pool)| PeriodSpec::new(*periods.get(j).unwrap_or(&last), pool, context, horizon))
        .collect())
}

/// Multi-period decomposition of an `M x L` window.
pub fn mpsd(x: &Series, periods: &[usize], horizon: usize) -> Result<SeriesGroup> {
    let specs = plan(x.len(), horizon, periods)?;
    let Decomposition { seasons, trend } = recursive_decomp(x, periods)?;
    let components = seasons
        .iter()
        .chain(std::iter::once(&trend))
        .zip(&specs)
        .map(|(s, spec)| pool(s, spec.pool_window))
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(components
        .iter()
        .zip(&specs)
        .all(|(c, s)| c.len() == s.iota));
    Ok(SeriesGroup { components, specs })
}

fn pool(s: &Series, window: usize) -> Result<Series> {
    if window == 1 {
        Ok(s.clone())
    } else {
        moving_average(s, window, window)
    }
}
