//! Fourier amplitude spectrum and dominant-period selection.
//!
//! Amplitudes are averaged over channels before ranking. Only bins
//! `1..=L/2` are candidates; the DC bin never yields a period. A bin `f`
//! maps to the integer period `round(L / f)`, clamped to at least 2, and
//! repeated periods are skipped so the result keeps amplitude order.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::series::Series;

pub const MIN_LENGTH: usize = 4;

/// Bins whose amplitude is below this fraction of the signal norm are
/// treated as empty (e.g. every non-DC bin of a constant series).
const SILENCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodDetection {
    /// Channel-mean amplitude for bins `0..=L/2`.
    pub amplitudes: Vec<f64>,
    /// Selected frequency bins, strongest first.
    pub frequencies: Vec<usize>,
    /// Period of each selected bin, aligned with `frequencies`.
    pub periods: Vec<usize>,
}

/// `|DFT(x)[f]|` for `f = 0..=L/2`.
pub fn rfft_magnitude(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < MIN_LENGTH {
        return Err(Error::InputTooShort {
            len: x.len(),
            min: MIN_LENGTH,
        });
    }
    Ok(magnitudes(x))
}

#[cfg(not(feature = "naive-dft"))]
fn magnitudes(x: &[f64]) -> Vec<f64> {
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(x.len())
        .process(&mut buf);
    buf[..=x.len() / 2].iter().map(|c| c.norm()).collect()
}

#[cfg(feature = "naive-dft")]
fn magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let angle = -2.0 * std::f64::consts::PI * ((f * t) % n) as f64 / n as f64;
                re += v * angle.cos();
                im += v * angle.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Channel-mean amplitude spectrum of an `M x L` series.
pub fn mean_amplitudes(x: &Series) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; x.len() / 2 + 1];
    for row in x.rows() {
        for (a, m) in acc.iter_mut().zip(rfft_magnitude(row)?) {
            *a += m;
        }
    }
    let m = x.channels() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(acc)
}

/// Top-`k` distinct periods of `x`, ranked by channel-mean amplitude.
pub fn top_k_periods(x: &Series, k: usize) -> Result<PeriodDetection> {
    top_k_periods_bounded(x, k, usize::MAX)
}

/// Like [`top_k_periods`], ignoring bins whose period exceeds `max_period`.
pub fn top_k_periods_bounded(x: &Series, k: usize, max_period: usize) -> Result<PeriodDetection> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let amplitudes = mean_amplitudes(x)?;
    let norm = (x.data().iter().map(|v| v * v).sum::<f64>() / x.channels() as f64).sqrt();
    Ok(select(amplitudes, x.len(), k, max_period, norm * SILENCE))
}

/// Period detection on the spectrum averaged over consecutive
/// non-overlapping windows of length `window`.
///
/// Periods are therefore bounded by the window, which makes the result
/// usable as token sizes for a model with context `window`.
pub fn top_k_periods_windowed(
    x: &Series,
    window: usize,
    k: usize,
    max_period: usize,
) -> Result<PeriodDetection> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if window > x.len() {
        return Err(Error::Window {
            window,
            len: x.len(),
        });
    }
    let count = x.len() / window;
    let mut acc = vec![0.0; window / 2 + 1];
    let mut energy = 0.0;
    for w in 0..count {
        let part = x.slice(w * window, window)?;
        energy += part.data().iter().map(|v| v * v).sum::<f64>();
        for (a, m) in acc.iter_mut().zip(mean_amplitudes(&part)?) {
            *a += m;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    let norm = (energy / (count * x.channels()) as f64).sqrt();
    Ok(select(acc, window, k, max_period, norm * SILENCE))
}

/// Integer period for frequency bin `f` of a length-`len` series.
pub fn period_of(len: usize, f: usize) -> usize {
    ((len as f64 / f as f64).round() as usize).max(2)
}

fn select(
    amplitudes: Vec<f64>,
    len: usize,
    k: usize,
    max_period: usize,
    floor: f64,
) -> PeriodDetection {
    let mut bins: Vec<usize> = (1..amplitudes.len()).collect();
    // stable: equal amplitudes keep ascending frequency order
    bins.sort_by(|&a, &b| amplitudes[b].total_cmp(&amplitudes[a]));
    let mut frequencies = Vec::with_capacity(k);
    let mut periods = Vec::with_capacity(k);
    for f in bins {
        if periods.len() == k || amplitudes[f] <= floor {
            break;
        }
        let p = period_of(len, f);
        if p > max_period || periods.contains(&p) {
            continue;
        }
        frequencies.push(f);
        periods.push(p);
    }
    PeriodDetection {
        amplitudes,
        frequencies,
        periods,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(len: usize, period: f64, amp: f64) -> Vec<f64> {
        (0..len)
            .map(|t| amp * (2.0 * PI * t as f64 / period).sin())
            .collect()
    }

    #[test]
    fn pure_tone_single_bin() {
        let a = rfft_magnitude(&tone(96, 24.0, 1.0)).unwrap();
        assert_eq!(a.len(), 49);
        let (arg, _) = a
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap();
        assert_eq!(arg, 4);
        assert!((a[4] - 48.0).abs() < 1e-9);
        for (f, &v) in a.iter().enumerate() {
            if f != 4 {
                assert!(v < 1e-9, "bin {f} = {v}");
            }
        }
    }

    #[test]
    fn constant_is_dc_only() {
        let a = rfft_magnitude(&[3.0; 16]).unwrap();
        assert!((a[0] - 48.0).abs() < 1e-12);
        assert!(a[1..].iter().all(|&v| v < 1e-12));
        let det = top_k_periods(&Series::univariate(vec![3.0; 16]).unwrap(), 2).unwrap();
        assert!(det.periods.is_empty());
    }

    #[test]
    fn short_input_rejected() {
        assert!(matches!(
            rfft_magnitude(&[1.0, 2.0, 3.0]),
            Err(Error::InputTooShort { len: 3, min: 4 })
        ));
    }

    #[test]
    fn two_tones() {
        let x: Vec<f64> = tone(96, 24.0, 1.0)
            .iter()
            .zip(tone(96, 8.0, 0.5))
            .map(|(a, b)| a + b)
            .collect();
        let det = top_k_periods(&Series::univariate(x).unwrap(), 2).unwrap();
        assert_eq!(det.periods, vec![24, 8]);
        assert_eq!(det.frequencies, vec![4, 12]);
    }

    #[test]
    fn bounded_skips_long_periods() {
        let x: Vec<f64> = tone(96, 48.0, 2.0)
            .iter()
            .zip(tone(96, 8.0, 0.5))
            .map(|(a, b)| a + b)
            .collect();
        let det = top_k_periods_bounded(&Series::univariate(x).unwrap(), 1, 24).unwrap();
        assert_eq!(det.periods, vec![8]);
    }

    #[test]
    fn windowed_detection_finds_short_cycle() {
        let x: Vec<f64> = tone(960, 24.0, 1.0)
            .iter()
            .zip(tone(960, 480.0, 3.0))
            .map(|(a, b)| a + b)
            .collect();
        let det = top_k_periods_windowed(&Series::univariate(x).unwrap(), 96, 1, 48).unwrap();
        assert_eq!(det.periods, vec![24]);
        assert_eq!(det.amplitudes.len(), 49);
    }

    #[test]
    fn period_rounding_and_clamp() {
        assert_eq!(period_of(100, 3), 33);
        assert_eq!(period_of(100, 50), 2);
        assert_eq!(period_of(10, 5), 2);
        assert_eq!(period_of(1680, 7), 240);
    }
}
