//! Period folding: a 1-D component becomes an `n x tau` grid whose rows
//! are periods and whose columns are phases.

use crate::decomposition::PeriodSpec;
use crate::error::{Error, Result};
use crate::series::Series;

/// `M x n x tau` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Folded {
    pub channels: usize,
    pub periods: usize,
    pub tau: usize,
    pub data: Vec<f64>,
    /// Number of replicated values prepended to reach a multiple of `tau`.
    pub padding: usize,
}

impl Folded {
    pub fn get(&self, channel: usize, period: usize, phase: usize) -> f64 {
        self.data[(channel * self.periods + period) * self.tau + phase]
    }
}

/// Steps retained after truncation to at most `rho` periods.
pub fn kept_len(spec: &PeriodSpec, rho: usize) -> usize {
    spec.iota.min(rho * spec.tau)
}

/// Row count of the folded grid.
pub fn period_count(spec: &PeriodSpec, rho: usize) -> usize {
    kept_len(spec, rho).div_ceil(spec.tau)
}

/// Keeps the most recent `min(iota, rho * tau)` steps, left-pads by
/// repeating the first kept value up to a multiple of `tau`, and folds.
pub fn truncate_and_fold(s: &Series, spec: &PeriodSpec, rho: usize) -> Result<Folded> {
    let tau = spec.tau;
    if tau < 2 {
        return Err(Error::contract(format!(
            "token size must be >= 2, got {tau}"
        )));
    }
    if s.len() != spec.iota {
        return Err(Error::contract(format!(
            "component length {} does not match spec length {}",
            s.len(),
            spec.iota
        )));
    }
    let keep = kept_len(spec, rho);
    let periods = keep.div_ceil(tau);
    let padding = periods * tau - keep;
    let mut data = Vec::with_capacity(s.channels() * periods * tau);
    for row in s.rows() {
        let recent = &row[row.len() - keep..];
        data.extend(std::iter::repeat_n(recent[0], padding));
        data.extend_from_slice(recent);
    }
    Ok(Folded {
        channels: s.channels(),
        periods,
        tau,
        data,
        padding,
    })
}

/// Inverse of the reshape: flattens rows back and drops the padding.
pub fn unfold(f: &Folded) -> Series {
    let width = f.periods * f.tau;
    let rows: Vec<Vec<f64>> = f
        .data
        .chunks_exact(width)
        .map(|r| r[f.padding..].to_vec())
        .collect();
    Series::from_channels(&rows).expect("rectangular")
}
