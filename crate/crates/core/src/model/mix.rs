//! Per-branch predictions resampled to the horizon and summed.

use super::branch::PprBranch;
use super::params::Bound;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `[from, to]` matrix of piecewise-linear interpolation on a uniform grid
/// with both endpoints pinned. Right-multiplying a row of `from` samples
/// gives `to` samples.
pub fn interpolation_matrix<T: Scalar>(from: usize, to: usize) -> Tensor<T> {
    assert!(
        from >= 1 && to >= 1,
        "interpolation lengths must be positive"
    );
    let mut m = vec![T::zero(); from * to];
    for i in 0..to {
        if from == 1 || to == 1 {
            m[i] = T::one();
            continue;
        }
        // source position i * (from - 1) / (to - 1), kept rational
        let num = i * (from - 1);
        let den = to - 1;
        let lo = num / den;
        let rem = num % den;
        if rem == 0 {
            m[lo * to + i] = T::one();
        } else {
            let frac = rem as f64 / den as f64;
            m[lo * to + i] = T::of(1.0 - frac);
            m[(lo + 1) * to + i] = T::of(frac);
        }
    }
    Tensor::new(vec![from, to], m).expect("positive dims")
}

/// Outputs of [`predict_mix`] for a batch of `N` channel series.
#[derive(Debug, Clone)]
pub struct Mixed {
    /// `[N, H]`
    pub prediction: Var,
    /// `[N, eta_j]` per branch
    pub outputs: Vec<Var>,
    /// `[N, H]` per branch
    pub contributions: Vec<Var>,
}

/// Runs each branch's predictor on its encoding, interpolates from `eta_j`
/// to `horizon` points and sums the branches.
pub fn predict_mix<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    encodings: &[Var],
    branches: &[PprBranch],
    horizon: usize,
) -> Result<Mixed> {
    if encodings.len() != branches.len() || branches.is_empty() {
        return Err(Error::contract(format!(
            "{} encodings for {} branches",
            encodings.len(),
            branches.len()
        )));
    }
    let mut outputs = Vec::with_capacity(branches.len());
    let mut contributions = Vec::with_capacity(branches.len());
    let mut total: Option<Var> = None;
    for (&z, branch) in encodings.iter().zip(branches) {
        let y = branch.predict(tape, p, z)?;
        let c = if branch.spec.eta == horizon {
            y
        } else {
            let interp = tape.constant(interpolation_matrix(branch.spec.eta, horizon));
            tape.matmul(y, interp)?
        };
        total = Some(match total {
            Some(t) => tape.add(t, c)?,
            None => c,
        });
        outputs.push(y);
        contributions.push(c);
    }
    Ok(Mixed {
        prediction: total.expect("non-empty"),
        outputs,
        contributions,
    })
}
