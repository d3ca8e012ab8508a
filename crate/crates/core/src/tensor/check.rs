use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of a scalar function against central finite
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` coordinate by coordinate.
///
/// The per-coordinate error is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(input);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error: f64 = 0.0;
    #[allow(clippy::needless_range_loop)]
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let n = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(n.abs()).max(REL_FLOOR);
        max_rel_error = max_rel_error.max((a - n).abs() / denom);
        numeric.push(n);
    }
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}
