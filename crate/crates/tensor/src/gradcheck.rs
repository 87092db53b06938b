//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::{Tape, Tensor, Var};

/// Largest per-element `|a - n| / max(1, |a|, |n|)` between the analytic
/// gradient `a` of `f` at `x` and the central difference
/// `n = (f(x+h) - f(x-h)) / 2h`.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, &xv)?;
    let analytic = tape.backward(&loss)?.get_or_zeros(&xv);
    drop(tape);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.param(t);
        Ok(f(&tape, &v)?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
