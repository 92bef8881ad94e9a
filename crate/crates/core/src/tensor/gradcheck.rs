use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitude below which gradient coordinates are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Outcome of comparing backward against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Checks the gradient of a scalar function `f` at `x` with central
/// differences `(f(x+eps·e_i) − f(x−eps·e_i)) / 2eps`. The relative error of
/// each coordinate uses a `max(|a|, |b|, GRAD_FLOOR)` denominator, so
/// gradients that vanish exactly are compared against the rounding noise of
/// the difference quotient rather than divided by it.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.param(point);
        let y = f(&tape, v)?;
        if y.numel() != 1 {
            return Err(Error::contract("grad_check needs a scalar function"));
        }
        Ok(y.item())
    };

    let analytic = {
        let tape = Tape::new();
        let v = tape.param(x);
        let y = f(&tape, v)?;
        let grads = tape.backward(y)?;
        grads.get(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec)
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tolerance,
    })
}
