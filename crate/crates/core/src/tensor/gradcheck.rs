use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum relative disagreement between the tape gradient of `f` at `x`
/// and central differences with step `eps`.
///
/// Each coordinate contributes `|analytic − numeric| / max(1, |analytic|)`.
/// `f` is re-run on a fresh tape for every perturbation, so it must be
/// deterministic (dropout off or seeded identically per call).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(p.clone())?;
        let o = f(&mut t, v)?;
        t.value(o).item()
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.values_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.values()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient error at coordinate {i}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_accurate() {
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.0], [0.7, 0.0, -0.4]]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0, -3.0]);
        let err = grad_check(
            |t, x| {
                let s = t.scale(x, 0.5)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }
}
