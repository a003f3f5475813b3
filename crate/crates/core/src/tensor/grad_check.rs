use super::{Result, Tape, Tensor, TensorError};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let y = f(&mut tape, &x)?;
    let analytic = tape.backward(&y)?.wrt(&x);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let p = Tensor::new(point.shape().to_vec(), data)?;
        let out = f(&mut t, &p)?;
        if out.numel() != 1 {
            return Err(TensorError::NonScalarRoot(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.to_vec();
        let mut minus = point.to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinitePerturbation(i));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
