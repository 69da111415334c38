use super::{Scalar, Tape, Tensor, TensorError, Var};

/// A scalar-valued function expressed on a tape, usable at any precision.
pub trait ScalarFunction {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError>;
}

fn value_at<F: ScalarFunction>(f: &F, x: &Tensor<f64>) -> Result<f64, TensorError> {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x.clone());
    let y = f.eval(&mut tape, v)?;
    tape.value(y)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss(tape.shape(y).to_vec()))
}

/// Compares the tape gradient of `f` at `x` (computed in precision `T`)
/// against central differences evaluated in `f64`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
/// Disagreement is reported through the returned value, never as an error.
pub fn finite_difference_check<T: Scalar, F: ScalarFunction>(
    f: &F,
    x: &Tensor<T>,
    eps: f64,
) -> Result<f64, TensorError> {
    assert!(eps > 0.0, "eps must be positive");
    let mut tape = Tape::<T>::new();
    let xv = tape.leaf(x.clone());
    let y = f.eval(&mut tape, xv)?;
    let analytic = tape.backward(y)?.wrt(xv);

    let base = x.cast::<f64>();
    let mut worst = 0.0f64;
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (value_at(f, &plus)? - value_at(f, &minus)?) / (2.0 * eps);
        let a = analytic.data()[i].as_f64();
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
