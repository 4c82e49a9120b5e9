//! Central-difference gradient checking.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

/// Central differences of `f` at every element of `x`.
pub fn numeric_gradient<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(step > T::zero()) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {step:?}")));
    }
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("non-finite function value while probing element {i}")));
        }
        numeric.push((plus - minus).to_f64() / (2.0 * step.to_f64()));
    }
    Ok(numeric)
}

/// Largest elementwise difference relative to the larger max-norm of the two
/// gradients, so entries that are zero up to rounding do not dominate.
fn normwise_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale.max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `x`; see
/// [`normwise_error`] for the error measure.
pub fn finite_difference_check<T, F>(f: F, analytic: &Tensor<T>, x: &Tensor<T>, step: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if analytic.shape() != x.shape() {
        return dim_err("finite_difference_check", analytic.shape(), x.shape());
    }
    let numeric = numeric_gradient(f, x, step)?;
    let a: Vec<f64> = analytic.data().iter().map(|v| Scalar::to_f64(*v)).collect();
    Ok(normwise_error(&a, &numeric))
}

/// Checks the tape gradient of `build(tape, x)` (a scalar) with respect to
/// all `inputs` at once, treating the gradient as one concatenated vector.
pub fn check_tape_gradient<T, F>(inputs: &[Tensor<T>], step: T, build: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.value(out).item()?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, &v) in vars.iter().enumerate() {
        analytic.extend(grads.wrt(v).data().iter().map(|g| Scalar::to_f64(*g)));
        let f = |probe: &Tensor<T>| -> Result<T> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| tape.constant(if j == k { probe.clone() } else { v.clone() }))
                .collect();
            let out = build(&mut tape, &vars)?;
            tape.value(out).item()
        };
        numeric.extend(numeric_gradient(f, &inputs[k], step)?);
    }
    Ok(normwise_error(&analytic, &numeric))
}
