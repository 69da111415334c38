//! Gumbel-Max sampling and its softmax relaxation.

use rand::Rng;

use crate::tensor::{Scalar, Tape, TensorError, Var};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-20;
/// Uniform draws are clamped to `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]`.
pub const UNIFORM_CLAMP: f64 = 1e-10;

/// Gumbel(0, 1) value for a given uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// `n` i.i.d. Gumbel(0, 1) draws.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect()
}

/// Index of `argmax_i (g_i + log pi_i)`; ties go to the lowest index.
pub fn gumbel_max<T: Scalar>(pi: &[T], g: &[f64]) -> usize {
    assert_eq!(pi.len(), g.len(), "noise length must match the distribution");
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (&p, &gi)) in pi.iter().zip(g).enumerate() {
        let v = gi + p.as_f64().max(LOG_FLOOR).ln();
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// One-hot vector for [`gumbel_max`].
pub fn gumbel_max_one_hot<T: Scalar>(pi: &[T], g: &[f64]) -> Vec<T> {
    let mut out = vec![T::zero(); pi.len()];
    out[gumbel_max(pi, g)] = T::one();
    out
}

/// `softmax((log pi + g) / tau)` over the last axis of `pi`.
///
/// Differentiable with respect to `pi`; `g` is treated as given.
pub fn gumbel_softmax<T: Scalar>(tape: &mut Tape<T>, pi: Var, g: Var, tau: f64) -> Result<Var, TensorError> {
    if !(tau > 0.0) {
        return Err(TensorError::Domain {
            op: "gumbel_softmax",
            detail: format!("temperature must be positive, got {tau}"),
        });
    }
    let log_pi = tape.log_floor(pi, LOG_FLOOR);
    let perturbed = tape.add(log_pi, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    tape.softmax(scaled)
}

/// [`gumbel_softmax`] on plain values.
pub fn gumbel_softmax_values(pi: &[f64], g: &[f64], tau: f64) -> Result<Vec<f64>, TensorError> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(crate::tensor::Tensor::vector(pi.to_vec()));
    let n = tape.constant(crate::tensor::Tensor::vector(g.to_vec()));
    let y = gumbel_softmax(&mut tape, p, n, tau)?;
    Ok(tape.value(y).data().to_vec())
}
