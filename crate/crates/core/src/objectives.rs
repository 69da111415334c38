//! Scalar training objectives.

use crate::error::{Error, Result};
use crate::feature_net::{BoundFeatureNet, SeqBatch};
use crate::generator::{batch_log_likelihood, BoundGenerator, GeneratorParams, TokenSequence};
use crate::tensor::{Scalar, Tape, Var};

/// Losses of one adversarial iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub loss_d: f64,
    pub loss_g: f64,
    pub fsa: f64,
    /// Mean of the relativistic gaps `H(real) - H(fake)`.
    pub mean_gap: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.loss_d, self.loss_g, self.fsa, self.mean_gap].iter().all(|v| v.is_finite())
    }
}

/// Mean negative per-token log-likelihood over a batch.
pub fn mle_loss<T: Scalar>(tape: &mut Tape<T>, gen: &BoundGenerator, batch: &[TokenSequence]) -> Result<Var> {
    let ll = batch_log_likelihood(tape, gen, batch)?;
    let mean = tape.mean(ll)?;
    Ok(tape.neg(mean))
}

/// [`mle_loss`] as a plain value.
pub fn mle_loss_value<T: Scalar>(params: &GeneratorParams<T>, batch: &[TokenSequence]) -> Result<f64> {
    let mut tape = Tape::new();
    let gen = params.bind(&mut tape, false);
    let loss = mle_loss(&mut tape, &gen, batch)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Euclidean distance between the centroids of two feature batches
/// (`[n_real, d]` and `[n_fake, d]`).
pub fn fsa_from_features<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    for v in [real, fake] {
        if tape.shape(v).first().copied().unwrap_or(0) == 0 {
            return Err(Error::Empty("feature batch"));
        }
    }
    let mr = tape.mean_axis(real, 0)?;
    let mf = tape.mean_axis(fake, 0)?;
    let d = tape.sub(mr, mf)?;
    Ok(tape.l2_norm(d))
}

/// Feature statistics alignment distance under the frozen encoder `aux`.
/// Only the fake side can carry gradient.
pub fn fsa_distance<T: Scalar>(
    tape: &mut Tape<T>,
    aux: &BoundFeatureNet,
    real: SeqBatch<'_>,
    fake: SeqBatch<'_>,
) -> Result<Var> {
    let fr = aux.features(tape, real)?;
    let ff = aux.features(tape, fake)?;
    fsa_from_features(tape, fr, ff)
}

/// `Δ_j = H(real_j) - H(fake_j)`, paired by batch position.
pub fn relativistic_gap<T: Scalar>(tape: &mut Tape<T>, h_real: Var, h_fake: Var) -> Result<Var> {
    if tape.shape(h_real) != tape.shape(h_fake) {
        return Err(Error::InvalidArgument(format!(
            "real and fake batches differ in size: {:?} vs {:?}",
            tape.shape(h_real),
            tape.shape(h_fake)
        )));
    }
    Ok(tape.sub(h_real, h_fake)?)
}

/// `L_D = -mean_j log sigmoid(Δ_j)`.
pub fn discriminator_loss<T: Scalar>(tape: &mut Tape<T>, gap: Var) -> Result<Var> {
    if tape.value(gap).numel() == 0 {
        return Err(Error::Empty("gap vector"));
    }
    let ls = tape.log_sigmoid(gap);
    let m = tape.mean(ls)?;
    Ok(tape.neg(m))
}

/// `L_G = -L_D + fsa_weight * FSA`.
pub fn generator_loss<T: Scalar>(tape: &mut Tape<T>, gap: Var, fsa: Var, fsa_weight: f64) -> Result<Var> {
    let ld = discriminator_loss(tape, gap)?;
    let neg = tape.neg(ld);
    let weighted = if fsa_weight == 1.0 { fsa } else { tape.scale(fsa, fsa_weight) };
    Ok(tape.add(neg, weighted)?)
}
