//! Convolutional text encoder.
//!
//! The same network plays two roles: with its logit head it is the
//! comparative discriminator `H`; a frozen copy of its feature pathway is
//! the auxiliary encoder `F` used for feature statistics alignment.
//!
//! Pipeline: embedding (hard one-hot or soft rows) -> valid convolutions per
//! window with relu -> max over time -> concat -> highway -> linear features
//! -> linear logit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::generator::TokenSequence;
use crate::params::{glorot_std, Parameters};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Token used for left padding.
pub const PAD_ID: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub windows: Vec<usize>,
    pub channels: usize,
    pub feature_dim: usize,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            embed_dim: 64,
            windows: vec![2, 3, 4, 5],
            channels: 300,
            feature_dim: 100,
        }
    }
}

impl FeatureNetConfig {
    pub fn pooled_dim(&self) -> usize {
        self.windows.len() * self.channels
    }

    /// Inputs are left-padded to at least this many steps.
    pub fn min_length(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "convolution windows must be non-empty and positive: {:?}",
                self.windows
            )));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.channels == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(format!("feature net dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Weights of one convolution window: `[window * embed, channels]` and `[channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFilter<T = f32> {
    pub window: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetParams<T = f32> {
    pub config: FeatureNetConfig,
    pub embedding: Tensor<T>,
    pub filters: Vec<ConvFilter<T>>,
    pub highway_gate_w: Tensor<T>,
    pub highway_gate_b: Tensor<T>,
    pub highway_w: Tensor<T>,
    pub highway_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

const CONV_INIT_STD: f64 = 0.1;

impl<T: Scalar> FeatureNetParams<T> {
    pub fn new<R: Rng + ?Sized>(config: FeatureNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, e, c, p, f) = (
            config.vocab_size,
            config.embed_dim,
            config.channels,
            config.pooled_dim(),
            config.feature_dim,
        );
        let embedding = Tensor::rand_uniform(&[v, e], 1.0, rng);
        let filters = config
            .windows
            .iter()
            .map(|&w| ConvFilter {
                window: w,
                weight: Tensor::randn(&[w * e, c], CONV_INIT_STD, rng),
                bias: Tensor::zeros(&[c]),
            })
            .collect();
        let highway_gate_w = Tensor::randn(&[p, p], glorot_std(p, p), rng);
        let highway_w = Tensor::randn(&[p, p], glorot_std(p, p), rng);
        let proj_w = Tensor::randn(&[p, f], glorot_std(p, f), rng);
        let head_w = Tensor::randn(&[f, 1], glorot_std(f, 1), rng);
        Ok(Self {
            embedding,
            filters,
            highway_gate_w,
            highway_gate_b: Tensor::zeros(&[p]),
            highway_w,
            highway_b: Tensor::zeros(&[p]),
            proj_w,
            proj_b: Tensor::zeros(&[f]),
            head_w,
            head_b: Tensor::zeros(&[1]),
            config,
        })
    }

    /// Every weight and bias set to zero.
    pub fn zeros(config: FeatureNetConfig) -> Result<Self> {
        config.validate()?;
        let (v, e, c, p, f) = (
            config.vocab_size,
            config.embed_dim,
            config.channels,
            config.pooled_dim(),
            config.feature_dim,
        );
        Ok(Self {
            embedding: Tensor::zeros(&[v, e]),
            filters: config
                .windows
                .iter()
                .map(|&w| ConvFilter {
                    window: w,
                    weight: Tensor::zeros(&[w * e, c]),
                    bias: Tensor::zeros(&[c]),
                })
                .collect(),
            highway_gate_w: Tensor::zeros(&[p, p]),
            highway_gate_b: Tensor::zeros(&[p]),
            highway_w: Tensor::zeros(&[p, p]),
            highway_b: Tensor::zeros(&[p]),
            proj_w: Tensor::zeros(&[p, f]),
            proj_b: Tensor::zeros(&[f]),
            head_w: Tensor::zeros(&[f, 1]),
            head_b: Tensor::zeros(&[1]),
            config,
        })
    }

    pub fn cast<U: Scalar>(&self) -> FeatureNetParams<U> {
        FeatureNetParams {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            filters: self
                .filters
                .iter()
                .map(|f| ConvFilter {
                    window: f.window,
                    weight: f.weight.cast(),
                    bias: f.bias.cast(),
                })
                .collect(),
            highway_gate_w: self.highway_gate_w.cast(),
            highway_gate_b: self.highway_gate_b.cast(),
            highway_w: self.highway_w.cast(),
            highway_b: self.highway_b.cast(),
            proj_w: self.proj_w.cast(),
            proj_b: self.proj_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Places the weights on `tape`, as named `disc.*` leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundFeatureNet {
        let mut put = |name: &str, t: &Tensor<T>| {
            if trainable {
                tape.param(name, t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embedding = put("disc.embedding", &self.embedding);
        let filters = self
            .filters
            .iter()
            .map(|f| BoundFilter {
                window: f.window,
                weight: put(&format!("disc.conv{}.weight", f.window), &f.weight),
                bias: put(&format!("disc.conv{}.bias", f.window), &f.bias),
            })
            .collect();
        BoundFeatureNet {
            config: self.config.clone(),
            embedding,
            filters,
            highway_gate_w: put("disc.highway.gate_w", &self.highway_gate_w),
            highway_gate_b: put("disc.highway.gate_b", &self.highway_gate_b),
            highway_w: put("disc.highway.w", &self.highway_w),
            highway_b: put("disc.highway.b", &self.highway_b),
            proj_w: put("disc.proj.w", &self.proj_w),
            proj_b: put("disc.proj.b", &self.proj_b),
            head_w: put("disc.head.w", &self.head_w),
            head_b: put("disc.head.b", &self.head_b),
        }
    }

    /// A frozen value copy of these weights for use as the auxiliary encoder.
    pub fn copy_to_auxiliary(&self) -> AuxiliaryEncoder<T> {
        AuxiliaryEncoder(self.clone())
    }
}

impl<T: Scalar> Parameters<T> for FeatureNetParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("disc.embedding".to_string(), &self.embedding)];
        for f in &self.filters {
            out.push((format!("disc.conv{}.weight", f.window), &f.weight));
            out.push((format!("disc.conv{}.bias", f.window), &f.bias));
        }
        out.extend([
            ("disc.highway.gate_w".to_string(), &self.highway_gate_w),
            ("disc.highway.gate_b".to_string(), &self.highway_gate_b),
            ("disc.highway.w".to_string(), &self.highway_w),
            ("disc.highway.b".to_string(), &self.highway_b),
            ("disc.proj.w".to_string(), &self.proj_w),
            ("disc.proj.b".to_string(), &self.proj_b),
            ("disc.head.w".to_string(), &self.head_w),
            ("disc.head.b".to_string(), &self.head_b),
        ]);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("disc.embedding".to_string(), &mut self.embedding)];
        for f in &mut self.filters {
            out.push((format!("disc.conv{}.weight", f.window), &mut f.weight));
            out.push((format!("disc.conv{}.bias", f.window), &mut f.bias));
        }
        out.extend([
            ("disc.highway.gate_w".to_string(), &mut self.highway_gate_w),
            ("disc.highway.gate_b".to_string(), &mut self.highway_gate_b),
            ("disc.highway.w".to_string(), &mut self.highway_w),
            ("disc.highway.b".to_string(), &mut self.highway_b),
            ("disc.proj.w".to_string(), &mut self.proj_w),
            ("disc.proj.b".to_string(), &mut self.proj_b),
            ("disc.head.w".to_string(), &mut self.head_w),
            ("disc.head.b".to_string(), &mut self.head_b),
        ]);
        out
    }
}

/// Frozen copy of the discriminator's feature pathway.
///
/// There is no mutable access: the only way to change it is to take a new
/// copy. It is always placed on a tape as constants, so it can never appear
/// in a gradient map.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryEncoder<T = f32>(FeatureNetParams<T>);

impl<T: Scalar> AuxiliaryEncoder<T> {
    pub fn params(&self) -> &FeatureNetParams<T> {
        &self.0
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundFeatureNet {
        self.0.bind(tape, false)
    }

    /// Feature vectors `[batch, feature_dim]` as plain values.
    pub fn features(&self, input: &[TokenSequence]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let f = net.features(&mut tape, SeqBatch::Hard(input))?;
        Ok(tape.value(f).clone())
    }
}

/// A batch of encoder inputs.
#[derive(Clone, Copy, Debug)]
pub enum SeqBatch<'a> {
    /// Token sequences; shorter ones are left-padded to the batch maximum.
    Hard(&'a [TokenSequence]),
    /// Probability rows `[batch, length, vocab]` on the tape.
    Soft(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFilter {
    pub window: usize,
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundFeatureNet {
    pub config: FeatureNetConfig,
    pub embedding: Var,
    pub filters: Vec<BoundFilter>,
    pub highway_gate_w: Var,
    pub highway_gate_b: Var,
    pub highway_w: Var,
    pub highway_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundFeatureNet {
    /// Embeds a batch as `[batch, T, embed]`, where `T = max(length, min_length)`.
    /// Hard tokens go through one-hot rows so both input kinds share the same product.
    pub fn embed_input<T: Scalar>(&self, tape: &mut Tape<T>, input: SeqBatch<'_>) -> Result<Var> {
        let vocab = self.config.vocab_size;
        let min_len = self.config.min_length();
        let (rows, batch, steps) = match input {
            SeqBatch::Hard(seqs) => {
                if seqs.is_empty() {
                    return Err(Error::Empty("batch"));
                }
                let longest = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
                if longest == 0 {
                    return Err(Error::Empty("token sequence"));
                }
                let steps = longest.max(min_len);
                let mut ids = Vec::with_capacity(seqs.len() * steps);
                for s in seqs {
                    if s.is_empty() {
                        return Err(Error::Empty("token sequence"));
                    }
                    s.validate(vocab)?;
                    ids.extend(std::iter::repeat(PAD_ID).take(steps - s.len()));
                    ids.extend_from_slice(s.ids());
                }
                (tape.constant(Tensor::one_hot(&ids, vocab)?), seqs.len(), steps)
            }
            SeqBatch::Soft(probs) => {
                let (batch, len) = match *tape.shape(probs) {
                    [b, l, v] if v == vocab && l > 0 && b > 0 => (b, l),
                    ref s => {
                        return Err(Error::InvalidArgument(format!(
                            "soft input must be [batch, length, {vocab}], got {s:?}"
                        )))
                    }
                };
                let full = if len < min_len {
                    let pad_ids = vec![PAD_ID; batch * (min_len - len)];
                    let pad = Tensor::one_hot(&pad_ids, vocab)?.reshape(&[batch, min_len - len, vocab])?;
                    let pad = tape.constant(pad);
                    tape.concat(&[pad, probs], 1)?
                } else {
                    probs
                };
                let steps = len.max(min_len);
                (tape.reshape(full, &[batch * steps, vocab])?, batch, steps)
            }
        };
        let embedded = tape.matmul(rows, self.embedding)?;
        Ok(tape.reshape(embedded, &[batch, steps, self.config.embed_dim])?)
    }

    /// `[batch, T, embed] -> [batch, feature_dim]`.
    pub fn extract_features<T: Scalar>(&self, tape: &mut Tape<T>, embedded: Var) -> Result<Var> {
        let mut pooled = Vec::with_capacity(self.filters.len());
        for f in &self.filters {
            let conv = tape.conv1d(embedded, f.weight, f.bias, f.window)?;
            let act = tape.relu(conv);
            pooled.push(tape.max_over_time(act)?);
        }
        let x = tape.concat(&pooled, 1)?;
        // highway: x + gate * (transform - x)
        let g_pre = tape.matmul(x, self.highway_gate_w)?;
        let g_pre = tape.add(g_pre, self.highway_gate_b)?;
        let gate = tape.sigmoid(g_pre);
        let h_pre = tape.matmul(x, self.highway_w)?;
        let h_pre = tape.add(h_pre, self.highway_b)?;
        let transform = tape.relu(h_pre);
        let diff = tape.sub(transform, x)?;
        let carried = tape.mul(gate, diff)?;
        let hw = tape.add(x, carried)?;
        let feats = tape.matmul(hw, self.proj_w)?;
        Ok(tape.add(feats, self.proj_b)?)
    }

    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, input: SeqBatch<'_>) -> Result<Var> {
        let e = self.embed_input(tape, input)?;
        self.extract_features(tape, e)
    }

    /// Logits `[batch]` from features `[batch, feature_dim]`.
    pub fn logit_from_features<T: Scalar>(&self, tape: &mut Tape<T>, feats: Var) -> Result<Var> {
        let z = tape.matmul(feats, self.head_w)?;
        let z = tape.add(z, self.head_b)?;
        let b = tape.shape(z)[0];
        Ok(tape.reshape(z, &[b])?)
    }

    /// Discriminator scores `H(x)`, shape `[batch]`.
    pub fn logit<T: Scalar>(&self, tape: &mut Tape<T>, input: SeqBatch<'_>) -> Result<Var> {
        let f = self.features(tape, input)?;
        self.logit_from_features(tape, f)
    }
}
