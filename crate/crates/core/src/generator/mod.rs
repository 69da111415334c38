//! Mixture-of-experts recurrent generator.
//!
//! Every expert is a GRU that reads the same previous-token embedding. The
//! new hidden states of all experts are averaged into one representation,
//! which a shared output projection turns into next-token probabilities.
//! Training rollouts use the Gumbel-Softmax relaxation and feed the relaxed
//! row back through the embedding matrix, so the whole sequence stays
//! differentiable; evaluation rollouts use Gumbel-Max and hard tokens.

mod gumbel;

pub use gumbel::{
    gumbel_from_uniform, gumbel_max, gumbel_max_one_hot, gumbel_noise, gumbel_softmax,
    gumbel_softmax_values, LOG_FLOOR, UNIFORM_CLAMP,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// A hard sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn validate(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id >= vocab) {
            Some(&id) => Err(Error::InvalidToken { id, vocab }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        Self(ids)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_experts: usize,
    /// All experts use one set of recurrent weights.
    pub share_experts: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            embed_dim: 32,
            hidden_dim: 32,
            num_experts: 2,
            share_experts: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::InvalidArgument("generator needs at least one expert".into()));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "generator dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// GRU weights of one expert. Input matrices are `[embed, hidden]`,
/// recurrent matrices `[hidden, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<T = f32> {
    pub w_update: Tensor<T>,
    pub u_update: Tensor<T>,
    pub b_update: Tensor<T>,
    pub w_reset: Tensor<T>,
    pub u_reset: Tensor<T>,
    pub b_reset: Tensor<T>,
    pub w_candidate: Tensor<T>,
    pub u_candidate: Tensor<T>,
    pub b_candidate: Tensor<T>,
}

const INIT_STD: f64 = 0.1;

impl<T: Scalar> ExpertParams<T> {
    pub fn init<R: Rng + ?Sized>(embed: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = || Tensor::randn(&[embed, hidden], INIT_STD, rng);
        let (w_update, w_reset, w_candidate) = (w(), w(), w());
        let mut u = || Tensor::randn(&[hidden, hidden], INIT_STD, rng);
        let (u_update, u_reset, u_candidate) = (u(), u(), u());
        Self {
            w_update,
            u_update,
            b_update: Tensor::zeros(&[hidden]),
            w_reset,
            u_reset,
            b_reset: Tensor::zeros(&[hidden]),
            w_candidate,
            u_candidate,
            b_candidate: Tensor::zeros(&[hidden]),
        }
    }

    /// All-zero weights and biases.
    pub fn zeros(embed: usize, hidden: usize) -> Self {
        Self {
            w_update: Tensor::zeros(&[embed, hidden]),
            u_update: Tensor::zeros(&[hidden, hidden]),
            b_update: Tensor::zeros(&[hidden]),
            w_reset: Tensor::zeros(&[embed, hidden]),
            u_reset: Tensor::zeros(&[hidden, hidden]),
            b_reset: Tensor::zeros(&[hidden]),
            w_candidate: Tensor::zeros(&[embed, hidden]),
            u_candidate: Tensor::zeros(&[hidden, hidden]),
            b_candidate: Tensor::zeros(&[hidden]),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ExpertParams<U> {
        ExpertParams {
            w_update: self.w_update.cast(),
            u_update: self.u_update.cast(),
            b_update: self.b_update.cast(),
            w_reset: self.w_reset.cast(),
            u_reset: self.u_reset.cast(),
            b_reset: self.b_reset.cast(),
            w_candidate: self.w_candidate.cast(),
            u_candidate: self.u_candidate.cast(),
            b_candidate: self.b_candidate.cast(),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("w_update", &self.w_update),
            ("u_update", &self.u_update),
            ("b_update", &self.b_update),
            ("w_reset", &self.w_reset),
            ("u_reset", &self.u_reset),
            ("b_reset", &self.b_reset),
            ("w_candidate", &self.w_candidate),
            ("u_candidate", &self.u_candidate),
            ("b_candidate", &self.b_candidate),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 9] {
        [
            ("w_update", &mut self.w_update),
            ("u_update", &mut self.u_update),
            ("b_update", &mut self.b_update),
            ("w_reset", &mut self.w_reset),
            ("u_reset", &mut self.u_reset),
            ("b_reset", &mut self.b_reset),
            ("w_candidate", &mut self.w_candidate),
            ("u_candidate", &mut self.u_candidate),
            ("b_candidate", &mut self.b_candidate),
        ]
    }

    pub fn bind(&self, tape: &mut Tape<T>, prefix: Option<&str>) -> BoundExpert {
        let [w_update, u_update, b_update, w_reset, u_reset, b_reset, w_candidate, u_candidate, b_candidate] =
            self.fields().map(|(name, t)| match prefix {
                Some(p) => tape.param(&format!("{p}.{name}"), t.clone()),
                None => tape.constant(t.clone()),
            });
        BoundExpert {
            w_update,
            u_update,
            b_update,
            w_reset,
            u_reset,
            b_reset,
            w_candidate,
            u_candidate,
            b_candidate,
        }
    }
}

/// Tape handles of one expert's weights.
#[derive(Clone, Copy, Debug)]
pub struct BoundExpert {
    pub w_update: Var,
    pub u_update: Var,
    pub b_update: Var,
    pub w_reset: Var,
    pub u_reset: Var,
    pub b_reset: Var,
    pub w_candidate: Var,
    pub u_candidate: Var,
    pub b_candidate: Var,
}

/// Generator weights. The embedding `[vocab, embed]` and projection
/// `[vocab, hidden]` are shared by all experts.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T = f32> {
    pub config: GeneratorConfig,
    pub embedding: Tensor<T>,
    pub experts: Vec<ExpertParams<T>>,
    pub projection: Tensor<T>,
    /// Learned embedding of the start input.
    pub start: Tensor<T>,
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let embedding = Tensor::randn(&[v, d], INIT_STD, rng);
        let stored = if config.share_experts { 1 } else { config.num_experts };
        let experts = (0..stored).map(|_| ExpertParams::init(d, h, rng)).collect();
        let projection = Tensor::randn(&[v, h], INIT_STD, rng);
        let start = Tensor::randn(&[d], INIT_STD, rng);
        Ok(Self {
            config,
            embedding,
            experts,
            projection,
            start,
        })
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorParams<U> {
        GeneratorParams {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            experts: self.experts.iter().map(ExpertParams::cast).collect(),
            projection: self.projection.cast(),
            start: self.start.cast(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Places the weights on `tape`, as named trainable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundGenerator {
        let mut put = |name: &str, t: &Tensor<T>| {
            if trainable {
                tape.param(&format!("gen.{name}"), t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embedding = put("embedding", &self.embedding);
        let projection = put("projection", &self.projection);
        let start = put("start", &self.start);
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let prefix = format!("gen.expert{i}");
                e.bind(tape, trainable.then_some(prefix.as_str()))
            })
            .collect();
        BoundGenerator {
            config: self.config.clone(),
            embedding,
            projection,
            start,
            experts,
        }
    }
}

impl<T: Scalar> Parameters<T> for GeneratorParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("gen.embedding".to_string(), &self.embedding),
            ("gen.projection".to_string(), &self.projection),
            ("gen.start".to_string(), &self.start),
        ];
        for (i, e) in self.experts.iter().enumerate() {
            out.extend(e.fields().map(|(n, t)| (format!("gen.expert{i}.{n}"), t)));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("gen.embedding".to_string(), &mut self.embedding),
            ("gen.projection".to_string(), &mut self.projection),
            ("gen.start".to_string(), &mut self.start),
        ];
        for (i, e) in self.experts.iter_mut().enumerate() {
            out.extend(e.fields_mut().map(|(n, t)| (format!("gen.expert{i}.{n}"), t)));
        }
        out
    }
}

/// Per-expert hidden states of a batch, `[batch, hidden]` each.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub hidden: Vec<Var>,
    pub t: usize,
}

/// Generator weights placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundGenerator {
    pub config: GeneratorConfig,
    pub embedding: Var,
    pub projection: Var,
    pub start: Var,
    pub experts: Vec<BoundExpert>,
}

/// One GRU update. The emitted representation is the new hidden state.
///
/// `h` is `[batch, hidden]`, `x` is `[batch, embed]`.
pub fn expert_step<T: Scalar>(tape: &mut Tape<T>, e: &BoundExpert, h: Var, x: Var) -> Result<Var, TensorError> {
    let gate = |tape: &mut Tape<T>, w: Var, u: Var, b: Var, h_in: Var| -> Result<Var, TensorError> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h_in, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, e.w_update, e.u_update, e.b_update, h)?;
    let update = tape.sigmoid(z_pre);
    let r_pre = gate(tape, e.w_reset, e.u_reset, e.b_reset, h)?;
    let reset = tape.sigmoid(r_pre);
    let gated_h = tape.mul(reset, h)?;
    let n_pre = gate(tape, e.w_candidate, e.u_candidate, e.b_candidate, gated_h)?;
    let candidate = tape.tanh(n_pre);
    // h' = (1 - z) * n + z * h = n + z * (h - n)
    let diff = tape.sub(h, candidate)?;
    let mixed = tape.mul(update, diff)?;
    tape.add(candidate, mixed)
}

/// Arithmetic mean of the expert representations.
pub fn aggregate<T: Scalar>(tape: &mut Tape<T>, reps: &[Var]) -> Result<Var> {
    let (&first, rest) = reps.split_first().ok_or(Error::Empty("expert representations"))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let mut acc = first;
    for &r in rest {
        acc = tape.add(acc, r)?;
    }
    Ok(tape.scale(acc, 1.0 / reps.len() as f64))
}

/// `softmax(Y W_G^T)` for `Y: [batch, hidden]` and `W_G: [vocab, hidden]`.
pub fn token_distribution<T: Scalar>(tape: &mut Tape<T>, projection: Var, y: Var) -> Result<Var, TensorError> {
    let wt = tape.transpose(projection)?;
    let logits = tape.matmul(y, wt)?;
    tape.softmax(logits)
}

impl BoundGenerator {
    pub fn num_experts(&self) -> usize {
        self.config.num_experts
    }

    pub fn initial_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> GeneratorState {
        let h = tape.constant(Tensor::zeros(&[batch, self.config.hidden_dim]));
        GeneratorState {
            hidden: vec![h; self.config.num_experts],
            t: 0,
        }
    }

    /// The start embedding repeated over the batch.
    pub fn start_input<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> Result<Var, TensorError> {
        let zeros = tape.constant(Tensor::zeros(&[batch, self.config.embed_dim]));
        tape.add(zeros, self.start)
    }

    /// Embeddings of hard tokens, `[batch, embed]`.
    pub fn embed_tokens<T: Scalar>(&self, tape: &mut Tape<T>, ids: &[usize]) -> Result<Var, TensorError> {
        let one_hot = tape.constant(Tensor::one_hot(ids, self.config.vocab_size)?);
        tape.matmul(one_hot, self.embedding)
    }

    /// Convex combination of embedding rows, `[batch, vocab] -> [batch, embed]`.
    pub fn embed_soft<T: Scalar>(&self, tape: &mut Tape<T>, rows: Var) -> Result<Var, TensorError> {
        tape.matmul(rows, self.embedding)
    }

    /// Advances every expert by one input and returns the next-token
    /// distribution `[batch, vocab]`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, state: &mut GeneratorState, x: Var) -> Result<Var> {
        let mut reps = Vec::with_capacity(state.hidden.len());
        for (i, h) in state.hidden.iter_mut().enumerate() {
            let expert = &self.experts[if self.config.share_experts { 0 } else { i }];
            *h = expert_step(tape, expert, *h, x)?;
            reps.push(*h);
        }
        state.t += 1;
        let y = aggregate(tape, &reps)?;
        Ok(token_distribution(tape, self.projection, y)?)
    }
}

/// Relaxed rollout of a batch: `probs` is `[batch, length, vocab]` and each
/// entry of `steps` is the `[batch, vocab]` relaxed sample at that step.
#[derive(Clone, Debug)]
pub struct SoftBatch {
    pub probs: Var,
    pub steps: Vec<Var>,
    pub batch: usize,
    pub length: usize,
}

fn noise_tensor<T: Scalar, R: Rng + ?Sized>(batch: usize, vocab: usize, rng: &mut R) -> Tensor<T> {
    let g = gumbel_noise(batch * vocab, rng);
    Tensor::new(vec![batch, vocab], g.into_iter().map(T::of_f64).collect()).expect("sized")
}

/// Autoregressive Gumbel-Softmax rollout, differentiable with respect to all
/// bound generator weights. Consumes `batch * vocab` noise draws per step.
pub fn generate_soft<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    gen: &BoundGenerator,
    batch: usize,
    length: usize,
    tau: f64,
    rng: &mut R,
) -> Result<SoftBatch> {
    if length == 0 || batch == 0 {
        return Err(Error::InvalidArgument("rollout needs positive batch and length".into()));
    }
    let vocab = gen.config.vocab_size;
    let mut state = gen.initial_state(tape, batch);
    let mut x = gen.start_input(tape, batch)?;
    let mut steps = Vec::with_capacity(length);
    let mut framed = Vec::with_capacity(length);
    for _ in 0..length {
        let pi = gen.step(tape, &mut state, x)?;
        let g = tape.constant(noise_tensor(batch, vocab, rng));
        let y = gumbel_softmax(tape, pi, g, tau)?;
        x = gen.embed_soft(tape, y)?;
        steps.push(y);
        framed.push(tape.reshape(y, &[batch, 1, vocab])?);
    }
    let probs = tape.concat(&framed, 1)?;
    Ok(SoftBatch {
        probs,
        steps,
        batch,
        length,
    })
}

/// Autoregressive Gumbel-Max rollout producing token ids.
pub fn generate_hard<T: Scalar, R: Rng + ?Sized>(
    params: &GeneratorParams<T>,
    batch: usize,
    length: usize,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    if length == 0 {
        return Err(Error::InvalidArgument("rollout needs a positive length".into()));
    }
    let vocab = params.vocab_size();
    let mut tape = Tape::<T>::new();
    let gen = params.bind(&mut tape, false);
    let mut state = gen.initial_state(&mut tape, batch);
    let mut x = gen.start_input(&mut tape, batch)?;
    let mut out = vec![Vec::with_capacity(length); batch];
    for _ in 0..length {
        let pi = gen.step(&mut tape, &mut state, x)?;
        let g = gumbel_noise(batch * vocab, rng);
        let probs = tape.value(pi);
        let ids: Vec<usize> = (0..batch)
            .map(|b| gumbel_max(probs.row(b), &g[b * vocab..(b + 1) * vocab]))
            .collect();
        for (seq, &id) in out.iter_mut().zip(&ids) {
            seq.push(id);
        }
        x = gen.embed_tokens(&mut tape, &ids)?;
    }
    Ok(out.into_iter().map(TokenSequence).collect())
}

/// Teacher-forced per-token mean log-likelihood of each sequence, `[batch]`.
///
/// Sequences may differ in length; each is averaged over its own length.
pub fn batch_log_likelihood<T: Scalar>(
    tape: &mut Tape<T>,
    gen: &BoundGenerator,
    batch: &[TokenSequence],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let vocab = gen.config.vocab_size;
    for seq in batch {
        if seq.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        seq.validate(vocab)?;
    }
    let n = batch.len();
    let longest = batch.iter().map(TokenSequence::len).max().unwrap_or(0);
    let mut state = gen.initial_state(tape, n);
    let mut x = gen.start_input(tape, n)?;
    let mut total: Option<Var> = None;
    for t in 0..longest {
        let pi = gen.step(tape, &mut state, x)?;
        let log_pi = tape.log_floor(pi, LOG_FLOOR);
        let mut pick = Tensor::<T>::zeros(&[n, vocab]);
        let mut inputs = vec![0usize; n];
        for (b, seq) in batch.iter().enumerate() {
            if let Some(&id) = seq.ids().get(t) {
                pick.data_mut()[b * vocab + id] = T::one() / T::of_f64(seq.len() as f64);
                inputs[b] = id;
            }
        }
        let pick = tape.constant(pick);
        let picked = tape.mul(log_pi, pick)?;
        let per_seq = tape.sum_axis(picked, 1)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, per_seq)?,
            None => per_seq,
        });
        if t + 1 < longest {
            x = gen.embed_tokens(tape, &inputs)?;
        }
    }
    Ok(total.expect("at least one step"))
}

/// Per-token mean log-probability of one sequence under teacher forcing.
pub fn sequence_log_likelihood<T: Scalar>(params: &GeneratorParams<T>, tokens: &TokenSequence) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let gen = params.bind(&mut tape, false);
    let ll = batch_log_likelihood(&mut tape, &gen, std::slice::from_ref(tokens))?;
    Ok(tape.value(ll).data()[0].as_f64())
}
