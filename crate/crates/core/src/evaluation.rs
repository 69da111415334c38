//! Synthetic-oracle benchmark and corpus metrics.

use std::collections::HashMap;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::{generate_hard, GeneratorParams, TokenSequence};
use crate::objectives::mle_loss_value;
use crate::rng::{eval_stream, stream, Stream};
use crate::tensor::{Scalar, Tensor};

/// Anything that can score a token sequence step by step.
pub trait SequenceScorer {
    fn vocab_size(&self) -> usize;
    /// `log p(x_t | x_<t)` for every position of `seq`.
    fn log_probs(&self, seq: &TokenSequence) -> Result<Vec<f64>>;
}

/// Single-layer LSTM language model with i.i.d. standard-normal weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleModel {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub seed: u64,
    /// `[vocab, hidden]`
    pub embedding: Tensor<f64>,
    /// `[hidden, 4 * hidden]`, gate order input, forget, cell, output.
    pub w: Tensor<f64>,
    /// `[hidden, 4 * hidden]`
    pub u: Tensor<f64>,
    /// `[4 * hidden]`
    pub b: Tensor<f64>,
    /// `[hidden, vocab]`
    pub out_w: Tensor<f64>,
    /// `[vocab]`
    pub out_b: Tensor<f64>,
    /// `[hidden]`, the input at the first step.
    pub start: Tensor<f64>,
}

/// Builds an oracle with every parameter drawn from `N(0, 1)`.
pub fn build_oracle(vocab_size: usize, hidden_size: usize, seed: u64) -> Result<OracleModel> {
    if vocab_size == 0 || hidden_size == 0 {
        return Err(Error::InvalidArgument("oracle sizes must be at least 1".into()));
    }
    let (v, h) = (vocab_size, hidden_size);
    let mut rng = stream(seed, Stream::Oracle);
    Ok(OracleModel {
        vocab_size,
        hidden_size,
        seed,
        embedding: Tensor::randn(&[v, h], 1.0, &mut rng),
        w: Tensor::randn(&[h, 4 * h], 1.0, &mut rng),
        u: Tensor::randn(&[h, 4 * h], 1.0, &mut rng),
        b: Tensor::randn(&[4 * h], 1.0, &mut rng),
        out_w: Tensor::randn(&[h, v], 1.0, &mut rng),
        out_b: Tensor::randn(&[v], 1.0, &mut rng),
        start: Tensor::randn(&[h], 1.0, &mut rng),
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Recurrent state of a batch of oracle rollouts.
struct LstmState {
    h: Vec<f64>,
    c: Vec<f64>,
}

impl OracleModel {
    fn init_state(&self, batch: usize) -> LstmState {
        LstmState {
            h: vec![0.0; batch * self.hidden_size],
            c: vec![0.0; batch * self.hidden_size],
        }
    }

    /// Advances a batch by inputs `x: [batch, hidden]` and returns the
    /// next-token distributions `[batch, vocab]`.
    fn step(&self, state: &mut LstmState, x: &[f64]) -> Vec<f64> {
        let (h, v) = (self.hidden_size, self.vocab_size);
        let batch = x.len() / h;
        let mut gates = vec![0.0; batch * 4 * h];
        f64::gemm(batch, h, 4 * h, x, false, self.w.data(), false, &mut gates, false);
        f64::gemm(batch, h, 4 * h, &state.h, false, self.u.data(), false, &mut gates, true);
        for bi in 0..batch {
            let g = &mut gates[bi * 4 * h..(bi + 1) * 4 * h];
            g.iter_mut().zip(self.b.data()).for_each(|(a, b)| *a += b);
            for j in 0..h {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[h + j]);
                let cand = g[2 * h + j].tanh();
                let o = sigmoid(g[3 * h + j]);
                let c = &mut state.c[bi * h + j];
                *c = f * *c + i * cand;
                state.h[bi * h + j] = o * c.tanh();
            }
        }
        let mut logits = vec![0.0; batch * v];
        f64::gemm(batch, h, v, &state.h, false, self.out_w.data(), false, &mut logits, false);
        for row in logits.chunks_mut(v) {
            row.iter_mut().zip(self.out_b.data()).for_each(|(a, b)| *a += b);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in row.iter_mut() {
                *a = (*a - max).exp();
                sum += *a;
            }
            row.iter_mut().for_each(|a| *a /= sum);
        }
        logits
    }

    fn start_inputs(&self, batch: usize) -> Vec<f64> {
        self.start.data().repeat(batch)
    }

    fn embed(&self, ids: &[usize]) -> Vec<f64> {
        ids.iter().flat_map(|&id| self.embedding.row(id).iter().copied()).collect()
    }

    /// Next-token distribution at the first step.
    pub fn first_step_distribution(&self) -> Vec<f64> {
        let mut st = self.init_state(1);
        self.step(&mut st, &self.start_inputs(1))
    }

    /// All weights as one flat list.
    pub fn parameter_values(&self) -> Vec<f64> {
        [&self.embedding, &self.w, &self.u, &self.b, &self.out_w, &self.out_b, &self.start]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.put_u64s(
            "oracle.meta",
            &[self.vocab_size as u64, self.hidden_size as u64, self.seed],
        )?;
        // Stored as f64 bit patterns so scoring is exactly reproducible.
        for (name, t) in self.tensors() {
            c.put_u64s(&format!("oracle.{name}.shape"), &t.shape().iter().map(|&d| d as u64).collect::<Vec<_>>())?;
            c.put_f64s(&format!("oracle.{name}"), t.data())?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta = c.u64s("oracle.meta")?;
        let [v, h, seed] = meta[..] else {
            return Err(Error::Checkpoint("oracle.meta must hold 3 integers".into()));
        };
        let load = |name: &str| -> Result<Tensor<f64>> {
            let shape = c.u64s(&format!("oracle.{name}.shape"))?.into_iter().map(|d| d as usize).collect();
            Ok(Tensor::new(shape, c.f64s(&format!("oracle.{name}"))?)?)
        };
        let o = OracleModel {
            vocab_size: v as usize,
            hidden_size: h as usize,
            seed,
            embedding: load("embedding")?,
            w: load("w")?,
            u: load("u")?,
            b: load("b")?,
            out_w: load("out_w")?,
            out_b: load("out_b")?,
            start: load("start")?,
        };
        let (v, h) = (o.vocab_size, o.hidden_size);
        let ok = o.embedding.shape() == [v, h]
            && o.w.shape() == [h, 4 * h]
            && o.u.shape() == [h, 4 * h]
            && o.b.shape() == [4 * h]
            && o.out_w.shape() == [h, v]
            && o.out_b.shape() == [v]
            && o.start.shape() == [h];
        if !ok {
            return Err(Error::Checkpoint("oracle tensors have inconsistent shapes".into()));
        }
        Ok(o)
    }

    fn tensors(&self) -> [(&'static str, &Tensor<f64>); 7] {
        [
            ("embedding", &self.embedding),
            ("w", &self.w),
            ("u", &self.u),
            ("b", &self.b),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
            ("start", &self.start),
        ]
    }
}

impl SequenceScorer for OracleModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_probs(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        seq.validate(self.vocab_size)?;
        let mut st = self.init_state(1);
        let mut x = self.start_inputs(1);
        let mut out = Vec::with_capacity(seq.len());
        for &id in seq.ids() {
            let p = self.step(&mut st, &x);
            out.push(p[id].ln());
            x = self.embed(&[id]);
        }
        Ok(out)
    }
}

/// Ancestral samples from the oracle.
pub fn oracle_generate(oracle: &OracleModel, n: usize, length: usize, seed: u64) -> Result<Vec<TokenSequence>> {
    if n == 0 || length == 0 {
        return Err(Error::InvalidArgument("sample count and length must be at least 1".into()));
    }
    let mut rng = stream(seed, Stream::OracleSample);
    let mut st = oracle.init_state(n);
    let mut x = oracle.start_inputs(n);
    let mut seqs = vec![Vec::with_capacity(length); n];
    for _ in 0..length {
        let probs = oracle.step(&mut st, &x);
        let ids: Vec<usize> = probs
            .chunks(oracle.vocab_size)
            .map(|row| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &p) in row.iter().enumerate() {
                    acc += p;
                    if p > 0.0 {
                        pick = Some(i);
                        if u < acc {
                            break;
                        }
                    }
                }
                pick.expect("distribution has positive mass")
            })
            .collect();
        for (s, &id) in seqs.iter_mut().zip(&ids) {
            s.push(id);
        }
        x = oracle.embed(&ids);
    }
    Ok(seqs.into_iter().map(TokenSequence).collect())
}

/// Mean over sequences of the per-token negative log-likelihood under `scorer`.
pub fn nll_oracle<S: SequenceScorer + ?Sized>(scorer: &S, corpus: &[TokenSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut total = 0.0;
    for s in corpus {
        if s.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let lp = scorer.log_probs(s)?;
        total += -lp.iter().sum::<f64>() / lp.len() as f64;
    }
    Ok(total / corpus.len() as f64)
}

/// Per-token negative log-likelihood of held-out text under the generator.
/// Shares its implementation with the MLE objective.
pub fn nll_gen<T: Scalar>(gen: &GeneratorParams<T>, corpus: &[TokenSequence]) -> Result<f64> {
    mle_loss_value(gen, corpus)
}

pub fn quality_diversity_sum(nll_oracle: f64, nll_gen: f64) -> f64 {
    nll_oracle + nll_gen
}

/// Reference statistics shared by every hypothesis.
pub struct BleuReference {
    max_n: usize,
    /// For each order n (index n - 1), the largest count of every n-gram
    /// within any single reference.
    max_counts: Vec<HashMap<Vec<usize>, usize>>,
    lengths: Vec<usize>,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuReference {
    pub fn new(references: &[TokenSequence], max_n: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Empty("reference corpus"));
        }
        if max_n < 2 {
            return Err(Error::InvalidArgument("max_n must be at least 2".into()));
        }
        let mut max_counts = vec![HashMap::new(); max_n];
        for r in references {
            for (n, table) in max_counts.iter_mut().enumerate() {
                for (gram, c) in ngram_counts(r.ids(), n + 1) {
                    let slot = table.entry(gram.to_vec()).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
        }
        let mut lengths: Vec<usize> = references.iter().map(TokenSequence::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        Ok(Self {
            max_n,
            max_counts,
            lengths,
        })
    }

    fn closest_length(&self, c: usize) -> usize {
        // Ties go to the shorter reference.
        *self
            .lengths
            .iter()
            .min_by_key(|&&r| (r.abs_diff(c), r))
            .expect("non-empty references")
    }

    /// BLEU-2 ..= BLEU-max_n of one hypothesis.
    pub fn score(&self, hyp: &TokenSequence) -> Vec<f64> {
        let tokens = hyp.ids();
        if tokens.is_empty() {
            log::warn!("empty hypothesis scores 0");
            return vec![0.0; self.max_n - 1];
        }
        let mut log_p = Vec::with_capacity(self.max_n);
        for n in 1..=self.max_n {
            let counts = ngram_counts(tokens, n);
            let total: usize = counts.values().sum();
            let matched: usize = counts
                .iter()
                .map(|(g, &c)| c.min(self.max_counts[n - 1].get(*g).copied().unwrap_or(0)))
                .sum();
            let p = if n == 1 {
                matched as f64 / total as f64
            } else {
                (matched as f64 + 1.0) / (total as f64 + 1.0)
            };
            log_p.push(p.ln());
        }
        let c = tokens.len();
        let r = self.closest_length(c);
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        (2..=self.max_n)
            .map(|n| {
                let mean = log_p[..n].iter().sum::<f64>() / n as f64;
                if mean == f64::NEG_INFINITY {
                    0.0
                } else {
                    bp * mean.exp()
                }
            })
            .collect()
    }
}

/// Corpus BLEU-2 ..= BLEU-max_n: every hypothesis is scored against the
/// whole reference set and the scores are averaged.
pub fn bleu(hypotheses: &[TokenSequence], references: &[TokenSequence], max_n: usize) -> Result<Vec<f64>> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis corpus"));
    }
    let table = BleuReference::new(references, max_n)?;
    let mut sums = vec![0.0; max_n - 1];
    for h in hypotheses {
        for (s, v) in sums.iter_mut().zip(table.score(h)) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / hypotheses.len() as f64).collect())
}

pub const METRICS_HEADER: &str = "iteration,nll_oracle,nll_gen,bleu2,bleu3,bleu4,bleu5,loss_d,loss_g,fsa,wall_seconds";

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    /// `NaN` when no oracle is available.
    pub nll_oracle: f64,
    pub nll_gen: f64,
    pub bleu: [f64; 4],
    pub loss_d: f64,
    pub loss_g: f64,
    pub fsa: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let b = &self.bleu;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.nll_oracle,
            self.nll_gen,
            b[0],
            b[1],
            b[2],
            b[3],
            self.loss_d,
            self.loss_g,
            self.fsa,
            self.wall_seconds
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::InvalidArgument(format!("metrics row needs 11 fields: {line:?}")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::InvalidArgument(format!("bad number {:?} in metrics row", f[i])))
        };
        Ok(Self {
            iteration: f[0]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad iteration {:?}", f[0])))?,
            nll_oracle: num(1)?,
            nll_gen: num(2)?,
            bleu: [num(3)?, num(4)?, num(5)?, num(6)?],
            loss_d: num(7)?,
            loss_g: num(8)?,
            fsa: num(9)?,
            wall_seconds: num(10)?,
        })
    }

    pub fn quality_diversity(&self) -> f64 {
        quality_diversity_sum(self.nll_oracle, self.nll_gen)
    }
}

/// Settings for [`evaluate`].
#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub samples: usize,
    pub length: usize,
    pub seed: u64,
}

/// Quality and diversity metrics of a generator at one evaluation point.
/// Loss fields are left at zero for the caller to fill in.
pub fn evaluate<T: Scalar>(
    gen: &GeneratorParams<T>,
    oracle: Option<&OracleModel>,
    test: &[TokenSequence],
    settings: EvalSettings,
    iteration: usize,
) -> Result<MetricsRow> {
    let mut rng = eval_stream(settings.seed, iteration);
    let samples = generate_hard(gen, settings.samples, settings.length, &mut rng)?;
    let nll_oracle = match oracle {
        Some(o) => nll_oracle(o, &samples)?,
        None => f64::NAN,
    };
    let nll_gen = nll_gen(gen, test)?;
    let b = bleu(&samples, test, 5)?;
    Ok(MetricsRow {
        iteration,
        nll_oracle,
        nll_gen,
        bleu: [b[0], b[1], b[2], b[3]],
        loss_d: 0.0,
        loss_g: 0.0,
        fsa: 0.0,
        wall_seconds: 0.0,
    })
}
