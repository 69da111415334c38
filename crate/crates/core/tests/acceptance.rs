//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments
//! (`cargo test --test acceptance -- 2 3`) to run a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moegan_core::checkpoint::Checkpoint;
use moegan_core::config::RunConfig;
use moegan_core::evaluation::{bleu, nll_gen, nll_oracle, oracle_generate, build_oracle, SequenceScorer};
use moegan_core::experiment::{ablation_variants, gen_data, run_training, GenDataFiles, GenDataSpec, RunOutcome};
use moegan_core::feature_net::{FeatureNetConfig, FeatureNetParams, SeqBatch};
use moegan_core::generator::{
    generate_soft, gumbel_max, gumbel_noise, gumbel_softmax_values, GeneratorConfig, GeneratorParams, TokenSequence,
};
use moegan_core::objectives::{discriminator_loss, fsa_distance, generator_loss, mle_loss, relativistic_gap};
use moegan_core::tensor::{finite_difference_check, Scalar, ScalarFunction, Tape, Tensor, TensorError, Var};
use moegan_core::training::{TrainConfig, TrainMode, Trainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── criterion 1: gradients ──────────────────────────────────────────

const INSTANCES: usize = 20;
const FD_EPS_F32: f64 = 1e-4;
const FD_TOL_F32: f64 = 1e-3;

#[derive(Clone)]
enum Prim {
    MatmulLeft(Tensor<f64>),
    MatmulRight(Tensor<f64>),
    Transpose,
    Add(Tensor<f64>),
    AddRow(Tensor<f64>),
    Sub(Tensor<f64>),
    Mul(Tensor<f64>),
    Scale(f64),
    Neg,
    Exp,
    Log,
    LogFloor,
    Tanh,
    Sigmoid,
    Relu,
    LogSigmoid,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    L2Norm,
    Concat(Tensor<f64>, usize),
    Slice(usize, usize, usize),
    Reshape(Vec<usize>),
    Conv1dInput(Tensor<f64>, Tensor<f64>, usize),
    Conv1dWeight(Tensor<f64>, Tensor<f64>, usize),
    MaxOverTime,
}

impl Prim {
    fn name(&self) -> &'static str {
        match self {
            Prim::MatmulLeft(_) => "matmul (left)",
            Prim::MatmulRight(_) => "matmul (right)",
            Prim::Transpose => "transpose",
            Prim::Add(_) => "add",
            Prim::AddRow(_) => "add (row broadcast)",
            Prim::Sub(_) => "sub",
            Prim::Mul(_) => "mul",
            Prim::Scale(_) => "scale",
            Prim::Neg => "neg",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::LogFloor => "log_floor",
            Prim::Tanh => "tanh",
            Prim::Sigmoid => "sigmoid",
            Prim::Relu => "relu",
            Prim::LogSigmoid => "log_sigmoid",
            Prim::Softmax => "softmax",
            Prim::LogSoftmax => "log_softmax",
            Prim::Sum => "sum",
            Prim::Mean => "mean",
            Prim::SumAxis(_) => "sum_axis",
            Prim::MeanAxis(_) => "mean_axis",
            Prim::L2Norm => "l2_norm",
            Prim::Concat(..) => "concat",
            Prim::Slice(..) => "slice",
            Prim::Reshape(_) => "reshape",
            Prim::Conv1dInput(..) => "conv1d (input)",
            Prim::Conv1dWeight(..) => "conv1d (weight)",
            Prim::MaxOverTime => "max_over_time",
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let mut c = |t: &Tensor<f64>| tape.constant(t.cast::<T>());
        match self {
            Prim::MatmulLeft(b) => {
                let b = c(b);
                tape.matmul(x, b)
            }
            Prim::MatmulRight(a) => {
                let a = c(a);
                tape.matmul(a, x)
            }
            Prim::Transpose => tape.transpose(x),
            Prim::Add(o) => {
                let o = c(o);
                tape.add(o, x)
            }
            Prim::AddRow(row) => {
                let r = c(row);
                tape.add(x, r)
            }
            Prim::Sub(o) => {
                let o = c(o);
                tape.sub(o, x)
            }
            Prim::Mul(o) => {
                let o = c(o);
                tape.mul(x, o)
            }
            Prim::Scale(k) => Ok(tape.scale(x, *k)),
            Prim::Neg => Ok(tape.neg(x)),
            Prim::Exp => Ok(tape.exp(x)),
            Prim::Log => tape.log(x),
            Prim::LogFloor => Ok(tape.log_floor(x, 1e-3)),
            Prim::Tanh => Ok(tape.tanh(x)),
            Prim::Sigmoid => Ok(tape.sigmoid(x)),
            Prim::Relu => Ok(tape.relu(x)),
            Prim::LogSigmoid => Ok(tape.log_sigmoid(x)),
            Prim::Softmax => tape.softmax(x),
            Prim::LogSoftmax => tape.log_softmax(x),
            Prim::Sum => Ok(tape.sum(x)),
            Prim::Mean => tape.mean(x),
            Prim::SumAxis(a) => tape.sum_axis(x, *a),
            Prim::MeanAxis(a) => tape.mean_axis(x, *a),
            Prim::L2Norm => Ok(tape.l2_norm(x)),
            Prim::Concat(o, axis) => {
                let o = c(o);
                tape.concat(&[x, o], *axis)
            }
            Prim::Slice(axis, start, len) => tape.slice(x, *axis, *start, *len),
            Prim::Reshape(s) => tape.reshape(x, s),
            Prim::Conv1dInput(w, b, win) => {
                let (w, b) = (c(w), c(b));
                tape.conv1d(x, w, b, *win)
            }
            Prim::Conv1dWeight(input, b, win) => {
                let (i, b) = (c(input), c(b));
                tape.conv1d(i, x, b, *win)
            }
            Prim::MaxOverTime => tape.max_over_time(x),
        }
    }
}

/// `sum(weights * prim(x))`, a generic scalar readout of a primitive.
struct Readout {
    prim: Prim,
    weights: Tensor<f64>,
}

impl ScalarFunction for Readout {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let out = self.prim.apply(tape, x)?;
        let w = tape.constant(self.weights.cast::<T>());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normal values kept at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } * (1.0 + rng.gen::<f64>());
        }
    }
    t
}

/// One random instance of primitive number `k`: the primitive and its input.
fn instance(k: usize, rng: &mut ChaCha8Rng) -> Option<(Prim, Tensor<f64>)> {
    let r = rng.gen_range(1..4);
    let c = rng.gen_range(1..5);
    let m = rng.gen_range(1..4);
    let x = randn(&[r, c], rng);
    Some(match k {
        0 => (Prim::MatmulLeft(randn(&[c, m], rng)), x),
        1 => (Prim::MatmulRight(randn(&[m, r], rng)), x),
        2 => (Prim::Transpose, x),
        3 => (Prim::Add(randn(&[r, c], rng)), x),
        4 => (Prim::AddRow(randn(&[c], rng)), x),
        5 => (Prim::Sub(randn(&[r, c], rng)), x),
        6 => (Prim::Mul(randn(&[r, c], rng)), x),
        7 => (Prim::Scale(rng.gen_range(-3.0..3.0)), x),
        8 => (Prim::Neg, x),
        9 => (Prim::Exp, x),
        10 => (Prim::Log, Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(0.5..2.0)).collect()).ok()?),
        11 => (Prim::LogFloor, Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(0.5..2.0)).collect()).ok()?),
        12 => (Prim::Tanh, x),
        13 => (Prim::Sigmoid, x),
        14 => (Prim::Relu, away_from_zero(&[r, c], 0.05, rng)),
        15 => (Prim::LogSigmoid, x.map(|v| 3.0 * v)),
        16 => (Prim::Softmax, x),
        17 => (Prim::LogSoftmax, x),
        18 => (Prim::Sum, x),
        19 => (Prim::Mean, x),
        20 => (Prim::SumAxis(rng.gen_range(0..2)), x),
        21 => (Prim::MeanAxis(rng.gen_range(0..2)), x),
        22 => (Prim::L2Norm, away_from_zero(&[r, c], 0.1, rng)),
        23 => {
            let axis = rng.gen_range(0..2);
            let other = if axis == 0 { randn(&[m, c], rng) } else { randn(&[r, m], rng) };
            (Prim::Concat(other, axis), x)
        }
        24 => {
            let wide = randn(&[r, c + 2], rng);
            let len = rng.gen_range(1..=c + 1);
            let start = rng.gen_range(0..=c + 2 - len);
            (Prim::Slice(1, start, len), wide)
        }
        25 => (Prim::Reshape(vec![c, r]), x),
        26 | 27 => {
            let b = rng.gen_range(1..3);
            let win = rng.gen_range(1..4);
            let t = win + rng.gen_range(0..3);
            let input = randn(&[b, t, c], rng);
            let w = randn(&[win * c, m], rng);
            let bias = randn(&[m], rng);
            if k == 26 {
                (Prim::Conv1dInput(w, bias, win), input)
            } else {
                (Prim::Conv1dWeight(input, bias, win), w)
            }
        }
        28 => {
            let b = rng.gen_range(1..3);
            let t = rng.gen_range(1..5);
            // Distinct values per column so the maximum is unique.
            let n = b * t * c;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - n as f64 * 0.18).collect();
            for i in (1..n).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            (Prim::MaxOverTime, Tensor::new(vec![b, t, c], vals).ok()?)
        }
        _ => return None,
    })
}

fn output_shape(prim: &Prim, x: &Tensor<f64>) -> Vec<usize> {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x.clone());
    let out = prim.apply(&mut tape, v).expect("valid instance");
    tape.shape(out).to_vec()
}

trait MapValues {
    fn map(self, f: impl Fn(f64) -> f64) -> Self;
}

impl MapValues for Tensor<f64> {
    fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

/// Small networks shared by the composed-loss checks.
struct Composed {
    gen: GeneratorParams<f64>,
    disc: FeatureNetParams<f64>,
    aux: FeatureNetParams<f64>,
    real: Vec<TokenSequence>,
    which: Loss,
    noise_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Loss {
    Discriminator,
    Generator,
    Fsa,
    Mle,
}

const V: usize = 5;
const LEN: usize = 5;
const BATCH: usize = 2;

impl Composed {
    fn new(which: Loss, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gcfg = GeneratorConfig {
            vocab_size: V,
            embed_dim: 3,
            hidden_dim: 4,
            num_experts: 2,
            share_experts: false,
        };
        let fcfg = FeatureNetConfig {
            vocab_size: V,
            embed_dim: 4,
            windows: vec![2, 3],
            channels: 3,
            feature_dim: 4,
        };
        let mut gen = GeneratorParams::new(gcfg, &mut rng).unwrap();
        gen.projection = randn(&[V, 4], &mut rng);
        let disc = FeatureNetParams::new(fcfg.clone(), &mut rng).unwrap();
        let aux = FeatureNetParams::new(fcfg, &mut rng).unwrap();
        let real = (0..BATCH)
            .map(|_| TokenSequence((0..LEN).map(|_| rng.gen_range(0..V)).collect()))
            .collect();
        Self {
            gen,
            disc,
            aux,
            real,
            which,
            noise_seed: seed ^ 0x5eed,
        }
    }
}

impl ScalarFunction for Composed {
    /// Differentiates the loss with respect to the generator's output
    /// projection, through the Gumbel-Softmax rollout and both networks.
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let unwrap = |e: moegan_core::Error| match e {
            moegan_core::Error::Tensor(t) => t,
            other => panic!("{other}"),
        };
        let mut g = self.gen.cast::<T>().bind(tape, false);
        g.projection = x;
        if self.which == Loss::Mle {
            return mle_loss(tape, &g, &self.real).map_err(unwrap);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let fake = generate_soft(tape, &g, BATCH, LEN, 0.7, &mut rng).map_err(unwrap)?;
        let h = self.disc.cast::<T>().bind(tape, false);
        let f = self.aux.cast::<T>().copy_to_auxiliary().bind(tape);
        let h_real = h.logit(tape, SeqBatch::Hard(&self.real)).map_err(unwrap)?;
        let h_fake = h.logit(tape, SeqBatch::Soft(fake.probs)).map_err(unwrap)?;
        let gap = relativistic_gap(tape, h_real, h_fake).map_err(unwrap)?;
        let fsa = fsa_distance(tape, &f, SeqBatch::Hard(&self.real), SeqBatch::Soft(fake.probs)).map_err(unwrap)?;
        match self.which {
            Loss::Discriminator => discriminator_loss(tape, gap).map_err(unwrap),
            Loss::Generator => generator_loss(tape, gap, fsa, 1.0).map_err(unwrap),
            Loss::Fsa => Ok(fsa),
            Loss::Mle => unreachable!(),
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = Vec::new();
    let mut k = 0;
    while let Some((probe, _)) = instance(k, &mut rng.clone()) {
        let mut max_err = 0.0f64;
        for _ in 0..INSTANCES {
            let (prim, x) = instance(k, &mut rng).expect("same primitive");
            let shape = output_shape(&prim, &x);
            let weights = randn(&shape, &mut rng);
            let f = Readout { prim, weights };
            let err = finite_difference_check(&f, &x.cast::<f32>(), FD_EPS_F32).map_err(|e| format!("{}: {e}", probe.name()))?;
            max_err = max_err.max(err);
        }
        worst.push((probe.name().to_string(), max_err));
        k += 1;
    }
    for which in [Loss::Discriminator, Loss::Generator, Loss::Fsa, Loss::Mle] {
        let mut max_err = 0.0f64;
        for i in 0..INSTANCES {
            let f = Composed::new(which, 100 + i as u64);
            let x = f.gen.projection.cast::<f32>();
            let err = finite_difference_check(&f, &x, FD_EPS_F32).map_err(|e| format!("{which:?}: {e}"))?;
            max_err = max_err.max(err);
        }
        worst.push((format!("{which:?} loss"), max_err));
    }
    let secs = start.elapsed().as_secs_f64();
    let (name, err) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < FD_TOL_F32))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    check(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} checks x {INSTANCES} instances (f32, eps {FD_EPS_F32}), worst relative error {err:.2e} ({name}), {secs:.1} s{}",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

// ── criterion 2: Gumbel sampling ────────────────────────────────────

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pi = [0.5, 0.3, 0.2];
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let g = gumbel_noise(3, &mut rng);
        counts[gumbel_max(&pi, &g)] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let max_dev = freqs.iter().zip(pi).map(|(f, p)| (f - p).abs()).fold(0.0, f64::max);

    let mut mismatches = 0;
    for trial in 0..10_000 {
        let k = 2 + trial % 7;
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = if trial % 2 == 0 { w.iter().map(|v| v / s).collect() } else { pi.to_vec() };
        let g = gumbel_noise(p.len(), &mut rng);
        let y = gumbel_softmax_values(&p, &g, 0.001).map_err(|e| e.to_string())?;
        let soft = y.iter().enumerate().fold(0, |b, (i, &v)| if v > y[b] { i } else { b });
        if soft != gumbel_max(&p, &g) {
            mismatches += 1;
        }
    }
    check(
        max_dev <= 0.01 && mismatches == 0,
        format!("frequencies {freqs:.4?} (max deviation {max_dev:.4}); tau = 0.001 argmax mismatches {mismatches}/10000"),
    )
}

// ── criterion 3: loss identities ────────────────────────────────────

fn criterion_3() -> Outcome {
    let mut tape = Tape::<f32>::new();
    let zero = tape.constant(Tensor::zeros(&[64]));
    let ld0 = discriminator_loss(&mut tape, zero).map_err(|e| e.to_string())?;
    let ld0 = tape.value(ld0).data()[0] as f64;
    let ln2_err = (ld0 - 2f64.ln()).abs();

    // Desk-scale networks on a shared real batch and a shared soft fake batch.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = TrainConfig::default();
    let gen = GeneratorParams::<f32>::new(cfg.generator_config(32), &mut rng).map_err(|e| e.to_string())?;
    let disc = FeatureNetParams::<f32>::new(cfg.feature_net_config(32), &mut rng).map_err(|e| e.to_string())?;
    let oracle = build_oracle(32, 32, 5).map_err(|e| e.to_string())?;
    let real = oracle_generate(&oracle, 64, 12, 5).map_err(|e| e.to_string())?;
    let aux = disc.copy_to_auxiliary();

    let mut tape = Tape::<f32>::new();
    let g = gen.bind(&mut tape, true);
    let h = disc.bind(&mut tape, false);
    let f = aux.bind(&mut tape);
    let fake = generate_soft(&mut tape, &g, 64, 12, 1.0, &mut rng).map_err(|e| e.to_string())?;
    let run = |tape: &mut Tape<f32>| -> moegan_core::Result<(f32, f32, f32, f32)> {
        let hr = h.logit(tape, SeqBatch::Hard(&real))?;
        let hf = h.logit(tape, SeqBatch::Soft(fake.probs))?;
        let gap = relativistic_gap(tape, hr, hf)?;
        let ld = discriminator_loss(tape, gap)?;
        let fsa = fsa_distance(tape, &f, SeqBatch::Hard(&real), SeqBatch::Soft(fake.probs))?;
        let lg = generator_loss(tape, gap, fsa, 1.0)?;
        let identical = fsa_distance(tape, &f, SeqBatch::Hard(&real), SeqBatch::Hard(&real))?;
        let v = |x| tape.value(x).data()[0];
        Ok((v(ld), v(fsa), v(lg), v(identical)))
    };
    let (ld, fsa, lg, fsa_same) = run(&mut tape).map_err(|e| e.to_string())?;
    let bit_equal = lg.to_bits() == (-ld + fsa).to_bits();
    let residual = ((lg - fsa) + ld).abs();
    let ulp = f32::EPSILON * lg.abs().max(fsa.abs());
    check(
        ln2_err <= 1e-6 && bit_equal && residual <= ulp && fsa_same.abs() as f64 <= 1e-6,
        format!(
            "L_D(0) - ln 2 = {ln2_err:.1e}; L_G = {lg} == -L_D + FSA bitwise: {bit_equal} \
             (|L_G - FSA + L_D| = {residual:.1e}, one ulp = {ulp:.1e}); FSA(identical) = {fsa_same:e}"
        ),
    )
}

// ── criteria 4, 5, 8: desk-scale runs ───────────────────────────────

const SEEDS: [u64; 3] = [1, 2, 3];
const RUN_LIMIT_SECS: f64 = 15.0 * 60.0;

struct Desk {
    dir: tempfile::TempDir,
    data: GenDataFiles,
    runs: Vec<Run>,
}

struct Run {
    arm: &'static str,
    seed: u64,
    dir: PathBuf,
    final_nll_oracle: f64,
    seconds: f64,
}

impl Desk {
    fn new() -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let spec = GenDataSpec {
            vocab_size: 32,
            length: 12,
            count: 2000,
            test_count: 500,
            hidden_size: 32,
            seed: 1,
        };
        let data = gen_data(spec, &dir.path().join("oracle.txt")).map_err(|e| e.to_string())?;
        Ok(Self { dir, data, runs: Vec::new() })
    }

    fn base(&self) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus = Some(self.data.corpus.clone());
        cfg.test_corpus = Some(self.data.test_corpus.clone());
        cfg.vocab = Some(self.data.vocab.clone());
        cfg.oracle = Some(self.data.oracle.clone());
        cfg
    }

    fn arms(&self) -> Vec<(&'static str, RunConfig)> {
        let base = self.base();
        let mut mle = base.clone();
        mle.train.mode = TrainMode::MleBaseline;
        let mut arms = ablation_variants(&base);
        arms.insert(1, ("mle", mle));
        arms
    }

    fn run(&mut self, arm: &'static str, cfg: &RunConfig, seed: u64) -> Result<RunOutcome, String> {
        let mut cfg = cfg.clone();
        cfg.train.seed = seed;
        cfg.output_dir = self.dir.path().join(format!("{arm}-{seed}"));
        let start = Instant::now();
        let out = run_training(&cfg, None, &mut |_| {}).map_err(|e| format!("{arm} seed {seed}: {e}"))?;
        let seconds = start.elapsed().as_secs_f64();
        let last = out.rows.last().ok_or("no metrics")?;
        eprintln!(
            "  {arm:<6} seed {seed}: final nll_oracle {:.4}, nll_gen {:.4} ({seconds:.0} s)",
            last.nll_oracle, last.nll_gen
        );
        self.runs.push(Run {
            arm,
            seed,
            dir: cfg.output_dir.clone(),
            final_nll_oracle: last.nll_oracle,
            seconds,
        });
        Ok(out)
    }

    fn ensure_runs(&mut self, arms: &[&str]) -> Result<(), String> {
        for seed in SEEDS {
            for (arm, cfg) in self.arms() {
                if arms.contains(&arm) && !self.runs.iter().any(|r| r.arm == arm && r.seed == seed) {
                    self.run(arm, &cfg, seed)?;
                }
            }
        }
        Ok(())
    }

    fn mean(&self, arm: &str) -> f64 {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.arm == arm).map(|r| r.final_nll_oracle).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn slowest(&self) -> f64 {
        self.runs.iter().map(|r| r.seconds).fold(0.0, f64::max)
    }

    fn dir_of(&self, arm: &str, seed: u64) -> &Path {
        &self.runs.iter().find(|r| r.arm == arm && r.seed == seed).expect("run exists").dir
    }
}

fn criterion_4(desk: &mut Desk) -> Outcome {
    desk.ensure_runs(&["full", "mle"])?;
    let (gan, mle) = (desk.mean("full"), desk.mean("mle"));
    let slowest = desk.slowest();
    check(
        gan < mle && slowest < RUN_LIMIT_SECS,
        format!(
            "mean final NLL_oracle over seeds {SEEDS:?}: MoEGAN {gan:.4} vs MLE baseline {mle:.4}; slowest run {slowest:.0} s"
        ),
    )
}

fn criterion_5(desk: &mut Desk) -> Outcome {
    desk.ensure_runs(&["full", "n_g_1", "fsa_0"])?;
    let (full, single, no_fsa) = (desk.mean("full"), desk.mean("n_g_1"), desk.mean("fsa_0"));
    check(
        full <= single && full <= no_fsa,
        format!("mean final NLL_oracle: full {full:.4}, N_g = 1 {single:.4}, FSA weight 0 {no_fsa:.4}"),
    )
}

fn criterion_8(desk: &mut Desk) -> Outcome {
    desk.ensure_runs(&["full", "mle"])?;
    // Checkpoint round trip.
    let ckpt_path = desk.dir_of("full", 1).join("checkpoint.bin");
    let bytes = fs::read(&ckpt_path).map_err(|e| e.to_string())?;
    let round_trip = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?.to_bytes() == bytes;

    // Split run: 100 iterations, then resume to 200, against the straight run.
    let arms = desk.arms();
    let full = &arms.iter().find(|(a, _)| *a == "full").expect("full arm").1;
    let mut first = full.clone();
    first.train.seed = 1;
    first.train.max_iterations = 100;
    first.output_dir = desk.dir.path().join("split");
    let part = run_training(&first, None, &mut |_| {}).map_err(|e| e.to_string())?;
    let resume_from = desk.dir.path().join("split-100.bin");
    fs::copy(&part.checkpoint, &resume_from).map_err(|e| e.to_string())?;
    let mut second = first.clone();
    second.train.max_iterations = 200;
    run_training(&second, Some(&resume_from), &mut |_| {}).map_err(|e| e.to_string())?;
    let straight_dir = desk.dir_of("full", 1).to_path_buf();
    let read = |p: PathBuf| fs::read(p).map_err(|e| e.to_string());
    let split_csv = read(second.output_dir.join("metrics.csv"))? == read(straight_dir.join("metrics.csv"))?;
    let split_ckpt = read(second.output_dir.join("checkpoint.bin"))? == read(straight_dir.join("checkpoint.bin"))?;

    // Same-seed rerun.
    let mle = &arms.iter().find(|(a, _)| *a == "mle").expect("mle arm").1;
    let mut again = mle.clone();
    again.train.seed = 1;
    again.output_dir = desk.dir.path().join("mle-1-again");
    run_training(&again, None, &mut |_| {}).map_err(|e| e.to_string())?;
    let original = desk.dir_of("mle", 1).to_path_buf();
    let rerun = ["metrics.csv", "checkpoint.bin", "effective_config.txt"]
        .iter()
        .filter(|f| **f != "effective_config.txt")
        .all(|f| read(original.join(f)).ok() == read(again.output_dir.join(f)).ok());
    check(
        round_trip && split_csv && split_ckpt && rerun,
        format!(
            "checkpoint round trip identical: {round_trip}; split 100 + 100 metrics identical: {split_csv}, \
             final checkpoint identical: {split_ckpt}; same-seed rerun identical: {rerun}"
        ),
    )
}

// ── criterion 6: metric oracles ─────────────────────────────────────

struct UniformOracle(usize);

impl SequenceScorer for UniformOracle {
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn log_probs(&self, seq: &TokenSequence) -> moegan_core::Result<Vec<f64>> {
        Ok(vec![-(self.0 as f64).ln(); seq.len()])
    }
}

fn criterion_6() -> Outcome {
    let s = |v: &[&[usize]]| -> Vec<TokenSequence> { v.iter().map(|x| TokenSequence(x.to_vec())).collect() };
    let e = |r: moegan_core::Result<Vec<f64>>| r.map_err(|e| e.to_string());
    // "a b c" against "a b d".
    let abc = e(bleu(&s(&[&[0, 1, 2]]), &s(&[&[0, 1, 3]]), 2))?[0];
    let same_refs = s(&[&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1, 0], &[2, 2, 2, 2, 2]]);
    let identical = e(bleu(&same_refs, &same_refs, 5))?;
    let disjoint = e(bleu(&s(&[&[7, 8, 9]]), &s(&[&[1, 2, 3]]), 5))?;
    let micro = (abc - 2.0 / 3.0).abs() < 1e-6
        && identical.iter().all(|&b| (b - 1.0).abs() < 1e-6)
        && disjoint.iter().all(|&b| b.abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let oracle = build_oracle(32, 32, 2).map_err(|e| e.to_string())?;
    let corpus = oracle_generate(&oracle, 200, 12, 3).map_err(|e| e.to_string())?;
    let self_bleu = e(bleu(&corpus, &corpus, 5))?;
    let exact_one = self_bleu.iter().all(|&b| b == 1.0);

    let gen = GeneratorParams::<f32>::new(TrainConfig::default().generator_config(32), &mut rng).map_err(|e| e.to_string())?;
    let mut tape = Tape::<f32>::new();
    let bound = gen.bind(&mut tape, true);
    let loss = mle_loss(&mut tape, &bound, &corpus).map_err(|e| e.to_string())?;
    let direct = tape.value(loss).data()[0] as f64;
    let via_metric = nll_gen(&gen, &corpus).map_err(|e| e.to_string())?;
    let bitwise = direct.to_bits() == via_metric.to_bits();

    let mut uniform = gen.clone();
    uniform.projection = Tensor::zeros(uniform.projection.shape());
    let gen_uniform = (nll_gen(&uniform, &corpus).map_err(|e| e.to_string())? - 32f64.ln()).abs();
    let oracle_uniform = (nll_oracle(&UniformOracle(32), &corpus).map_err(|e| e.to_string())? - 32f64.ln()).abs();
    check(
        micro && exact_one && bitwise && gen_uniform <= 1e-6 && oracle_uniform <= 1e-6,
        format!(
            "BLEU-2(a b c | a b d) = {abc:.7}, identical = {identical:?}, disjoint = {disjoint:?}; \
             bleu(x, x) == 1 exactly: {exact_one}; nll_gen == mle_loss bitwise: {bitwise}; \
             uniform |NLL - log|V|| gen {gen_uniform:.1e}, oracle {oracle_uniform:.1e}"
        ),
    )
}

// ── criterion 7: frozen encoder ─────────────────────────────────────

fn criterion_7() -> Outcome {
    let e = |x: moegan_core::Error| x.to_string();
    let oracle = build_oracle(32, 32, 4).map_err(e)?;
    let corpus = oracle_generate(&oracle, 300, 12, 4).map_err(e)?;
    let config = TrainConfig {
        pretrain_epochs: 1,
        audit: true,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, 32, 12).map_err(e)?;
    trainer.pretrain(&corpus).map_err(e)?;
    let probe = &corpus[..16];

    let features = |net: &FeatureNetParams<f32>| -> Result<Tensor<f32>, String> {
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, false);
        let f = b.features(&mut tape, SeqBatch::Hard(probe)).map_err(e)?;
        Ok(tape.value(f).clone())
    };
    let aux = trainer.disc.copy_to_auxiliary();
    let copy_equal = aux.features(probe).map_err(e)? == features(&trainer.disc)?;

    let frozen_before = aux.features(probe).map_err(e)?;
    let disc_before = trainer.disc.clone();
    let mut checks = Vec::new();
    for _ in 0..20 {
        match trainer.adversarial_iteration(&corpus) {
            Ok((_, audit)) => checks.push(audit.checks),
            Err(err) => return Err(format!("iteration {}: {err}", trainer.iteration + 1)),
        }
    }
    let disc_moved = disc_before.disc_fingerprint() != trainer.disc.disc_fingerprint();
    let frozen_after = aux.features(probe).map_err(e)? == frozen_before;
    let per_iter = 1 + 2 * trainer.config.g_steps + 1 + 3 * trainer.config.d_steps + 1 + 1;
    let all_checked = checks.iter().all(|&c| c == per_iter);
    check(
        copy_equal && disc_moved && frozen_after && all_checked,
        format!(
            "copy bit-identical: {copy_equal}; encoder unchanged after {} discriminator updates: {frozen_after}; \
             20 audited iterations with {per_iter} contract checks each: {all_checked}",
            20 * trainer.config.d_steps
        ),
    )
}

trait Fingerprint {
    fn disc_fingerprint(&self) -> u64;
}

impl Fingerprint for FeatureNetParams<f32> {
    fn disc_fingerprint(&self) -> u64 {
        use moegan_core::params::Parameters;
        self.fingerprint()
    }
}

// ── driver ──────────────────────────────────────────────────────────

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut desk: Option<Desk> = None;
    let mut desk_for = |results: &mut Vec<(usize, Outcome)>, n: usize, f: fn(&mut Desk) -> Outcome| {
        if desk.is_none() {
            match Desk::new() {
                Ok(d) => desk = Some(d),
                Err(err) => {
                    results.push((n, Err(format!("could not build the desk-scale dataset: {err}"))));
                    return;
                }
            }
        }
        eprintln!("criterion {n}: running desk-scale experiments");
        results.push((n, f(desk.as_mut().expect("built"))));
    };

    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let cheap: [(usize, fn() -> Outcome); 5] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (6, criterion_6), (7, criterion_7)];
    for n in 1..=8 {
        if !wanted(n) {
            continue;
        }
        if let Some((_, f)) = cheap.iter().find(|(k, _)| *k == n) {
            results.push((n, f()));
        } else {
            let f: fn(&mut Desk) -> Outcome = match n {
                4 => criterion_4,
                5 => criterion_5,
                _ => criterion_8,
            };
            desk_for(&mut results, n, f);
        }
        let (n, r) = results.last().expect("pushed");
        match r {
            Ok(d) => println!("criterion {n}: PASS  {d}"),
            Err(d) => println!("criterion {n}: FAIL  {d}"),
        }
    }
    let failed: Vec<usize> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
