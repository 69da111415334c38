//! File-level workflows: corpus and vocabulary files, synthetic data, training
//! runs with metrics and checkpoints, ablations and feature export.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TRAJECTORY_KEYS};
use crate::error::{Error, Result};
use crate::evaluation::{build_oracle, evaluate, oracle_generate, EvalSettings, MetricsRow, OracleModel, METRICS_HEADER};
use crate::generator::{generate_hard, GeneratorParams, TokenSequence};
use crate::objectives::LossReport;
use crate::rng::eval_stream;
use crate::training::Trainer;

/// Names of ids 0 to 3.
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_ECHO_FILE: &str = "effective_config.txt";

/// Token strings indexed by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("vocabulary"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("vocabulary entry {id} is not a single token: {tok:?}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The reserved tokens followed by `w4`, `w5`, ... up to `size` entries.
    pub fn synthetic(size: usize) -> Result<Self> {
        let tokens = (0..size)
            .map(|i| RESERVED_TOKENS.get(i).map_or_else(|| format!("w{i}"), |s| s.to_string()))
            .collect();
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn encode(&self, line: &str) -> Result<TokenSequence> {
        line.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("token {t:?} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let words = seq
            .ids()
            .iter()
            .map(|&id| {
                self.token(id)
                    .ok_or(Error::InvalidToken { id, vocab: self.len() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

/// Parses a corpus; blank lines are skipped.
pub fn parse_corpus(text: &str, vocab: &Vocab) -> Result<Vec<TokenSequence>> {
    let mut corpus = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = vocab
            .encode(line)
            .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", n + 1)))?;
        corpus.push(seq);
    }
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(corpus)
}

pub fn read_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, vocab).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

pub fn write_corpus(path: &Path, vocab: &Vocab, corpus: &[TokenSequence]) -> Result<()> {
    let mut text = String::new();
    for seq in corpus {
        text.push_str(&vocab.decode(seq)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parameters of a synthetic oracle dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenDataSpec {
    pub vocab_size: usize,
    pub length: usize,
    pub count: usize,
    pub test_count: usize,
    pub hidden_size: usize,
    pub seed: u64,
}

/// Files written by [`gen_data`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenDataFiles {
    pub corpus: PathBuf,
    pub test_corpus: PathBuf,
    pub vocab: PathBuf,
    pub oracle: PathBuf,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl GenDataFiles {
    /// `out`, `out.test`, `out.vocab` and `out.oracle`.
    pub fn at(out: &Path) -> Self {
        Self {
            corpus: out.to_path_buf(),
            test_corpus: with_suffix(out, ".test"),
            vocab: with_suffix(out, ".vocab"),
            oracle: with_suffix(out, ".oracle"),
        }
    }
}

/// Builds an oracle, samples `count + test_count` sequences in one draw and
/// writes the first `count` as the training corpus and the rest as the
/// held-out corpus, together with the vocabulary and the oracle checkpoint.
pub fn gen_data(spec: GenDataSpec, out: &Path) -> Result<GenDataFiles> {
    if spec.count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let oracle = build_oracle(spec.vocab_size, spec.hidden_size, spec.seed)?;
    let vocab = Vocab::synthetic(spec.vocab_size)?;
    let all = oracle_generate(&oracle, spec.count + spec.test_count, spec.length, spec.seed)?;
    let (train, test) = all.split_at(spec.count);
    let files = GenDataFiles::at(out);
    write_corpus(&files.corpus, &vocab, train)?;
    write_corpus(&files.test_corpus, &vocab, test)?;
    vocab.write(&files.vocab)?;
    oracle.to_checkpoint()?.save(&files.oracle)?;
    Ok(files)
}

/// Configuration, vocabulary and position stored in a training checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub iteration: usize,
    pub seq_len: usize,
}

impl CheckpointInfo {
    pub fn read(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse_str(&ckpt.text("meta.config")?)?;
        let vocab = Vocab::parse(&ckpt.text("meta.vocab")?)?;
        let vocab_size = ckpt.u64("meta.vocab_size")? as usize;
        if vocab.len() != vocab_size {
            return Err(Error::Checkpoint(format!(
                "stored vocabulary has {} entries, parameters expect {vocab_size}",
                vocab.len()
            )));
        }
        Ok(Self {
            config,
            vocab,
            iteration: ckpt.u64("meta.iteration")? as usize,
            seq_len: ckpt.u64("meta.seq_len")? as usize,
        })
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            samples: self.config.eval_samples,
            length: self.seq_len,
            seed: self.config.train.seed,
        }
    }
}

/// Serializes a trainer together with the trajectory-relevant config keys
/// and the vocabulary, so the file is independent of where the run lives.
pub fn training_checkpoint(trainer: &Trainer, config: &RunConfig, vocab: &Vocab) -> Result<Checkpoint> {
    let mut c = trainer.to_checkpoint(&config.render_keys(TRAJECTORY_KEYS.iter().copied()))?;
    c.put_text("meta.vocab", &vocab.to_text())?;
    Ok(c)
}

pub fn load_generator(ckpt: &Checkpoint) -> Result<(GeneratorParams<f32>, CheckpointInfo)> {
    let info = CheckpointInfo::read(ckpt)?;
    let trainer = Trainer::from_checkpoint(ckpt, info.config.train.clone())?;
    Ok((trainer.gen, info))
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("key {key:?} is required")))
}

/// Everything a run reads, loaded and checked before any output is written.
struct RunInputs {
    vocab: Vocab,
    corpus: Vec<TokenSequence>,
    test: Vec<TokenSequence>,
    oracle: Option<OracleModel>,
    seq_len: usize,
}

fn load_inputs(cfg: &RunConfig) -> Result<RunInputs> {
    let vocab = Vocab::read(require(&cfg.vocab, "vocab")?)?;
    let corpus = read_corpus(require(&cfg.corpus, "corpus")?, &vocab)?;
    let test = match &cfg.test_corpus {
        Some(p) => read_corpus(p, &vocab)?,
        None => corpus.clone(),
    };
    let oracle = match &cfg.oracle {
        Some(p) => {
            let o = OracleModel::from_checkpoint(&Checkpoint::load(p)?)?;
            if o.vocab_size != vocab.len() {
                return Err(Error::Config(format!(
                    "oracle vocabulary size {} does not match the vocabulary file ({})",
                    o.vocab_size,
                    vocab.len()
                )));
            }
            Some(o)
        }
        None => None,
    };
    let seq_len = corpus.iter().map(TokenSequence::len).max().unwrap_or(0);
    if seq_len == 0 {
        return Err(Error::InvalidArgument("corpus contains only empty sentences".into()));
    }
    if corpus.len() < cfg.train.batch_size {
        return Err(Error::Config(format!(
            "corpus of {} sentences is smaller than batch_size = {}",
            corpus.len(),
            cfg.train.batch_size
        )));
    }
    Ok(RunInputs {
        vocab,
        corpus,
        test,
        oracle,
        seq_len,
    })
}

fn resume_trainer(cfg: &RunConfig, inputs: &RunInputs, path: &Path) -> Result<Trainer> {
    let ckpt = Checkpoint::load(path)?;
    let info = CheckpointInfo::read(&ckpt)?;
    for key in TRAJECTORY_KEYS {
        if cfg.get(key) != info.config.get(key) {
            return Err(Error::Config(format!(
                "key {key:?} is {} but the checkpoint was written with {}",
                cfg.get(key).unwrap_or_default(),
                info.config.get(key).unwrap_or_default()
            )));
        }
    }
    if info.vocab != inputs.vocab {
        return Err(Error::Config("vocabulary differs from the one stored in the checkpoint".into()));
    }
    if info.seq_len != inputs.seq_len {
        return Err(Error::Config(format!(
            "corpus sentence length {} differs from the checkpoint's {}",
            inputs.seq_len, info.seq_len
        )));
    }
    Trainer::from_checkpoint(&ckpt, cfg.train.clone())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRow::from_csv)
        .collect()
}

/// Metrics rows already on disk up to and including `iteration`.
fn kept_rows(path: &Path, iteration: usize) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = read_metrics(path)?;
    rows.retain(|r| r.iteration <= iteration);
    Ok(rows)
}

/// Result of [`run_training`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Every row of the metrics file, including rows kept from before a resume.
    pub rows: Vec<MetricsRow>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

struct Recorder<'a> {
    cfg: &'a RunConfig,
    inputs: &'a RunInputs,
    csv: BufWriter<File>,
    metrics: PathBuf,
    checkpoint: PathBuf,
    rows: Vec<MetricsRow>,
    start: Instant,
}

impl Recorder<'_> {
    fn record(&mut self, trainer: &Trainer, report: Option<&LossReport>, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<()> {
        let settings = EvalSettings {
            samples: self.cfg.eval_samples,
            length: self.inputs.seq_len,
            seed: self.cfg.train.seed,
        };
        let mut row = evaluate(&trainer.gen, self.inputs.oracle.as_ref(), &self.inputs.test, settings, trainer.iteration)?;
        if let Some(r) = report {
            row.loss_d = r.loss_d;
            row.loss_g = r.loss_g;
            row.fsa = r.fsa;
        }
        if self.cfg.wall_clock {
            row.wall_seconds = self.start.elapsed().as_secs_f64();
        }
        writeln!(self.csv, "{}", row.to_csv())
            .and_then(|_| self.csv.flush())
            .map_err(|e| Error::io(&self.metrics, e))?;
        self.save(trainer)?;
        on_row(&row);
        self.rows.push(row);
        Ok(())
    }

    fn save(&self, trainer: &Trainer) -> Result<()> {
        training_checkpoint(trainer, self.cfg, &self.inputs.vocab)?.save(&self.checkpoint)
    }
}

/// Runs pretraining (unless resuming) and the configured iterations, writing
/// `effective_config.txt`, `metrics.csv` and `checkpoint.bin` into the output
/// directory. The checkpoint is rewritten at every evaluation point. When a
/// non-finite value aborts the run, the state before the failing step is
/// saved as the checkpoint and the error is returned.
pub fn run_training(cfg: &RunConfig, resume: Option<&Path>, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<RunOutcome> {
    cfg.validate()?;
    let inputs = load_inputs(cfg)?;
    let mut trainer = match resume {
        Some(path) => resume_trainer(cfg, &inputs, path)?,
        None => Trainer::new(cfg.train.clone(), inputs.vocab.len(), inputs.seq_len)?,
    };
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = dir.join(CONFIG_ECHO_FILE);
    fs::write(&echo, cfg.render()).map_err(|e| Error::io(&echo, e))?;

    let metrics = dir.join(METRICS_FILE);
    let rows = match resume {
        Some(_) => kept_rows(&metrics, trainer.iteration)?,
        None => Vec::new(),
    };
    let mut csv = BufWriter::new(File::create(&metrics).map_err(|e| Error::io(&metrics, e))?);
    let mut header = format!("{METRICS_HEADER}\n");
    for r in &rows {
        header.push_str(&r.to_csv());
        header.push('\n');
    }
    csv.write_all(header.as_bytes())
        .and_then(|_| csv.flush())
        .map_err(|e| Error::io(&metrics, e))?;

    let mut rec = Recorder {
        cfg,
        inputs: &inputs,
        csv,
        metrics,
        checkpoint: dir.join(CHECKPOINT_FILE),
        rows,
        start: Instant::now(),
    };
    let fail = |rec: &Recorder, backup: &Trainer, e: Error| -> Error {
        if matches!(e, Error::NonFinite { .. }) {
            if let Err(save) = rec.save(backup) {
                log::error!("could not save the last finite state: {save}");
            }
        }
        e
    };

    if !trainer.pretrained {
        let backup = trainer.clone();
        if let Err(e) = trainer.pretrain(&inputs.corpus) {
            return Err(fail(&rec, &backup, e));
        }
        rec.record(&trainer, None, on_row)?;
    }
    let max = cfg.train.max_iterations;
    let interval = cfg.train.eval_interval;
    while trainer.iteration < max {
        let backup = trainer.clone();
        let report = match trainer.step(&inputs.corpus) {
            Ok(r) => r,
            Err(e) => return Err(fail(&rec, &backup, e)),
        };
        let i = trainer.iteration;
        if i % interval == 0 || i == max {
            rec.record(&trainer, Some(&report), on_row)?;
        }
    }
    Ok(RunOutcome {
        rows: rec.rows,
        metrics: rec.metrics,
        checkpoint: rec.checkpoint,
    })
}

/// Scores a training checkpoint on a held-out corpus. The evaluation
/// samples are those the run itself drew at the checkpoint's iteration.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, test_path: &Path, oracle: Option<&OracleModel>) -> Result<MetricsRow> {
    let (gen, info) = load_generator(ckpt)?;
    if let Some(o) = oracle {
        if o.vocab_size != info.vocab.len() {
            return Err(Error::Config(format!(
                "oracle vocabulary size {} does not match the checkpoint's ({})",
                o.vocab_size,
                info.vocab.len()
            )));
        }
    }
    let test = read_corpus(test_path, &info.vocab)?;
    evaluate(&gen, oracle, &test, info.eval_settings(), info.iteration)
}

/// The evaluation samples of a checkpoint, as scored by [`evaluate_checkpoint`].
pub fn checkpoint_samples(ckpt: &Checkpoint) -> Result<(Vec<TokenSequence>, Vocab)> {
    let (gen, info) = load_generator(ckpt)?;
    let s = info.eval_settings();
    let samples = generate_hard(&gen, s.samples, s.length, &mut eval_stream(s.seed, info.iteration))?;
    Ok((samples, info.vocab))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The ablation arms: the base config and one variant per removed module.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut single = base.clone();
    single.train.num_experts = 1;
    let mut no_fsa = base.clone();
    no_fsa.train.fsa_weight = 0.0;
    vec![("full", base.clone()), ("n_g_1", single), ("fsa_0", no_fsa)]
}

/// Mean final metrics of one ablation arm.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub name: String,
    pub final_nll_oracle: Vec<f64>,
    pub final_nll_gen: Vec<f64>,
}

impl VariantSummary {
    pub fn mean_nll_oracle(&self) -> f64 {
        mean(&self.final_nll_oracle)
    }

    pub fn mean_nll_gen(&self) -> f64 {
        mean(&self.final_nll_gen)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub const ABLATION_SUMMARY_HEADER: &str = "variant,seeds,mean_final_nll_oracle,mean_final_nll_gen";

/// Runs every ablation arm for every seed in `base.seeds`. Each run lives
/// in `<output_dir>/<variant>/seed<s>/`; `<output_dir>/<variant>.csv`
/// concatenates the per-seed metrics with a leading seed column and
/// `<output_dir>/summary.csv` holds the mean final metrics per arm.
pub fn run_ablation(
    base: &RunConfig,
    on_row: &mut dyn FnMut(&str, u64, &MetricsRow),
) -> Result<Vec<VariantSummary>> {
    base.validate()?;
    if base.seeds.is_empty() {
        return Err(Error::Config("key \"seeds\" lists no seeds".into()));
    }
    load_inputs(base)?;
    let root = &base.output_dir;
    let mut summaries = Vec::new();
    for (name, variant) in ablation_variants(base) {
        let mut table = format!("seed,{METRICS_HEADER}\n");
        let mut summary = VariantSummary {
            name: name.to_string(),
            final_nll_oracle: Vec::new(),
            final_nll_gen: Vec::new(),
        };
        for &seed in &base.seeds {
            let mut cfg = variant.clone();
            cfg.train.seed = seed;
            cfg.output_dir = root.join(name).join(format!("seed{seed}"));
            let outcome = run_training(&cfg, None, &mut |row| on_row(name, seed, row))?;
            for row in &outcome.rows {
                table.push_str(&format!("{seed},{}\n", row.to_csv()));
            }
            let last = outcome.rows.last().ok_or(Error::Empty("metrics"))?;
            summary.final_nll_oracle.push(last.nll_oracle);
            summary.final_nll_gen.push(last.nll_gen);
        }
        let path = root.join(format!("{name}.csv"));
        fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
        summaries.push(summary);
    }
    let seeds = base.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    let mut text = format!("{ABLATION_SUMMARY_HEADER}\n");
    for s in &summaries {
        text.push_str(&format!("{},{seeds},{},{}\n", s.name, s.mean_nll_oracle(), s.mean_nll_gen()));
    }
    let path = root.join("summary.csv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summaries)
}

/// Encodes every corpus sentence with a frozen copy of the checkpoint's
/// discriminator, then as many generated samples, and writes
/// `label,f1,...,fd` rows (`real` first, then `fake`). Returns the row count.
pub fn dump_features(ckpt: &Checkpoint, corpus_path: &Path, out: &Path) -> Result<usize> {
    let info = CheckpointInfo::read(ckpt)?;
    let trainer = Trainer::from_checkpoint(ckpt, info.config.train.clone())?;
    let corpus = read_corpus(corpus_path, &info.vocab)?;
    let aux = trainer.disc.copy_to_auxiliary();
    let mut rng = eval_stream(info.config.train.seed, info.iteration);
    let fakes = generate_hard(&trainer.gen, corpus.len(), info.seq_len, &mut rng)?;

    let file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(out)
        .map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let mut rows = 0;
    for (label, seqs) in [("real", &corpus), ("fake", &fakes)] {
        for chunk in seqs.chunks(256) {
            let feats = aux.features(chunk)?;
            let d = feats.shape()[1];
            for r in 0..chunk.len() {
                let mut line = String::from(label);
                for v in &feats.data()[r * d..(r + 1) * d] {
                    line.push(',');
                    line.push_str(&v.to_string());
                }
                writeln!(w, "{line}").map_err(|e| Error::io(out, e))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(rows)
}
