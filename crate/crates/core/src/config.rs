//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are rejected. [`RunConfig::render`] writes every key
//! with its effective value, and parsing that text gives back the same config.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::training::{ClipMode, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
    /// Held-out corpus for `nll_gen` and BLEU; the training corpus is used when absent.
    pub test_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Oracle checkpoint; without it `nll_oracle` is reported as NaN.
    pub oracle: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub eval_samples: usize,
    /// Record elapsed seconds in the metrics; off keeps outputs byte-identical.
    pub wall_clock: bool,
    /// Seeds used by the ablation runner.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            corpus: None,
            test_corpus: None,
            vocab: None,
            oracle: None,
            output_dir: PathBuf::from("runs/default"),
            eval_samples: 1000,
            wall_clock: false,
            seeds: vec![1, 2, 3],
        }
    }
}

/// Every accepted key with a one-line description, in render order.
pub const KEYS: &[(&str, &str)] = &[
    ("corpus", "training corpus, one whitespace-tokenized sentence per line"),
    ("test_corpus", "held-out corpus for nll_gen and BLEU (default: the training corpus)"),
    ("vocab", "vocabulary file, one token per line"),
    ("oracle", "oracle checkpoint for nll_oracle (optional)"),
    ("output_dir", "directory for metrics, checkpoints and the effective config"),
    ("seed", "master seed"),
    ("mode", "moegan | mle (MLE-only baseline after pretraining)"),
    ("g_steps", "generator updates per iteration"),
    ("d_steps", "discriminator updates per iteration"),
    ("pretrain_epochs", "MLE pretraining epochs"),
    ("max_iterations", "adversarial iterations"),
    ("eval_interval", "iterations between evaluations and checkpoints"),
    ("batch_size", "minibatch size for real and generated batches"),
    ("tau", "Gumbel-Softmax temperature"),
    ("tau_decay", "exponential temperature decay per iteration (0 = fixed)"),
    ("tau_min", "lower bound for the decayed temperature"),
    ("n_g", "number of generator experts"),
    ("share_experts", "all experts share one set of recurrent weights"),
    ("gen_embed_dim", "generator embedding size"),
    ("gen_hidden_dim", "generator hidden size"),
    ("disc_embed_dim", "discriminator embedding size"),
    ("disc_windows", "comma-separated convolution window sizes"),
    ("disc_channels", "channels per convolution window"),
    ("feature_dim", "feature vector size"),
    ("lr_pretrain", "Adam learning rate for MLE"),
    ("lr_gen_adv", "Adam learning rate for adversarial generator updates"),
    ("lr_disc", "Adam learning rate for the discriminator"),
    ("clip_norm", "gradient clipping threshold"),
    ("clip_mode", "global | per_tensor"),
    ("fsa_weight", "multiplier on the feature alignment term"),
    ("audit", "check update-scope and frozen-encoder contracts every iteration"),
    ("eval_samples", "generated samples per evaluation"),
    ("wall_clock", "record elapsed seconds in the metrics"),
    ("seeds", "comma-separated seeds for the ablation runner"),
];

/// Keys that determine the training trajectory and the evaluation samples.
/// A run can only be resumed under a config that agrees on all of them.
pub const TRAJECTORY_KEYS: &[&str] = &[
    "seed",
    "mode",
    "g_steps",
    "d_steps",
    "pretrain_epochs",
    "batch_size",
    "tau",
    "tau_decay",
    "tau_min",
    "n_g",
    "share_experts",
    "gen_embed_dim",
    "gen_hidden_dim",
    "disc_embed_dim",
    "disc_windows",
    "disc_channels",
    "feature_dim",
    "lr_pretrain",
    "lr_gen_adv",
    "lr_disc",
    "clip_norm",
    "clip_mode",
    "fsa_weight",
    "eval_samples",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for key {key:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "corpus" => self.corpus = opt_path(value),
            "test_corpus" => self.test_corpus = opt_path(value),
            "vocab" => self.vocab = opt_path(value),
            "oracle" => self.oracle = opt_path(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => t.seed = parse(key, value)?,
            "mode" => {
                t.mode = match value {
                    "moegan" => TrainMode::Adversarial,
                    "mle" => TrainMode::MleBaseline,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for key \"mode\""))),
                }
            }
            "g_steps" => t.g_steps = parse(key, value)?,
            "d_steps" => t.d_steps = parse(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = parse(key, value)?,
            "max_iterations" => t.max_iterations = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "tau_decay" => t.tau_decay = parse(key, value)?,
            "tau_min" => t.tau_min = parse(key, value)?,
            "n_g" => t.num_experts = parse(key, value)?,
            "share_experts" => t.share_experts = parse_bool(key, value)?,
            "gen_embed_dim" => t.gen_embed_dim = parse(key, value)?,
            "gen_hidden_dim" => t.gen_hidden_dim = parse(key, value)?,
            "disc_embed_dim" => t.disc_embed_dim = parse(key, value)?,
            "disc_windows" => t.disc_windows = parse_list(key, value)?,
            "disc_channels" => t.disc_channels = parse(key, value)?,
            "feature_dim" => t.feature_dim = parse(key, value)?,
            "lr_pretrain" => t.lr_pretrain = parse(key, value)?,
            "lr_gen_adv" => t.lr_gen_adv = parse(key, value)?,
            "lr_disc" => t.lr_disc = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "clip_mode" => {
                t.clip_mode = match value {
                    "global" => ClipMode::Global,
                    "per_tensor" => ClipMode::PerTensor,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for key \"clip_mode\""))),
                }
            }
            "fsa_weight" => t.fsa_weight = parse(key, value)?,
            "audit" => t.audit = parse_bool(key, value)?,
            "eval_samples" => self.eval_samples = parse(key, value)?,
            "wall_clock" => self.wall_clock = parse_bool(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "corpus" => show(&self.corpus),
            "test_corpus" => show(&self.test_corpus),
            "vocab" => show(&self.vocab),
            "oracle" => show(&self.oracle),
            "output_dir" => self.output_dir.display().to_string(),
            "seed" => t.seed.to_string(),
            "mode" => match t.mode {
                TrainMode::Adversarial => "moegan".into(),
                TrainMode::MleBaseline => "mle".into(),
            },
            "g_steps" => t.g_steps.to_string(),
            "d_steps" => t.d_steps.to_string(),
            "pretrain_epochs" => t.pretrain_epochs.to_string(),
            "max_iterations" => t.max_iterations.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "tau" => t.tau.to_string(),
            "tau_decay" => t.tau_decay.to_string(),
            "tau_min" => t.tau_min.to_string(),
            "n_g" => t.num_experts.to_string(),
            "share_experts" => t.share_experts.to_string(),
            "gen_embed_dim" => t.gen_embed_dim.to_string(),
            "gen_hidden_dim" => t.gen_hidden_dim.to_string(),
            "disc_embed_dim" => t.disc_embed_dim.to_string(),
            "disc_windows" => join(&t.disc_windows),
            "disc_channels" => t.disc_channels.to_string(),
            "feature_dim" => t.feature_dim.to_string(),
            "lr_pretrain" => t.lr_pretrain.to_string(),
            "lr_gen_adv" => t.lr_gen_adv.to_string(),
            "lr_disc" => t.lr_disc.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "clip_mode" => match t.clip_mode {
                ClipMode::Global => "global".into(),
                ClipMode::PerTensor => "per_tensor".into(),
            },
            "fsa_weight" => t.fsa_weight.to_string(),
            "audit" => t.audit.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            "seeds" => join(&self.seeds),
            _ => return None,
        })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.corpus, &mut cfg.test_corpus, &mut cfg.vocab, &mut cfg.oracle]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be at least 1".into()));
        }
        if self.train.num_experts == 0 {
            return Err(Error::Config("n_g must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, one per line.
    pub fn render(&self) -> String {
        self.render_keys(KEYS.iter().map(|(k, _)| *k))
    }

    /// `key = value` lines for the given keys, in the given order.
    pub fn render_keys<'a>(&self, keys: impl IntoIterator<Item = &'a str>) -> String {
        keys.into_iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Keys whose effective values differ between the two configs.
    pub fn diff(&self, other: &RunConfig) -> Vec<&'static str> {
        KEYS.iter()
            .map(|(k, _)| *k)
            .filter(|k| self.get(k) != other.get(k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse_str(&cfg.render()).unwrap(), cfg);
        assert_eq!(cfg.render().lines().count(), KEYS.len());
    }

    #[test]
    fn values_are_applied_and_echoed() {
        let text = "# comment\n\nn_g = 3\ntau=0.5\ndisc_windows = 2, 3\nmode = mle\ncorpus = data/a.txt\nseeds = 4,5\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.train.num_experts, 3);
        assert_eq!(cfg.train.tau, 0.5);
        assert_eq!(cfg.train.disc_windows, vec![2, 3]);
        assert_eq!(cfg.train.mode, TrainMode::MleBaseline);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(RunConfig::parse_str(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse_str("learning_rate = 1").unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
        let e = RunConfig::parse_str("tau = hot").unwrap_err().to_string();
        assert!(e.contains("tau"), "{e}");
        assert!(RunConfig::parse_str("tau = 0").is_err());
        assert!(RunConfig::parse_str("just words").is_err());
        assert!(RunConfig::parse_str("mode = gan").is_err());
    }

    #[test]
    fn diff_lists_changed_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert!(a.diff(&b).is_empty());
        b.set("n_g", "1").unwrap();
        b.set("output_dir", "elsewhere").unwrap();
        assert_eq!(a.diff(&b), vec!["output_dir", "n_g"]);
        for k in TRAJECTORY_KEYS {
            assert!(KEYS.iter().any(|(key, _)| key == k), "{k}");
        }
        let partial = a.render_keys(TRAJECTORY_KEYS.iter().copied());
        assert_eq!(RunConfig::parse_str(&partial).unwrap(), a);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap();
        }
        assert!(cfg.get("nope").is_none());
    }
}
