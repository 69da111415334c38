use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use moegan_core::checkpoint::Checkpoint;
use moegan_core::config::RunConfig;
use moegan_core::evaluation::{MetricsRow, OracleModel, METRICS_HEADER};
use moegan_core::experiment::{
    dump_features, evaluate_checkpoint, gen_data, run_ablation, run_training, write_metrics, GenDataSpec,
};
use moegan_core::Error;

#[derive(Parser)]
#[command(name = "moegan", version, about = "Mixture-of-experts text GAN on a synthetic oracle benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an oracle LSTM and sample training and held-out corpora from it.
    GenData {
        /// Vocabulary size.
        #[arg(long)]
        vocab: usize,
        /// Sentence length.
        #[arg(long)]
        len: usize,
        /// Training sentences.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Corpus path; `.test`, `.vocab` and `.oracle` files are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Held-out sentences.
        #[arg(long, default_value_t = 500)]
        test_count: usize,
        /// Oracle hidden size.
        #[arg(long, default_value_t = 32)]
        hidden: usize,
    },
    /// Pretrain and train a generator as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a held-out corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Oracle checkpoint for nll_oracle.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Metrics CSV (default: eval.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full model and its N_g = 1 and no-FSA variants over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write discriminator features of real and generated sentences as CSV.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn summary(row: &MetricsRow) -> String {
    format!(
        "iter {:>5}  nll_oracle {:.4}  nll_gen {:.4}  bleu2-5 {:.3}/{:.3}/{:.3}/{:.3}  loss_d {:.4}  loss_g {:.4}  fsa {:.4}",
        row.iteration,
        row.nll_oracle,
        row.nll_gen,
        row.bleu[0],
        row.bleu[1],
        row.bleu[2],
        row.bleu[3],
        row.loss_d,
        row.loss_g,
        row.fsa
    )
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            vocab,
            len,
            count,
            seed,
            out,
            test_count,
            hidden,
        } => {
            let spec = GenDataSpec {
                vocab_size: vocab,
                length: len,
                count,
                test_count,
                hidden_size: hidden,
                seed,
            };
            let files = gen_data(spec, &out)?;
            info!(
                "wrote {}, {}, {} and {}",
                files.corpus.display(),
                files.test_corpus.display(),
                files.vocab.display(),
                files.oracle.display()
            );
        }
        Command::Train { config, resume } => {
            let cfg = load_config(&config)?;
            let outcome = run_training(&cfg, resume.as_deref(), &mut |row| println!("{}", summary(row)))?;
            info!("metrics in {}", outcome.metrics.display());
        }
        Command::Eval { ckpt, test, oracle, out } => {
            let c = Checkpoint::load(&ckpt)?;
            let oracle = oracle
                .map(|p| Checkpoint::load(&p).and_then(|c| OracleModel::from_checkpoint(&c)))
                .transpose()?;
            let row = evaluate_checkpoint(&c, &test, oracle.as_ref())?;
            println!("{METRICS_HEADER}");
            println!("{}", row.to_csv());
            let out = out.unwrap_or_else(|| ckpt.with_file_name("eval.csv"));
            write_metrics(&out, &[row])?;
        }
        Command::Ablate { config } => {
            let cfg = load_config(&config)?;
            let summaries = run_ablation(&cfg, &mut |variant, seed, row| {
                println!("{variant:<6} seed {seed:<4} {}", summary(row))
            })?;
            for s in &summaries {
                println!(
                    "{:<6} mean final nll_oracle {:.4}  nll_gen {:.4}",
                    s.name,
                    s.mean_nll_oracle(),
                    s.mean_nll_gen()
                );
            }
        }
        Command::DumpFeatures { ckpt, corpus, out } => {
            let c = Checkpoint::load(&ckpt)?;
            let rows = dump_features(&c, &corpus, &out)?;
            info!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::NonFinite { .. })));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}
