//! `memdec` command-line driver. Every stage reads a TOML run configuration
//! and writes its artifacts into the configured run directory.

mod commands;
mod config;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memdec::corpus::Split;
use memdec::synth::SynthConfig;

use commands::{Ctx, ScorerKind};
use config::{ConfigError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "memdec", version, about = "Memory decoder laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Interpolation weight of the memory decoder (and the DAPT mixture).
    #[arg(long)]
    alpha: Option<f64>,
    /// kNN-LM interpolation weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Neighbours per query.
    #[arg(long)]
    k: Option<usize>,
    /// Retrieval temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// KL weight of the memory decoder loss.
    #[arg(long)]
    beta: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            alpha: self.alpha,
            lambda: self.lambda,
            k: self.k,
            tau: self.tau,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic general and domain corpora.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        general_chars: Option<usize>,
        #[arg(long)]
        domain_chars: Option<usize>,
    },
    /// Build the vocabulary and train the base model on the general corpus.
    TrainLm(Common),
    /// Extract keys and next tokens from the domain training split.
    BuildDatastore(Common),
    /// Cache a retrieval distribution for every domain training position.
    CacheDists(Common),
    /// Train the memory decoder against the cache.
    TrainMemdec(Common),
    /// Continue training the base model on the domain corpus.
    TrainDapt(Common),
    /// Move a trained memory decoder to a domain-only vocabulary.
    TransferVocab(Common),
    /// Sliding-window perplexity on the domain corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Scorers to evaluate; all available ones by default.
        #[arg(long, value_enum)]
        scorer: Vec<ScorerKind>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Pick interpolation weights on the domain validation split.
    TuneAlpha(Common),
    /// Per-token inference latency.
    Bench(Common),
    /// Statistics of the cached retrieval distributions.
    AnalyzeSparsity(Common),
    /// Probability and rank of one target token under every scorer.
    CaseStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        context: String,
        #[arg(long)]
        target: String,
    },
    /// Short memory decoder runs with the alternative objectives.
    Ablate(Common),
}

fn setup(common: &Common, name: &'static str) -> anyhow::Result<Ctx> {
    let ov = common.overrides();
    let cfg = RunConfig::load(&common.config, &ov)?;
    Ctx::new(cfg, ov, name)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    type Stage = fn(&mut Ctx) -> anyhow::Result<()>;
    let (common, name, stage): (&Common, &'static str, Box<dyn Fn(&mut Ctx) -> anyhow::Result<()>>) =
        match &cli.command {
            Command::SynthCorpus {
                out,
                seed,
                general_chars,
                domain_chars,
            } => {
                let mut cfg = SynthConfig {
                    seed: *seed,
                    ..SynthConfig::default()
                };
                if let Some(n) = general_chars {
                    cfg.general_chars = *n;
                }
                if let Some(n) = domain_chars {
                    cfg.domain_chars = *n;
                }
                return commands::synth_corpus(out, &cfg);
            }
            Command::TrainLm(c) => (c, "train-lm", Box::new(commands::train_lm as Stage)),
            Command::BuildDatastore(c) => (c, "build-datastore", Box::new(commands::build_datastore_cmd as Stage)),
            Command::CacheDists(c) => (c, "cache-dists", Box::new(commands::cache_dists as Stage)),
            Command::TrainMemdec(c) => (c, "train-memdec", Box::new(commands::train_memdec as Stage)),
            Command::TrainDapt(c) => (c, "train-dapt", Box::new(commands::train_dapt as Stage)),
            Command::TransferVocab(c) => (c, "transfer-vocab", Box::new(commands::transfer_vocab as Stage)),
            Command::Eval { common, scorer, split } => {
                let split = match split {
                    SplitArg::Valid => Split::Valid,
                    SplitArg::Test => Split::Test,
                };
                let kinds = scorer.clone();
                (common, "eval", Box::new(move |ctx: &mut Ctx| commands::eval(ctx, &kinds, split)))
            }
            Command::TuneAlpha(c) => (c, "tune-alpha", Box::new(commands::tune_alpha as Stage)),
            Command::Bench(c) => (c, "bench", Box::new(commands::bench as Stage)),
            Command::AnalyzeSparsity(c) => (c, "analyze-sparsity", Box::new(commands::analyze_sparsity as Stage)),
            Command::CaseStudy {
                common,
                context,
                target,
            } => {
                let (context, target) = (context.clone(), target.clone());
                (
                    common,
                    "case-study",
                    Box::new(move |ctx: &mut Ctx| commands::case_study(ctx, &context, &target)),
                )
            }
            Command::Ablate(c) => (c, "ablate", Box::new(commands::ablate as Stage)),
        };
    let mut ctx = setup(common, name)?;
    stage(&mut ctx)?;
    ctx.finish()
}

/// 2 for configuration errors, 3 for incompatible or corrupt artifacts.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        return 2;
    }
    let incompatible = err
        .chain()
        .filter_map(|e| e.downcast_ref::<memdec::Error>())
        .any(memdec::Error::is_incompatibility);
    if incompatible {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
