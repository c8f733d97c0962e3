//! `kinject`: dataset generation, knowledge embedding, two-stage training,
//! ablation and explanation from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinject_core::ScaleMask;

use config::{ConfigInvalid, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "kinject", version, about = "Multi-scale knowledge injection for image classifiers")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data order, initialization, embeddings and generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Enabled knowledge scales, e.g. `s,m,l`, `m` or `none`.
    #[arg(long, global = true)]
    scales: Option<ScaleMask>,
    /// Single-threaded graph embedding so reruns are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for rendering, kernels and graph embedding.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset root, overriding the config.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Model checkpoint, overriding the config.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or check a synthetic dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Write one knowledge scale as a KIEMB file.
    Embed {
        #[command(subcommand)]
        scale: EmbedCmd,
    },
    /// Stage 1 only: align hidden features with the knowledge vectors.
    Pretrain,
    /// Full pipeline, or stage 2 on top of `--model`; an empty mask trains the baseline.
    Train,
    /// Accuracy and per-scale knowledge retrieval of a checkpoint.
    Eval,
    /// One pipeline per mask in {none, L, M, S, all}.
    Ablate,
    /// Grad-CAM, hidden-layer knowledge rankings or a 2-D projection.
    Explain {
        #[command(subcommand)]
        kind: ExplainCmd,
    },
    /// Summarize earlier run directories as Markdown.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum DatasetCmd {
    Gen,
    Validate,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum EmbedCmd {
    /// KI-S from templated sentences and the hash encoder.
    Text {
        /// Write the sentence-set JSON for an external encoder instead.
        #[arg(long)]
        sentences_only: bool,
    },
    /// KI-M from the part-relation graph.
    Relation,
    /// KI-L from the part-relation graph merged with the external graph.
    Wide,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum ExplainCmd {
    /// Grad-CAM heatmaps as PGM at image and feature-map resolution, plus in-box mass.
    Gradcam,
    /// Category rankings from the injection heads.
    Hidden,
    /// 2-D PCA of hidden features as CSV.
    Project,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigInvalid>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<PathBuf> {
    let g = cli.global;
    let cfg = RunConfig::load(g.config.as_deref())?.resolve(Overrides {
        seed: g.seed,
        out: g.out,
        scales: g.scales,
        deterministic: g.deterministic,
        threads: g.threads,
        dataset: g.dataset,
        model: g.model,
    });
    cfg.validate()?;
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Dataset { action } => commands::dataset(&cfg, action),
        Command::Embed { scale } => commands::embed(&cfg, scale),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Explain { kind } => commands::explain(&cfg, kind),
        Command::Report { runs } => commands::report(&cfg, &runs),
    }
}
