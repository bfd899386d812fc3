use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use etsef::pipeline::{self, Command, Explainer, RunConfig, StageStatus};
use etsef::Error;
use log::error;

#[derive(Parser)]
#[command(name = "etsef", version, about = "Ensemble of transfer- and self-supervised feature extractors")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Run configuration (key = value with [section] headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides [run] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; results go to <out>/<task>/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Keep all conv blocks but the last frozen during contrastive pre-training.
    #[arg(long, global = true)]
    ssl_freeze_backbone: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Gradcam,
    Shap,
    Tsne,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generic, intermediate and contrastive pre-training.
    Pretrain,
    /// Target fine-tuning of the six base models.
    Finetune,
    /// Feature fusion, classifiers and majority vote.
    Ensemble,
    /// Leave-one-base-model-out ablation.
    Ablate,
    /// Grad-CAM, SHAP and t-SNE artifacts.
    Explain {
        #[arg(long, value_enum, default_value = "all")]
        what: What,
        /// Comma-separated test-set indices.
        #[arg(long, value_delimiter = ',')]
        instances: Option<Vec<usize>>,
    },
    /// Frozen extractors on an unseen dataset against random initialization.
    Oodtest {
        /// Task directory holding fine-tuned models to reuse.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Write the configured datasets as image directories.
    Synth,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.global.out {
        cfg.out = o;
    }
    if cli.global.ssl_freeze_backbone {
        cfg.ssl.freeze_backbone = true;
    }
    let cmds = match cli.cmd {
        Cmd::Pretrain => vec![Command::Pretrain],
        Cmd::Finetune => vec![Command::Finetune],
        Cmd::Ensemble => vec![Command::Ensemble],
        Cmd::Ablate => vec![Command::Ablate],
        Cmd::Explain { what, instances } => {
            if let Some(i) = instances {
                cfg.explain.instances = i;
            }
            match what {
                What::Gradcam => vec![Command::Explain(Explainer::GradCam)],
                What::Shap => vec![Command::Explain(Explainer::Shap)],
                What::Tsne => vec![Command::Explain(Explainer::Tsne)],
                What::All => Explainer::ALL.iter().map(|&e| Command::Explain(e)).collect(),
            }
        }
        Cmd::Oodtest { source } => {
            if source.is_some() {
                cfg.ood.source = source;
            }
            vec![Command::Oodtest]
        }
        Cmd::Synth => vec![Command::Synth],
    };
    for c in cmds {
        let status = pipeline::run(&cfg, c)?;
        if status == StageStatus::Skipped {
            eprintln!("{c:?}: up to date");
        }
    }
    println!("{}", cfg.task_dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
