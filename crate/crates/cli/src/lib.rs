//! Command-line driver. Argument parsing and dispatch live here so the
//! binary stays a two-liner; each subcommand resolves a [`RunConfig`]
//! (defaults, then config file, then `--set` pairs, then dedicated flags)
//! and delegates to [`commands`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod checks;
pub mod commands;
pub mod config;

use config::{threads_from_env, RunConfig};
use hico_core::Result;

#[derive(Parser)]
#[command(
    name = "hico",
    about = "Hierarchical contrastive video pretraining on synthetic data",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic video dataset (train.hico + manifest)
    GenData(GenDataArgs),
    /// Pretrain an encoder (model.hick + train.csv)
    Pretrain(PretrainArgs),
    /// K-fold cross-validated fine-tuning of a checkpoint (metrics.csv + summary.txt)
    Finetune(FinetuneArgs),
    /// Per-frame classification with a checkpoint's own head, no training
    Eval(EvalArgs),
    /// Convergence comparison across pretraining modes (curves.csv)
    Compare(CompareArgs),
    /// Loss-term ablation grid (ablation.csv)
    Ablate(AblateArgs),
    /// Batch-size or label-rate sweep (sweep.csv)
    Sweep(SweepArgs),
    /// Finite-difference gradient verification (gradcheck.txt)
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every config-driven subcommand. Resolution order:
/// defaults, then --config file, then --set pairs, then dedicated flags.
#[derive(Args)]
struct CommonArgs {
    /// key=value config file; later flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set lr=0.001 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory [default: out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; every subsystem derives from it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    /// Build the config in resolution order, leaving room for the
    /// subcommand's own flags before `resolve()`.
    fn base_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.set)?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of videos [default: 60]
    #[arg(long)]
    videos: Option<usize>,
    /// Number of classes [default: 3]
    #[arg(long)]
    classes: Option<usize>,
    /// Frames per video [default: 8]
    #[arg(long)]
    frames: Option<usize>,
    /// Square frame size in pixels [default: 64]
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset file written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Continue a checkpointed run; its stored config governs the run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// hico | vanilla_cl | scratch_supervised [default: hico]
    #[arg(long)]
    mode: Option<String>,
    /// Enabled contrastive terms, e.g. ll+mm+gg+gl+gm or none [default: all]
    #[arg(long)]
    toggles: Option<String>,
    /// Pretraining epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Videos per batch [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: 0.0003]
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight decay [default: 0.0001]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Fraction of videos with labels during pretraining [default: 1]
    #[arg(long)]
    label_rate: Option<f64>,
    /// InfoNCE temperature [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Peer-level weight in the contrastive mix [default: 0.5]
    #[arg(long)]
    lambda: Option<f64>,
    /// Label softening mass [default: 0.2]
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the softened classification loss [default: 0.2]
    #[arg(long)]
    beta: Option<f64>,
    /// Also checkpoint every k epochs; 0 = final only [default: 0]
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Pretrained checkpoint to start from
    #[arg(long)]
    ckpt: PathBuf,
    /// Downstream dataset file
    #[arg(long)]
    data: PathBuf,
    /// Cross-validation folds [default: 5]
    #[arg(long)]
    folds: Option<usize>,
    /// full | last3 | linear_probe [default: last3]
    #[arg(long)]
    scope: Option<String>,
    /// Fine-tuning SGD learning rate [default: 0.01]
    #[arg(long)]
    ft_lr: Option<f64>,
    /// Fine-tuning epochs [default: 30]
    #[arg(long)]
    ft_epochs: Option<usize>,
    /// Fine-tuning batch size [default: 8]
    #[arg(long)]
    ft_batch: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate (must include its classifier head)
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file to classify frame by frame
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated: scratch | vanilla_cl | hico | scratch_supervised
    #[arg(long, default_value = "scratch,vanilla_cl,hico")]
    modes: String,
    /// Comma-separated run seeds, one full run per (mode, seed)
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Pretraining dataset file; generated from the config when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Downstream dataset file; a shifted variant is generated when omitted
    #[arg(long)]
    down_data: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Rows split by ';', terms by ',': ll mm gg gl gm soften
    /// (e.g. "gg,soften;gg,mm,soften")
    #[arg(long)]
    toggles: String,
    /// Pretraining dataset file; generated from the config when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Downstream dataset file; a shifted variant is generated when omitted
    #[arg(long)]
    down_data: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// batch_size | label_rate
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values, e.g. 0,0.2,0.4,0.6,0.8,1.0
    #[arg(long)]
    values: String,
    /// Pretraining dataset file; generated from the config when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Downstream dataset file; a shifted variant is generated when omitted
    #[arg(long)]
    down_data: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// primitives | losses | full
    #[arg(long, default_value = "primitives")]
    target: String,
    /// Probe input size for --target full [default: 8]
    #[arg(long, default_value_t = 8)]
    size: usize,
    /// Probe channel width for --target full [default: 4]
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// Probe seed; the default is a well-conditioned point
    #[arg(long, default_value_t = 41)]
    seed: u64,
    /// Output directory [default: out]
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => {
            let mut cfg = a.common.base_config()?;
            if let Some(v) = a.videos {
                cfg.manifest.num_videos = v;
            }
            if let Some(v) = a.classes {
                cfg.manifest.num_classes = v;
            }
            if let Some(v) = a.frames {
                cfg.manifest.frames_per_video = v;
            }
            if let Some(v) = a.size {
                cfg.manifest.image_size = v;
            }
            cfg.resolve();
            commands::cmd_gen_data(&cfg)
        }
        Cmd::Pretrain(a) => {
            let mut cfg = a.common.base_config()?;
            let p = &mut cfg.pretrain;
            if let Some(v) = &a.mode {
                p.mode = hico_core::trainer::TrainMode::parse(v)?;
            }
            if let Some(v) = &a.toggles {
                p.toggles = hico_core::trainer::TermToggles::parse(v)?;
            }
            if let Some(v) = a.epochs {
                p.epochs = v;
            }
            if let Some(v) = a.batch {
                p.batch_size = v;
            }
            if let Some(v) = a.lr {
                p.lr = v;
            }
            if let Some(v) = a.weight_decay {
                p.weight_decay = v;
            }
            if let Some(v) = a.label_rate {
                p.label_rate = v;
            }
            if let Some(v) = a.tau {
                p.weights.tau = v;
            }
            if let Some(v) = a.lambda {
                p.weights.lambda = v;
            }
            if let Some(v) = a.alpha {
                p.weights.alpha = v;
            }
            if let Some(v) = a.beta {
                p.weights.beta = v;
            }
            if let Some(v) = a.checkpoint_every {
                p.checkpoint_every = v;
            }
            cfg.resolve();
            commands::cmd_pretrain(&mut cfg, &a.data, a.resume.as_deref())
        }
        Cmd::Finetune(a) => {
            let mut cfg = a.common.base_config()?;
            if let Some(v) = a.folds {
                cfg.finetune.folds = v;
            }
            if let Some(v) = &a.scope {
                cfg.finetune.scope = hico_core::eval::TrainableScope::parse(v)?;
            }
            if let Some(v) = a.ft_lr {
                cfg.finetune.lr = v;
            }
            if let Some(v) = a.ft_epochs {
                cfg.finetune.epochs = v;
            }
            if let Some(v) = a.ft_batch {
                cfg.finetune.batch_size = v;
            }
            cfg.resolve();
            cfg.finetune.threads = threads_from_env()?;
            commands::cmd_finetune(&mut cfg, &a.ckpt, &a.data)
        }
        Cmd::Eval(a) => {
            let mut cfg = a.common.base_config()?;
            cfg.resolve();
            commands::cmd_eval(&mut cfg, &a.ckpt, &a.data)
        }
        Cmd::Compare(a) => {
            let mut cfg = a.common.base_config()?;
            cfg.resolve();
            cfg.finetune.threads = threads_from_env()?;
            commands::cmd_compare(&mut cfg, &a.modes, &a.seeds, a.data.as_deref(), a.down_data.as_deref())
        }
        Cmd::Ablate(a) => {
            let mut cfg = a.common.base_config()?;
            cfg.resolve();
            cfg.finetune.threads = threads_from_env()?;
            commands::cmd_ablate(&mut cfg, &a.toggles, a.data.as_deref(), a.down_data.as_deref())
        }
        Cmd::Sweep(a) => {
            let mut cfg = a.common.base_config()?;
            cfg.resolve();
            cfg.finetune.threads = threads_from_env()?;
            commands::cmd_sweep(&mut cfg, &a.axis, &a.values, a.data.as_deref(), a.down_data.as_deref())
        }
        Cmd::Gradcheck(a) => commands::cmd_gradcheck(&a.out, &a.target, a.size, a.channels, a.seed),
    }
}

/// Parse arguments, run, and map errors to the exit-code contract:
/// 0 success, 1 verification failure, 2 bad configuration, 3 I/O or
/// format trouble. Clap's own usage errors also exit 2.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
