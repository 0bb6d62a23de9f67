mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsdn::Error;

#[global_allocator]
static ALLOC: gsdn::eval::TrackingAllocator = gsdn::eval::TrackingAllocator;

/// Generative sparse detection: synthetic data, training, inference,
/// evaluation and benchmarks.
#[derive(Parser, Debug)]
#[command(name = "gsdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration shared by most subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.tau=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved run configuration as JSON.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate synthetic scenes and a manifest.
    Synth {
        /// Run configuration or bare synthetic scene spec (JSON).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train on a scene directory; writes checkpoint.bin and train_log.csv.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from <out>/checkpoint.bin when it exists.
        #[arg(long)]
        resume: bool,
        /// Print a progress line every this many iterations (0 disables).
        #[arg(long, default_value_t = 100)]
        progress: u64,
    },
    /// Detect objects in one scene and write boxes JSON.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene directory or .ply file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pruning threshold; defaults to the checkpoint's.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = gsdn::detect::DEFAULT_SCORE_THRESH)]
        score_thresh: f64,
        #[arg(long, default_value_t = gsdn::detect::DEFAULT_NMS_IOU)]
        nms_iou: f64,
    },
    /// Score predictions against ground truth; writes eval.json and PR curves.
    Eval {
        /// Predicted boxes file, or directory of <scene>.json files.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth boxes file, scene directory, or dataset directory.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5])]
        iou: Vec<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference check of every model gradient on a tiny scene.
    Gradcheck {
        #[arg(long, default_value_t = 30)]
        voxels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
    /// Time inference over a ladder of tiled synthetic scenes; writes bench.csv.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Weights to benchmark; a seeded initialization otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Ladder rungs; rung i holds 2^i copies of the base scene.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Train and evaluate a grid of loss, backbone and anchor-set variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training scenes; synthesized from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Scenes to synthesize when --data is omitted.
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        /// Backbones to include, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [String::from("res14")])]
        backbones: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        Error::Validation(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json(_) | Error::Checkpoint(_) => 3,
        Error::Contract(_) | Error::Shape(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Config { cfg } => commands::config(&cfg),
        Command::Synth {
            spec,
            out,
            scenes,
            overrides,
        } => commands::synth(spec.as_deref(), &out, scenes, &overrides),
        Command::Train {
            cfg,
            data,
            out,
            resume,
            progress,
        } => commands::train(&cfg, data, out, resume, progress),
        Command::Detect {
            ckpt,
            input,
            out,
            tau,
            score_thresh,
            nms_iou,
        } => commands::detect(&ckpt, &input, &out, tau, score_thresh, nms_iou),
        Command::Eval { pred, gt, iou, out } => commands::eval(&pred, &gt, &iou, &out),
        Command::Gradcheck { voxels, seed, classes } => commands::gradcheck(voxels, seed, classes),
        Command::Bench {
            cfg,
            ckpt,
            out,
            steps,
            warmup,
            repeats,
        } => commands::bench(&cfg, ckpt.as_deref(), &out, steps, warmup, repeats),
        Command::Ablate {
            cfg,
            data,
            out,
            scenes,
            backbones,
        } => commands::ablate(&cfg, data.as_deref(), &out, scenes, &backbones),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
