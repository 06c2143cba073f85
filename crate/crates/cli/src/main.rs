mod commands;
mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ParserKind, PipelineConfig};

/// Exit status 2: configuration, 3: file I/O or malformed input files,
/// 4: training diverged, 1: anything else.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 3,
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<guided::Error> for CliError {
    fn from(e: guided::Error) -> Self {
        use guided::Error as E;
        let code = match &e {
            E::Config(_) => 2,
            E::Io { .. } | E::Format { .. } => 3,
            E::Divergence { .. } | E::NonFinite(_) => 4,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser)]
#[command(name = "guided", version, about = "Fine-grained open-vocabulary detection by subject and attribute decomposition")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML pipeline config; keys it leaves out keep their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: output_dir from the config, then $GUIDED_OUT_DIR, then ./guided-out]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed for the world, initialization and training
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for per-image work
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Split class names into subjects and attributes
    Parse(ParseArgs),
    /// Generate the seeded synthetic benchmark
    Synth(SynthArgs),
    /// Train stage 1 (coarse subjects) or stage 2 (fine-grained names)
    Train(TrainArgs),
    /// Write per-annotation prediction records for the test split
    Detect(DetectArgs),
    /// Score a prediction file: AP per track and mAP
    Eval(EvalArgs),
    /// Train and evaluate the ablation variants over several seeds
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct ParseArgs {
    /// Class names, one per line ('#' starts a comment)
    #[arg(long)]
    names: Option<PathBuf>,
    #[arg(long, value_enum)]
    parser: Option<ParserArg>,
    /// Transcript replayed by the replay parser
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Hyponym-to-hypernym lexicon for grounding checks
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Parse cache, read before and written after parsing
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ParserArg {
    Rules,
    Replay,
    Command,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Dataset written by `synth`; generated from the config when omitted
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Stage-1 checkpoint to start stage 2 from
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stage 2: mix coarse samples into the batches
    #[arg(long)]
    co_training: bool,
    /// Stage 2: keep the projection head fixed
    #[arg(long)]
    freeze_projection: bool,
}

#[derive(Args)]
pub struct DetectArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Emit the ground truth as predictions instead of running a model
    #[arg(long)]
    oracle: bool,
    /// Fusion weight on the coarse score
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Prediction records written by `detect`
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    iou: Option<f64>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated variant names, e.g. full,no_AEF,alpha_0.4
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    stage1_iterations: Option<usize>,
    #[arg(long)]
    stage2_iterations: Option<usize>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
}

fn apply_overrides(cfg: &mut PipelineConfig, global: &GlobalArgs, command: &Command) {
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(w) = global.workers {
        cfg.workers = w;
    }
    match command {
        Command::Parse(a) => {
            if let Some(p) = &a.names {
                cfg.vocabulary.names = Some(p.clone());
            }
            if let Some(p) = a.parser {
                cfg.vocabulary.parser = match p {
                    ParserArg::Rules => ParserKind::Rules,
                    ParserArg::Replay => ParserKind::Replay,
                    ParserArg::Command => ParserKind::Command,
                };
            }
            if let Some(p) = &a.transcript {
                cfg.vocabulary.transcript = Some(p.clone());
            }
            if let Some(p) = &a.lexicon {
                cfg.vocabulary.lexicon = Some(p.clone());
            }
            if let Some(p) = &a.cache {
                cfg.vocabulary.cache = Some(p.clone());
            }
        }
        Command::Synth(a) => {
            if let Some(n) = a.train_images {
                cfg.world.train_images = n;
            }
            if let Some(n) = a.test_images {
                cfg.world.test_images = n;
            }
        }
        Command::Train(a) => {
            let stage = if a.stage == 1 { &mut cfg.stage1 } else { &mut cfg.stage2 };
            if let Some(n) = a.iterations {
                stage.iterations = n;
            }
            if let Some(lr) = a.lr {
                stage.learning_rate = lr;
            }
            if let Some(b) = a.batch_size {
                stage.batch_size = b;
            }
            stage.co_training |= a.co_training;
            stage.freeze_projection |= a.freeze_projection;
        }
        Command::Detect(a) => {
            if let Some(x) = a.alpha {
                cfg.fusion.alpha = x;
            }
        }
        Command::Eval(a) => {
            if let Some(x) = a.iou {
                cfg.eval.iou_threshold = x;
            }
        }
        Command::Ablate(a) => {
            if let Some(s) = &a.seeds {
                cfg.ablation.seeds = s.clone();
            }
            if let Some(v) = &a.variants {
                cfg.ablation.variants = v.clone();
            }
            if let Some(n) = a.stage1_iterations {
                cfg.stage1.iterations = n;
            }
            if let Some(n) = a.stage2_iterations {
                cfg.stage2.iterations = n;
            }
            if let Some(n) = a.train_images {
                cfg.world.train_images = n;
            }
            if let Some(n) = a.test_images {
                cfg.world.test_images = n;
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.global.config.as_deref())?;
    apply_overrides(&mut cfg, &cli.global, &cli.command);
    let cfg = cfg.resolve()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| CliError::other(format!("worker pool: {e}")))?;
    let out = cfg.out_dir(cli.global.out.as_deref());
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    commands::write_text(&out.join(config::CONFIG_ECHO), &cfg.to_toml()?)?;
    match &cli.command {
        Command::Parse(_) => commands::cmd_parse(&cfg, &out),
        Command::Synth(_) => commands::cmd_synth(&cfg, &out),
        Command::Train(a) => commands::cmd_train(&cfg, &out, a.stage, a.dataset.as_deref(), a.init.as_deref()),
        Command::Detect(a) => {
            commands::cmd_detect(&cfg, &out, a.dataset.as_deref(), a.checkpoint.as_deref(), a.oracle)
        }
        Command::Eval(a) => commands::cmd_eval(&cfg, &out, &a.predictions),
        Command::Ablate(_) => commands::cmd_ablate(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
