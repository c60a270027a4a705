//! `dfca`: synthesize data, train and evaluate iris presentation-attack
//! detectors, check gradients and dump feature maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "dfca", version, about = "Iris presentation attack detection with DFCANet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic iris dataset and its manifest.
    Synth(SynthArgs),
    /// Train from scratch under a protocol (or from a checkpoint with --from-checkpoint).
    Train(TrainArgs),
    /// Fine-tune from a checkpoint; requires --from-checkpoint.
    Finetune(TrainArgs),
    /// Evaluate a checkpoint on one side of its run's split.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write intermediate feature maps of one image.
    Dump(DumpArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// TOML file with `counts` and a `[synth]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = config::DATA_ROOT_VAR, default_value = "data")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Images per class as normal,soft,textured,print,scan.
    #[arg(long)]
    pub counts: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Intra,
    Inter,
    Combined,
    CrossDatabase,
    Incremental,
    LensDetection,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LabelArg {
    Attack,
    Bonafide,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AblateArg {
    None,
    NoIfcnet,
    NoCam,
    BackboneOnly,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PresetArg {
    /// Full-size network on 224×224 inputs.
    Paper,
    /// Small backbone and two FC-Blocks on 64×64 inputs.
    Desk,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest CSV; defaults to $DFCA_DATA_ROOT/manifest.csv.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long, value_delimiter = ',')]
    pub train_sensors: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub test_sensors: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub train_datasets: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub test_datasets: Option<Vec<String>>,
    /// Keep only this many test records.
    #[arg(long)]
    pub test_subsample: Option<usize>,
    #[arg(long, value_enum)]
    pub soft_lens_as: Option<LabelArg>,
    #[arg(long, value_enum)]
    pub ablate: Option<AblateArg>,
    /// Model size preset, applied before --ablate and --image-size.
    #[arg(long, value_enum)]
    pub model: Option<PresetArg>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Seeds both the split and the training run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable shift/shear augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Parent directory of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Name of the run directory under --out.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint written by train or finetune; its config.toml must sit beside it.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to evaluate on; defaults to the one the run used.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    Tiny,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    pub scale: ScaleArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Negative control: corrupt the analytic gradient of the named check.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

#[derive(Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Comma-separated stage names, e.g. backbone,fcblock1,cam.
    #[arg(long, value_delimiter = ',', required = true)]
    pub stages: Vec<String>,
    /// Output directory; defaults to `maps` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result: Result<(), CliError> = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a, false),
        Command::Finetune(a) => commands::train(a, true),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Dump(a) => commands::dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dfca: {e}");
            e.exit_code()
        }
    }
}
