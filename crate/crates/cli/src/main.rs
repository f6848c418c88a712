use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod run;

use run::CliError;

/// Two-stage latent video diffusion at desk scale: codecs, base and
/// teacher models, feature distillation, feature-guided upsampling and the
/// ablations.
#[derive(Parser, Debug)]
#[command(name = "cascade-distill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of every training stream (and of sampling).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run root; each command writes its own subdirectory.
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    /// Training steps of this command's stage.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Replace this command's existing output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Synced,
    Fixed,
}

#[derive(Args, Debug, Clone)]
pub struct DistillArgs {
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    /// Teacher timestep of the fixed strategy.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda_dis: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct GuidanceArgs {
    /// Timestep the guidance features are read at.
    #[arg(long)]
    pub t_guid: Option<f64>,
    /// Comma-separated injection blocks, e.g. `0,2,4`.
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Export the training and held-out clips as PNG frames and GIFs.
    GenData(Common),
    /// Train the student or teacher autoencoder.
    TrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "student")]
        role: Role,
    },
    /// Train a low-resolution model from scratch on its codec's latents.
    TrainLr {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "student")]
        role: Role,
    },
    /// Distill teacher features into the low-resolution student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        distill: DistillArgs,
    },
    /// Train the feature-guided high-resolution model.
    TrainHr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Sample and decode one low-resolution clip.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Low-resolution sampling, guidance extraction, high-resolution
    /// sampling and a single decode.
    TwoStageSample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Token counts, attention cost and measured forward latency.
    Bench(Common),
    /// Teacher/student feature similarity of the distilled student.
    Cka(Common),
    /// Fine-tuning vs distillation ablation over paired seeds.
    ReproduceTable3(Common),
    /// Guidance-source ablation over paired seeds.
    ReproduceTable4(Common),
    /// Sample the base model off its training resolution.
    MultiresProbe(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::TrainCodec { common, role } => commands::train_codec(&common, role),
        Command::TrainLr { common, role } => commands::train_lr(&common, role),
        Command::Distill { common, distill } => commands::distill(&common, &distill),
        Command::TrainHr { common, guidance } => commands::train_hr(&common, &guidance),
        Command::Sample { common, class } => commands::sample(&common, class),
        Command::TwoStageSample {
            common,
            guidance,
            class,
        } => commands::two_stage_sample(&common, &guidance, class),
        Command::Bench(c) => commands::bench(&c),
        Command::Cka(c) => commands::cka(&c),
        Command::ReproduceTable3(c) => commands::table3(&c),
        Command::ReproduceTable4(c) => commands::table4(&c),
        Command::MultiresProbe(c) => commands::multires(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::RunDir(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}
