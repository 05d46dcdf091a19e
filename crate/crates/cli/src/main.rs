//! `crnet` command-line entry point.
//!
//! Exit codes: 0 on success, 2 when a check ran but failed, 1 on error.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "crnet", version, about = "Cross-layer low-rank residual transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config with optional "model", "train", "cost" and "pipeline" sections.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// tiny, toy, llama2-60m, llama2-130m, llama2-350m, llama2-1b, llama2-7b or llama2-13b.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a byte-level language model.
    Train(TrainArgs),
    /// Compare manual gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Compare recomputed gradients and activations with the full cache.
    RecomputeCheck(RecomputeCheckArgs),
    /// Cross-layer versus direct low-rank error of a full-rank model's activations.
    Analyze(AnalyzeArgs),
    /// Check the cross-layer approximation inequality on generated pairs.
    TheoremCheck(TheoremArgs),
    /// Parameter, memory and FLOP accounting.
    Cost(CostArgs),
    /// Pipeline-parallel compute and communication estimate.
    PipelineCost(PipelineArgs),
    /// Write every linear output of a model as CRMX files.
    DumpActivations(DumpArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Store selected layers only and recompute the rest in the backward pass.
    #[arg(long)]
    pub recompute: bool,
    /// Number of stored layers under --recompute.
    #[arg(long)]
    pub checkpoints: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// crnet or full_rank.
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct RecomputeCheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Stored layers, comma separated; the last layer must be included.
    #[arg(long, value_delimiter = ',')]
    pub stored: Option<Vec<usize>>,
    /// Number of evenly spaced stored layers; ignored when --stored is given.
    #[arg(long)]
    pub checkpoints: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub beta_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta_max: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_grad: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub tol_recon: f64,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding a crnet.ckpt of a full-rank model; without it the
    /// preset is initialised from the seed.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub windows: usize,
    #[arg(long, default_value_t = 0.25)]
    pub rank_fraction: f64,
}

#[derive(Args, Debug)]
pub struct TheoremArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.02, 0.05, 0.1])]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub trials: u64,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub gcp_mode: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq: Option<usize>,
    /// Uniform rank; replaces any rank schedule.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Number of checkpointed layers for CR-Net recomputation.
    #[arg(long)]
    pub checkpoints: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub peak_tflops: Option<f64>,
    /// Link bandwidth in GB/s, with 1 GB = 2^30 bytes.
    #[arg(long)]
    pub bandwidth_gbs: Option<f64>,
    #[arg(long)]
    pub microbatch: Option<usize>,
    #[arg(long)]
    pub pp_size: Option<usize>,
    /// full_rank or crnet; both when omitted.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub seq: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub checkpoints: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub windows: usize,
}

/// How a successful run ended.
pub enum Outcome {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
