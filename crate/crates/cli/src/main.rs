//! `dsg`: command-line front end for the dynamic guardrail engine.

mod commands;
mod error;
mod manifest;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "dsg", version, about = "Dynamic SAE guardrails: select, calibrate and apply conditional feature clamps")]
struct Cli {
    /// Global seed, used wherever a command needs one and none is given.
    #[arg(long, global = true, env = "DSG_SEED")]
    seed: Option<u64>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate forget and retain corpora from a synthetic spec.
    Synth(SynthArgs),
    /// Train a small JumpReLU SAE on a corpus.
    TrainSae(TrainArgs),
    /// Accumulate per-feature squared activations over a corpus.
    Stats(StatsArgs),
    /// Merge stats shards into one file.
    MergeStats(MergeArgs),
    /// Select forget-mediating features from forget and retain stats.
    Select(SelectArgs),
    /// Fill in tau from a retain corpus.
    Calibrate(CalibrateArgs),
    /// Apply a guard to a corpus.
    Guard(GuardArgs),
    /// Build one config per forget request with the all or union strategy.
    Sequential(SequentialArgs),
    /// Sweeps, histograms, TVD and latency.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the oracle suite on fresh synthetic data.
    Verify(VerifyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// SynthSpec JSON file.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Threshold for the planted SAE written next to the corpora.
    #[arg(long, default_value_t = 0.3)]
    pub theta: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// DSGA activation corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Dictionary width.
    #[arg(long)]
    pub d_sae: usize,
    /// Sparsity penalty weight.
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    /// Optimizer steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Tokens per minibatch.
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 5e-3)]
    pub learning_rate: f64,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// DSGW SAE weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// DSGA activation corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// DSGS stats files to merge.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    /// Stats over the forget corpus.
    #[arg(long)]
    pub forget_stats: PathBuf,
    /// Stats over the retain corpus.
    #[arg(long)]
    pub retain_stats: PathBuf,
    /// Percentile of importance ratios a feature must exceed.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_P_RATIO)]
    pub p_ratio: f64,
    /// Keep at most this many features.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_N_FEATS)]
    pub n_feats: usize,
    /// Floor on retain activation in the ratio denominator.
    #[arg(long, default_value_t = dsg_core::feature_stats::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Clamp value c; selected features are set to -c.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_CLAMP)]
    pub clamp: f64,
    /// Also write the per-feature importance table as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Guardrail config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// DSGW SAE weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Retain corpus.
    #[arg(long)]
    pub retain: PathBuf,
    /// Percentile of retain ρ used as tau.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_P_DYN)]
    pub p_dyn: f64,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GuardArgs {
    /// DSGW SAE weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// DSGA activation corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Guardrail config; optional when features and tau come from flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Static baseline: clamp every firing feature, no sequence gate.
    #[arg(long = "static")]
    pub static_mode: bool,
    /// Use this tau and skip the calibrated one.
    #[arg(long)]
    pub tau_override: Option<f64>,
    /// Feature ids, whitespace or comma separated, `#` comments.
    #[arg(long)]
    pub features_file: Option<PathBuf>,
    /// Clamp value c; selected features are set to -c.
    #[arg(long)]
    pub clamp: Option<f64>,
    /// Drop the SAE reconstruction error from modified tokens.
    #[arg(long)]
    pub no_error_term: bool,
    /// Modified corpus.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-sequence verdict CSV.
    #[arg(long)]
    pub verdicts: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SequentialArgs {
    /// `all` or `union`.
    #[arg(long)]
    pub strategy: String,
    /// DSGW SAE weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Retain corpus.
    #[arg(long)]
    pub retain: PathBuf,
    /// Forget corpora in request order.
    #[arg(long, required = true, num_args = 1..)]
    pub folds: Vec<PathBuf>,
    /// Percentile of importance ratios a feature must exceed.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_P_RATIO)]
    pub p_ratio: f64,
    /// Keep at most this many features.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_N_FEATS)]
    pub n_feats: usize,
    /// Percentile of retain ρ used as tau.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_P_DYN)]
    pub p_dyn: f64,
    /// Clamp value c; selected features are set to -c.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_CLAMP)]
    pub clamp: f64,
    /// Floor on retain activation in the ratio denominator.
    #[arg(long, default_value_t = dsg_core::feature_stats::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Ablation sweep over one axis.
    Sweep(SweepArgs),
    /// ρ histograms of one or more corpora.
    Histogram(HistogramArgs),
    /// TVD between two corpora's per-sequence statistics.
    Tvd(TvdArgs),
    /// Per-sequence latency of passthrough, static and dynamic guarding.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// clamp_c, n_feats, p_dyn or p_ratio.
    #[arg(long)]
    pub axis: String,
    /// Comma separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    /// DSGW SAE weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Forget corpus.
    #[arg(long)]
    pub forget: PathBuf,
    /// Retain corpus.
    #[arg(long)]
    pub retain: PathBuf,
    /// Percentile of importance ratios a feature must exceed.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_P_RATIO)]
    pub p_ratio: f64,
    /// Keep at most this many features.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_N_FEATS)]
    pub n_feats: usize,
    /// Percentile of retain ρ used as tau.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_P_DYN)]
    pub p_dyn: f64,
    /// Clamp value c; selected features are set to -c.
    #[arg(long, default_value_t = dsg_core::pipeline::DEFAULT_CLAMP)]
    pub clamp: f64,
    /// Floor on retain activation in the ratio denominator.
    #[arg(long, default_value_t = dsg_core::feature_stats::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct HistogramArgs {
    /// DSGW SAE weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Guardrail config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// `tag=path`, repeatable.
    #[arg(long = "corpus", required = true)]
    pub corpora: Vec<String>,
    /// Histogram bins.
    #[arg(long, default_value_t = dsg_core::eval::DEFAULT_BINS)]
    pub bins: usize,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TvdArgs {
    /// DSGW SAE weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Guardrail config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// First corpus.
    #[arg(long)]
    pub a: PathBuf,
    /// Second corpus.
    #[arg(long)]
    pub b: PathBuf,
    /// `rho` (fraction) or `raw` (count).
    #[arg(long, default_value = "rho")]
    pub stat: String,
    /// Histogram bins.
    #[arg(long, default_value_t = dsg_core::eval::DEFAULT_BINS)]
    pub bins: usize,
    /// Bootstrap iterations.
    #[arg(long, default_value_t = dsg_core::eval::DEFAULT_BOOTSTRAP)]
    pub iters: usize,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// DSGW SAE weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Guardrail config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// DSGA activation corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Timing repeats.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => commands::synth(&a, seed),
        Command::TrainSae(a) => commands::train_sae(&a, seed),
        Command::Stats(a) => commands::stats(&a, seed),
        Command::MergeStats(a) => commands::merge_stats(&a, seed),
        Command::Select(a) => commands::select(&a, seed),
        Command::Calibrate(a) => commands::calibrate(&a, seed),
        Command::Guard(a) => commands::guard(&a, seed),
        Command::Sequential(a) => commands::sequential(&a, seed),
        Command::Eval(EvalCommand::Sweep(a)) => commands::sweep(&a, seed),
        Command::Eval(EvalCommand::Histogram(a)) => commands::histogram(&a, seed),
        Command::Eval(EvalCommand::Tvd(a)) => commands::tvd(&a, seed),
        Command::Eval(EvalCommand::Bench(a)) => commands::bench(&a, seed),
        Command::Verify(a) => verify::run(&a, seed),
    }
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
