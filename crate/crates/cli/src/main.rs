//! `sps`: train, apply, and analyze smooth-plus-sparse patch models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 solver non-convergence abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sps_cli::commands;
use sps_cli::config::{profile_defaults, TrainSpec};

#[derive(Parser)]
#[command(name = "sps", version, about = "Smooth-plus-sparse patch model toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a directory of grayscale images (denoising task).
    Train(TrainArgs),
    /// Reconstruct an image from measurements with a trained model.
    Reconstruct(ReconArgs),
    /// Reconstruct, then split into smooth/sparse parts with cost maps.
    Decompose(DecomposeArgs),
    /// Coarse-to-fine hyperparameter search on a validation set.
    Gridsearch(GridArgs),
    /// PSNR/SSIM between two images.
    Metrics(MetricsArgs),
    /// Summarize a model file and check its feasibility.
    InspectModel(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file (fields as in the train spec).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile: paper-denoise-5, paper-denoise-25, desk-smoke.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// group-l1l2 or point-shrink.
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    patch_side: Option<usize>,
    #[arg(long)]
    synth_atoms: Option<usize>,
    #[arg(long)]
    free_atoms: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    lr_dict: Option<f64>,
    #[arg(long)]
    lr_reg: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    stop_after_batches: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long)]
    model: PathBuf,
    /// identity, sr[:sigma,size,stride], or mri:acc[,cf][,seed].
    #[arg(long, default_value = "identity")]
    operator: String,
    /// Ground-truth image: measurements are simulated from it.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Measurement container produced by an earlier run.
    #[arg(long)]
    measurement: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 20000)]
    max_iters: usize,
    /// Deployment override of the coupling weight.
    #[arg(long)]
    coupling: Option<f64>,
    /// Deployment override of the regularization strength.
    #[arg(long)]
    strength: Option<f64>,
    /// Deployment multiplier on all atom weights.
    #[arg(long)]
    weight_multiplier: Option<f64>,
    /// Also write the objective/residual trace as CSV.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    recon: ReconArgs,
    #[arg(long, default_value_t = 1e-8)]
    cg_tol: f64,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "identity")]
    operator: String,
    /// Directory of clean validation images.
    #[arg(long)]
    validation_dir: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coupling-weight axis, lo:hi[:points] (log spaced).
    #[arg(long, default_value = "0.01:10:5")]
    coupling_axis: String,
    /// Second axis (strength for group-l1l2, weight multiplier for
    /// point-shrink), lo:hi[:points].
    #[arg(long, default_value = "0.1:10:5")]
    second_axis: String,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 20000)]
    max_iters: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Centered square crop applied before PSNR.
    #[arg(long)]
    crop: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn train_spec_from_args(a: &TrainArgs) -> anyhow::Result<TrainSpec> {
    let mut spec = TrainSpec::default();
    if let Some(profile) = &a.profile {
        spec = profile_defaults(profile)?;
    }
    if let Some(cfg) = &a.config {
        spec = spec.overlay(&TrainSpec::from_file(cfg)?);
    }
    let flags = TrainSpec {
        profile: a.profile.clone(),
        data_dir: a.data_dir.clone(),
        out_dir: a.out_dir.clone(),
        regularizer: a.regularizer.clone(),
        sigma: a.sigma,
        crop: a.crop,
        patch_side: a.patch_side,
        synth_atoms: a.synth_atoms,
        free_atoms: a.free_atoms,
        batch_size: a.batch_size,
        epochs: a.epochs,
        batches_per_epoch: a.batches_per_epoch,
        lr_dict: a.lr_dict,
        lr_reg: a.lr_reg,
        seed: a.seed,
        tol: a.tol,
        checkpoint_every: a.checkpoint_every,
        stop_after_batches: a.stop_after_batches,
        ..Default::default()
    };
    Ok(spec.overlay(&flags))
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train(a) => {
            let spec = train_spec_from_args(&a)?;
            commands::cmd_train(spec, a.resume)
        }
        Cmd::Reconstruct(a) => {
            let setup = commands::prepare_recon(
                &a.model,
                &a.operator,
                a.input.as_deref(),
                a.measurement.as_deref(),
                a.sigma,
                a.seed,
                a.coupling,
                a.strength,
                a.weight_multiplier,
            )?;
            commands::cmd_reconstruct(setup, &a.out_dir, a.tol, a.max_iters, a.trace)
        }
        Cmd::Decompose(a) => {
            let setup = commands::prepare_recon(
                &a.recon.model,
                &a.recon.operator,
                a.recon.input.as_deref(),
                a.recon.measurement.as_deref(),
                a.recon.sigma,
                a.recon.seed,
                a.recon.coupling,
                a.recon.strength,
                a.recon.weight_multiplier,
            )?;
            commands::cmd_decompose(setup, &a.recon.out_dir, a.recon.tol, a.recon.max_iters, a.cg_tol)
        }
        Cmd::Gridsearch(a) => {
            let axis_a = commands::parse_axis(&a.coupling_axis, 5)?;
            let axis_b = commands::parse_axis(&a.second_axis, 5)?;
            commands::cmd_gridsearch(
                &a.model,
                &a.operator,
                &a.validation_dir,
                a.sigma,
                a.seed,
                axis_a,
                axis_b,
                a.tol,
                a.max_iters,
                &a.out_dir,
            )
        }
        Cmd::Metrics(a) => commands::cmd_metrics(&a.image, &a.reference, a.peak, a.crop),
        Cmd::InspectModel(a) => commands::cmd_inspect_model(&a.model),
    }
}

/// Classify an error chain into an exit code: data errors are unreadable or
/// malformed inputs; non-convergence aborts are tagged explicitly; anything
/// else is a configuration error.
fn classify(err: &anyhow::Error) -> u8 {
    let text = format!("{err:#}");
    if text.contains("@nonconvergence@") {
        return 4;
    }
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if let Some(core) = cause.downcast_ref::<sps_core::CoreError>() {
            if matches!(core, sps_core::CoreError::Io(_)) {
                return 3;
            }
        }
        let msg = cause.to_string();
        if msg.contains("cannot read") || msg.contains("cannot decode") || msg.contains("cannot open")
        {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = classify(&err);
            eprintln!("error: {:#}", err);
            ExitCode::from(code)
        }
    }
}
