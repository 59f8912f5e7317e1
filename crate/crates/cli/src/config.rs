//! Layered run configuration: profile defaults, then a JSON config file,
//! then command-line overrides. Every command writes its fully resolved
//! configuration next to its outputs so a run can be reproduced from the
//! snapshot alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sps_core::backward::{BackwardConfig, BackwardSolver};
use sps_core::reg::RegularizerKind;
use sps_core::solver::SolverConfig;
use sps_core::train::TrainConfig;

/// Optional-field training specification; later layers override earlier ones.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub profile: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub regularizer: Option<String>,
    pub sigma: Option<f64>,
    pub crop: Option<usize>,
    pub patch_side: Option<usize>,
    pub synth_atoms: Option<usize>,
    pub free_atoms: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_dict: Option<f64>,
    pub lr_reg: Option<f64>,
    pub epochs: Option<usize>,
    pub batches_per_epoch: Option<usize>,
    pub decay_points_per_epoch: Option<usize>,
    pub decay_factor: Option<f64>,
    pub exponent: Option<f64>,
    pub weight_init: Option<f64>,
    pub coupling_init: Option<f64>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    /// "anderson" or "broyden".
    pub backward: Option<String>,
    pub backward_iters: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub stop_after_batches: Option<usize>,
}

macro_rules! take_last {
    ($a:expr, $b:expr, $($f:ident),+ $(,)?) => {
        $( if $b.$f.is_some() { $a.$f = $b.$f.clone(); } )+
    };
}

impl TrainSpec {
    pub fn overlay(mut self, other: &TrainSpec) -> TrainSpec {
        take_last!(
            self, other, profile, data_dir, out_dir, regularizer, sigma, crop, patch_side,
            synth_atoms, free_atoms, batch_size, lr_dict, lr_reg, epochs, batches_per_epoch,
            decay_points_per_epoch, decay_factor, exponent, weight_init, coupling_init, seed,
            tol, max_iters, backward, backward_iters, checkpoint_every, stop_after_batches
        );
        self
    }

    pub fn from_file(path: &Path) -> Result<TrainSpec> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))
    }
}

/// Built-in profiles carrying the published training hyperparameters.
pub fn profile_defaults(name: &str) -> Result<TrainSpec> {
    let mut spec = TrainSpec {
        batch_size: Some(16),
        lr_dict: Some(2e-4),
        lr_reg: Some(1e-3),
        epochs: Some(2),
        decay_points_per_epoch: Some(10),
        tol: Some(1e-4),
        max_iters: Some(2000),
        exponent: Some(2.0),
        coupling_init: Some(1.0),
        seed: Some(0),
        ..Default::default()
    };
    match name {
        "paper-denoise-5" => {
            spec.sigma = Some(5.0 / 255.0);
            spec.crop = Some(40);
            spec.patch_side = Some(13);
            spec.synth_atoms = Some(200);
            spec.free_atoms = Some(120);
            spec.batches_per_epoch = Some(238_400 / 16);
            spec.backward = Some("anderson".into());
            spec.backward_iters = Some(75);
            spec.weight_init = Some(0.01);
        }
        "paper-denoise-25" => {
            spec.sigma = Some(25.0 / 255.0);
            spec.crop = Some(40);
            spec.patch_side = Some(13);
            spec.synth_atoms = Some(200);
            spec.free_atoms = Some(120);
            spec.batches_per_epoch = Some(238_400 / 16);
            spec.backward = Some("broyden".into());
            spec.backward_iters = Some(50);
            spec.weight_init = Some(0.05);
        }
        "desk-smoke" => {
            spec.sigma = Some(25.0 / 255.0);
            spec.crop = Some(9);
            spec.patch_side = Some(3);
            spec.synth_atoms = Some(8);
            spec.free_atoms = Some(3);
            spec.epochs = Some(1);
            spec.batches_per_epoch = Some(200);
            spec.regularizer = Some("point-shrink".into());
            spec.backward = Some("broyden".into());
            spec.backward_iters = Some(50);
            spec.weight_init = Some(0.05);
        }
        other => bail!("unknown profile {other:?} (try paper-denoise-5, paper-denoise-25, desk-smoke)"),
    }
    Ok(spec)
}

pub fn parse_regularizer(name: &str) -> Result<RegularizerKind> {
    match name {
        "group-l1l2" => Ok(RegularizerKind::GroupL1L2),
        "point-shrink" => Ok(RegularizerKind::PointShrink),
        other => bail!("unknown regularizer {other:?} (group-l1l2 or point-shrink)"),
    }
}

/// Fully resolved training run.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub kind: RegularizerKind,
    pub sigma: f64,
    pub crop: usize,
    pub patch_side: usize,
    pub synth_atoms: usize,
    pub free_atoms: usize,
    pub exponent: f64,
    pub weight_init: f64,
    pub coupling_init: f64,
    pub seed: u64,
    pub train: TrainConfig,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
}

pub fn resolve_train(spec: &TrainSpec) -> Result<ResolvedTrain> {
    let kind = parse_regularizer(spec.regularizer.as_deref().unwrap_or("group-l1l2"))?;
    let data_dir = spec.data_dir.clone().context("data_dir is required")?;
    let out_dir = spec.out_dir.clone().context("out_dir is required")?;
    let sigma = spec.sigma.unwrap_or(25.0 / 255.0);
    let backward_name = spec.backward.as_deref().unwrap_or("anderson");
    let backward_iters = spec.backward_iters.unwrap_or(75);
    let solver = match backward_name {
        "anderson" => BackwardSolver::Anderson { iters: backward_iters, memory: 5, damping: 1.0 },
        "broyden" => BackwardSolver::Broyden { iters: backward_iters, memory: backward_iters },
        other => bail!("unknown backward solver {other:?} (anderson or broyden)"),
    };
    // The published decay factors pair with the regularizer kind.
    let decay_default = match kind {
        RegularizerKind::GroupL1L2 => 0.75,
        RegularizerKind::PointShrink => 0.9,
    };
    let seed = spec.seed.unwrap_or(0);
    let train = TrainConfig {
        batch_size: spec.batch_size.unwrap_or(16),
        lr_dict: spec.lr_dict.unwrap_or(2e-4),
        lr_reg: spec.lr_reg.unwrap_or(1e-3),
        epochs: spec.epochs.unwrap_or(2),
        batches_per_epoch: spec.batches_per_epoch.unwrap_or(100),
        decay_points_per_epoch: spec.decay_points_per_epoch.unwrap_or(10),
        decay_factor: spec.decay_factor.unwrap_or(decay_default),
        noise_sigma: sigma,
        backward: BackwardConfig { solver, tol: 1e-9 },
        seed,
        checkpoint_every: spec.checkpoint_every,
        checkpoint_dir: Some(out_dir.clone()),
        skip_abort_fraction: 0.1,
        stop_after_batches: spec.stop_after_batches,
    };
    let crop = spec.crop.unwrap_or(40);
    if kind == RegularizerKind::GroupL1L2 && crop % 2 != 0 {
        bail!("group-l1l2 training needs even crop sizes, got {crop}");
    }
    Ok(ResolvedTrain {
        data_dir,
        out_dir,
        kind,
        sigma,
        crop,
        patch_side: spec.patch_side.unwrap_or(13),
        synth_atoms: spec.synth_atoms.unwrap_or(200),
        free_atoms: spec.free_atoms.unwrap_or(120),
        exponent: spec.exponent.unwrap_or(2.0),
        weight_init: spec.weight_init.unwrap_or(0.05),
        coupling_init: spec.coupling_init.unwrap_or(1.0),
        seed,
        train,
        solver_tol: spec.tol.unwrap_or(1e-4),
        solver_max_iters: spec.max_iters.unwrap_or(2000),
    })
}

impl ResolvedTrain {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tol: self.solver_tol,
            max_iters: self.solver_max_iters,
            ..Default::default()
        }
    }
}

/// Write a resolved-configuration snapshot beside the outputs.
pub fn write_snapshot<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("cannot write snapshot {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_prefers_later_layers() {
        let base = profile_defaults("desk-smoke").unwrap();
        let over = TrainSpec { sigma: Some(0.01), ..Default::default() };
        let merged = base.overlay(&over);
        assert_eq!(merged.sigma, Some(0.01));
        assert_eq!(merged.crop, Some(9)); // untouched profile value
    }

    #[test]
    fn group_regularizer_rejects_odd_crops() {
        let mut spec = profile_defaults("desk-smoke").unwrap();
        spec.regularizer = Some("group-l1l2".into());
        spec.data_dir = Some("x".into());
        spec.out_dir = Some("y".into());
        assert!(resolve_train(&spec).is_err());
    }

    #[test]
    fn unknown_profile_is_a_config_error() {
        assert!(profile_defaults("nope").is_err());
    }
}
