//! Bilevel training loop: reconstruct noisy crops with the inner solver,
//! differentiate the L1 reconstruction loss through the fixed point, and
//! update the raw parameters with ADAM under a stepped learning-rate decay.
//!
//! Reproducibility contract: the per-batch random stream is derived from
//! `(master_seed, batch_index)`, so a run is a pure function of its seed and
//! configuration, and resuming from a checkpoint at batch `k` reproduces the
//! uninterrupted run bit for bit (single-threaded).

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backward::{backward_implicit, BackwardConfig, Gradients};
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::model::ModelParams;
use crate::operators::{simulate_measurements, ForwardOperator};
use crate::solver::{solve_inner, SolveInit, SolverConfig};

/// Mean over the batch of per-image L1 distances.
pub fn loss_l1(recon: &[Image], truth: &[Image]) -> f64 {
    assert_eq!(recon.len(), truth.len());
    assert!(!recon.is_empty());
    let total: f64 = recon.iter().zip(truth).map(|(a, b)| a.sub(b).l1_norm()).sum();
    total / recon.len() as f64
}

/// Subgradient of the per-image L1 distance (sign convention: 0 at ties).
pub fn loss_l1_grad(recon: &Image, truth: &Image) -> Image {
    Image {
        height: recon.height,
        width: recon.width,
        data: recon
            .data
            .iter()
            .zip(&truth.data)
            .map(|(a, b)| {
                let d = a - b;
                if d == 0.0 {
                    0.0
                } else {
                    d.signum()
                }
            })
            .collect(),
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second ADAM moments, shaped like the raw gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m_synth: crate::linalg::Mat,
    pub v_synth: crate::linalg::Mat,
    pub m_free: crate::linalg::Mat,
    pub v_free: crate::linalg::Mat,
    pub m_weights: Vec<f64>,
    pub v_weights: Vec<f64>,
    pub m_coupling: f64,
    pub v_coupling: f64,
    pub step: usize,
}

impl AdamMoments {
    pub fn zeros(params: &ModelParams) -> Self {
        AdamMoments {
            m_synth: crate::linalg::Mat::zeros(params.raw.synth.rows, params.raw.synth.cols),
            v_synth: crate::linalg::Mat::zeros(params.raw.synth.rows, params.raw.synth.cols),
            m_free: crate::linalg::Mat::zeros(params.raw.free.rows, params.raw.free.cols),
            v_free: crate::linalg::Mat::zeros(params.raw.free.rows, params.raw.free.cols),
            m_weights: vec![0.0; params.weights_raw.len()],
            v_weights: vec![0.0; params.weights_raw.len()],
            m_coupling: 0.0,
            v_coupling: 0.0,
            step: 0,
        }
    }
}

fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let mh = *m / bc1;
    let vh = *v / bc2;
    *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
}

/// One bias-corrected ADAM step on the raw parameters, with separate
/// learning rates for the dictionary group and the regularizer/coupling
/// group. Re-derives the constrained dictionaries afterwards.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    moments: &mut AdamMoments,
    lr_dict: f64,
    lr_reg: f64,
) -> Result<()> {
    moments.step += 1;
    let t = moments.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.raw.synth.data.len() {
        adam_update(
            &mut params.raw.synth.data[i],
            grads.synth_raw.data[i],
            &mut moments.m_synth.data[i],
            &mut moments.v_synth.data[i],
            lr_dict,
            bc1,
            bc2,
        );
    }
    for i in 0..params.raw.free.data.len() {
        adam_update(
            &mut params.raw.free.data[i],
            grads.free_raw.data[i],
            &mut moments.m_free.data[i],
            &mut moments.v_free.data[i],
            lr_dict,
            bc1,
            bc2,
        );
    }
    for i in 0..params.weights_raw.len() {
        adam_update(
            &mut params.weights_raw[i],
            grads.weights_raw[i],
            &mut moments.m_weights[i],
            &mut moments.v_weights[i],
            lr_reg,
            bc1,
            bc2,
        );
    }
    adam_update(
        &mut params.coupling_raw,
        grads.coupling_raw,
        &mut moments.m_coupling,
        &mut moments.v_coupling,
        lr_reg,
        bc1,
        bc2,
    );
    params.refresh()
}

/// Crop source over a set of grayscale images in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct CropDataset {
    pub images: Vec<Image>,
    pub crop: usize,
}

impl CropDataset {
    pub fn new(images: Vec<Image>, crop: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(CoreError::InvalidArgument("dataset has no images".into()));
        }
        for img in &images {
            if img.height < crop || img.width < crop {
                return Err(CoreError::InvalidArgument(format!(
                    "image {}x{} smaller than crop {crop}",
                    img.height, img.width
                )));
            }
        }
        Ok(CropDataset { images, crop })
    }

    pub fn sample_crop(&self, rng: &mut ChaCha8Rng) -> Image {
        let img = &self.images[rng.random_range(0..self.images.len())];
        let r0 = rng.random_range(0..=img.height - self.crop);
        let c0 = rng.random_range(0..=img.width - self.crop);
        Image::from_fn(self.crop, self.crop, |r, c| img.get(r0 + r, c0 + c))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_dict: f64,
    pub lr_reg: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub decay_points_per_epoch: usize,
    pub decay_factor: f64,
    /// Noise level of the simulated denoising measurements.
    pub noise_sigma: f64,
    pub backward: BackwardConfig,
    pub seed: u64,
    /// Persist a checkpoint (and history) every this many batches.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Abort when more than this fraction of batches fail to converge.
    pub skip_abort_fraction: f64,
    /// Stop after this many batches without altering the schedule (the run
    /// can be resumed from its checkpoint later).
    pub stop_after_batches: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr_dict: 2e-4,
            lr_reg: 1e-3,
            epochs: 2,
            batches_per_epoch: 100,
            decay_points_per_epoch: 10,
            decay_factor: 0.75,
            noise_sigma: 25.0 / 255.0,
            backward: BackwardConfig::default(),
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
            skip_abort_fraction: 0.1,
            stop_after_batches: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(CoreError::InvalidArgument(
                "batch size, epochs, and batches per epoch must be positive".into(),
            ));
        }
        if !(self.lr_dict >= 0.0) || !(self.lr_reg >= 0.0) {
            return Err(CoreError::InvalidArgument("learning rates must be >= 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(CoreError::InvalidArgument("decay factor must be in (0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CoreError::InvalidArgument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_batches(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }

    /// Cumulative decay exponent before batch `b` (0-based): the learning
    /// rate steps down `decay_points_per_epoch` times per epoch at evenly
    /// spaced batch indices.
    pub fn decay_exponent(&self, batch: usize) -> u32 {
        ((batch * self.decay_points_per_epoch) / self.batches_per_epoch) as u32
    }

    pub fn lr_at(&self, batch: usize) -> (f64, f64) {
        let f = self.decay_factor.powi(self.decay_exponent(batch) as i32);
        (self.lr_dict * f, self.lr_reg * f)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub loss: f64,
    pub lr_dict: f64,
    pub lr_reg: f64,
    /// 1 when the batch was skipped because an inner solve did not converge.
    pub skipped: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<BatchRecord>,
    pub skipped_batches: usize,
}

/// Resumable training state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub params: ModelParams,
    pub moments: AdamMoments,
    pub next_batch: usize,
    pub master_seed: u64,
    pub history: Vec<BatchRecord>,
}

impl TrainCheckpoint {
    pub fn fresh(params: ModelParams, master_seed: u64) -> Self {
        let moments = AdamMoments::zeros(&params);
        TrainCheckpoint { params, moments, next_batch: 0, master_seed, history: Vec::new() }
    }
}

pub fn save_checkpoint(ckpt: &TrainCheckpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string(ckpt)
        .map_err(|e| CoreError::ModelFormat(format!("checkpoint serialize: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainCheckpoint> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CoreError::ModelFormat(format!("checkpoint parse: {e}")))
}

/// Write the batch history as CSV.
pub fn write_history_csv(history: &[BatchRecord], path: &Path) -> Result<()> {
    let mut out = String::from("batch,loss,lr_dict,lr_reg,skipped\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.batch, r.loss, r.lr_dict, r.lr_reg, r.skipped as u8
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn batch_rng(master_seed: u64, batch: usize) -> ChaCha8Rng {
    // splitmix64 on the pair, so per-batch streams are independent of how
    // many batches ran before (resume-friendly).
    let mut z = master_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(batch as u64)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Train from scratch (denoising measurements: identity operator plus
/// Gaussian noise at the configured level).
pub fn train(
    dataset: &CropDataset,
    params0: ModelParams,
    tcfg: &TrainConfig,
    scfg: &SolverConfig,
) -> Result<TrainOutcome> {
    train_resume(dataset, TrainCheckpoint::fresh(params0, tcfg.seed), tcfg, scfg)
}

/// Continue training from a checkpoint.
pub fn train_resume(
    dataset: &CropDataset,
    ckpt: TrainCheckpoint,
    tcfg: &TrainConfig,
    scfg: &SolverConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    scfg.validate()?;
    let TrainCheckpoint { mut params, mut moments, next_batch, master_seed, mut history } = ckpt;
    let op = ForwardOperator::Identity;
    let mut skipped_batches = history.iter().filter(|r| r.skipped).count();
    let until = tcfg
        .stop_after_batches
        .map(|s| s.min(tcfg.total_batches()))
        .unwrap_or_else(|| tcfg.total_batches());

    for batch in next_batch..until {
        let mut rng = batch_rng(master_seed, batch);
        let (lr_dict, lr_reg) = tcfg.lr_at(batch);

        // Assemble the batch: clean crops and their noisy measurements.
        let mut crops = Vec::with_capacity(tcfg.batch_size);
        let mut noise_seeds = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            crops.push(dataset.sample_crop(&mut rng));
            noise_seeds.push(rng.random::<u64>());
        }

        let mut grads = Gradients::zeros_like(&params);
        let mut batch_loss = 0.0;
        let mut failed = false;
        for (crop, seed) in crops.iter().zip(&noise_seeds) {
            let y = simulate_measurements(&op, crop, tcfg.noise_sigma, *seed)?;
            let out = solve_inner(SolveInit::ZeroFill, &params, &op, &y, scfg)?;
            if !out.converged {
                failed = true;
                break;
            }
            batch_loss += out.state.image.sub(crop).l1_norm();
            let g = loss_l1_grad(&out.state.image, crop);
            let bw =
                backward_implicit(&out.state, &params, &op, &y, &g, scfg, &tcfg.backward)?;
            grads.add_scaled(&bw.grads, 1.0);
        }

        if failed {
            skipped_batches += 1;
            history.push(BatchRecord {
                batch,
                loss: f64::NAN,
                lr_dict,
                lr_reg,
                skipped: true,
            });
            let processed = history.len();
            if processed >= 10
                && (skipped_batches as f64) > tcfg.skip_abort_fraction * processed as f64
            {
                return Err(CoreError::InvalidArgument(format!(
                    "training aborted: {skipped_batches}/{processed} batches failed to converge"
                )));
            }
        } else {
            let scale = 1.0 / tcfg.batch_size as f64;
            batch_loss *= scale;
            let mut scaled = grads;
            scaled.synth_raw.scale(scale);
            scaled.free_raw.scale(scale);
            for g in &mut scaled.weights_raw {
                *g *= scale;
            }
            scaled.coupling_raw *= scale;
            if !scaled.all_finite() {
                return Err(CoreError::NonFinite("batch gradient".into()));
            }
            adam_step(&mut params, &scaled, &mut moments, lr_dict, lr_reg)?;
            history.push(BatchRecord { batch, loss: batch_loss, lr_dict, lr_reg, skipped: false });
        }

        if let (Some(every), Some(dir)) = (tcfg.checkpoint_every, tcfg.checkpoint_dir.as_ref()) {
            if (batch + 1) % every == 0 {
                std::fs::create_dir_all(dir)?;
                let snap = TrainCheckpoint {
                    params: params.clone(),
                    moments: moments.clone(),
                    next_batch: batch + 1,
                    master_seed,
                    history: history.clone(),
                };
                save_checkpoint(&snap, &dir.join("checkpoint.json"))?;
                write_history_csv(&history, &dir.join("history.csv"))?;
            }
        }
    }
    Ok(TrainOutcome { params, history, skipped_batches })
}
