//! Implementations of the CLI verbs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use sps_core::analysis::{atom_sheet, decompose, psnr, sort_free_atoms_by_patch_variance, ssim};
use sps_core::dict::{validate_feasible_set, RawDictionaries};
use sps_core::image::Image;
use sps_core::linalg::Mat;
use sps_core::model::{inv_softplus, load_model, save_model, ModelParams};
use sps_core::operators::{simulate_measurements, ForwardOperator, Measurement};
use sps_core::reg::RegularizerKind;
use sps_core::solver::{solve_inner, SolveInit, SolveOutcome, SolverConfig};
use sps_core::train::{load_checkpoint, train, train_resume, write_history_csv, CropDataset, TrainCheckpoint};

use crate::config::{resolve_train, write_snapshot, ResolvedTrain, TrainSpec};
use crate::gridsearch::{coarse_to_fine, write_table_csv, GridAxis};
use crate::imgio::{load_image, load_image_dir, save_png8, save_raw};
use crate::ops::{image_shape_for, load_measurement, save_measurement, OperatorSpec};

/// Format a PSNR value for tables (infinite values cap at 99 dB).
pub fn format_psnr(v: f64) -> String {
    format!("{:.2}", v.min(99.0))
}

pub fn cmd_train(spec: TrainSpec, resume: bool) -> Result<()> {
    let resolved: ResolvedTrain = resolve_train(&spec)?;
    std::fs::create_dir_all(&resolved.out_dir)?;
    write_snapshot(&resolved.out_dir, "train-config.json", &resolved)?;

    let images: Vec<Image> = load_image_dir(&resolved.data_dir)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    let dataset = CropDataset::new(images, resolved.crop)?;

    let scfg = resolved.solver_config();
    let outcome = if resume {
        let ckpt_path = resolved.out_dir.join("checkpoint.json");
        let ckpt: TrainCheckpoint = load_checkpoint(&ckpt_path)
            .with_context(|| format!("cannot resume from {}", ckpt_path.display()))?;
        println!("resuming from batch {}", ckpt.next_batch);
        train_resume(&dataset, ckpt, &resolved.train, &scfg)?
    } else {
        let params0 = init_params(&resolved)?;
        train(&dataset, params0, &resolved.train, &scfg)?
    };

    // Per-decay-point average loss.
    let mut sums: Vec<(u32, f64, usize)> = Vec::new();
    for rec in outcome.history.iter().filter(|r| !r.skipped) {
        let e = resolved.train.decay_exponent(rec.batch);
        match sums.last_mut() {
            Some((last, s, n)) if *last == e => {
                *s += rec.loss;
                *n += 1;
            }
            _ => sums.push((e, rec.loss, 1)),
        }
    }
    for (e, s, n) in &sums {
        println!("decay point {e}: mean loss {:.6} over {n} batches", s / *n as f64);
    }
    if outcome.skipped_batches > 0 {
        println!("skipped {} non-converged batches", outcome.skipped_batches);
    }

    let model_path = resolved.out_dir.join("model.json");
    save_model(&outcome.params, &model_path)?;
    write_history_csv(&outcome.history, &resolved.out_dir.join("history.csv"))?;
    println!("model written to {}", model_path.display());
    Ok(())
}

fn init_params(r: &ResolvedTrain) -> Result<ModelParams> {
    let d = r.patch_side * r.patch_side;
    if r.free_atoms == 0 || r.free_atoms > d {
        bail!("free atom count must be in 1..={d}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed ^ 0x757_ab1e);
    let synth = Mat::from_fn(d, r.synth_atoms, |_, _| rng.random::<f64>() - 0.5);
    let free = Mat::from_fn(d, r.free_atoms - 1, |_, _| rng.random::<f64>() - 0.5);
    Ok(ModelParams::from_raw(
        RawDictionaries::new(synth, free)?,
        vec![inv_softplus(r.weight_init); r.synth_atoms],
        inv_softplus(r.coupling_init),
        r.kind,
        r.exponent,
        1.0,
        r.patch_side,
    )?)
}

/// Shared reconstruction inputs: a model plus either a simulated or a loaded
/// measurement.
pub struct ReconSetup {
    pub params: ModelParams,
    pub op: ForwardOperator,
    pub spec: OperatorSpec,
    pub y: Measurement,
    pub truth: Option<Image>,
    pub sigma: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn prepare_recon(
    model: &Path,
    operator: &str,
    input: Option<&Path>,
    measurement: Option<&Path>,
    sigma: f64,
    seed: u64,
    coupling: Option<f64>,
    strength: Option<f64>,
    weight_multiplier: Option<f64>,
) -> Result<ReconSetup> {
    let mut params = load_model(model)?;
    if let Some(b) = coupling {
        params = params.with_coupling(b)?;
    }
    if let Some(s) = strength {
        params = params.with_strength(s)?;
    }
    if let Some(m) = weight_multiplier {
        params = params.with_weight_multiplier(m)?;
    }

    let (spec, y, truth) = match (input, measurement) {
        (Some(input), None) => {
            let truth = load_image(input)?;
            let spec = parse_operator_flag(operator, truth.height, truth.width)?;
            let op = spec.build()?;
            let y = simulate_measurements(&op, &truth, sigma, seed)?;
            (spec, y, Some(truth))
        }
        (None, Some(meas)) => {
            let file = load_measurement(meas)?;
            let spec = match (&file.mask, &file.measurement) {
                (Some(mask), Measurement::Complex { .. }) => OperatorSpec::Mri {
                    acceleration: mask.width / mask.kept_count().max(1),
                    center_fraction: None,
                    mask_seed: file.seed.unwrap_or(0),
                    height: mask.height,
                    width: mask.width,
                },
                (None, Measurement::Real(img)) => {
                    parse_operator_flag(operator, img.height, img.width)?
                }
                _ => bail!("measurement file does not match its mask payload"),
            };
            // For MRI files the stored mask is authoritative; rebuild from it.
            let y = file.measurement;
            (spec, y, None)
        }
        _ => bail!("provide exactly one of --input (simulate) or --measurement"),
    };
    let op = match (&spec, load_measurement_mask(measurement)?) {
        (OperatorSpec::Mri { .. }, Some(mask)) => ForwardOperator::masked_fourier(mask),
        _ => spec.build()?,
    };
    let (height, width) = image_shape_for(&spec, &y)?;
    Ok(ReconSetup { params, op, spec, y, truth, sigma, seed, height, width })
}

fn load_measurement_mask(path: Option<&Path>) -> Result<Option<sps_core::operators::ColumnMask>> {
    match path {
        Some(p) => Ok(load_measurement(p)?.mask),
        None => Ok(None),
    }
}

fn parse_operator_flag(flag: &str, height: usize, width: usize) -> Result<OperatorSpec> {
    let (kind, rest) = match flag.split_once(':') {
        Some((k, r)) => (k, Some(r)),
        None => (flag, None),
    };
    match kind {
        "identity" => Ok(OperatorSpec::Identity),
        "sr" => {
            let mut sigma = 2.0;
            let mut size = 16;
            let mut stride = 4;
            if let Some(rest) = rest {
                let parts: Vec<&str> = rest.split(',').collect();
                if !parts.is_empty() {
                    sigma = parts[0].parse().context("sr sigma")?;
                }
                if parts.len() > 1 {
                    size = parts[1].parse().context("sr size")?;
                }
                if parts.len() > 2 {
                    stride = parts[2].parse().context("sr stride")?;
                }
            }
            Ok(OperatorSpec::Sr { sigma, size, stride })
        }
        "mri" => {
            let rest = rest.context("mri operator needs an acceleration, e.g. mri:8")?;
            let parts: Vec<&str> = rest.split(',').collect();
            let acceleration: usize = parts[0].parse().context("mri acceleration")?;
            let center_fraction = if parts.len() > 1 {
                Some(parts[1].parse::<f64>().context("mri center fraction")?)
            } else {
                None
            };
            let mask_seed: u64 = if parts.len() > 2 {
                parts[2].parse().context("mri mask seed")?
            } else {
                0
            };
            Ok(OperatorSpec::Mri { acceleration, center_fraction, mask_seed, height, width })
        }
        other => bail!("unknown operator {other:?} (identity, sr[:sigma,size,stride], mri:acc[,cf][,seed])"),
    }
}

#[derive(Serialize)]
struct ReconReport {
    operator: OperatorSpec,
    sigma: f64,
    seed: u64,
    tol: f64,
    converged: bool,
    iters: usize,
    residual: f64,
    coupling: f64,
    strength: f64,
    psnr: Option<f64>,
    ssim: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_reconstruct(
    setup: ReconSetup,
    out_dir: &Path,
    tol: f64,
    max_iters: usize,
    trace: bool,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = SolverConfig { tol, max_iters, record_objective: trace, ..Default::default() };
    let out: SolveOutcome = solve_inner(SolveInit::ZeroFill, &setup.params, &setup.op, &setup.y, &cfg)?;
    if !out.converged {
        eprintln!(
            "warning: solver did not converge in {} iterations (residual {:.3e})",
            out.iters, out.state.residual
        );
    }
    save_png8(&out.state.image, &out_dir.join("reconstruction.png"))?;
    save_raw(&out.state.image, &out_dir.join("reconstruction.sraw"))?;
    if trace {
        let mut csv = String::from("iter,objective,residual\n");
        for t in &out.trace {
            csv.push_str(&format!("{},{},{}\n", t.iter, t.objective, t.residual));
        }
        std::fs::write(out_dir.join("trace.csv"), csv)?;
    }
    // Persist the measurement alongside for reproducibility.
    let mask = match &setup.op {
        ForwardOperator::MaskedFourier { mask } => Some(mask),
        _ => None,
    };
    save_measurement(&setup.y, mask, setup.sigma, Some(setup.seed), &out_dir.join("measurement.json"))?;

    let (p, s) = match &setup.truth {
        Some(t) => (
            // Table convention: infinite PSNR (exact reconstruction) caps
            // at 99 dB, which also keeps the JSON report finite.
            Some(psnr(&out.state.image, t, 1.0, None).min(99.0)),
            ssim(&out.state.image, t, 1.0).ok(),
        ),
        None => (None, None),
    };
    let report = ReconReport {
        operator: setup.spec.clone(),
        sigma: setup.sigma,
        seed: setup.seed,
        tol,
        converged: out.converged,
        iters: out.iters,
        residual: out.state.residual,
        coupling: setup.params.coupling(),
        strength: setup.params.reg.strength,
        psnr: p,
        ssim: s,
    };
    write_snapshot(out_dir, "reconstruction-report.json", &report)?;
    if let Some(p) = p {
        println!("psnr {} dB", format_psnr(p));
    }
    if let Some(s) = s {
        println!("ssim {s:.4}");
    }
    println!("reconstruction written to {}", out_dir.join("reconstruction.png").display());
    if !out.converged {
        bail!("@nonconvergence@ solver hit the iteration cap");
    }
    Ok(())
}

pub fn cmd_decompose(setup: ReconSetup, out_dir: &Path, tol: f64, max_iters: usize, cg_tol: f64) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = SolverConfig { tol, max_iters, ..Default::default() };
    let out = solve_inner(SolveInit::ZeroFill, &setup.params, &setup.op, &setup.y, &cfg)?;
    if !out.converged {
        bail!("@nonconvergence@ solver hit the iteration cap; decomposition needs a converged state");
    }
    let dec = decompose(&out.state, &setup.params, &setup.op, &setup.y, &cfg, cg_tol)?;
    for (name, img) in [
        ("reconstruction", &dec.total),
        ("smooth", &dec.smooth),
        ("sparse", &dec.sparse),
        ("cost-map", &dec.cost_map),
    ] {
        save_raw(img, &out_dir.join(format!("{name}.sraw")))?;
        // Cost maps and the (possibly signed) sparse part are normalized
        // for PNG display.
        let png = if matches!(name, "sparse" | "cost-map") {
            normalize_for_display(img)
        } else {
            img.clone()
        };
        save_png8(&png, &out_dir.join(format!("{name}.png")))?;
    }

    // Atom sheets: synthesis atoms sorted by their learned weights
    // (ascending: least penalized first), free atoms rotated to variance
    // order over the reconstruction.
    let mut order: Vec<usize> = (0..setup.params.synth_atoms()).collect();
    order.sort_by(|&a, &b| {
        setup.params.reg.atom_weights[a]
            .partial_cmp(&setup.params.reg.atom_weights[b])
            .unwrap()
    });
    let synth_sheet = atom_sheet(&setup.params.pair.synth, Some(&order))?;
    save_png8(&synth_sheet, &out_dir.join("atoms-synth.png"))?;
    let free_sheet = match sort_free_atoms_by_patch_variance(
        &setup.params.pair.free,
        std::slice::from_ref(&dec.total),
        setup.params.patch_side,
    ) {
        Ok((rotated, _)) => atom_sheet(&rotated, None)?,
        Err(_) => atom_sheet(&setup.params.pair.free, None)?,
    };
    save_png8(&free_sheet, &out_dir.join("atoms-free.png"))?;

    let split = dec.smooth.add(&dec.sparse).sub(&dec.total).norm() / dec.total.norm();
    let sidecar = json!({
        "operator": setup.spec,
        "sigma": setup.sigma,
        "seed": setup.seed,
        "tol": tol,
        "cg_tol": cg_tol,
        "cg_residual": dec.cg_residual,
        "damped": dec.damped,
        "split_residual": split,
        "coupling": setup.params.coupling(),
        "strength": setup.params.reg.strength,
        "cost_attribution": "group costs split equally over each 2x2 block",
    });
    write_snapshot(out_dir, "decomposition.json", &sidecar)?;
    println!("decomposition written to {} (split residual {split:.3e})", out_dir.display());
    Ok(())
}

fn normalize_for_display(img: &Image) -> Image {
    let (mn, mx) = img
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if mx > mn {
        Image {
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|v| (v - mn) / (mx - mn)).collect(),
        }
    } else {
        Image::zeros(img.height, img.width)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_gridsearch(
    model: &Path,
    operator: &str,
    validation_dir: &Path,
    sigma: f64,
    seed: u64,
    axis_a: GridAxis,
    axis_b: GridAxis,
    tol: f64,
    max_iters: usize,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let params = load_model(model)?;
    let images: Vec<Image> = load_image_dir(validation_dir)?.into_iter().map(|(_, i)| i).collect();
    if images.is_empty() {
        bail!("empty validation set");
    }
    // Pre-simulate measurements once per image.
    let mut problems = Vec::new();
    for (i, truth) in images.iter().enumerate() {
        let spec = parse_operator_flag(operator, truth.height, truth.width)?;
        let op = spec.build()?;
        let y = simulate_measurements(&op, truth, sigma, seed.wrapping_add(i as u64))?;
        problems.push((truth.clone(), op, y));
    }
    let kind = params.reg.kind;
    let cfg = SolverConfig { tol, max_iters, ..Default::default() };
    let score = |a: f64, b: f64| -> Result<f64> {
        // Axis a is always the coupling weight; axis b is the strength for
        // the convex prior and the weight multiplier for the non-convex one.
        let tuned = match kind {
            RegularizerKind::GroupL1L2 => {
                params.clone().with_coupling(a)?.with_strength(b)?
            }
            RegularizerKind::PointShrink => {
                params.clone().with_coupling(a)?.with_weight_multiplier(b)?
            }
        };
        let mut total = 0.0;
        for (truth, op, y) in &problems {
            let out = solve_inner(SolveInit::ZeroFill, &tuned, op, y, &cfg)?;
            total += psnr(&out.state.image, truth, 1.0, None).min(99.0);
        }
        Ok(total / problems.len() as f64)
    };
    let outcome = coarse_to_fine(axis_a, axis_b, score)?;
    write_table_csv(&outcome, &out_dir.join("gridsearch.csv"))?;
    let second = match kind {
        RegularizerKind::GroupL1L2 => "strength",
        RegularizerKind::PointShrink => "weight_multiplier",
    };
    let best = json!({
        "operator": operator,
        "sigma": sigma,
        "seed": seed,
        "coupling": outcome.best_a,
        second: outcome.best_b,
        "mean_psnr": outcome.best_score,
        "axis_a": axis_a,
        "axis_b": axis_b,
    });
    write_snapshot(out_dir, "gridsearch-best.json", &best)?;
    println!(
        "best coupling {:.4}, best {second} {:.4}: mean psnr {}",
        outcome.best_a,
        outcome.best_b,
        format_psnr(outcome.best_score)
    );
    Ok(())
}

pub fn cmd_metrics(image: &Path, reference: &Path, peak: f64, crop: Option<usize>) -> Result<()> {
    let a = load_image(image)?;
    let b = load_image(reference)?;
    if !a.same_shape(&b) {
        bail!("images have different shapes");
    }
    let p = psnr(&a, &b, peak, crop);
    println!("psnr {} dB", format_psnr(p));
    match ssim(&a, &b, peak) {
        Ok(s) => println!("ssim {s:.4}"),
        Err(e) => println!("ssim unavailable: {e}"),
    }
    Ok(())
}

pub fn cmd_inspect_model(model: &Path) -> Result<()> {
    let params = load_model(model)?;
    println!("patch side       : {}", params.patch_side);
    println!("synthesis atoms  : {}", params.synth_atoms());
    println!("free atoms       : {} (incl. constant)", params.free_atoms());
    println!("regularizer      : {:?}", params.reg.kind);
    println!("exponent         : {}", params.reg.exponent);
    println!("strength         : {}", params.reg.strength);
    println!("coupling weight  : {:.6}", params.coupling());
    let w = &params.reg.atom_weights;
    let (mn, mx) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    println!("atom weights     : min {mn:.5} max {mx:.5}");
    let report = validate_feasible_set(&params.pair, 1e-5);
    println!("feasibility (1e-5): {}", if report.pass() { "PASS" } else { "FAIL" });
    println!("  free orthonormality : {:.3e}", report.free_orthonormality);
    println!("  cross orthogonality : {:.3e}", report.cross_orthogonality);
    println!("  synth spectral norm : {:.9}", report.synth_spectral_norm);
    println!("  column-norm spread  : {:.3e}", report.synth_col_norm_spread);
    Ok(())
}

/// Parse "lo:hi[:points]" into a grid axis.
pub fn parse_axis(flag: &str, default_points: usize) -> Result<GridAxis> {
    let parts: Vec<&str> = flag.split(':').collect();
    if parts.len() < 2 || parts.len() > 3 {
        bail!("axis format is lo:hi[:points], got {flag:?}");
    }
    let lo: f64 = parts[0].parse().context("axis lo")?;
    let hi: f64 = parts[1].parse().context("axis hi")?;
    let points = if parts.len() == 3 { parts[2].parse().context("axis points")? } else { default_points };
    let axis = GridAxis { lo, hi, points };
    axis.validate()?;
    Ok(axis)
}
