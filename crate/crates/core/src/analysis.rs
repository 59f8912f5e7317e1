//! Reconstruction-side analysis: smooth/sparse decomposition of converged
//! reconstructions, per-patch cost maps, free-coefficient recovery, image
//! quality metrics, and atom-sheet visualization helpers.
//!
//! The decomposition solves the normal equation of the converged objective,
//!
//! ```text
//!   (H^T H + b * sum_k P_k^T (I - QQ^T) P_k) x* = H^T y + b * sum_k P_k^T D a_k*
//! ```
//!
//! splitting `x*` into `A^{-1} H^T y` (a generalized Tikhonov part driven by
//! the data) and `A^{-1}` of the sparse synthesis term. `A` is only available
//! as a fast operator, so both solves use matrix-free conjugate gradients.

use crate::code::CodeField;
use crate::dict::Dictionary;
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::linalg::{jacobi_eigh, Mat};
use crate::model::ModelParams;
use crate::operators::{ForwardOperator, Measurement};
use crate::patch::analyze;
use crate::reg::{shrink_potential, RegularizerKind};
use crate::solver::{SolverConfig, SolverContext, SolverState};

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Image,
    /// Final relative residual `||A x - b|| / ||b||`.
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Matrix-free conjugate gradients for symmetric positive definite `A`.
pub fn cg_solve(
    apply: impl Fn(&Image) -> Result<Image>,
    b: &Image,
    x0: Option<Image>,
    tol: f64,
    max_iters: usize,
) -> Result<CgResult> {
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok(CgResult {
            x: Image::zeros(b.height, b.width),
            residual: 0.0,
            iters: 0,
            converged: true,
        });
    }
    let mut x = x0.unwrap_or_else(|| Image::zeros(b.height, b.width));
    let ax = apply(&x)?;
    let mut r = b.sub(&ax);
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut iters = 0;
    while iters < max_iters {
        if rs.sqrt() <= tol * bnorm {
            break;
        }
        let ap = apply(&p)?;
        let pap = p.dot(&ap);
        if pap <= 0.0 || !pap.is_finite() {
            // Not positive definite along p; bail out with what we have.
            break;
        }
        let alpha = rs / pap;
        x.add_scaled(&p, alpha);
        r.add_scaled(&ap, -alpha);
        let rs_new = r.dot(&r);
        let beta = rs_new / rs;
        let mut p_new = r.clone();
        p_new.add_scaled(&p, beta);
        p = p_new;
        rs = rs_new;
        iters += 1;
    }
    // Report the true residual, not the recurrence's.
    let res = b.sub(&apply(&x)?).norm() / bnorm;
    Ok(CgResult { x, residual: res, iters, converged: res <= tol })
}

/// Smooth/sparse split of a reconstruction.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub total: Image,
    pub smooth: Image,
    pub sparse: Image,
    pub cost_map: Image,
    /// Worst relative CG residual of the two solves.
    pub cg_residual: f64,
    /// Set when the normal operator needed Tikhonov damping (1e-8).
    pub damped: bool,
}

/// Decompose a converged reconstruction into its data-driven smooth part and
/// its dictionary-synthesized sparse part.
pub fn decompose(
    state: &SolverState,
    params: &ModelParams,
    op: &ForwardOperator,
    y: &Measurement,
    scfg: &SolverConfig,
    cg_tol: f64,
) -> Result<Decomposition> {
    let ctx = SolverContext::new(params, op, y, scfg)?;
    let b = ctx.coupling;
    let normal = |damping: f64| {
        move |v: &Image, ctx: &SolverContext| -> Result<Image> {
            let mut out = ctx.normal_apply(v)?;
            out.add_scaled(&ctx.gram(v)?, b);
            if damping > 0.0 {
                out.add_scaled(v, damping);
            }
            Ok(out)
        }
    };
    let b_data = op.adjoint(y, ctx.height, ctx.width)?;
    let b_sparse = ctx.synthesis(&state.code)?.scaled(b);
    let max_iters = 20 * ctx.height * ctx.width;

    let run = |damping: f64| -> Result<(CgResult, CgResult)> {
        let f = normal(damping);
        let smooth = cg_solve(|v| f(v, &ctx), &b_data, None, cg_tol, max_iters)?;
        let sparse = cg_solve(|v| f(v, &ctx), &b_sparse, None, cg_tol, max_iters)?;
        Ok((smooth, sparse))
    };
    let (mut smooth, mut sparse) = run(0.0)?;
    let mut damped = false;
    if !smooth.converged || !sparse.converged {
        // Near-singular normal operator (e.g. the measurement kills the mean
        // while the free dictionary absorbs constants): damp and retry.
        damped = true;
        let (s2, p2) = run(1e-8)?;
        smooth = s2;
        sparse = p2;
    }
    let cost_map = patch_cost_map(&state.image, &state.code, params, b)?;
    Ok(Decomposition {
        total: state.image.clone(),
        smooth: smooth.x,
        sparse: sparse.x,
        cost_map,
        cg_residual: smooth.residual.max(sparse.residual),
        damped,
    })
}

/// Per-pixel coefficients of the free dictionary: channel `q` at pixel `k`
/// is the inner product of free atom `q` with the circular patch at `k`.
pub fn recover_free_coefficients(x: &Image, params: &ModelParams) -> Result<CodeField> {
    analyze(x, &params.pair.free)
}

/// Per-pixel cost map: the data-coupling cost of each patch plus the
/// regularizer cost attributed to its pixel. Group costs are split equally
/// over the four pixels of each 2x2 block; point-shrink costs use the
/// numerically recovered potential (approximate).
pub fn patch_cost_map(
    x: &Image,
    code: &CodeField,
    params: &ModelParams,
    coupling: f64,
) -> Result<Image> {
    if !code.spatial_match(x) {
        return Err(CoreError::DimensionMismatch("code vs image grids".into()));
    }
    let side = params.patch_side;
    if side > x.height.min(x.width) {
        return Err(CoreError::DimensionMismatch("patch side exceeds image".into()));
    }
    let d = side * side;
    let rad = (side as isize - 1) / 2;
    let (h, w) = (x.height as isize, x.width as isize);
    let q = &params.pair.free.mat;
    let dict = &params.pair.synth.mat;
    let p2 = q.cols;
    let p1 = dict.cols;
    let mut out = Image::zeros(x.height, x.width);
    let mut patch = vec![0.0; d];
    let mut qc = vec![0.0; p2];
    for r in 0..h {
        for c in 0..w {
            let mut t = 0;
            for dr in -rad..=rad {
                for dc in -rad..=rad {
                    let rr = (r + dr).rem_euclid(h) as usize;
                    let cc = (c + dc).rem_euclid(w) as usize;
                    patch[t] = x.get(rr, cc);
                    t += 1;
                }
            }
            // Project out the free subspace: patch - Q (Q^T patch).
            for (j, qcj) in qc.iter_mut().enumerate() {
                let mut s = 0.0;
                for i in 0..d {
                    s += q[(i, j)] * patch[i];
                }
                *qcj = s;
            }
            let code_k = code.pixel_vector(r as usize, c as usize);
            let mut sq = 0.0;
            for i in 0..d {
                let mut v = patch[i];
                for (j, qcj) in qc.iter().enumerate() {
                    v -= q[(i, j)] * qcj;
                }
                for (p, ck) in code_k.iter().enumerate().take(p1) {
                    v -= dict[(i, p)] * ck;
                }
                sq += v * v;
            }
            out.set(r as usize, c as usize, 0.5 * coupling * sq);
        }
    }

    // Regularizer attribution.
    match params.reg.kind {
        RegularizerKind::GroupL1L2 => {
            if x.height % 2 != 0 || x.width % 2 != 0 {
                return Err(CoreError::InvalidArgument(
                    "group cost map needs even dimensions".into(),
                ));
            }
            for ch in 0..code.channels {
                let weight = params.reg.strength * params.reg.atom_weights[ch];
                for br in (0..x.height).step_by(2) {
                    for bc in (0..x.width).step_by(2) {
                        let mut sqn = 0.0;
                        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let v = code.get(ch, br + dr, bc + dc);
                            sqn += v * v;
                        }
                        let cost = weight * sqn.sqrt() / 4.0;
                        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let v = out.get(br + dr, bc + dc) + cost;
                            out.set(br + dr, bc + dc, v);
                        }
                    }
                }
            }
        }
        RegularizerKind::PointShrink => {
            let amax = code.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = coupling / crate::solver::CODE_STEP;
            for ch in 0..code.channels {
                let tau = params.reg.atom_weights[ch];
                let grid_max = (amax + tau).max(1e-6) * 1.05;
                let pot = shrink_potential(tau, params.reg.exponent, grid_max, 2048)?;
                for r in 0..x.height {
                    for c in 0..x.width {
                        let v = out.get(r, c) + scale * pot.eval(code.get(ch, r, c));
                        out.set(r, c, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio over an optional centered square crop.
/// Identical inputs give `+inf`.
pub fn psnr(x: &Image, reference: &Image, peak: f64, crop: Option<usize>) -> f64 {
    assert!(x.same_shape(reference), "psnr shape mismatch");
    let (r0, c0, ch, cw) = match crop {
        Some(s) if s < x.height.min(x.width) => {
            ((x.height - s) / 2, (x.width - s) / 2, s, s)
        }
        _ => (0, 0, x.height, x.width),
    };
    let mut mse = 0.0;
    for r in r0..r0 + ch {
        for c in c0..c0 + cw {
            let d = x.get(r, c) - reference.get(r, c);
            mse += d * d;
        }
    }
    mse /= (ch * cw) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5) and constants `K1 = 0.01`, `K2 = 0.03`, averaged over the
/// valid (fully covered) window positions.
pub fn ssim(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    if !x.same_shape(reference) {
        return Err(CoreError::DimensionMismatch("ssim inputs differ".into()));
    }
    const WIN: usize = 11;
    if x.height < WIN || x.width < WIN {
        return Err(CoreError::InvalidArgument(format!(
            "ssim needs at least {WIN}x{WIN} images"
        )));
    }
    let sigma = 1.5;
    let mut w = [0.0f64; WIN * WIN];
    let mut sum = 0.0;
    for i in 0..WIN {
        for j in 0..WIN {
            let di = i as f64 - 5.0;
            let dj = j as f64 - 5.0;
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            w[i * WIN + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=x.height - WIN {
        for c in 0..=x.width - WIN {
            let (mut mx, mut my) = (0.0, 0.0);
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let wi = w[i * WIN + j];
                    let a = x.get(r + i, c + j);
                    let b = reference.get(r + i, c + j);
                    mx += wi * a;
                    my += wi * b;
                    sxx += wi * a * a;
                    syy += wi * b * b;
                    sxy += wi * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let vxy = sxy - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Tile dictionary atoms into a sheet image: each atom becomes a
/// `side x side` tile normalized to `[0, 1]`, laid out on a near-square grid
/// with one-pixel separators at gray level 0.5.
pub fn atom_sheet(dict: &Dictionary, order: Option<&[usize]>) -> Result<Image> {
    let atoms = dict.atom_count();
    if atoms == 0 {
        return Err(CoreError::InvalidArgument("no atoms to draw".into()));
    }
    let side = dict.side();
    let cols = (atoms as f64).sqrt().ceil() as usize;
    let rows = atoms.div_ceil(cols);
    let height = rows * (side + 1) + 1;
    let width = cols * (side + 1) + 1;
    let mut sheet = Image::constant(height, width, 0.5);
    for slot in 0..atoms {
        let atom_idx = order.map(|o| o[slot]).unwrap_or(slot);
        let col = dict.mat.col(atom_idx);
        let (mn, mx) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let scale = if mx > mn { 1.0 / (mx - mn) } else { 0.0 };
        let tr = slot / cols;
        let tc = slot % cols;
        for i in 0..side {
            for j in 0..side {
                let v = (col[i * side + j] - mn) * scale;
                sheet.set(tr * (side + 1) + 1 + i, tc * (side + 1) + 1 + j, v);
            }
        }
    }
    Ok(sheet)
}

/// Diagnostic: rotate the free dictionary so its atoms are ordered by the
/// variance of their coefficients over all patches of the supplied images
/// (a principal-component analysis of the free coefficients). The rotated
/// dictionary spans the same subspace. Best-effort visualization aid, not a
/// model transformation.
pub fn sort_free_atoms_by_patch_variance(
    free: &Dictionary,
    images: &[Image],
    _side: usize,
) -> Result<(Dictionary, Vec<f64>)> {
    let p2 = free.atom_count();
    if p2 == 0 || images.is_empty() {
        return Err(CoreError::InvalidArgument("need atoms and images".into()));
    }
    let mut cov = Mat::zeros(p2, p2);
    let mut mean = vec![0.0; p2];
    let mut count = 0usize;
    for img in images {
        let coeffs = analyze(img, free)?;
        let plane = coeffs.plane();
        for k in 0..plane {
            for a in 0..p2 {
                mean[a] += coeffs.data[a * plane + k];
            }
            count += 1;
        }
        for a in 0..p2 {
            let ca = coeffs.channel(a);
            for b in a..p2 {
                let cb = coeffs.channel(b);
                let mut s = 0.0;
                for k in 0..plane {
                    s += ca[k] * cb[k];
                }
                cov[(a, b)] += s;
                cov[(b, a)] = cov[(a, b)];
            }
        }
    }
    let n = count as f64;
    for a in 0..p2 {
        for b in 0..p2 {
            cov[(a, b)] = cov[(a, b)] / n - (mean[a] / n) * (mean[b] / n);
        }
    }
    let (vars, rot) = jacobi_eigh(&cov)?;
    let rotated = Dictionary::new(free.mat.matmul(&rot))?;
    Ok((rotated, vars))
}
