//! Shared test fixtures and the dense patch-matrix reference implementation.
//!
//! Everything here materializes patches and dictionaries as explicit dense
//! matrices with direct index arithmetic — deliberately independent of the
//! convolution-based implementation it is used to check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sps_core::code::CodeField;
use sps_core::dict::RawDictionaries;
use sps_core::image::Image;
use sps_core::linalg::Mat;
use sps_core::model::{inv_softplus, ModelParams};
use sps_core::reg::RegularizerKind;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(h, w, |_, _| r.random::<f64>() - 0.5)
}

/// Smooth structured scene with mild noise, values around [0, 1].
pub fn scene(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(h, w, |i, j| {
        0.5 + 0.25 * ((i as f64 * 0.8).sin() + (j as f64 * 0.5).cos())
            + 0.05 * (r.random::<f64>() - 0.5)
    })
}

/// Diverse synthetic grayscale image bank: sinusoid mixtures, edges, and
/// gradients (value range [0, 1]).
pub fn image_bank(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let fx = r.random::<f64>() * 0.9 + 0.1;
            let fy = r.random::<f64>() * 0.9 + 0.1;
            let ph = r.random::<f64>() * 6.28;
            let edge_col = r.random_range(size / 4..3 * size / 4);
            let slope = r.random::<f64>() * 0.4;
            Image::from_fn(size, size, |i, j| {
                let wave = 0.25 * ((i as f64 * fx + ph).sin() + (j as f64 * fy).cos());
                let ramp = slope * (i as f64) / (size as f64);
                let step = if j > edge_col { 0.15 } else { -0.1 };
                (0.5 + wave + ramp + step).clamp(0.0, 1.0)
            })
        })
        .collect()
}

/// Piecewise-constant ellipse phantom on `[0, 1]`; `variant` nudges the
/// structure positions so validation and test phantoms differ.
pub fn phantom(size: usize, variant: u64) -> Image {
    let s = size as f64 / 2.0;
    let dx = (variant % 5) as f64 * 0.03;
    let dy = (variant % 3) as f64 * 0.04;
    Image::from_fn(size, size, |r, c| {
        let y = (r as f64 - s) / s;
        let x = (c as f64 - s) / s;
        let mut v = 0.0;
        if x * x / (0.9 * 0.9) + y * y / (0.75 * 0.75) <= 1.0 {
            v = 0.8;
        }
        let (ex, ey) = (x + 0.3 - dx, y - dy);
        if ex * ex / (0.15 * 0.15) + ey * ey / (0.3 * 0.3) <= 1.0 {
            v = 0.4;
        }
        let (ex, ey) = (x - 0.25 + dx, y - 0.2);
        if ex * ex / (0.2 * 0.2) + ey * ey / (0.15 * 0.15) <= 1.0 {
            v = 1.0;
        }
        let (ex, ey) = (x, y + 0.4 + dy);
        if ex * ex / (0.07 * 0.07) + ey * ey / (0.1 * 0.1) <= 1.0 {
            v = 0.2;
        }
        v
    })
}

pub fn tiny_model(seed: u64, kind: RegularizerKind, exponent: f64) -> ModelParams {
    let mut r = rng(seed);
    let synth = Mat::from_fn(9, 4, |_, _| r.random::<f64>() - 0.5);
    let free = Mat::from_fn(9, 1, |_, _| r.random::<f64>() - 0.5);
    ModelParams::from_raw(
        RawDictionaries::new(synth, free).unwrap(),
        vec![
            inv_softplus(0.08),
            inv_softplus(0.12),
            inv_softplus(0.07),
            inv_softplus(0.1),
        ],
        inv_softplus(0.8),
        kind,
        exponent,
        1.0,
        3,
    )
    .unwrap()
}

/// Dense reference: flattened circular patch index map (pixel indices of the
/// `side x side` neighborhood of every pixel, row-major patch order).
pub fn patch_index_map(h: usize, w: usize, side: usize) -> Vec<Vec<usize>> {
    let rad = (side as isize - 1) / 2;
    let mut map = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut idx = Vec::with_capacity(side * side);
            for dr in -rad..=rad {
                for dc in -rad..=rad {
                    let rr = (r + dr).rem_euclid(h as isize) as usize;
                    let cc = (c + dc).rem_euclid(w as isize) as usize;
                    idx.push(rr * w + cc);
                }
            }
            map.push(idx);
        }
    }
    map
}

/// Dense reference model: explicit projector and dictionary matrices.
pub struct DenseRef {
    pub h: usize,
    pub w: usize,
    pub side: usize,
    pub d: usize,
    pub p1: usize,
    pub patches: Vec<Vec<usize>>,
    /// `I - QQ^T` (d x d).
    pub proj: Mat,
    pub dict: Mat,
    /// Per-channel weights times strength.
    pub thresholds: Vec<f64>,
    pub coupling: f64,
}

impl DenseRef {
    pub fn new(params: &ModelParams, h: usize, w: usize, coupling: f64) -> Self {
        let side = params.patch_side;
        let d = side * side;
        let q = &params.pair.free.mat;
        let mut proj = Mat::identity(d);
        let qqt = q.matmul_nt(q);
        proj.add_scaled(&qqt, -1.0);
        DenseRef {
            h,
            w,
            side,
            d,
            p1: params.synth_atoms(),
            patches: patch_index_map(h, w, side),
            proj,
            dict: params.pair.synth.mat.clone(),
            thresholds: params
                .reg
                .atom_weights
                .iter()
                .map(|t| params.reg.strength * t)
                .collect(),
            coupling,
        }
    }

    fn gather(&self, x: &Image, k: usize) -> Vec<f64> {
        self.patches[k].iter().map(|&i| x.data[i]).collect()
    }

    /// `sum_k P_k^T v_k` scatter.
    fn scatter(&self, contribs: &[Vec<f64>]) -> Image {
        let mut out = Image::zeros(self.h, self.w);
        for (k, v) in contribs.iter().enumerate() {
            for (t, &i) in self.patches[k].iter().enumerate() {
                out.data[i] += v[t];
            }
        }
        out
    }

    /// Dense analysis `D^T Phat_k x` per pixel.
    pub fn analysis(&self, x: &Image) -> CodeField {
        let mut out = CodeField::zeros(self.p1, self.h, self.w);
        for k in 0..self.h * self.w {
            let p = self.gather(x, k);
            let pp = self.proj.matvec(&p);
            let c = self.dict.matvec_t(&pp);
            for (ch, v) in c.iter().enumerate() {
                out.data[ch * self.h * self.w + k] = *v;
            }
        }
        out
    }

    /// Dense synthesis `sum_k Phat_k^T D a_k`.
    pub fn synthesis(&self, code: &CodeField) -> Image {
        let n = self.h * self.w;
        let mut contribs = Vec::with_capacity(n);
        for k in 0..n {
            let a: Vec<f64> = (0..self.p1).map(|ch| code.data[ch * n + k]).collect();
            let da = self.dict.matvec(&a);
            contribs.push(self.proj.matvec(&da));
        }
        self.scatter(&contribs)
    }

    /// Dense projected patch Gram `sum_k Phat_k^T Phat_k x`.
    pub fn gram(&self, x: &Image) -> Image {
        let n = self.h * self.w;
        let mut contribs = Vec::with_capacity(n);
        for k in 0..n {
            let p = self.gather(x, k);
            let pp = self.proj.matvec(&p);
            // Phat^T = P^T proj^T; proj is symmetric idempotent, apply again.
            contribs.push(self.proj.matvec(&pp));
        }
        self.scatter(&contribs)
    }

    /// Independent group shrink on 2x2 blocks.
    pub fn group_prox(&self, code: &CodeField, step: f64) -> CodeField {
        let mut out = code.clone();
        for ch in 0..code.channels {
            let thr = step * self.thresholds[ch];
            for br in (0..code.height).step_by(2) {
                for bc in (0..code.width).step_by(2) {
                    let mut sq = 0.0;
                    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let v = code.get(ch, br + dr, bc + dc);
                        sq += v * v;
                    }
                    let nrm = sq.sqrt();
                    let s = if nrm > thr { 1.0 - thr / nrm } else { 0.0 };
                    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let v = out.get(ch, br + dr, bc + dc) * s;
                        out.set(ch, br + dr, bc + dc, v);
                    }
                }
            }
        }
        out
    }

    /// One literal dense transcription of the inertial update (identity
    /// measurement operator), m counting from 1.
    pub fn ipalm_step_identity(
        &self,
        x: &Image,
        x_prev: &Image,
        code: &CodeField,
        code_prev: &CodeField,
        y: &Image,
        m: usize,
        code_step: f64,
        image_step: f64,
    ) -> (Image, CodeField) {
        let wgt = (m as f64 - 1.0) / (m as f64 + 2.0);
        let n = self.h * self.w;
        // Code extrapolation.
        let mut code_ext = code.clone();
        code_ext.add_scaled(code, wgt);
        code_ext.add_scaled(code_prev, -wgt);
        // Per-pixel code update: prox( ext - step * D^T (D ext - Phat x) ).
        let mut u = CodeField::zeros(self.p1, self.h, self.w);
        for k in 0..n {
            let a: Vec<f64> = (0..self.p1).map(|ch| code_ext.data[ch * n + k]).collect();
            let da = self.dict.matvec(&a);
            let px = self.proj.matvec(&self.gather(x, k));
            let diff: Vec<f64> = da.iter().zip(&px).map(|(l, r)| l - r).collect();
            let g = self.dict.matvec_t(&diff);
            for ch in 0..self.p1 {
                u.data[ch * n + k] = a[ch] - code_step * g[ch];
            }
        }
        let code_new = self.group_prox(&u, code_step / self.coupling);
        // Image extrapolation and gradient step.
        let mut x_ext = x.clone();
        x_ext.add_scaled(x, wgt);
        x_ext.add_scaled(x_prev, -wgt);
        let mut contribs = Vec::with_capacity(n);
        for k in 0..n {
            let pz = self.proj.matvec(&self.gather(&x_ext, k));
            let a: Vec<f64> = (0..self.p1).map(|ch| code_new.data[ch * n + k]).collect();
            let da = self.dict.matvec(&a);
            let r: Vec<f64> = pz.iter().zip(&da).map(|(l, rr)| l - rr).collect();
            contribs.push(self.proj.matvec(&r));
        }
        let patch_grad = self.scatter(&contribs);
        let mut x_new = x_ext.clone();
        for i in 0..n {
            let data_grad = x_ext.data[i] - y.data[i]; // identity operator
            x_new.data[i] -= image_step * (data_grad + self.coupling * patch_grad.data[i]);
        }
        (x_new, code_new)
    }

    /// Dense objective (identity operator): data, coupling, and group terms.
    pub fn objective_identity(&self, x: &Image, code: &CodeField, y: &Image) -> f64 {
        let n = self.h * self.w;
        let mut data = 0.0;
        for i in 0..n {
            let d = x.data[i] - y.data[i];
            data += d * d;
        }
        data *= 0.5;
        let mut fit = 0.0;
        for k in 0..n {
            let px = self.proj.matvec(&self.gather(x, k));
            let a: Vec<f64> = (0..self.p1).map(|ch| code.data[ch * n + k]).collect();
            let da = self.dict.matvec(&a);
            for (l, r) in px.iter().zip(&da) {
                let d = l - r;
                fit += d * d;
            }
        }
        fit *= 0.5 * self.coupling;
        let mut reg = 0.0;
        for ch in 0..code.channels {
            for br in (0..code.height).step_by(2) {
                for bc in (0..code.width).step_by(2) {
                    let mut sq = 0.0;
                    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let v = code.get(ch, br + dr, bc + dc);
                        sq += v * v;
                    }
                    reg += self.thresholds[ch] * sq.sqrt();
                }
            }
        }
        data + fit + reg
    }

    /// Dense non-inertial proximal-gradient solve to a tight fixed-point
    /// tolerance (identity operator). Independent oracle for the inner
    /// solver.
    pub fn prox_gradient_solve_identity(
        &self,
        y: &Image,
        code_step: f64,
        image_step: f64,
        tol: f64,
        max_iters: usize,
    ) -> (Image, CodeField, usize) {
        let n = self.h * self.w;
        let mut x = y.clone();
        let mut code = CodeField::zeros(self.p1, self.h, self.w);
        for it in 0..max_iters {
            let (x_new, code_new) = self.ipalm_step_identity(
                &x, &x, &code, &code, y, 1, code_step, image_step,
            );
            let dx = x_new.sub(&x).norm() / (x.norm() + 1e-12);
            let dc = code_new.sub(&code).norm() / (code.norm() + 1e-12);
            x = x_new;
            code = code_new;
            if dx.max(dc) < tol {
                return (x, code, it + 1);
            }
        }
        (x, code, max_iters)
    }
}
