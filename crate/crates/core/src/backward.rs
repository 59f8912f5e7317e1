//! Reverse-mode differentiation of the solver's fixed point.
//!
//! Training gradients never unroll the solver. With `T` the non-inertial
//! sweep ([`crate::solver::SolverContext::fixed_point_map`]) and `z* = (x*, code*)` its
//! fixed point, the loss gradient with respect to the model parameters is
//!
//! ```text
//!   dL/dtheta = (dT/dtheta)^T v,   where  v = (dT/dz)^T v + dL/dz
//! ```
//!
//! The adjoint equation in `v` is affine and is solved with Anderson mixing
//! or Broyden updates. Both transpose products are evaluated with the same
//! convolution algebra as the forward sweep.
//!
//! Two conventions are fixed here and relied on by the finite-difference
//! oracles: at prox kinks (zeroed group-lasso blocks) the subgradient is
//! zero, and the step sizes carry no parameter gradient — the code step is
//! the constant 0.99 on feasible pairs, and the image step multiplies the
//! objective gradient, which vanishes at the fixed point.

use crate::code::CodeField;
use crate::dict::{parameterize_vjp, parameterize_with_tape, RawDictionaries};
use crate::error::Result;
use crate::fixed_point::{anderson_solve, broyden_solve};
use crate::image::Image;
use crate::linalg::Mat;
use crate::model::{sigmoid, ModelParams};
use crate::operators::{ForwardOperator, Measurement};
use crate::patch::{code_code_outer, patch_code_outer, pixelwise_matmul};
use crate::reg::{group_l1l2_prox_vjp, point_shrink_prox_vjp, RegularizerKind};
use crate::solver::{SolverConfig, SolverContext, SolverState};

/// Cotangents on the derived parameters entering the sweep.
#[derive(Debug, Clone)]
pub struct ParamCotangents {
    pub synth: Mat,
    /// Includes a column for the constant atom (discarded downstream).
    pub free: Mat,
    pub atom_weights: Vec<f64>,
    pub coupling: f64,
}

/// Gradients with respect to the raw trainable parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub synth_raw: Mat,
    pub free_raw: Mat,
    pub weights_raw: Vec<f64>,
    pub coupling_raw: f64,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            synth_raw: Mat::zeros(params.raw.synth.rows, params.raw.synth.cols),
            free_raw: Mat::zeros(params.raw.free.rows.max(params.raw.synth.rows), params.raw.free.cols),
            weights_raw: vec![0.0; params.weights_raw.len()],
            coupling_raw: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        self.synth_raw.add_scaled(&other.synth_raw, s);
        if self.free_raw.cols > 0 {
            self.free_raw.add_scaled(&other.free_raw, s);
        }
        for (a, b) in self.weights_raw.iter_mut().zip(&other.weights_raw) {
            *a += s * b;
        }
        self.coupling_raw += s * other.coupling_raw;
    }

    pub fn all_finite(&self) -> bool {
        self.synth_raw.all_finite()
            && self.free_raw.all_finite()
            && self.weights_raw.iter().all(|v| v.is_finite())
            && self.coupling_raw.is_finite()
    }
}

/// Backward fixed-point solver selection.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum BackwardSolver {
    Anderson { iters: usize, memory: usize, damping: f64 },
    Broyden { iters: usize, memory: usize },
}

impl Default for BackwardSolver {
    fn default() -> Self {
        BackwardSolver::Anderson { iters: 75, memory: 5, damping: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BackwardConfig {
    pub solver: BackwardSolver,
    /// Absolute residual target of the adjoint solve; exceeding it flags the
    /// returned gradient as low-confidence.
    pub tol: f64,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        BackwardConfig { solver: BackwardSolver::default(), tol: 1e-9 }
    }
}

#[derive(Debug)]
pub struct BackwardOutcome {
    pub grads: Gradients,
    pub adjoint_residual: f64,
    pub adjoint_iters: usize,
    pub low_confidence: bool,
}

/// Transpose products of one non-inertial sweep, linearized at `(x, code)`.
pub struct SolverVjp<'a> {
    ctx: &'a SolverContext<'a>,
    x: &'a Image,
    code: &'a CodeField,
    /// Prox input at the linearization point.
    u: CodeField,
    /// Prox output at the linearization point.
    code_hat: CodeField,
}

impl<'a> SolverVjp<'a> {
    pub fn new(ctx: &'a SolverContext<'a>, x: &'a Image, code: &'a CodeField) -> Result<Self> {
        let u = ctx.code_step_input(x, code)?;
        let code_hat = ctx.prox(&u)?;
        Ok(SolverVjp { ctx, x, code, u, code_hat })
    }

    fn prox_vjp(&self, cot: &CodeField) -> Result<(CodeField, Vec<f64>)> {
        match self.ctx.params.reg.kind {
            RegularizerKind::GroupL1L2 => {
                group_l1l2_prox_vjp(&self.u, self.ctx.group_prox_step(), &self.ctx.params.reg, cot)
            }
            RegularizerKind::PointShrink => {
                point_shrink_prox_vjp(&self.u, &self.ctx.params.reg, cot)
            }
        }
    }

    /// Cotangent of the sweep output propagated through the prox to the prox
    /// input: `w_u = J_prox(u)^T (v_code + image_step * b * W v_x)`.
    fn prox_input_cotangent(&self, vx: &Image, vcode: &CodeField) -> Result<(CodeField, Vec<f64>)> {
        let mut w_alpha = vcode.clone();
        let wv = self.ctx.analysis(vx)?;
        w_alpha.add_scaled(&wv, self.ctx.steps.image * self.ctx.coupling);
        self.prox_vjp(&w_alpha)
    }

    /// `(dT/dz)^T (v_x, v_code)`.
    pub fn state_transpose(&self, vx: &Image, vcode: &CodeField) -> Result<(Image, CodeField)> {
        let (w_u, _) = self.prox_input_cotangent(vx, vcode)?;
        // code_bar = (I - code_step * D^T D) w_u
        let mut code_bar = w_u.clone();
        let gw = pixelwise_matmul(self.ctx.code_gram_matrix(), &w_u)?;
        code_bar.add_scaled(&gw, -self.ctx.steps.code);
        // x_bar = v_x - image_step (H^T H + b S) v_x + code_step W^T w_u
        let mut x_bar = vx.clone();
        let hh = self.ctx.normal_apply(vx)?;
        x_bar.add_scaled(&hh, -self.ctx.steps.image);
        if self.ctx.coupling != 0.0 {
            let sv = self.ctx.gram(vx)?;
            x_bar.add_scaled(&sv, -self.ctx.steps.image * self.ctx.coupling);
        }
        let back = self.ctx.synthesis(&w_u)?;
        x_bar.add_scaled(&back, self.ctx.steps.code);
        Ok((x_bar, code_bar))
    }

    /// `(dT/dtheta)^T (v_x, v_code)` for the derived parameters, valid at a
    /// fixed point (the step-size chains vanish there).
    pub fn param_cotangents(&self, vx: &Image, vcode: &CodeField) -> Result<ParamCotangents> {
        let side = self.ctx.params.patch_side;
        let code_step = self.ctx.steps.code;
        let image_step = self.ctx.steps.image;
        let b = self.ctx.coupling;
        let (w_u, prox_param) = self.prox_input_cotangent(vx, vcode)?;

        // Synthesis dictionary.
        // x-block: + image_step * b * sum_k (P_k v_x) code_hat_k^T
        let mut synth_bar = patch_code_outer(vx, &self.code_hat, side)?;
        synth_bar.scale(image_step * b);
        // code-block through D^T D: - code_step * D (M + M^T)
        let m = code_code_outer(self.code, &w_u)?;
        let sym = m.add(&m.transpose());
        let dm = self.ctx.params.pair.synth.mat.matmul(&sym);
        synth_bar.add_scaled(&dm, -code_step);
        // code-block through the analysis conv: + code_step sum_k (P_k x) w_u_k^T
        let aw = patch_code_outer(self.x, &w_u, side)?;
        synth_bar.add_scaled(&aw, code_step);

        // Free dictionary, through the projected patch Gram operator
        // S x = d x - W_Q^T W_Q x only:
        //   Q_bar = image_step * b * [ sum (P_k v_x)(Q^T P_k x)^T
        //                            + sum (P_k x)(Q^T P_k v_x)^T ]
        let free = &self.ctx.params.pair.free;
        let mut free_bar = Mat::zeros(self.ctx.params.pair.free.patch_dim(), free.atom_count());
        if free.atom_count() > 0 && b != 0.0 {
            let cqx = crate::patch::analyze(self.x, free)?;
            let cqv = crate::patch::analyze(vx, free)?;
            let t1 = patch_code_outer(vx, &cqx, side)?;
            let t2 = patch_code_outer(self.x, &cqv, side)?;
            free_bar = t1.add(&t2).scaled(image_step * b);
        }

        // Coupling weight: direct chain from the image update.
        let mut fit = self.ctx.gram(self.x)?;
        fit.add_scaled(&self.ctx.synthesis(&self.code_hat)?, -1.0);
        let mut coupling_bar = -image_step * vx.dot(&fit);

        // Weight (and coupling) chains through the prox.
        let mut weight_bar = vec![0.0; self.ctx.params.reg.atom_weights.len()];
        match self.ctx.params.reg.kind {
            RegularizerKind::GroupL1L2 => {
                // prox threshold thr_ch = code_step * strength * w_ch / b
                let strength = self.ctx.params.reg.strength;
                for (ch, thr_cot) in prox_param.iter().enumerate() {
                    weight_bar[ch] += thr_cot * code_step * strength / b;
                    coupling_bar -= thr_cot
                        * code_step
                        * strength
                        * self.ctx.params.reg.atom_weights[ch]
                        / (b * b);
                }
            }
            RegularizerKind::PointShrink => {
                for (ch, tau_cot) in prox_param.iter().enumerate() {
                    weight_bar[ch] += tau_cot;
                }
            }
        }

        Ok(ParamCotangents {
            synth: synth_bar,
            free: free_bar,
            atom_weights: weight_bar,
            coupling: coupling_bar,
        })
    }
}

fn flatten(x: &Image, code: &CodeField) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + code.data.len());
    v.extend_from_slice(&x.data);
    v.extend_from_slice(&code.data);
    v
}

fn unflatten(v: &[f64], h: usize, w: usize, channels: usize) -> (Image, CodeField) {
    let n = h * w;
    let x = Image { height: h, width: w, data: v[..n].to_vec() };
    let code = CodeField { channels, height: h, width: w, data: v[n..].to_vec() };
    (x, code)
}

/// Gradients of a scalar loss at a converged solve, by implicit
/// differentiation of the non-inertial sweep.
///
/// `loss_grad_x` is `dL/dx` at the fixed point (`dL/dcode = 0` for the
/// supported reconstruction losses). The adjoint equation is solved with the
/// configured accelerated fixed-point method; a residual above `bcfg.tol`
/// flags (but still returns) the gradient.
pub fn backward_implicit(
    state: &SolverState,
    params: &ModelParams,
    op: &ForwardOperator,
    y: &Measurement,
    loss_grad_x: &Image,
    solver_cfg: &SolverConfig,
    bcfg: &BackwardConfig,
) -> Result<BackwardOutcome> {
    let ctx = SolverContext::new(params, op, y, solver_cfg)?;
    let vjp = SolverVjp::new(&ctx, &state.image, &state.code)?;
    let (h, w) = (state.image.height, state.image.width);
    let channels = state.code.channels;
    let b = flatten(loss_grad_x, &CodeField::zeros(channels, h, w));

    let affine = |v: &[f64]| -> Vec<f64> {
        let (vx, vcode) = unflatten(v, h, w, channels);
        let (tx, tcode) = vjp.state_transpose(&vx, &vcode).expect("adjoint sweep");
        let mut out = flatten(&tx, &tcode);
        for (o, bi) in out.iter_mut().zip(&b) {
            *o += bi;
        }
        out
    };

    let result = match bcfg.solver {
        BackwardSolver::Anderson { iters, memory, damping } => {
            anderson_solve(affine, &b, iters, memory, damping, bcfg.tol)
        }
        BackwardSolver::Broyden { iters, memory } => {
            broyden_solve(affine, &b, iters, memory, bcfg.tol)
        }
    };
    let (vx, vcode) = unflatten(&result.z, h, w, channels);
    let pc = vjp.param_cotangents(&vx, &vcode)?;

    // Chain through the dictionary parameterization and the softplus maps.
    let (_, tape) = parameterize_with_tape(&params.raw)?;
    let raw = parameterize_vjp(&tape, &pc.synth, &pc.free);
    let weights_raw: Vec<f64> = pc
        .atom_weights
        .iter()
        .zip(&params.weights_raw)
        .map(|(g, raw)| g * sigmoid(*raw))
        .collect();
    let coupling_raw = pc.coupling * sigmoid(params.coupling_raw);

    Ok(BackwardOutcome {
        grads: Gradients {
            synth_raw: raw.synth,
            free_raw: raw.free,
            weights_raw,
            coupling_raw,
        },
        adjoint_residual: result.residual,
        adjoint_iters: result.iters,
        low_confidence: result.residual > bcfg.tol,
    })
}

/// Raw-space cotangents of the parameterization alone (used in tests and by
/// regularizer-only updates).
pub fn chain_raw(params: &ModelParams, pc: &ParamCotangents) -> Result<Gradients> {
    let (_, tape) = parameterize_with_tape(&params.raw)?;
    let raw: RawDictionaries = parameterize_vjp(&tape, &pc.synth, &pc.free);
    Ok(Gradients {
        synth_raw: raw.synth,
        free_raw: raw.free,
        weights_raw: pc
            .atom_weights
            .iter()
            .zip(&params.weights_raw)
            .map(|(g, r)| g * sigmoid(*r))
            .collect(),
        coupling_raw: pc.coupling * sigmoid(params.coupling_raw),
    })
}
