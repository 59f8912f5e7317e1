//! Solver checks against the dense patch-matrix reference: single-step
//! transcription, operator equivalence, and the contraction probe at the
//! fixed point.

mod common;

use common::{scene, tiny_model, DenseRef};
use rand::Rng;
use sps_core::code::CodeField;
use sps_core::image::Image;
use sps_core::operators::{ForwardOperator, Measurement};
use sps_core::reg::RegularizerKind;
use sps_core::solver::{solve_inner, SolveInit, SolverConfig, SolverContext, SolverState};

#[test]
fn one_ipalm_step_matches_dense_transcription() {
    let params = tiny_model(101, RegularizerKind::GroupL1L2, 2.0);
    let y_img = scene(8, 8, 102);
    let y = Measurement::Real(y_img.clone());
    let op = ForwardOperator::Identity;
    let cfg = SolverConfig::default();
    let ctx = SolverContext::new(&params, &op, &y, &cfg).unwrap();
    let dense = DenseRef::new(&params, 8, 8, ctx.coupling);

    let mut r = common::rng(103);
    let x = Image::from_fn(8, 8, |_, _| r.random::<f64>());
    let x_prev = Image::from_fn(8, 8, |_, _| r.random::<f64>());
    let code = CodeField::new(4, 8, 8, (0..256).map(|_| (r.random::<f64>() - 0.5) * 0.3).collect())
        .unwrap();
    let code_prev =
        CodeField::new(4, 8, 8, (0..256).map(|_| (r.random::<f64>() - 0.5) * 0.3).collect())
            .unwrap();

    for m in [1usize, 2, 7] {
        let state = SolverState {
            image: x.clone(),
            image_prev: x_prev.clone(),
            code: code.clone(),
            code_prev: code_prev.clone(),
            iter: m,
            residual: f64::INFINITY,
        };
        let fast = ctx.step(&state).unwrap();
        let (dx, dc) = dense.ipalm_step_identity(
            &x,
            &x_prev,
            &code,
            &code_prev,
            &y_img,
            m,
            ctx.steps.code,
            ctx.steps.image,
        );
        let ex = fast.image.sub(&dx).norm() / (1.0 + dx.norm());
        let ec = fast.code.sub(&dc).norm() / (1.0 + dc.norm());
        assert!(ex <= 1e-10, "image mismatch at m={m}: {ex}");
        assert!(ec <= 1e-10, "code mismatch at m={m}: {ec}");
    }
}

#[test]
fn conv_operators_match_dense_reference_up_to_12x12() {
    for (h, w, seed) in [(8usize, 8usize, 201u64), (12, 12, 202), (10, 12, 203)] {
        let params = tiny_model(seed, RegularizerKind::GroupL1L2, 2.0);
        let y = Measurement::Real(scene(h, w, seed + 1));
        let op = ForwardOperator::Identity;
        let cfg = SolverConfig::default();
        let ctx = SolverContext::new(&params, &op, &y, &cfg).unwrap();
        let dense = DenseRef::new(&params, h, w, ctx.coupling);
        let x = common::random_image(h, w, seed + 2);
        let mut r = common::rng(seed + 3);
        let code = CodeField::new(
            4,
            h,
            w,
            (0..4 * h * w).map(|_| r.random::<f64>() - 0.5).collect(),
        )
        .unwrap();

        let a_fast = ctx.analysis(&x).unwrap();
        let a_dense = dense.analysis(&x);
        let ea = a_fast.sub(&a_dense).norm() / (1.0 + a_dense.norm());
        assert!(ea <= 1e-10, "analysis {h}x{w}: {ea}");

        let s_fast = ctx.synthesis(&code).unwrap();
        let s_dense = dense.synthesis(&code);
        let es = s_fast.sub(&s_dense).norm() / (1.0 + s_dense.norm());
        assert!(es <= 1e-10, "synthesis {h}x{w}: {es}");

        let g_fast = ctx.gram(&x).unwrap();
        let g_dense = dense.gram(&x);
        let eg = g_fast.sub(&g_dense).norm() / (1.0 + g_dense.norm());
        assert!(eg <= 1e-10, "gram {h}x{w}: {eg}");
    }
}

#[test]
fn objective_matches_dense_transcription() {
    let params = tiny_model(301, RegularizerKind::GroupL1L2, 2.0);
    let y_img = scene(8, 8, 302);
    let y = Measurement::Real(y_img.clone());
    let op = ForwardOperator::Identity;
    let cfg = SolverConfig::default();
    let ctx = SolverContext::new(&params, &op, &y, &cfg).unwrap();
    let dense = DenseRef::new(&params, 8, 8, ctx.coupling);
    let mut r = common::rng(303);
    let x = Image::from_fn(8, 8, |_, _| r.random::<f64>());
    let code =
        CodeField::new(4, 8, 8, (0..256).map(|_| (r.random::<f64>() - 0.5) * 0.4).collect())
            .unwrap();
    let fast = ctx.objective(&x, &code).unwrap();
    let slow = dense.objective_identity(&x, &code, &y_img);
    assert!(
        (fast.total - slow).abs() <= 1e-10 * (1.0 + slow.abs()),
        "{} vs {slow}",
        fast.total
    );
}

#[test]
fn fixed_point_jacobian_is_contractive_on_converged_instance() {
    // Power iteration on finite-difference JVPs of the non-inertial sweep
    // around the converged point: the spectral radius must sit below 1.
    let params = tiny_model(401, RegularizerKind::GroupL1L2, 2.0);
    let y = Measurement::Real(scene(8, 8, 402));
    let op = ForwardOperator::Identity;
    let cfg = SolverConfig { tol: 1e-9, max_iters: 100_000, ..Default::default() };
    let out = solve_inner(SolveInit::ZeroFill, &params, &op, &y, &cfg).unwrap();
    assert!(out.converged);
    let ctx = SolverContext::new(&params, &op, &y, &cfg).unwrap();
    let x = out.state.image.clone();
    let code = out.state.code.clone();
    let (tx0, tc0) = ctx.fixed_point_map(&x, &code).unwrap();

    let eps = 1e-6;
    let mut r = common::rng(403);
    let mut vx = Image::from_fn(8, 8, |_, _| r.random::<f64>() - 0.5);
    let mut vc =
        CodeField::new(4, 8, 8, (0..256).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
    let mut radius = 0.0;
    for _ in 0..60 {
        let nrm = (vx.norm().powi(2) + vc.norm().powi(2)).sqrt();
        vx = vx.scaled(1.0 / nrm);
        vc = vc.scaled(1.0 / nrm);
        let mut xp = x.clone();
        xp.add_scaled(&vx, eps);
        let mut cp = code.clone();
        cp.add_scaled(&vc, eps);
        let (txp, tcp) = ctx.fixed_point_map(&xp, &cp).unwrap();
        let jx = txp.sub(&tx0).scaled(1.0 / eps);
        let jc = tcp.sub(&tc0).scaled(1.0 / eps);
        radius = (jx.norm().powi(2) + jc.norm().powi(2)).sqrt();
        vx = jx;
        vc = jc;
    }
    assert!(radius < 1.0, "estimated spectral radius {radius}");
}
