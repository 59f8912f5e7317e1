//! Accelerated fixed-point solvers for `z = g(z)`: Anderson mixing and
//! limited-memory (good) Broyden updates on the residual `f(z) = g(z) - z`.
//!
//! Both run a fixed iteration budget with an absolute residual stopping
//! test and report the final residual; the training backward pass uses them
//! to solve its affine adjoint equation.

use crate::linalg::{solve_dense, Mat};

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub z: Vec<f64>,
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Anderson mixing with history depth `memory` and damping `damping`.
///
/// `memory = 1` keeps no residual differences and reduces exactly to the
/// damped plain iteration `z <- z + damping * (g(z) - z)`. If the
/// least-squares mixing subproblem is singular the step falls back to the
/// damped plain update.
pub fn anderson_solve(
    g: impl Fn(&[f64]) -> Vec<f64>,
    z0: &[f64],
    iters: usize,
    memory: usize,
    damping: f64,
    tol: f64,
) -> FixedPointResult {
    assert!(memory >= 1, "anderson needs memory >= 1");
    let n = z0.len();
    let mut z = z0.to_vec();
    let mut hist_z: Vec<Vec<f64>> = Vec::new();
    let mut hist_f: Vec<Vec<f64>> = Vec::new();
    let mut done = 0;
    for k in 0..iters {
        let gz = g(&z);
        let f: Vec<f64> = gz.iter().zip(&z).map(|(a, b)| a - b).collect();
        let residual = norm(&f);
        done = k;
        if residual <= tol {
            return FixedPointResult { z, residual, iters: k, converged: true };
        }
        hist_z.push(z.clone());
        hist_f.push(f.clone());
        if hist_z.len() > memory {
            hist_z.remove(0);
            hist_f.remove(0);
        }
        let m = hist_z.len() - 1; // difference columns available
        let mut next: Vec<f64> = z.iter().zip(&f).map(|(zi, fi)| zi + damping * fi).collect();
        if m > 0 {
            // gamma = argmin || f - dF gamma ||, via ridge-damped normal equations.
            let last = hist_f.len() - 1;
            let mut gram = Mat::zeros(m, m);
            let mut rhs = vec![0.0; m];
            let df: Vec<Vec<f64>> = (0..m)
                .map(|j| {
                    (0..n)
                        .map(|i| hist_f[last - m + j + 1][i] - hist_f[last - m + j][i])
                        .collect()
                })
                .collect();
            let dz: Vec<Vec<f64>> = (0..m)
                .map(|j| {
                    (0..n)
                        .map(|i| hist_z[last - m + j + 1][i] - hist_z[last - m + j][i])
                        .collect()
                })
                .collect();
            let mut scale = 0.0f64;
            for a in 0..m {
                for b in 0..m {
                    let dot: f64 = df[a].iter().zip(&df[b]).map(|(x, y)| x * y).sum();
                    gram[(a, b)] = dot;
                    if a == b {
                        scale = scale.max(dot);
                    }
                }
                rhs[a] = df[a].iter().zip(&f).map(|(x, y)| x * y).sum();
            }
            for a in 0..m {
                gram[(a, a)] += 1e-10 * scale.max(1e-300);
            }
            if let Some(gamma) = solve_dense(&gram, &rhs) {
                for (j, gj) in gamma.iter().enumerate() {
                    for i in 0..n {
                        next[i] -= gj * (dz[j][i] + damping * df[j][i]);
                    }
                }
            }
            // Singular subproblem: `next` already holds the damped plain step.
        }
        z = next;
    }
    let gz = g(&z);
    let f: Vec<f64> = gz.iter().zip(&z).map(|(a, b)| a - b).collect();
    let residual = norm(&f);
    FixedPointResult { z, residual, iters: done + 1, converged: residual <= tol }
}

/// Limited-memory good-Broyden iteration on `f(z) = g(z) - z`, starting from
/// the inverse-Jacobian estimate `-I` (so the first step is `z <- g(z)`).
pub fn broyden_solve(
    g: impl Fn(&[f64]) -> Vec<f64>,
    z0: &[f64],
    iters: usize,
    memory: usize,
    tol: f64,
) -> FixedPointResult {
    let n = z0.len();
    let mut z = z0.to_vec();
    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut vs: Vec<Vec<f64>> = Vec::new();
    let apply_jinv = |us: &[Vec<f64>], vs: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in us.iter().zip(vs) {
            let dot: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
            for i in 0..n {
                out[i] += u[i] * dot;
            }
        }
        out
    };
    let mut f = {
        let gz = g(&z);
        gz.iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let mut residual = norm(&f);
    for k in 0..iters {
        if residual <= tol {
            return FixedPointResult { z, residual, iters: k, converged: true };
        }
        let step: Vec<f64> = apply_jinv(&us, &vs, &f).iter().map(|v| -v).collect();
        let z_new: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + b).collect();
        let g_new = g(&z_new);
        let f_new: Vec<f64> = g_new.iter().zip(&z_new).map(|(a, b)| a - b).collect();
        let dz: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
        let df: Vec<f64> = f_new.iter().zip(&f).map(|(a, b)| a - b).collect();
        // Good Broyden secant update of the inverse-Jacobian estimate.
        let jinv_df = apply_jinv(&us, &vs, &df);
        let vt: Vec<f64> = {
            // v^T = dz^T Jinv  (apply the transpose of the low-rank form)
            let mut out: Vec<f64> = dz.iter().map(|v| -v).collect();
            for (u, v) in us.iter().zip(&vs) {
                let dot: f64 = u.iter().zip(&dz).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    out[i] += v[i] * dot;
                }
            }
            out
        };
        let denom: f64 = dz.iter().zip(&jinv_df).map(|(a, b)| a * b).sum();
        if denom.abs() > 1e-300 {
            let u: Vec<f64> = dz
                .iter()
                .zip(&jinv_df)
                .map(|(a, b)| (a - b) / denom)
                .collect();
            us.push(u);
            vs.push(vt);
            if us.len() > memory {
                us.remove(0);
                vs.remove(0);
            }
        }
        z = z_new;
        f = f_new;
        residual = norm(&f);
    }
    FixedPointResult { z, residual, iters, converged: residual <= tol }
}
