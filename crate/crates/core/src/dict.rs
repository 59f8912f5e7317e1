//! Constrained dictionary pair and its smooth parameterization.
//!
//! A model carries two dictionaries over patch space: a synthesis dictionary
//! whose atoms combine through sparse codes, and an orthonormal "free"
//! dictionary spanning unpenalized patch content (one atom of which is
//! constant). Both are produced from unconstrained raw matrices by a fixed
//! sequence of smooth steps so that gradient-based training can run on the
//! raw entries directly:
//!
//!   1. remove the column means of the raw free matrix,
//!   2. orthonormalize with a fixed number of Björck iterations,
//!   3. append the constant atom,
//!   4. project the raw synthesis matrix onto the orthogonal complement,
//!   5. normalize each synthesis column,
//!   6. divide the synthesis dictionary by its spectral norm.
//!
//! The reverse-mode derivative of the whole chain is provided by
//! [`parameterize_vjp`]; the Björck iterations are differentiated by
//! unrolling the stored iterates.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{spectral_norm_power_iter, top_singular_triple, Mat};

pub const BJORCK_ITERS: usize = 15;
const DEGENERATE_ATOM_TOL: f64 = 1e-10;

/// A dictionary: `d x atoms` matrix, one atom per column, with `d` a square
/// of an odd patch side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub mat: Mat,
}

impl Dictionary {
    pub fn new(mat: Mat) -> Result<Self> {
        if !mat.all_finite() {
            return Err(CoreError::NonFinite("dictionary entries".into()));
        }
        let d = mat.rows;
        let side = (d as f64).sqrt().round() as usize;
        if side * side != d || side % 2 == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "dictionary row count {d} is not the square of an odd side"
            )));
        }
        Ok(Dictionary { mat })
    }

    #[inline]
    pub fn patch_dim(&self) -> usize {
        self.mat.rows
    }

    #[inline]
    pub fn atom_count(&self) -> usize {
        self.mat.cols
    }

    /// Patch side length implied by the patch dimension.
    pub fn side(&self) -> usize {
        (self.patch_dim() as f64).sqrt().round() as usize
    }
}

/// Constrained pair: synthesis dictionary plus orthonormal free dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryPair {
    pub synth: Dictionary,
    pub free: Dictionary,
}

/// Unconstrained raw matrices the pair is derived from. The free matrix has
/// one column fewer than the emitted free dictionary: the constant atom is
/// appended by the parameterization, not learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDictionaries {
    pub synth: Mat,
    pub free: Mat,
}

impl RawDictionaries {
    pub fn new(synth: Mat, free: Mat) -> Result<Self> {
        if !synth.all_finite() || !free.all_finite() {
            return Err(CoreError::NonFinite("raw dictionary entries".into()));
        }
        if free.cols > 0 && free.rows != synth.rows {
            return Err(CoreError::DimensionMismatch(format!(
                "raw matrices disagree on patch dimension: {} vs {}",
                synth.rows, free.rows
            )));
        }
        Ok(RawDictionaries { synth, free })
    }
}

/// Fixed-point orthonormalization `Q <- Q (3I - Q^T Q) / 2`.
///
/// The input must be pre-scaled so its spectral norm is below sqrt(3);
/// [`parameterize_dictionaries`] takes care of that. Divergence (typically a
/// rank-deficient input) is detected by the orthogonality residual failing
/// to fall below 1e-3.
pub fn bjorck_orthonormalize(q0: &Mat, iters: usize) -> Result<Mat> {
    let (q, _) = bjorck_with_iterates(q0, iters)?;
    Ok(q)
}

fn orthogonality_residual(q: &Mat) -> f64 {
    let mut g = q.matmul_tn(q);
    for i in 0..g.cols {
        g[(i, i)] -= 1.0;
    }
    g.frob_norm()
}

/// Björck iteration that also returns the intermediate iterates
/// `[q_0, ..., q_{iters-1}]` for reverse-mode differentiation.
fn bjorck_with_iterates(q0: &Mat, iters: usize) -> Result<(Mat, Vec<Mat>)> {
    if q0.cols == 0 {
        return Ok((q0.clone(), vec![]));
    }
    let mut q = q0.clone();
    let mut trail = Vec::with_capacity(iters);
    for _ in 0..iters {
        trail.push(q.clone());
        let mut m = q.matmul_tn(&q); // Q^T Q
        m.scale(-1.0);
        for i in 0..m.cols {
            m[(i, i)] += 3.0;
        }
        q = q.matmul(&m).scaled(0.5);
        if !q.all_finite() {
            return Err(CoreError::OrthonormalizationDiverged {
                residual: f64::INFINITY,
                iters: trail.len(),
            });
        }
    }
    let residual = orthogonality_residual(&q);
    if !(residual <= 1e-3) {
        return Err(CoreError::OrthonormalizationDiverged { residual, iters });
    }
    Ok((q, trail))
}

/// Everything the reverse pass needs, recorded during parameterization.
#[derive(Debug, Clone)]
pub struct ParamTape {
    raw_synth: Mat,
    /// Pre-scale applied to the centered raw free matrix. Treated as a
    /// constant by the reverse pass: after the fixed Björck iterations the
    /// output is scale-invariant up to the (machine-level) convergence
    /// residual, so the scale carries no usable gradient.
    scale: f64,
    bjorck_trail: Vec<Mat>,
    /// Free dictionary including the constant atom (last column).
    free_full: Mat,
    col_norms: Vec<f64>,
    /// Column-normalized synthesis matrix before spectral normalization.
    unit_cols: Mat,
    sigma: f64,
    sing_u: Vec<f64>,
    sing_v: Vec<f64>,
}

/// Derive a feasible [`DictionaryPair`] from raw matrices.
pub fn parameterize_dictionaries(raw: &RawDictionaries) -> Result<DictionaryPair> {
    parameterize_with_tape(raw).map(|(pair, _)| pair)
}

/// As [`parameterize_dictionaries`], also returning the tape consumed by
/// [`parameterize_vjp`].
pub fn parameterize_with_tape(raw: &RawDictionaries) -> Result<(DictionaryPair, ParamTape)> {
    let d = raw.synth.rows;
    let free_atoms = raw.free.cols + 1; // learned columns plus the constant atom
    if d < free_atoms {
        return Err(CoreError::InvalidArgument(format!(
            "free subspace of {free_atoms} atoms does not fit in patch dimension {d}"
        )));
    }

    // Free dictionary: center, pre-scale, orthonormalize.
    let (scale, bjorck_out, trail) = if raw.free.cols > 0 {
        let centered = raw.free.center_columns();
        let c1 = centered.clone();
        let c2 = centered.clone();
        let est = spectral_norm_power_iter(
            move |v| c1.matvec(v),
            move |v| c2.matvec_t(v),
            centered.cols,
            40,
            1e-12,
        );
        if est <= 0.0 {
            return Err(CoreError::OrthonormalizationDiverged { residual: f64::INFINITY, iters: 0 });
        }
        let scale = 1.001 * est;
        let (q, trail) = bjorck_with_iterates(&centered.scaled(1.0 / scale), BJORCK_ITERS)?;
        (scale, q, trail)
    } else {
        (1.0, Mat::zeros(d, 0), vec![])
    };
    let const_atom = vec![1.0 / (d as f64).sqrt(); d];
    let free_full = bjorck_out.hstack_col(&const_atom);

    // Synthesis dictionary: project out the free subspace, then normalize.
    let cross = free_full.matmul_tn(&raw.synth); // Q^T D_raw
    let projected = raw.synth.sub(&free_full.matmul(&cross));
    let mut col_norms = Vec::with_capacity(projected.cols);
    for j in 0..projected.cols {
        let n = projected.col_norm(j);
        if n < DEGENERATE_ATOM_TOL {
            return Err(CoreError::DegenerateAtom { index: j, norm: n });
        }
        col_norms.push(n);
    }
    let mut unit_cols = projected.clone();
    for j in 0..unit_cols.cols {
        let inv = 1.0 / col_norms[j];
        for i in 0..unit_cols.rows {
            unit_cols[(i, j)] *= inv;
        }
    }
    let (sigma, sing_u, sing_v) = if unit_cols.is_empty() {
        (1.0, vec![0.0; d], vec![])
    } else {
        top_singular_triple(&unit_cols)
    };
    if sigma < DEGENERATE_ATOM_TOL {
        return Err(CoreError::DegenerateAtom { index: 0, norm: sigma });
    }
    let synth = unit_cols.scaled(1.0 / sigma);

    let pair = DictionaryPair {
        synth: Dictionary::new(synth)?,
        free: Dictionary::new(free_full.clone())?,
    };
    let tape = ParamTape {
        raw_synth: raw.synth.clone(),
        scale,
        bjorck_trail: trail,
        free_full,
        col_norms,
        unit_cols,
        sigma,
        sing_u,
        sing_v,
    };
    Ok((pair, tape))
}

/// Reverse-mode derivative of the parameterization: maps cotangents on the
/// emitted pair to cotangents on the raw matrices.
///
/// `synth_bar` is `d x p1`; `free_bar` is `d x p2` and includes a slot for
/// the constant atom whose cotangent is discarded (the atom is not learned).
pub fn parameterize_vjp(tape: &ParamTape, synth_bar: &Mat, free_bar: &Mat) -> RawDictionaries {
    let d = tape.raw_synth.rows;
    let p1 = tape.raw_synth.cols;
    assert_eq!((synth_bar.rows, synth_bar.cols), (d, p1), "synth cotangent shape");
    assert_eq!(
        (free_bar.rows, free_bar.cols),
        (d, tape.free_full.cols),
        "free cotangent shape"
    );

    // Spectral normalization: synth = unit_cols / sigma.
    let mut unit_bar = synth_bar.scaled(1.0 / tape.sigma);
    let mut sigma_bar = 0.0;
    for (g, u) in synth_bar.data.iter().zip(&tape.unit_cols.data) {
        sigma_bar += g * u;
    }
    sigma_bar *= -1.0 / (tape.sigma * tape.sigma);
    // d sigma = u^T dM v  for the top singular pair (u, v).
    for i in 0..d {
        for j in 0..p1 {
            unit_bar[(i, j)] += sigma_bar * tape.sing_u[i] * tape.sing_v[j];
        }
    }

    // Column normalization: unit_j = projected_j / ||projected_j||.
    let mut projected_bar = Mat::zeros(d, p1);
    for j in 0..p1 {
        let mut dot = 0.0;
        for i in 0..d {
            dot += unit_bar[(i, j)] * tape.unit_cols[(i, j)];
        }
        let inv = 1.0 / tape.col_norms[j];
        for i in 0..d {
            projected_bar[(i, j)] = (unit_bar[(i, j)] - dot * tape.unit_cols[(i, j)]) * inv;
        }
    }

    // Projection: projected = (I - QQ^T) raw_synth.
    let q = &tape.free_full;
    let qt_pb = q.matmul_tn(&projected_bar); // Q^T projected_bar
    let raw_synth_bar = projected_bar.sub(&q.matmul(&qt_pb));
    // Q cotangent from the projection: -(pb raw^T + raw pb^T) Q.
    let mut free_full_bar = free_bar.clone();
    let t1 = projected_bar.matmul_nt(&tape.raw_synth).matmul(q);
    let t2 = tape.raw_synth.matmul_nt(&projected_bar).matmul(q);
    free_full_bar.add_scaled(&t1, -1.0);
    free_full_bar.add_scaled(&t2, -1.0);

    // Drop the constant column, then reverse the Björck unroll.
    let learned_cols = tape.free_full.cols - 1;
    let mut g = Mat::zeros(d, learned_cols);
    for i in 0..d {
        for j in 0..learned_cols {
            g[(i, j)] = free_full_bar[(i, j)];
        }
    }
    if learned_cols > 0 {
        for qk in tape.bjorck_trail.iter().rev() {
            // f(Q) = 1.5 Q - 0.5 Q (Q^T Q)
            let m = qk.matmul_tn(qk);
            let gm = g.matmul(&m);
            let gtq = g.matmul_tn(qk); // g^T Q  (p x p)
            let middle = qk.matmul(&gtq); // Q (g^T Q)
            let qtg = qk.matmul_tn(&g); // Q^T g
            let last = qk.matmul(&qtg); // Q (Q^T g)
            let mut next = g.scaled(1.5);
            next.add_scaled(&gm, -0.5);
            next.add_scaled(&middle, -0.5);
            next.add_scaled(&last, -0.5);
            g = next;
        }
        // Pre-scale (constant) and column centering (self-adjoint).
        g.scale(1.0 / tape.scale);
        g = g.center_columns();
    }
    RawDictionaries { synth: raw_synth_bar, free: g }
}

/// Diagnostic report of how far a pair sits from the feasible set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Frobenius norm of `Q^T Q - I`.
    pub free_orthonormality: f64,
    /// Frobenius norm of `Q^T D`.
    pub cross_orthogonality: f64,
    /// Spectral norm of the synthesis dictionary (target: 1).
    pub synth_spectral_norm: f64,
    /// Largest spread between synthesis column norms.
    pub synth_col_norm_spread: f64,
    /// Whether the free dictionary contains a positive constant atom.
    pub has_constant_atom: bool,
    pub tol: f64,
}

impl FeasibilityReport {
    pub fn pass(&self) -> bool {
        self.free_orthonormality <= self.tol
            && self.cross_orthogonality <= self.tol
            && (self.synth_spectral_norm - 1.0).abs() <= self.tol
            && self.synth_col_norm_spread <= self.tol
            && self.has_constant_atom
    }
}

/// Measure feasibility of a pair. Uses the dense Jacobi route for the
/// spectral norm, so the check is independent of the power-iteration
/// estimate used while parameterizing.
pub fn validate_feasible_set(pair: &DictionaryPair, tol: f64) -> FeasibilityReport {
    let q = &pair.free.mat;
    let d_mat = &pair.synth.mat;
    let free_orthonormality = orthogonality_residual(q);
    let cross_orthogonality = q.matmul_tn(d_mat).frob_norm();
    let synth_spectral_norm = crate::linalg::spectral_norm_dense(d_mat);
    let norms: Vec<f64> = (0..d_mat.cols).map(|j| d_mat.col_norm(j)).collect();
    let spread = match (
        norms.iter().cloned().reduce(f64::max),
        norms.iter().cloned().reduce(f64::min),
    ) {
        (Some(mx), Some(mn)) => mx - mn,
        _ => 0.0,
    };
    let has_constant_atom = (0..q.cols).any(|j| {
        let col = q.col(j);
        let first = col[0];
        first > 0.0 && col.iter().all(|&v| (v - first).abs() <= tol.max(1e-9))
    });
    FeasibilityReport {
        free_orthonormality,
        cross_orthogonality,
        synth_spectral_norm,
        synth_col_norm_spread: spread,
        has_constant_atom,
        tol,
    }
}
