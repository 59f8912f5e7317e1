//! Learned sparsity priors on coefficient fields.
//!
//! Two regularizers are supported:
//!
//! * **Group L1-L2** (convex): per channel, coefficients are grouped into
//!   non-overlapping 2x2 spatial blocks and penalized by the weighted sum of
//!   block Euclidean norms. Its prox is blockwise group shrinkage.
//! * **Point shrink** (non-convex): the regularizer is defined implicitly
//!   through its proximal operator, the elementwise shrinkage
//!   `phi(x) = x |x|^g / (tau^g + |x|^g)`, which tends pointwise to the hard
//!   threshold as the exponent `g` grows. The potential itself has no closed
//!   form and is recovered numerically when needed.

use serde::{Deserialize, Serialize};

use crate::code::CodeField;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegularizerKind {
    GroupL1L2,
    PointShrink,
}

/// Weights of the sparsity prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerParams {
    pub kind: RegularizerKind,
    /// Per-channel non-negative weights, one per synthesis atom.
    pub atom_weights: Vec<f64>,
    /// Shrinkage exponent for the point-shrink prior (unused by group L1-L2).
    pub exponent: f64,
    /// Global multiplier on the regularizer.
    pub strength: f64,
}

impl RegularizerParams {
    pub fn validate(&self) -> Result<()> {
        if self.atom_weights.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(CoreError::InvalidArgument(
                "atom weights must be finite and non-negative".into(),
            ));
        }
        if !(self.exponent > 0.0) {
            return Err(CoreError::InvalidArgument(
                "shrinkage exponent must be positive".into(),
            ));
        }
        if !(self.strength >= 0.0) {
            return Err(CoreError::InvalidArgument(
                "strength must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn check_group_dims(code: &CodeField) -> Result<()> {
    if code.height % 2 != 0 || code.width % 2 != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "group L1-L2 needs even spatial dimensions, got {}x{}",
            code.height, code.width
        )));
    }
    Ok(())
}

fn check_channels(code: &CodeField, p: &RegularizerParams) -> Result<()> {
    if code.channels != p.atom_weights.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "code has {} channels but {} atom weights given",
            code.channels,
            p.atom_weights.len()
        )));
    }
    Ok(())
}

/// Offsets of a 2x2 block anchored at even coordinates.
const BLOCK: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Value of the group L1-L2 regularizer:
/// `strength * sum_blocks sum_channels w_p * ||2x2 block||`.
pub fn group_l1l2_value(code: &CodeField, p: &RegularizerParams) -> Result<f64> {
    check_group_dims(code)?;
    check_channels(code, p)?;
    let mut total = 0.0;
    for ch in 0..code.channels {
        let w = p.atom_weights[ch];
        let mut chan_sum = 0.0;
        for br in (0..code.height).step_by(2) {
            for bc in (0..code.width).step_by(2) {
                let mut sq = 0.0;
                for (dr, dc) in BLOCK {
                    let v = code.get(ch, br + dr, bc + dc);
                    sq += v * v;
                }
                chan_sum += sq.sqrt();
            }
        }
        total += w * chan_sum;
    }
    Ok(p.strength * total)
}

/// Proximal map of `step * strength * R` for the group L1-L2 regularizer:
/// each block is scaled by `max(0, 1 - step*strength*w_p / ||block||)`; zero
/// blocks stay zero. Exact minimizer of
/// `0.5 ||u - a||^2 + step * strength * R(u)`.
pub fn group_l1l2_prox(code: &CodeField, step: f64, p: &RegularizerParams) -> Result<CodeField> {
    if !(step > 0.0) {
        return Err(CoreError::InvalidArgument("prox step must be positive".into()));
    }
    check_group_dims(code)?;
    check_channels(code, p)?;
    let mut out = code.clone();
    for ch in 0..code.channels {
        let thr = step * p.strength * p.atom_weights[ch];
        if thr == 0.0 {
            continue;
        }
        for br in (0..code.height).step_by(2) {
            for bc in (0..code.width).step_by(2) {
                let mut sq = 0.0;
                for (dr, dc) in BLOCK {
                    let v = code.get(ch, br + dr, bc + dc);
                    sq += v * v;
                }
                let norm = sq.sqrt();
                let scale = if norm > thr { 1.0 - thr / norm } else { 0.0 };
                for (dr, dc) in BLOCK {
                    let v = out.get(ch, br + dr, bc + dc) * scale;
                    out.set(ch, br + dr, bc + dc, v);
                }
            }
        }
    }
    Ok(out)
}

/// Transpose-Jacobian of [`group_l1l2_prox`] at input `u` applied to a
/// cotangent, together with the per-channel cotangent of the effective
/// threshold `step*strength*w_p`.
///
/// At the kink (block norm at or below the threshold) the subgradient
/// convention is zero, matching the solver's differentiation contract.
pub fn group_l1l2_prox_vjp(
    u: &CodeField,
    step: f64,
    p: &RegularizerParams,
    cot: &CodeField,
) -> Result<(CodeField, Vec<f64>)> {
    check_group_dims(u)?;
    check_channels(u, p)?;
    let mut input_cot = CodeField::zeros(u.channels, u.height, u.width);
    let mut thr_cot = vec![0.0; u.channels];
    for ch in 0..u.channels {
        let thr = step * p.strength * p.atom_weights[ch];
        for br in (0..u.height).step_by(2) {
            for bc in (0..u.width).step_by(2) {
                let mut sq = 0.0;
                for (dr, dc) in BLOCK {
                    let v = u.get(ch, br + dr, bc + dc);
                    sq += v * v;
                }
                let norm = sq.sqrt();
                if norm <= thr || norm == 0.0 {
                    continue; // zeroed block: Jacobian and threshold slope are 0
                }
                // P(b) = b (1 - thr/||b||):
                //   J^T w = (1 - thr/||b||) w + thr <b,w> b / ||b||^3
                //   dP/dthr = -b/||b||
                let mut dot = 0.0;
                for (dr, dc) in BLOCK {
                    dot += u.get(ch, br + dr, bc + dc) * cot.get(ch, br + dr, bc + dc);
                }
                let shrink = 1.0 - thr / norm;
                let curl = thr * dot / (norm * norm * norm);
                for (dr, dc) in BLOCK {
                    let b = u.get(ch, br + dr, bc + dc);
                    let w = cot.get(ch, br + dr, bc + dc);
                    input_cot.set(ch, br + dr, bc + dc, shrink * w + curl * b);
                }
                thr_cot[ch] -= dot / norm;
            }
        }
    }
    Ok((input_cot, thr_cot))
}

/// Elementwise shrinkage `phi(x) = x |x|^g / (tau^g + |x|^g)`.
///
/// Odd, monotone nondecreasing, with `|phi(x)| <= |x|`; `tau = 0` gives the
/// identity and `g -> inf` the hard threshold at `tau`.
pub fn shrink_phi(x: f64, tau: f64, gamma: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if tau <= 0.0 {
        return x;
    }
    let s = (x.abs() / tau).powf(gamma);
    if s.is_infinite() {
        return x;
    }
    x * s / (1.0 + s)
}

/// Derivative of [`shrink_phi`] in its argument.
pub fn shrink_phi_dx(x: f64, tau: f64, gamma: f64) -> f64 {
    if tau <= 0.0 {
        return 1.0;
    }
    if x == 0.0 {
        return 0.0;
    }
    let s = (x.abs() / tau).powf(gamma);
    if s.is_infinite() {
        return 1.0;
    }
    let denom = 1.0 + s;
    s / denom + gamma * s / (denom * denom)
}

/// Derivative of [`shrink_phi`] in the weight `tau`.
pub fn shrink_phi_dtau(x: f64, tau: f64, gamma: f64) -> f64 {
    if tau <= 0.0 || x == 0.0 {
        return 0.0;
    }
    let s = (x.abs() / tau).powf(gamma);
    if s.is_infinite() {
        return 0.0;
    }
    let denom = 1.0 + s;
    -gamma * x * s / (tau * denom * denom)
}

/// Elementwise point-shrink prox, weight per channel.
pub fn point_shrink_prox(code: &CodeField, p: &RegularizerParams) -> Result<CodeField> {
    check_channels(code, p)?;
    let mut out = code.clone();
    for ch in 0..code.channels {
        let tau = p.atom_weights[ch];
        for v in out.channel_mut(ch) {
            *v = shrink_phi(*v, tau, p.exponent);
        }
    }
    Ok(out)
}

/// Transpose-Jacobian of [`point_shrink_prox`] at `u` applied to a cotangent,
/// plus the per-channel weight cotangents.
pub fn point_shrink_prox_vjp(
    u: &CodeField,
    p: &RegularizerParams,
    cot: &CodeField,
) -> Result<(CodeField, Vec<f64>)> {
    check_channels(u, p)?;
    let mut input_cot = CodeField::zeros(u.channels, u.height, u.width);
    let mut w_cot = vec![0.0; u.channels];
    for ch in 0..u.channels {
        let tau = p.atom_weights[ch];
        let src = u.channel(ch);
        let c = cot.channel(ch);
        let dst = input_cot.channel_mut(ch);
        let mut acc = 0.0;
        for i in 0..src.len() {
            dst[i] = shrink_phi_dx(src[i], tau, p.exponent) * c[i];
            acc += shrink_phi_dtau(src[i], tau, p.exponent) * c[i];
        }
        w_cot[ch] = acc;
    }
    Ok((input_cot, w_cot))
}

/// Potential recovered numerically from prox samples: the function `R` with
/// `prox_R = phi`, sampled at the prox outputs.
#[derive(Debug, Clone)]
pub struct NumericPotential {
    /// Strictly increasing sample points `phi(x_i)` (the potential domain).
    pub points: Vec<f64>,
    /// `R(phi(x_i))`, with `R(0) = 0`.
    pub values: Vec<f64>,
}

impl NumericPotential {
    /// Evaluate by symmetric linear interpolation; arguments beyond the
    /// sampled range are clamped to the last sample.
    pub fn eval(&self, t: f64) -> f64 {
        let a = t.abs();
        let pts = &self.points;
        if pts.is_empty() || a <= pts[0] {
            return self.values.first().copied().unwrap_or(0.0);
        }
        if a >= *pts.last().unwrap() {
            return *self.values.last().unwrap();
        }
        let mut lo = 0;
        let mut hi = pts.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if pts[mid] <= a {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t0 = pts[lo];
        let t1 = pts[hi];
        let w = (a - t0) / (t1 - t0);
        self.values[lo] * (1.0 - w) + self.values[hi] * w
    }
}

/// Recover the potential of a prox map from samples of the map itself using
/// `R(phi(x)) = R(0) + integral (x - phi(x)) d phi(x)` with trapezoid
/// quadrature and `R(0) = 0`. Rejects non-monotone samples.
pub fn potential_from_prox_samples(xs: &[f64], phis: &[f64]) -> Result<NumericPotential> {
    if xs.len() != phis.len() || xs.len() < 2 {
        return Err(CoreError::InvalidArgument(
            "need at least two matching prox samples".into(),
        ));
    }
    for i in 1..phis.len() {
        if !(phis[i] > phis[i - 1]) {
            return Err(CoreError::InvalidArgument(format!(
                "prox samples must be strictly increasing (violated at index {i})"
            )));
        }
    }
    let mut values = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    values.push(0.0);
    for i in 1..xs.len() {
        let f0 = xs[i - 1] - phis[i - 1];
        let f1 = xs[i] - phis[i];
        acc += 0.5 * (f0 + f1) * (phis[i] - phis[i - 1]);
        values.push(acc);
    }
    Ok(NumericPotential { points: phis.to_vec(), values })
}

/// Numeric potential of the point-shrink prox for one channel weight,
/// sampled on `[0, x_max]`.
pub fn shrink_potential(tau: f64, gamma: f64, x_max: f64, steps: usize) -> Result<NumericPotential> {
    if !(x_max > 0.0) || steps < 2 {
        return Err(CoreError::InvalidArgument("bad potential grid".into()));
    }
    if tau <= 0.0 {
        // Identity prox: zero potential on the grid.
        let points: Vec<f64> = (0..=steps).map(|i| x_max * i as f64 / steps as f64).collect();
        let values = vec![0.0; points.len()];
        return Ok(NumericPotential { points, values });
    }
    let xs: Vec<f64> = (0..=steps).map(|i| x_max * i as f64 / steps as f64).collect();
    let phis: Vec<f64> = xs.iter().map(|&x| shrink_phi(x, tau, gamma)).collect();
    potential_from_prox_samples(&xs, &phis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(
        kind: RegularizerKind,
        weights: Vec<f64>,
        gamma: f64,
        strength: f64,
    ) -> RegularizerParams {
        RegularizerParams { kind, atom_weights: weights, exponent: gamma, strength }
    }

    fn single_block(vals: [f64; 4]) -> CodeField {
        let mut c = CodeField::zeros(1, 2, 2);
        c.set(0, 0, 0, vals[0]);
        c.set(0, 0, 1, vals[1]);
        c.set(0, 1, 0, vals[2]);
        c.set(0, 1, 1, vals[3]);
        c
    }

    #[test]
    fn value_of_zero_code_is_zero() {
        let p = params(RegularizerKind::GroupL1L2, vec![1.0, 2.0], 2.0, 1.0);
        let code = CodeField::zeros(2, 4, 4);
        assert_eq!(group_l1l2_value(&code, &p).unwrap(), 0.0);
    }

    #[test]
    fn value_of_345_block() {
        let p = params(RegularizerKind::GroupL1L2, vec![1.0], 2.0, 1.0);
        let code = single_block([3.0, 4.0, 0.0, 0.0]);
        assert_eq!(group_l1l2_value(&code, &p).unwrap(), 5.0);
    }

    #[test]
    fn value_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let code =
            CodeField::new(3, 4, 6, (0..72).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let weights = vec![0.3, 1.1, 0.7];
        let p = params(RegularizerKind::GroupL1L2, weights.clone(), 2.0, 1.7);
        // Direct per-group summation oracle.
        let mut oracle = 0.0;
        for ch in 0..3 {
            for br in (0..4).step_by(2) {
                for bc in (0..6).step_by(2) {
                    let mut sq = 0.0;
                    for (dr, dc) in BLOCK {
                        let v = code.get(ch, br + dr, bc + dc);
                        sq += v * v;
                    }
                    oracle += weights[ch] * sq.sqrt();
                }
            }
        }
        oracle *= 1.7;
        let got = group_l1l2_value(&code, &p).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs());
    }

    #[test]
    fn value_is_positively_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let code =
            CodeField::new(2, 4, 4, (0..32).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let p = params(RegularizerKind::GroupL1L2, vec![0.5, 1.5], 2.0, 1.0);
        let v1 = group_l1l2_value(&code, &p).unwrap();
        let v3 = group_l1l2_value(&code.scaled(3.0), &p).unwrap();
        assert!((v3 - 3.0 * v1).abs() <= 1e-12 * v1.abs());
    }

    #[test]
    fn odd_dims_rejected() {
        let p = params(RegularizerKind::GroupL1L2, vec![1.0], 2.0, 1.0);
        let code = CodeField::zeros(1, 3, 4);
        assert!(group_l1l2_value(&code, &p).is_err());
        assert!(group_l1l2_prox(&code, 1.0, &p).is_err());
    }

    #[test]
    fn prox_zeroes_blocks_inside_threshold() {
        let p = params(RegularizerKind::GroupL1L2, vec![2.0], 2.0, 1.0);
        let code = single_block([0.5, 0.5, 0.5, 0.5]); // norm 1 <= 2
        let out = group_l1l2_prox(&code, 1.0, &p).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prox_matches_one_dimensional_golden_section() {
        // Block (3,0,0,0) with threshold 1 shrinks to (2,0,0,0); the oracle
        // minimizes 0.5 (u-3)^2 + |u| by golden-section search.
        let p = params(RegularizerKind::GroupL1L2, vec![1.0], 2.0, 1.0);
        let code = single_block([3.0, 0.0, 0.0, 0.0]);
        let out = group_l1l2_prox(&code, 1.0, &p).unwrap();
        let f = |u: f64| 0.5 * (u - 3.0) * (u - 3.0) + u.abs();
        let (mut lo, mut hi) = (-4.0f64, 4.0f64);
        let gr = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let m1 = hi - gr * (hi - lo);
            let m2 = lo + gr * (hi - lo);
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let oracle = 0.5 * (lo + hi);
        // Value-based 1-D search resolves the minimizer only to about
        // sqrt(machine epsilon); 1e-6 is the meaningful tolerance.
        assert!((out.get(0, 0, 0) - oracle).abs() <= 1e-6);
        assert!((out.get(0, 0, 0) - 2.0).abs() <= 1e-12);
        for idx in [(0usize, 1usize), (1, 0), (1, 1)] {
            assert_eq!(out.get(0, idx.0, idx.1), 0.0);
        }
    }

    #[test]
    fn prox_is_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(RegularizerKind::GroupL1L2, vec![0.8, 0.4], 2.0, 1.0);
        for _ in 0..50 {
            let a = CodeField::new(
                2,
                4,
                4,
                (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            )
            .unwrap();
            let b = CodeField::new(
                2,
                4,
                4,
                (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            )
            .unwrap();
            let pa = group_l1l2_prox(&a, 0.7, &p).unwrap();
            let pb = group_l1l2_prox(&b, 0.7, &p).unwrap();
            assert!(pa.sub(&pb).norm() <= a.sub(&b).norm() + 1e-12);
        }
    }

    #[test]
    fn prox_output_beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = CodeField::new(1, 2, 2, vec![1.3, -0.4, 0.2, 0.9]).unwrap();
        let p = params(RegularizerKind::GroupL1L2, vec![0.9], 2.0, 1.0);
        let step = 0.77;
        let out = group_l1l2_prox(&a, step, &p).unwrap();
        let obj = |u: &CodeField| {
            0.5 * u.sub(&a).norm().powi(2) + step * group_l1l2_value(u, &p).unwrap()
        };
        let base = obj(&out);
        for _ in 0..1000 {
            let mut pert = out.clone();
            for v in &mut pert.data {
                *v += (rng.random::<f64>() - 0.5) * 0.2;
            }
            assert!(obj(&pert) >= base - 1e-12);
        }
    }

    #[test]
    fn group_prox_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = CodeField::new(
            2,
            2,
            2,
            (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap();
        let cot =
            CodeField::new(2, 2, 2, (0..8).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let p = params(RegularizerKind::GroupL1L2, vec![0.3, 0.25], 2.0, 1.0);
        let step = 0.9;
        let (in_cot, thr_cot) = group_l1l2_prox_vjp(&u, step, &p, &cot).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let mut up = u.clone();
            up.data[i] += h;
            let mut um = u.clone();
            um.data[i] -= h;
            let fp = group_l1l2_prox(&up, step, &p).unwrap().dot(&cot);
            let fm = group_l1l2_prox(&um, step, &p).unwrap().dot(&cot);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - in_cot.data[i]).abs() <= 1e-6, "entry {i}");
        }
        // Threshold direction, channel-wise (thr = step * strength * w).
        for ch in 0..2 {
            let mut pp = p.clone();
            pp.atom_weights[ch] += h / step;
            let mut pm = p.clone();
            pm.atom_weights[ch] -= h / step;
            let fp = group_l1l2_prox(&u, step, &pp).unwrap().dot(&cot);
            let fm = group_l1l2_prox(&u, step, &pm).unwrap().dot(&cot);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - thr_cot[ch]).abs() <= 1e-6,
                "channel {ch}: {fd} vs {}",
                thr_cot[ch]
            );
        }
    }

    #[test]
    fn shrink_matches_closed_form_points() {
        // x = tau, gamma = 2 gives tau/2.
        assert!((shrink_phi(0.7, 0.7, 2.0) - 0.35).abs() <= 1e-15);
        assert_eq!(shrink_phi(0.0, 1.0, 2.0), 0.0);
        assert_eq!(shrink_phi(0.5, 0.0, 2.0), 0.5); // tau = 0: identity
    }

    #[test]
    fn shrink_tends_to_hard_threshold() {
        for &x in &[2.0f64, -2.0, 4.0, -4.0] {
            assert!((shrink_phi(x, 1.0, 64.0) - x).abs() <= 1e-9, "x = {x}");
        }
        assert!(shrink_phi(0.5, 1.0, 64.0).abs() <= 1e-9);
    }

    #[test]
    fn shrink_is_odd_monotone_contractive_toward_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let x = (rng.random::<f64>() - 0.5) * 10.0;
            let tau = rng.random::<f64>() * 2.0;
            let g = rng.random::<f64>() * 2.0 + 0.1;
            let v = shrink_phi(x, tau, g);
            assert!((v + shrink_phi(-x, tau, g)).abs() <= 1e-12);
            assert!(v.abs() <= x.abs() + 1e-15);
            let v2 = shrink_phi(x + 1e-4, tau, g);
            assert!(v2 >= v - 1e-12, "monotone violated at {x}");
        }
    }

    #[test]
    fn shrink_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = (rng.random::<f64>() - 0.5) * 6.0;
            let tau = rng.random::<f64>() * 2.0 + 0.05;
            let g = rng.random::<f64>() * 1.9 + 0.1;
            if x.abs() < 1e-3 {
                continue;
            }
            let h = 1e-6;
            let fd_x = (shrink_phi(x + h, tau, g) - shrink_phi(x - h, tau, g)) / (2.0 * h);
            let an_x = shrink_phi_dx(x, tau, g);
            assert!(
                (fd_x - an_x).abs() <= 1e-5 * (1.0 + fd_x.abs()),
                "dx at ({x},{tau},{g})"
            );
            let fd_t = (shrink_phi(x, tau + h, g) - shrink_phi(x, tau - h, g)) / (2.0 * h);
            let an_t = shrink_phi_dtau(x, tau, g);
            assert!(
                (fd_t - an_t).abs() <= 1e-5 * (1.0 + fd_t.abs()),
                "dtau at ({x},{tau},{g})"
            );
        }
    }

    #[test]
    fn potential_of_identity_prox_is_zero() {
        let pot = shrink_potential(0.0, 2.0, 4.0, 128).unwrap();
        assert!(pot.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn potential_satisfies_prox_optimality() {
        // R'(phi(x)) = x - phi(x) at interior grid points, checked by finite
        // differences of the recovered samples.
        let tau = 1.0;
        let g = 2.0;
        let steps = 4000;
        let x_max = 4.0;
        let pot = shrink_potential(tau, g, x_max, steps).unwrap();
        let xs: Vec<f64> = (0..=steps).map(|i| x_max * i as f64 / steps as f64).collect();
        for i in (steps / 10..steps - steps / 10).step_by(97) {
            let dr =
                (pot.values[i + 1] - pot.values[i - 1]) / (pot.points[i + 1] - pot.points[i - 1]);
            let expect = xs[i] - pot.points[i];
            assert!(
                (dr - expect).abs() <= 1e-3 * (1.0 + expect.abs()),
                "at x = {}",
                xs[i]
            );
        }
        // Symmetric nondecreasing on the positive axis.
        for i in 1..pot.values.len() {
            assert!(pot.values[i] >= pot.values[i - 1] - 1e-15);
        }
    }

    #[test]
    fn potential_grows_with_weight() {
        // As the weight grows at a fixed coordinate, the recovered potential
        // climbs without bound.
        let mut last = -1.0;
        for tau in [1.0, 10.0, 100.0] {
            let pot = shrink_potential(tau, 2.0, 4.0 * tau, 4096).unwrap();
            let v = pot.eval(0.1);
            assert!(v > last, "tau {tau}: {v} <= {last}");
            last = v;
        }
    }

    #[test]
    fn non_monotone_samples_rejected() {
        let xs = vec![0.0, 1.0, 2.0];
        let phis = vec![0.0, 0.5, 0.4];
        assert!(potential_from_prox_samples(&xs, &phis).is_err());
    }

    #[test]
    fn point_shrink_prox_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = CodeField::new(
            2,
            3,
            3,
            (0..18).map(|_| (rng.random::<f64>() - 0.5) * 3.0).collect(),
        )
        .unwrap();
        let cot =
            CodeField::new(2, 3, 3, (0..18).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let p = params(RegularizerKind::PointShrink, vec![0.4, 0.9], 2.0, 1.0);
        let (in_cot, w_cot) = point_shrink_prox_vjp(&u, &p, &cot).unwrap();
        let h = 1e-6;
        for i in 0..18 {
            let mut up = u.clone();
            up.data[i] += h;
            let mut um = u.clone();
            um.data[i] -= h;
            let fd = (point_shrink_prox(&up, &p).unwrap().dot(&cot)
                - point_shrink_prox(&um, &p).unwrap().dot(&cot))
                / (2.0 * h);
            assert!((fd - in_cot.data[i]).abs() <= 1e-6);
        }
        for ch in 0..2 {
            let mut pp = p.clone();
            pp.atom_weights[ch] += h;
            let mut pm = p.clone();
            pm.atom_weights[ch] -= h;
            let fd = (point_shrink_prox(&u, &pp).unwrap().dot(&cot)
                - point_shrink_prox(&u, &pm).unwrap().dot(&cot))
                / (2.0 * h);
            assert!((fd - w_cot[ch]).abs() <= 1e-6, "channel {ch}");
        }
    }
}
