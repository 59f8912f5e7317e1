//! Model parameters and their on-disk container.
//!
//! Trainable quantities are stored in raw (unconstrained) form; the
//! constrained dictionaries and the non-negative weights are derived views
//! that are recomputed after every update. The container is a versioned JSON
//! document: serde's float formatting round-trips `f64` exactly, so loading
//! a saved model reproduces it bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dict::{
    parameterize_dictionaries, validate_feasible_set, DictionaryPair, RawDictionaries,
};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::reg::{RegularizerKind, RegularizerParams};

pub const MODEL_MAGIC: &str = "SPS-MODEL";
pub const MODEL_VERSION: u32 = 1;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inv_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "inv_softplus needs a positive argument");
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Complete set of model parameters: raw trainables plus derived views.
///
/// Invariant: `pair` and `reg.atom_weights` always equal the parameterization
/// of the raw fields ([`ModelParams::refresh`] restores this after a raw
/// update). The derived coupling weight is `softplus(coupling_raw)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub raw: RawDictionaries,
    pub pair: DictionaryPair,
    pub reg: RegularizerParams,
    /// Raw per-atom weights; `reg.atom_weights = softplus(weights_raw)`.
    pub weights_raw: Vec<f64>,
    /// Raw coupling weight; the data-coupling weight is its softplus image.
    pub coupling_raw: f64,
    pub patch_side: usize,
}

impl ModelParams {
    pub fn from_raw(
        raw: RawDictionaries,
        weights_raw: Vec<f64>,
        coupling_raw: f64,
        kind: RegularizerKind,
        exponent: f64,
        strength: f64,
        patch_side: usize,
    ) -> Result<Self> {
        if patch_side * patch_side != raw.synth.rows {
            return Err(CoreError::InvalidArgument(format!(
                "patch side {patch_side} does not match patch dimension {}",
                raw.synth.rows
            )));
        }
        if weights_raw.len() != raw.synth.cols {
            return Err(CoreError::DimensionMismatch(format!(
                "{} atom weights for {} synthesis atoms",
                weights_raw.len(),
                raw.synth.cols
            )));
        }
        let pair = parameterize_dictionaries(&raw)?;
        let reg = RegularizerParams {
            kind,
            atom_weights: weights_raw.iter().map(|&w| softplus(w)).collect(),
            exponent,
            strength,
        };
        reg.validate()?;
        Ok(ModelParams { raw, pair, reg, weights_raw, coupling_raw, patch_side })
    }

    /// Data-coupling weight (the softplus image of the raw parameter).
    pub fn coupling(&self) -> f64 {
        softplus(self.coupling_raw)
    }

    /// Re-derive the constrained pair and the non-negative weights from the
    /// raw parameters. Must be called after every raw update.
    pub fn refresh(&mut self) -> Result<()> {
        self.pair = parameterize_dictionaries(&self.raw)?;
        self.reg.atom_weights = self.weights_raw.iter().map(|&w| softplus(w)).collect();
        Ok(())
    }

    /// Deployment-time override of the coupling weight, keeping the
    /// raw/derived invariant by moving the raw parameter.
    pub fn with_coupling(mut self, coupling: f64) -> Result<Self> {
        if !(coupling > 0.0) {
            return Err(CoreError::InvalidArgument("coupling must be positive".into()));
        }
        self.coupling_raw = inv_softplus(coupling);
        Ok(self)
    }

    /// Deployment-time override of the global regularization strength.
    pub fn with_strength(mut self, strength: f64) -> Result<Self> {
        if !(strength >= 0.0) {
            return Err(CoreError::InvalidArgument("strength must be non-negative".into()));
        }
        self.reg.strength = strength;
        Ok(self)
    }

    /// Deployment-time multiplier on all atom weights, keeping the
    /// raw/derived invariant by moving the raw parameters.
    pub fn with_weight_multiplier(mut self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(CoreError::InvalidArgument("weight multiplier must be positive".into()));
        }
        for (raw, w) in self.weights_raw.iter_mut().zip(&mut self.reg.atom_weights) {
            *w = softplus(*raw) * c;
            *raw = inv_softplus(*w);
        }
        Ok(self)
    }

    pub fn synth_atoms(&self) -> usize {
        self.pair.synth.atom_count()
    }

    pub fn free_atoms(&self) -> usize {
        self.pair.free.atom_count()
    }
}

/// Serialized model container.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub magic: String,
    pub version: u32,
    pub patch_side: usize,
    pub kind: RegularizerKind,
    pub exponent: f64,
    pub strength: f64,
    pub weights_raw: Vec<f64>,
    pub coupling_raw: f64,
    /// Derived non-negative weights (softplus of the raw ones); informative.
    pub atom_weights: Vec<f64>,
    /// Derived coupling weight; informative.
    pub coupling: f64,
    pub raw_synth: Mat,
    pub raw_free: Mat,
    /// Derived pair, stored for self-description; recomputed on load.
    pub derived: DictionaryPair,
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let file = ModelFile {
        magic: MODEL_MAGIC.to_string(),
        version: MODEL_VERSION,
        patch_side: params.patch_side,
        kind: params.reg.kind,
        exponent: params.reg.exponent,
        strength: params.reg.strength,
        weights_raw: params.weights_raw.clone(),
        coupling_raw: params.coupling_raw,
        atom_weights: params.reg.atom_weights.clone(),
        coupling: params.coupling(),
        raw_synth: params.raw.synth.clone(),
        raw_free: params.raw.free.clone(),
        derived: params.pair.clone(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| CoreError::ModelFormat(format!("serialize: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| CoreError::ModelFormat(format!("parse: {e}")))?;
    if file.magic != MODEL_MAGIC {
        return Err(CoreError::ModelFormat(format!(
            "bad magic {:?}, expected {MODEL_MAGIC:?}",
            file.magic
        )));
    }
    if file.version != MODEL_VERSION {
        return Err(CoreError::ModelFormat(format!(
            "unsupported version {} (supported: {MODEL_VERSION})",
            file.version
        )));
    }
    let raw = RawDictionaries::new(file.raw_synth, file.raw_free)?;
    let params = ModelParams::from_raw(
        raw,
        file.weights_raw,
        file.coupling_raw,
        file.kind,
        file.exponent,
        file.strength,
        file.patch_side,
    )?;
    // The stored derived pair documents the file; the loaded model relies on
    // the recomputed one. Flag gross disagreement as corruption.
    let drift = params
        .pair
        .synth
        .mat
        .sub(&file.derived.synth.mat)
        .frob_norm()
        .max(params.pair.free.mat.sub(&file.derived.free.mat).frob_norm());
    if drift > 1e-6 {
        return Err(CoreError::ModelFormat(format!(
            "stored derived dictionaries drift {drift:.3e} from the raw parameterization"
        )));
    }
    let report = validate_feasible_set(&params.pair, 1e-5);
    if !report.pass() {
        return Err(CoreError::ModelFormat(
            "loaded model fails feasibility validation at 1e-5".into(),
        ));
    }
    Ok(params)
}
