//! Operator specifications (serializable) and measurement-file containers.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sps_core::image::Image;
use sps_core::operators::{generate_column_mask, make_sr_operator, ColumnMask, ForwardOperator, Measurement};

/// Declarative description of a measurement operator; rebuilding from the
/// spec is deterministic, so run snapshots fully determine the operator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorSpec {
    Identity,
    /// Strided Gaussian blur (super-resolution forward model).
    Sr {
        #[serde(default = "default_sr_sigma")]
        sigma: f64,
        #[serde(default = "default_sr_size")]
        size: usize,
        #[serde(default = "default_sr_stride")]
        stride: usize,
    },
    /// Column-masked Fourier sampling (CS-MRI forward model).
    Mri {
        acceleration: usize,
        #[serde(default)]
        center_fraction: Option<f64>,
        #[serde(default)]
        mask_seed: u64,
        height: usize,
        width: usize,
    },
}

fn default_sr_sigma() -> f64 {
    2.0
}
fn default_sr_size() -> usize {
    16
}
fn default_sr_stride() -> usize {
    4
}

impl OperatorSpec {
    /// Default center-band fraction scaled with the acceleration factor.
    pub fn default_center_fraction(acceleration: usize) -> f64 {
        0.04 * 8.0 / acceleration as f64
    }

    pub fn build(&self) -> Result<ForwardOperator> {
        match self {
            OperatorSpec::Identity => Ok(ForwardOperator::Identity),
            OperatorSpec::Sr { sigma, size, stride } => {
                Ok(make_sr_operator(*sigma, *size, *stride)?)
            }
            OperatorSpec::Mri { acceleration, center_fraction, mask_seed, height, width } => {
                let cf = center_fraction
                    .unwrap_or_else(|| Self::default_center_fraction(*acceleration));
                let mask = generate_column_mask(*height, *width, *acceleration, cf, *mask_seed)?;
                Ok(ForwardOperator::masked_fourier(mask))
            }
        }
    }
}

/// On-disk measurement container: payload plus the mask geometry needed to
/// interpret complex measurements.
#[derive(Debug, Serialize, Deserialize)]
pub struct MeasurementFile {
    pub magic: String,
    pub measurement: Measurement,
    pub mask: Option<ColumnMask>,
    pub noise_sigma: f64,
    pub seed: Option<u64>,
}

pub const MEASUREMENT_MAGIC: &str = "SPS-MEAS";

pub fn save_measurement(
    m: &Measurement,
    mask: Option<&ColumnMask>,
    noise_sigma: f64,
    seed: Option<u64>,
    path: &Path,
) -> Result<()> {
    let file = MeasurementFile {
        magic: MEASUREMENT_MAGIC.to_string(),
        measurement: m.clone(),
        mask: mask.cloned(),
        noise_sigma,
        seed,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_measurement(path: &Path) -> Result<MeasurementFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let file: MeasurementFile = serde_json::from_str(&text)
        .with_context(|| format!("cannot parse measurement file {}", path.display()))?;
    if file.magic != MEASUREMENT_MAGIC {
        bail!("{} is not a measurement container", path.display());
    }
    Ok(file)
}

/// Image-grid shape implied by an operator spec and, for blur, the
/// measurement it produced.
pub fn image_shape_for(spec: &OperatorSpec, m: &Measurement) -> Result<(usize, usize)> {
    match (spec, m) {
        (OperatorSpec::Identity, Measurement::Real(img)) => Ok((img.height, img.width)),
        (OperatorSpec::Sr { stride, .. }, Measurement::Real(lr)) => {
            Ok((lr.height * stride, lr.width * stride))
        }
        (OperatorSpec::Mri { height, width, .. }, Measurement::Complex { .. }) => {
            Ok((*height, *width))
        }
        _ => bail!("measurement payload does not match the operator kind"),
    }
}

/// Convenience: zero-fill (adjoint) image of a measurement.
pub fn zero_fill(op: &ForwardOperator, m: &Measurement, h: usize, w: usize) -> Result<Image> {
    Ok(op.adjoint(m, h, w)?)
}
