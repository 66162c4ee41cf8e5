//! Natural light field retention: pull the low-frequency illumination
//! component out of a real underwater exemplar and capture light field
//! signatures for the consistency loss.
//!
//! The extraction path is blur-average, log transform, joint min-max
//! normalization. The loss-side capture deliberately stops at the blur
//! average — the two paths differ and both are kept.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{separable_gaussian_blur, Tensor};
use crate::types::ImagePlane;

/// Gaussian scales used throughout unless overridden.
pub const DEFAULT_SIGMAS: [f64; 3] = [15.0, 60.0, 90.0];

/// Epsilon added before the log transform to guard zero pixels.
pub const DEFAULT_LOG_EPSILON: f64 = 1e-6;

/// Low-frequency illumination map of an underwater exemplar, in `[0,1]`,
/// same dims as its source.
#[derive(Debug, Clone)]
pub struct LightFieldMap {
    planes: Tensor,
    source_id: String,
    sigmas: Vec<f64>,
}

impl LightFieldMap {
    pub fn new(planes: Tensor, source_id: String, sigmas: Vec<f64>) -> Result<Self> {
        if planes.rank() != 3 || planes.dims()[0] != 3 {
            return Err(Error::Shape(format!(
                "light field map must be [3,H,W], got {:?}",
                planes.dims()
            )));
        }
        if planes.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Numeric("light field map values outside [0,1]".into()));
        }
        Ok(LightFieldMap {
            planes,
            source_id,
            sigmas,
        })
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn height(&self) -> usize {
        self.planes.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.planes.dims()[2]
    }

    /// View as an image plane (values are already in [0,1]).
    pub fn as_image(&self) -> ImagePlane {
        ImagePlane::new(self.planes.clone()).expect("map invariants guarantee a valid image")
    }
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::Config("sigma list must be nonempty".into()));
    }
    for &s in sigmas {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("sigma must be positive, got {s}")));
        }
    }
    Ok(())
}

/// Average of Gaussian blurs over the given scales, per channel.
pub fn multiscale_gaussian(image: &ImagePlane, sigmas: &[f64]) -> Result<Tensor> {
    check_sigmas(sigmas)?;
    let mut acc = Tensor::zeros(image.tensor().dims().to_vec());
    for &sigma in sigmas {
        acc = acc.add(&separable_gaussian_blur(image.tensor(), sigma)?)?;
    }
    Ok(acc.scale(1.0 / sigmas.len() as f64))
}

/// Joint min-max over all channels to [0,1]; a constant input maps to 0.5.
pub fn minmax_normalize(t: &Tensor) -> Tensor {
    let min = t.min_value();
    let max = t.max_value();
    if max > min {
        let inv = 1.0 / (max - min);
        t.map(|v| ((v - min) * inv).clamp(0.0, 1.0))
    } else {
        Tensor::full(t.dims().to_vec(), 0.5)
    }
}

/// Extract the light field map of an exemplar: blur average, log transform,
/// joint min-max normalization.
pub fn extract_light_field(
    exemplar: &ImagePlane,
    source_id: &str,
    sigmas: &[f64],
    epsilon: f64,
) -> Result<LightFieldMap> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "log epsilon must be positive, got {epsilon}"
        )));
    }
    let blurred = multiscale_gaussian(exemplar, sigmas)?;
    let logged = blurred.map(|v| (v + epsilon).ln());
    LightFieldMap::new(
        minmax_normalize(&logged),
        source_id.to_string(),
        sigmas.to_vec(),
    )
}

/// Loss-side light field capture: the blur average only, no log and no
/// normalization, differentiable on the tape.
pub fn capture_lf(tape: &mut Tape, image: Var, sigmas: &[f64]) -> Result<Var> {
    check_sigmas(sigmas)?;
    let mut acc: Option<Var> = None;
    for &sigma in sigmas {
        let b = tape.gaussian_blur(image, sigma)?;
        acc = Some(match acc {
            None => b,
            Some(a) => tape.add(a, b)?,
        });
    }
    tape.scale(acc.expect("nonempty sigmas"), 1.0 / sigmas.len() as f64)
}

/// Eager counterpart of [`capture_lf`] for code outside a tape.
pub fn capture_lf_eager(image: &ImagePlane, sigmas: &[f64]) -> Result<Tensor> {
    multiscale_gaussian(image, sigmas)
}
