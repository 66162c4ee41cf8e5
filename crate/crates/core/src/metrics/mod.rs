//! Evaluation metrics: PSNR, single-scale SSIM on luma, UIQM with its
//! subterms, and Fréchet distance over the pluggable feature embedding.
//!
//! FID values computed here use the artifact's own frozen extractor, not an
//! Inception network; reports carry the embedding fingerprint so numbers
//! from different embeddings are never compared.

mod fid;
mod uiqm;

pub use fid::{embed_for_fid, fid};
pub use uiqm::{uiqm, uiqm_with_window, UiqmScores};

use crate::error::{Error, Result};
use crate::tensor::gaussian_kernel_1d;
use crate::types::ImagePlane;

/// PSNR is capped here; identical images report the cap instead of +inf.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB over all three channels, dynamic
/// range 1.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::Shape(format!(
            "psnr dims {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    let mut mse = 0.0;
    for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
        let d = x - y;
        mse += d * d;
    }
    mse /= a.tensor().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, dynamic range 1, computed on Rec.601 luma, averaged over all
/// fully-inside window positions.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::Shape(format!(
            "ssim dims {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    let (h, w) = (a.height(), a.width());
    const WINDOW: usize = 11;
    if h < WINDOW || w < WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs min side >= {WINDOW}, got {h}x{w}"
        )));
    }
    let k1 = gaussian_kernel_1d(1.5)?;
    debug_assert_eq!(k1.len(), WINDOW);
    let mut win = [0.0; WINDOW * WINDOW];
    for (dy, &ky) in k1.data().iter().enumerate() {
        for (dx, &kx) in k1.data().iter().enumerate() {
            win[dy * WINDOW + dx] = ky * kx;
        }
    }

    let la = a.luma();
    let lb = b.luma();
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - WINDOW) {
        for x0 in 0..=(w - WINDOW) {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let wgt = win[dy * WINDOW + dx];
                    let va = la[(y0 + dy) * w + x0 + dx];
                    let vb = lb[(y0 + dy) * w + x0 + dx];
                    mx += wgt * va;
                    my += wgt * vb;
                    xx += wgt * (va * va);
                    yy += wgt * (vb * vb);
                    // grouped so ssim(a,b) is bitwise ssim(b,a)
                    xy += wgt * (va * vb);
                }
            }
            let sx = xx - mx * mx;
            let sy = yy - my * my;
            let sxy = xy - mx * my;
            let num = (2.0 * (mx * my) + C1) * (2.0 * sxy + C2);
            let den = (mx * mx + my * my + C1) * (sx + sy + C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-image metric record plus the set-level FID, serialized by
/// `eval-metrics`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub pred_corpus: String,
    pub ref_corpus: String,
    pub per_image: Vec<ImageMetrics>,
    /// Present only when FID was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    /// Identifies the frozen embedding behind the FID value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_fingerprint: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub uiqm: f64,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for m in &self.per_image {
            if !(-1.0..=1.0).contains(&m.ssim) {
                return Err(Error::Numeric(format!(
                    "ssim {} for {} outside [-1,1]",
                    m.ssim, m.id
                )));
            }
        }
        if let Some(f) = self.fid {
            if f < 0.0 || !f.is_finite() {
                return Err(Error::Numeric(format!("fid {f} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn mean(&self, pick: impl Fn(&ImageMetrics) -> f64) -> f64 {
        if self.per_image.is_empty() {
            return f64::NAN;
        }
        self.per_image.iter().map(&pick).sum::<f64>() / self.per_image.len() as f64
    }
}
