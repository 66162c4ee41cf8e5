//! The two image-valued domain types every stage trades in: `[3,H,W]`
//! color planes in `[0,1]` and `[1,H,W]` nonnegative relative depth.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H×W×3 float image in `[0,1]`, stored `[3,H,W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    planes: Tensor,
}

impl ImagePlane {
    pub fn new(planes: Tensor) -> Result<Self> {
        if planes.rank() != 3 || planes.dims()[0] != 3 {
            return Err(Error::Shape(format!(
                "image plane must be [3,H,W], got {:?}",
                planes.dims()
            )));
        }
        if planes.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Numeric(
                "image plane values must lie in [0,1]".into(),
            ));
        }
        Ok(ImagePlane { planes })
    }

    /// Clamp into `[0,1]` first; for op outputs that may overshoot by eps.
    pub fn from_clamped(planes: Tensor) -> Result<Self> {
        Self::new(planes.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn constant(h: usize, w: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in rgb {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Numeric(format!("channel value {c} outside [0,1]")));
            }
            data.extend(std::iter::repeat(c).take(h * w));
        }
        Ok(ImagePlane {
            planes: Tensor::from_parts(vec![3, h, w], data),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.planes
    }

    pub fn into_tensor(self) -> Tensor {
        self.planes
    }

    pub fn height(&self) -> usize {
        self.planes.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.planes.dims()[2]
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        debug_assert!(c < 3 && y < h && x < w);
        self.planes.data()[(c * h + y) * w + x]
    }

    /// Channel plane as a slice of length H·W.
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height() * self.width();
        &self.planes.data()[c * hw..(c + 1) * hw]
    }

    /// Rec.601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        let hw = self.height() * self.width();
        let d = self.planes.data();
        (0..hw)
            .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
            .collect()
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn l1_distance(&self, other: &ImagePlane) -> Result<f64> {
        let diff = self.planes.sub(other.tensor())?;
        Ok(diff.data().iter().map(|v| v.abs()).sum::<f64>() / diff.len() as f64)
    }

    /// Bilinear resample to `new_h × new_w`.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> ImagePlane {
        ImagePlane {
            planes: resize_bilinear_planes(&self.planes, new_h, new_w)
                .map(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Extend to `new_h × new_w` by mirror reflection at the bottom/right.
    pub fn pad_reflect(&self, new_h: usize, new_w: usize) -> ImagePlane {
        ImagePlane {
            planes: pad_reflect_planes(&self.planes, new_h, new_w),
        }
    }

    /// Top-left `h × w` crop.
    pub fn crop(&self, h: usize, w: usize) -> Result<ImagePlane> {
        Ok(ImagePlane {
            planes: crop_planes(&self.planes, h, w)?,
        })
    }
}

/// H×W×1 nonnegative relative scene depth, stored `[1,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Tensor,
}

impl DepthMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.dims()[0] != 1 {
            return Err(Error::Shape(format!(
                "depth map must be [1,H,W], got {:?}",
                values.dims()
            )));
        }
        if values.data().iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Numeric(
                "depth values must be finite and nonnegative".into(),
            ));
        }
        Ok(DepthMap { values })
    }

    /// Synthetic top-to-bottom linear ramp in [0,1]; the self-contained
    /// stand-in when no estimated depth file is available.
    pub fn vertical_gradient(h: usize, w: usize) -> DepthMap {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let v = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
            data.extend(std::iter::repeat(v).take(w));
        }
        DepthMap {
            values: Tensor::from_parts(vec![1, h, w], data),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[2]
    }

    /// Depth rescaled to [0,1] by its own maximum (all-zero maps stay zero),
    /// making the network indifferent to the estimator's unit.
    pub fn normalized(&self) -> Tensor {
        let max = self.values.max_value();
        if max > 0.0 {
            self.values.scale(1.0 / max)
        } else {
            self.values.clone()
        }
    }

    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> DepthMap {
        DepthMap {
            values: resize_bilinear_planes(&self.values, new_h, new_w).map(|v| v.max(0.0)),
        }
    }

    pub fn pad_reflect(&self, new_h: usize, new_w: usize) -> DepthMap {
        DepthMap {
            values: pad_reflect_planes(&self.values, new_h, new_w),
        }
    }
}

fn pad_reflect_planes(t: &Tensor, new_h: usize, new_w: usize) -> Tensor {
    use crate::tensor::reflect_index;
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    debug_assert!(new_h >= h && new_w >= w);
    let mut out = vec![0.0; c * new_h * new_w];
    for ch in 0..c {
        for y in 0..new_h {
            let sy = reflect_index(y as i64, h);
            for x in 0..new_w {
                let sx = reflect_index(x as i64, w);
                out[(ch * new_h + y) * new_w + x] = t.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_parts(vec![c, new_h, new_w], out)
}

fn crop_planes(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    if h > th || w > tw {
        return Err(Error::Shape(format!(
            "cannot crop {th}x{tw} to {h}x{w}"
        )));
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * th + y) * tw;
            let dst = (ch * h + y) * w;
            out[dst..dst + w].copy_from_slice(&t.data()[src..src + w]);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

fn resize_bilinear_planes(t: &Tensor, new_h: usize, new_w: usize) -> Tensor {
    let c = t.dims()[0];
    let h = t.dims()[1];
    let w = t.dims()[2];
    let mut out = vec![0.0; c * new_h * new_w];
    let sy = if new_h > 1 { (h - 1) as f64 / (new_h - 1) as f64 } else { 0.0 };
    let sx = if new_w > 1 { (w - 1) as f64 / (new_w - 1) as f64 } else { 0.0 };
    for ch in 0..c {
        for y in 0..new_h {
            let fy = y as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = x as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let p = |yy: usize, xx: usize| t.data()[(ch * h + yy) * w + xx];
                let v = p(y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + p(y0, x1) * (1.0 - wy) * wx
                    + p(y1, x0) * wy * (1.0 - wx)
                    + p(y1, x1) * wy * wx;
                out[(ch * new_h + y) * new_w + x] = v;
            }
        }
    }
    Tensor::from_parts(vec![c, new_h, new_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_plane_rejects_out_of_range() {
        let t = Tensor::new(vec![3, 1, 1], vec![0.5, 1.2, 0.0]).unwrap();
        assert!(ImagePlane::new(t).is_err());
    }

    #[test]
    fn depth_rejects_negative() {
        let t = Tensor::new(vec![1, 1, 2], vec![0.5, -0.1]).unwrap();
        assert!(DepthMap::new(t).is_err());
    }

    #[test]
    fn depth_normalization_divides_by_max() {
        let t = Tensor::new(vec![1, 1, 3], vec![0.0, 2.0, 4.0]).unwrap();
        let d = DepthMap::new(t).unwrap();
        assert_eq!(d.normalized().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let img = ImagePlane::constant(4, 5, [0.2, 0.4, 0.6]).unwrap();
        let r = img.resize_bilinear(4, 5);
        assert_eq!(r, img);
    }
}
