//! Physical-model baseline renderer and the underwater dark channel
//! operator shared with the loss suite.
//!
//! The imaging model is `I = J·t + B·(1−t)` with `t = exp(−β·d)` per
//! channel. The dark channel minimizes over green and blue only — red
//! attenuates too fast underwater to carry prior information.

use crate::error::{Error, Result};
use crate::tape::{ReduceOp, Tape, Var};
use crate::tensor::Tensor;
use crate::types::{DepthMap, ImagePlane};

/// Default dark-channel window (canonical DCP patch size).
pub const DEFAULT_UDC_WINDOW: usize = 15;

/// Per-channel scattering coefficient and background light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterParams {
    pub beta: [f64; 3],
    pub background: [f64; 3],
}

impl ScatterParams {
    pub fn new(beta: [f64; 3], background: [f64; 3]) -> Result<Self> {
        if beta.iter().any(|&b| b < 0.0 || !b.is_finite()) {
            return Err(Error::Config(format!(
                "scattering coefficients must be nonnegative, got {beta:?}"
            )));
        }
        if background.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
            return Err(Error::Config(format!(
                "background light must lie in [0,1], got {background:?}"
            )));
        }
        Ok(ScatterParams { beta, background })
    }

    /// Scalar beta broadcast to all three channels.
    pub fn uniform(beta: f64, background: [f64; 3]) -> Result<Self> {
        Self::new([beta; 3], background)
    }
}

/// Per-channel transmission `t_c(x) = exp(−β_c · d(x))`, values in (0,1].
pub fn transmission_from_depth(depth: &DepthMap, beta: [f64; 3]) -> Result<Tensor> {
    if beta.iter().any(|&b| b < 0.0 || !b.is_finite()) {
        return Err(Error::Config(format!(
            "scattering coefficients must be nonnegative, got {beta:?}"
        )));
    }
    let (h, w) = (depth.height(), depth.width());
    let d = depth.tensor().data();
    let mut out = Vec::with_capacity(3 * h * w);
    for b in beta {
        out.extend(d.iter().map(|&v| (-b * v).exp()));
    }
    Ok(Tensor::from_parts(vec![3, h, w], out))
}

/// Compose the imaging model `I = J·t + B·(1−t)`, clamped to [0,1].
pub fn render_physical(
    clean: &ImagePlane,
    transmission: &Tensor,
    background: [f64; 3],
) -> Result<ImagePlane> {
    if clean.tensor().dims() != transmission.dims() {
        return Err(Error::Shape(format!(
            "clean {:?} vs transmission {:?}",
            clean.tensor().dims(),
            transmission.dims()
        )));
    }
    let (h, w) = (clean.height(), clean.width());
    let j = clean.tensor().data();
    let t = transmission.data();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let b = background[c];
        for i in 0..h * w {
            let idx = c * h * w + i;
            out[idx] = j[idx] * t[idx] + b * (1.0 - t[idx]);
        }
    }
    ImagePlane::from_clamped(Tensor::from_parts(vec![3, h, w], out))
}

/// One-call baseline: transmission from depth, then the imaging model.
pub fn render_physical_from_depth(
    clean: &ImagePlane,
    depth: &DepthMap,
    params: &ScatterParams,
) -> Result<ImagePlane> {
    if clean.height() != depth.height() || clean.width() != depth.width() {
        return Err(Error::Shape(format!(
            "clean {}x{} vs depth {}x{}",
            clean.height(),
            clean.width(),
            depth.height(),
            depth.width()
        )));
    }
    let t = transmission_from_depth(depth, params.beta)?;
    render_physical(clean, &t, params.background)
}

fn check_window(window: usize) -> Result<()> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::Config(format!(
            "dark-channel window must be odd, got {window}"
        )));
    }
    Ok(())
}

/// Underwater dark channel: min over a `window`-neighborhood of the
/// pointwise min of the green and blue channels. Borders shrink the
/// neighborhood rather than padding.
pub fn underwater_dark_channel(image: &ImagePlane, window: usize) -> Result<Tensor> {
    check_window(window)?;
    let (h, w) = (image.height(), image.width());
    let g = image.channel(1);
    let b = image.channel(2);
    let gb: Vec<f64> = g.iter().zip(b).map(|(&x, &y)| x.min(y)).collect();
    let r = (window / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut best = f64::INFINITY;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    best = best.min(gb[(yy * w as i64 + xx) as usize]);
                }
            }
            out[(y * w as i64 + x) as usize] = best;
        }
    }
    Ok(Tensor::from_parts(vec![1, h, w], out))
}

/// Differentiable underwater dark channel of a `[N,3,H,W]` tape tensor:
/// channel-min over {g,b}, then the clipped-window spatial min-pool.
pub fn udc_on_tape(tape: &mut Tape, image: Var, window: usize) -> Result<Var> {
    check_window(window)?;
    let dims = tape.dims(image);
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Shape(format!(
            "udc wants [N,3,H,W], got {dims:?}"
        )));
    }
    let gb = tape.narrow_channels(image, 1, 2)?;
    let chan_min = tape.reduce(gb, 1, ReduceOp::Min)?;
    tape.min_pool_window(chan_min, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.gen::<f64>()).collect();
        ImagePlane::new(Tensor::new(vec![3, h, w], data).unwrap()).unwrap()
    }

    fn random_depth(seed: u64, h: usize, w: usize) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| 3.0 * rng.gen::<f64>()).collect();
        DepthMap::new(Tensor::new(vec![1, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn zero_beta_gives_unit_transmission() {
        let d = random_depth(1, 4, 4);
        let t = transmission_from_depth(&d, [0.0; 3]).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ln2_beta_at_unit_depth_halves() {
        let d = DepthMap::new(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap()).unwrap();
        let t = transmission_from_depth(&d, [std::f64::consts::LN_2; 3]).unwrap();
        for &v in t.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn transmission_matches_scalar_oracle() {
        let d = random_depth(2, 4, 4);
        let beta = [0.2, 0.5, 0.9];
        let t = transmission_from_depth(&d, beta).unwrap();
        for c in 0..3 {
            for i in 0..16 {
                let expect = (-beta[c] * d.tensor().data()[i]).exp();
                let got = t.data()[c * 16 + i];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transmission_is_multiplicative_over_depth() {
        let d1 = random_depth(3, 3, 3);
        let d2 = random_depth(4, 3, 3);
        let beta = [0.3, 0.6, 1.1];
        let sum = DepthMap::new(d1.tensor().add(d2.tensor()).unwrap()).unwrap();
        let t_sum = transmission_from_depth(&sum, beta).unwrap();
        let t_prod = transmission_from_depth(&d1, beta)
            .unwrap()
            .mul(&transmission_from_depth(&d2, beta).unwrap())
            .unwrap();
        for (a, b) in t_sum.data().iter().zip(t_prod.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_beta_rejected() {
        let d = random_depth(5, 2, 2);
        assert!(matches!(
            transmission_from_depth(&d, [0.1, -0.2, 0.3]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unit_transmission_returns_clean() {
        let j = random_image(6, 5, 5);
        let t = Tensor::full(vec![3, 5, 5], 1.0);
        let i = render_physical(&j, &t, [0.2, 0.3, 0.4]).unwrap();
        assert_eq!(i.tensor().data(), j.tensor().data());
    }

    #[test]
    fn zero_transmission_returns_background() {
        let j = random_image(7, 5, 5);
        let t = Tensor::zeros(vec![3, 5, 5]);
        let bg = [0.15, 0.45, 0.75];
        let i = render_physical(&j, &t, bg).unwrap();
        for c in 0..3 {
            for &v in &i.tensor().data()[c * 25..(c + 1) * 25] {
                assert_eq!(v, bg[c]);
            }
        }
    }

    #[test]
    fn midpoint_arithmetic() {
        let j = ImagePlane::constant(2, 2, [0.8, 0.8, 0.8]).unwrap();
        let t = Tensor::full(vec![3, 2, 2], 0.5);
        let i = render_physical(&j, &t, [0.2, 0.2, 0.2]).unwrap();
        for &v in i.tensor().data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn render_is_convex_combination_per_pixel() {
        let j = random_image(8, 6, 6);
        let d = random_depth(9, 6, 6);
        let params = ScatterParams::new([0.4, 0.7, 1.0], [0.3, 0.5, 0.6]).unwrap();
        let t = transmission_from_depth(&d, params.beta).unwrap();
        let i = render_physical(&j, &t, params.background).unwrap();
        for c in 0..3 {
            for p in 0..36 {
                let jj = j.tensor().data()[c * 36 + p];
                let bb = params.background[c];
                let v = i.tensor().data()[c * 36 + p];
                assert!(v >= jj.min(bb) - 1e-12 && v <= jj.max(bb) + 1e-12);
            }
        }
    }

    #[test]
    fn udc_zero_green_is_zero() {
        let h = 4;
        let w = 4;
        let mut data = vec![0.5; 3 * h * w];
        for v in &mut data[h * w..2 * h * w] {
            *v = 0.0;
        }
        let img = ImagePlane::new(Tensor::new(vec![3, h, w], data).unwrap()).unwrap();
        let udc = underwater_dark_channel(&img, 3).unwrap();
        assert!(udc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn udc_constant_image_is_channel_min() {
        let img = ImagePlane::constant(5, 5, [0.9, 0.3, 0.7]).unwrap();
        let udc = underwater_dark_channel(&img, 15).unwrap();
        assert!(udc.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn udc_matches_brute_force_oracle() {
        let img = random_image(10, 6, 6);
        let udc = underwater_dark_channel(&img, 3).unwrap();
        // independent double-loop oracle
        for y in 0..6i64 {
            for x in 0..6i64 {
                let mut best = f64::INFINITY;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || yy >= 6 || xx < 0 || xx >= 6 {
                            continue;
                        }
                        best = best
                            .min(img.pixel(1, yy as usize, xx as usize))
                            .min(img.pixel(2, yy as usize, xx as usize));
                    }
                }
                assert_eq!(udc.data()[(y * 6 + x) as usize], best);
            }
        }
    }

    #[test]
    fn udc_rejects_even_window() {
        let img = random_image(11, 4, 4);
        assert!(matches!(
            underwater_dark_channel(&img, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn udc_is_monotone_in_gb() {
        let img = random_image(12, 5, 5);
        let udc_a = underwater_dark_channel(&img, 3).unwrap();
        let raised = img.tensor().map(|v| (v + 0.05).min(1.0));
        let img_b = ImagePlane::new(raised).unwrap();
        let udc_b = underwater_dark_channel(&img_b, 3).unwrap();
        for (a, b) in udc_a.data().iter().zip(udc_b.data()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn udc_bounded_by_pointwise_gb_min() {
        let img = random_image(13, 5, 5);
        let udc = underwater_dark_channel(&img, 5).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let local = img.pixel(1, y, x).min(img.pixel(2, y, x));
                assert!(udc.data()[y * 5 + x] <= local);
            }
        }
    }

    #[test]
    fn tape_udc_equals_eager_udc() {
        let img = random_image(14, 6, 6);
        let eager = underwater_dark_channel(&img, 3).unwrap();
        let mut tape = Tape::new();
        let batched = img
            .tensor()
            .clone()
            .reshaped(vec![1, 3, 6, 6])
            .unwrap();
        let v = tape.leaf(batched, false).unwrap();
        let udc = udc_on_tape(&mut tape, v, 3).unwrap();
        assert_eq!(tape.value(udc).data(), eager.data());
    }
}
