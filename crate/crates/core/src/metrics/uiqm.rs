//! UIQM: the underwater image quality measure combining colorfulness
//! (UICM), sharpness (UISM) and contrast (UIConM), following the original
//! published definition (Panetta, Gao & Agaian 2016), computed directly on
//! `[0,1]` floats.
//!
//! * UICM: asymmetric alpha-trimmed mean (alpha 0.1 each side) and
//!   variance of the RG and YB opponent channels.
//! * UISM: per-channel Sobel magnitude weighting the channel itself, then
//!   block EME `(2/(k1 k2)) sum ln(max/min)` with Rec.601 channel weights.
//! * UIConM: block logAMEE `-(1/(k1 k2)) sum (t/b) ln(t/b)` over the whole
//!   RGB block with `t = max - min`, `b = max + min`.
//!
//! Blocks are `window x window`; trailing rows/columns that do not fill a
//! block are ignored. Blocks with a zero extremum contribute zero.

use crate::tensor::reflect_index;
use crate::types::ImagePlane;

/// UIQM linear combination weights from the original publication.
pub const C1_UICM: f64 = 0.0282;
pub const C2_UISM: f64 = 0.2953;
pub const C3_UICONM: f64 = 3.5753;

/// Trim fraction per tail of the alpha-trimmed mean.
pub const ALPHA_TRIM: f64 = 0.1;

/// Default block size for the EME/logAMEE statistics.
pub const DEFAULT_BLOCK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UiqmScores {
    pub uiqm: f64,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

/// UIQM with the default block size.
pub fn uiqm(img: &ImagePlane) -> UiqmScores {
    uiqm_with_window(img, DEFAULT_BLOCK)
}

pub fn uiqm_with_window(img: &ImagePlane, window: usize) -> UiqmScores {
    let uicm = uicm(img);
    let uism = uism(img, window);
    let uiconm = uiconm(img, window);
    UiqmScores {
        uiqm: C1_UICM * uicm + C2_UISM * uism + C3_UICONM * uiconm,
        uicm,
        uism,
        uiconm,
    }
}

fn trimmed_mean_and_var(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t = (ALPHA_TRIM * n as f64).ceil() as usize;
    let lo = t.min(n);
    let hi = n.saturating_sub(t).max(lo);
    let kept = &sorted[lo..hi];
    let mean = if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    // variance over the full channel relative to the trimmed mean
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

fn uicm(img: &ImagePlane) -> f64 {
    let hw = img.height() * img.width();
    let r = img.channel(0);
    let g = img.channel(1);
    let b = img.channel(2);
    let rg: Vec<f64> = (0..hw).map(|i| r[i] - g[i]).collect();
    let yb: Vec<f64> = (0..hw).map(|i| (r[i] + g[i]) / 2.0 - b[i]).collect();
    let (mu_rg, var_rg) = trimmed_mean_and_var(&rg);
    let (mu_yb, var_yb) = trimmed_mean_and_var(&yb);
    -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (var_rg + var_yb).sqrt()
}

/// Sobel gradient magnitude with reflect borders.
fn sobel_magnitude(chan: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let px = |y: i64, x: i64| chan[reflect_index(y, h) * w + reflect_index(x, w)];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1)
                - px(y - 1, x + 1)
                - 2.0 * px(y, x + 1)
                - px(y + 1, x + 1);
            let gy = px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1)
                - px(y + 1, x - 1)
                - 2.0 * px(y + 1, x)
                - px(y + 1, x + 1);
            out[(y * w as i64 + x) as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Block EME of one plane: `(2/(k1 k2)) sum ln(max/min)`.
fn eme(plane: &[f64], h: usize, w: usize, window: usize) -> f64 {
    let k2 = h / window;
    let k1 = w / window;
    if k1 == 0 || k2 == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in by * window..(by + 1) * window {
                for x in bx * window..(bx + 1) * window {
                    let v = plane[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if lo > 0.0 && hi > 0.0 {
                acc += (hi / lo).ln();
            }
        }
    }
    2.0 / (k1 as f64 * k2 as f64) * acc
}

fn uism(img: &ImagePlane, window: usize) -> f64 {
    let (h, w) = (img.height(), img.width());
    let lambdas = [0.299, 0.587, 0.114];
    let mut total = 0.0;
    for c in 0..3 {
        let chan = img.channel(c);
        let sob = sobel_magnitude(chan, h, w);
        let weighted: Vec<f64> = sob.iter().zip(chan).map(|(s, v)| s * v).collect();
        total += lambdas[c] * eme(&weighted, h, w, window);
    }
    total
}

fn uiconm(img: &ImagePlane, window: usize) -> f64 {
    let (h, w) = (img.height(), img.width());
    let k2 = h / window;
    let k1 = w / window;
    if k1 == 0 || k2 == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for c in 0..3 {
                let chan = img.channel(c);
                for y in by * window..(by + 1) * window {
                    for x in bx * window..(bx + 1) * window {
                        let v = chan[y * w + x];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let top = hi - lo;
            let bot = hi + lo;
            if top > 0.0 && bot > 0.0 {
                let ratio = top / bot;
                acc += ratio * ratio.ln();
            }
        }
    }
    -acc / (k1 as f64 * k2 as f64)
}
