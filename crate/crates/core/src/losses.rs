//! The four training losses and their weighted combination: pixel
//! reconstruction (L1), perceptual distance over a frozen feature pyramid,
//! underwater dark channel consistency, and light field consistency.
//!
//! All losses are means, not sums, so the trade-off weights are
//! resolution-independent. Batched inputs are `[N,3,H,W]`; the per-image
//! definitions average cleanly over the batch because every image in a
//! batch has the same size.

use crate::checkpoint::{decode_container, encode_container, Dtype};
use crate::error::{Error, Result};
use crate::lightfield::capture_lf;
use crate::physics::udc_on_tape;
use crate::seed::derive_rng;
use crate::tape::{PadMode, Tape, Var};
use crate::tensor::Tensor;
use crate::types::ImagePlane;
use rand::Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Stage widths of the default feature pyramid (input channels first).
pub const FX_CHANNELS: [usize; 6] = [3, 16, 32, 64, 64, 64];
/// Per-stage strides; downsampling happens between consecutive stages.
pub const FX_STRIDES: [usize; 5] = [1, 2, 2, 2, 2];
/// Seed of the default frozen extractor.
pub const DEFAULT_FX_SEED: u64 = 0xfea7;

/// Trade-off weights of the overall loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub per: f64,
    pub udc: f64,
    pub lfc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            per: 1.0,
            udc: 1.0,
            lfc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.per, self.udc, self.lfc];
        if all.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got {all:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Which image the light field consistency loss blurs on the reference
/// side. The literal published form blurs the already-extracted map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LfcTarget {
    #[default]
    LightfieldMap,
    Exemplar,
}

/// Frozen convolutional pyramid standing in for a pretrained loss network.
///
/// Weights are immutable after construction. The default is seeded random
/// He-uniform; `from_container` loads externally trained weights in the
/// checkpoint record format.
pub struct FeatureExtractor {
    stages: Vec<(Tensor, Tensor)>, // (weights [F,C,3,3], bias [F])
}

impl FeatureExtractor {
    pub fn new_seeded(seed: u64) -> Self {
        let mut stages = Vec::with_capacity(FX_STRIDES.len());
        for i in 0..FX_STRIDES.len() {
            let (cin, cout) = (FX_CHANNELS[i], FX_CHANNELS[i + 1]);
            let fan_in = cin * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = derive_rng(seed, &format!("fx.stage{i}.w"), 0);
            let w: Vec<f64> = (0..cout * cin * 9)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            stages.push((
                Tensor::from_parts(vec![cout, cin, 3, 3], w),
                Tensor::zeros(vec![cout]),
            ));
        }
        FeatureExtractor { stages }
    }

    pub fn new_default() -> Self {
        Self::new_seeded(DEFAULT_FX_SEED)
    }

    /// Load stage weights from a record container (`fx/stage{i}.w` and
    /// `fx/stage{i}.b`). Stage shapes must match the pyramid layout.
    pub fn from_container(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, records) = decode_container(&bytes)?;
        let mut stages = Vec::with_capacity(FX_STRIDES.len());
        for i in 0..FX_STRIDES.len() {
            let (cin, cout) = (FX_CHANNELS[i], FX_CHANNELS[i + 1]);
            let find = |suffix: &str| {
                records
                    .iter()
                    .find(|(n, _)| n == &format!("fx/stage{i}.{suffix}"))
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format(format!("missing fx/stage{i}.{suffix}")))
            };
            let w = find("w")?;
            let b = find("b")?;
            if w.dims() != [cout, cin, 3, 3] || b.dims() != [cout] {
                return Err(Error::Format(format!(
                    "fx/stage{i} has dims {:?}/{:?}, expected [{cout},{cin},3,3]/[{cout}]",
                    w.dims(),
                    b.dims()
                )));
            }
            stages.push((w, b));
        }
        Ok(FeatureExtractor { stages })
    }

    /// Persist this extractor in the record container format.
    pub fn save_container(&self, path: &Path) -> Result<()> {
        let mut records = Vec::new();
        for (i, (w, b)) in self.stages.iter().enumerate() {
            records.push((format!("fx/stage{i}.w"), w.clone()));
            records.push((format!("fx/stage{i}.b"), b.clone()));
        }
        let fp = u64::from_str_radix(&self.fingerprint()[..16], 16)
            .unwrap_or(0);
        let bytes = encode_container(fp, &records, Dtype::F32);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Hex fingerprint over the frozen weights; labels every FID report so
    /// values from different embeddings are never compared.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (w, b) in &self.stages {
            for &v in w.data().iter().chain(b.data()) {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|x| format!("{x:02x}")).collect()
    }

    /// Feature dimension of [`Self::embed`] vectors.
    pub fn embed_dim(&self) -> usize {
        FX_CHANNELS[FX_CHANNELS.len() - 1]
    }

    /// Tap activations `phi_j(x)` for a `[N,3,H,W]` tape tensor: the
    /// ReLU output of every stage.
    pub fn taps(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let d = tape.dims(x);
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::Shape(format!(
                "feature extractor wants [N,3,H,W], got {d:?}"
            )));
        }
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (i, (w, b)) in self.stages.iter().enumerate() {
            let wv = tape.constant(w.clone())?;
            let bv = tape.constant(b.clone())?;
            let c = tape.conv2d(h, wv, FX_STRIDES[i], 1, PadMode::Zero)?;
            let c = tape.bias_add(c, bv)?;
            h = tape.relu(c)?;
            taps.push(h);
        }
        Ok(taps)
    }

    /// Global-average-pooled final stage: one `embed_dim()` vector per
    /// image, deterministic. The FID embedding.
    pub fn embed(&self, images: &[ImagePlane]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let (h, w) = (img.height(), img.width());
            let mut tape = Tape::new();
            let x = tape.constant(img.tensor().clone().reshaped(vec![1, 3, h, w])?)?;
            let taps = self.taps(&mut tape, x)?;
            let last = *taps.last().expect("pyramid has stages");
            let pooled = tape.global_avg_pool(last)?;
            out.push(tape.value(pooled).data().to_vec());
        }
        Ok(out)
    }
}

fn l1_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean_all(d)
}

/// Mean absolute error between prediction and target.
pub fn rec_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    l1_mean(tape, pred, target)
}

/// Sum over taps of the per-tap mean squared feature distance
/// (`||phi_j(a) - phi_j(b)||^2 / (C_j H_j W_j)` per image).
pub fn perceptual_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    fx: &FeatureExtractor,
) -> Result<Var> {
    if tape.dims(pred) != tape.dims(target) {
        return Err(Error::Shape(format!(
            "perceptual loss shapes {:?} vs {:?}",
            tape.dims(pred),
            tape.dims(target)
        )));
    }
    let taps_a = fx.taps(tape, pred)?;
    let taps_b = fx.taps(tape, target)?;
    let mut total: Option<Var> = None;
    for (ta, tb) in taps_a.into_iter().zip(taps_b) {
        let d = tape.sub(ta, tb)?;
        let sq = tape.mul(d, d)?;
        // mean over N*C*H*W equals the per-image 1/(C H W) norm averaged
        // over the batch
        let term = tape.mean_all(sq)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("pyramid has stages"))
}

/// Mean absolute difference of the underwater dark channels.
pub fn udc_loss(tape: &mut Tape, pred: Var, target: Var, window: usize) -> Result<Var> {
    let da = udc_on_tape(tape, pred, window)?;
    let db = udc_on_tape(tape, target, window)?;
    l1_mean(tape, da, db)
}

/// Light field consistency: mean absolute difference between the captured
/// light fields of the prediction and of the reference tensor.
pub fn lfc_loss(tape: &mut Tape, pred: Var, reference: Var, sigmas: &[f64]) -> Result<Var> {
    let lp = capture_lf(tape, pred, sigmas)?;
    let lr = capture_lf(tape, reference, sigmas)?;
    l1_mean(tape, lp, lr)
}

/// Everything `total_loss` needs besides the tensors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub udc_window: usize,
    pub sigmas: Vec<f64>,
    pub lfc_target: LfcTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            udc_window: crate::physics::DEFAULT_UDC_WINDOW,
            sigmas: crate::lightfield::DEFAULT_SIGMAS.to_vec(),
            lfc_target: LfcTarget::default(),
        }
    }
}

/// Scalar total plus the raw per-term values for logging. Terms whose
/// weight is zero are skipped entirely and reported as `None`.
pub struct TotalLoss {
    pub total: Var,
    pub rec: Option<f64>,
    pub per: Option<f64>,
    pub udc: Option<f64>,
    pub lfc: Option<f64>,
}

impl TotalLoss {
    pub fn value(&self, tape: &Tape) -> f64 {
        tape.value(self.total).data()[0]
    }
}

/// Weighted combination of the enabled losses.
///
/// `lf_map` is the extracted light field map of the target exemplar;
/// with `LfcTarget::Exemplar` the consistency reference is `target`
/// itself instead.
pub fn total_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    lf_map: Var,
    cfg: &LossConfig,
    fx: &FeatureExtractor,
) -> Result<TotalLoss> {
    cfg.weights.validate()?;
    let mut total: Option<Var> = None;
    let mut add_term = |tape: &mut Tape, term: Var, weight: f64| -> Result<f64> {
        let raw = tape.value(term).data()[0];
        let weighted = tape.scale(term, weight)?;
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
        Ok(raw)
    };

    let w = cfg.weights;
    let rec = if w.rec > 0.0 {
        let t = rec_loss(tape, pred, target)?;
        Some(add_term(tape, t, w.rec)?)
    } else {
        None
    };
    let per = if w.per > 0.0 {
        let t = perceptual_loss(tape, pred, target, fx)?;
        Some(add_term(tape, t, w.per)?)
    } else {
        None
    };
    let udc = if w.udc > 0.0 {
        let t = udc_loss(tape, pred, target, cfg.udc_window)?;
        Some(add_term(tape, t, w.udc)?)
    } else {
        None
    };
    let lfc = if w.lfc > 0.0 {
        let reference = match cfg.lfc_target {
            LfcTarget::LightfieldMap => lf_map,
            LfcTarget::Exemplar => target,
        };
        let t = lfc_loss(tape, pred, reference, &cfg.sigmas)?;
        Some(add_term(tape, t, w.lfc)?)
    } else {
        None
    };

    Ok(TotalLoss {
        total: total.expect("weights validated nonzero"),
        rec,
        per,
        udc,
        lfc,
    })
}

fn image_pair_on_tape(a: &ImagePlane, b: &ImagePlane) -> Result<(Tape, Var, Var)> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::Shape(format!(
            "image pair dims {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    let (h, w) = (a.height(), a.width());
    let mut tape = Tape::new();
    let va = tape.constant(a.tensor().clone().reshaped(vec![1, 3, h, w])?)?;
    let vb = tape.constant(b.tensor().clone().reshaped(vec![1, 3, h, w])?)?;
    Ok((tape, va, vb))
}

/// Image-level value of the reconstruction loss.
pub fn rec_loss_value(pred: &ImagePlane, target: &ImagePlane) -> Result<f64> {
    let (mut tape, a, b) = image_pair_on_tape(pred, target)?;
    let l = rec_loss(&mut tape, a, b)?;
    tape.value(l).item()
}

/// Image-level value of the perceptual loss.
pub fn perceptual_loss_value(
    pred: &ImagePlane,
    target: &ImagePlane,
    fx: &FeatureExtractor,
) -> Result<f64> {
    let (mut tape, a, b) = image_pair_on_tape(pred, target)?;
    let l = perceptual_loss(&mut tape, a, b, fx)?;
    tape.value(l).item()
}

/// Image-level value of the underwater dark channel loss.
pub fn udc_loss_value(pred: &ImagePlane, target: &ImagePlane, window: usize) -> Result<f64> {
    let (mut tape, a, b) = image_pair_on_tape(pred, target)?;
    let l = udc_loss(&mut tape, a, b, window)?;
    tape.value(l).item()
}

/// Image-level value of the light field consistency loss.
pub fn lfc_loss_value(pred: &ImagePlane, reference: &ImagePlane, sigmas: &[f64]) -> Result<f64> {
    let (mut tape, a, b) = image_pair_on_tape(pred, reference)?;
    let l = lfc_loss(&mut tape, a, b, sigmas)?;
    tape.value(l).item()
}
