//! Optimization loop: Adam with bias correction, constant-then-linear
//! learning rate decay, per-batch light field extraction, checkpointing
//! and ablation switches.
//!
//! Every random decision is a pure function of `(seed, epoch, position)`,
//! so a run resumed from a state checkpoint continues bit-for-bit where
//! the original would have gone.

use crate::checkpoint::{Dtype, ModelCheckpoint, OptimState};
use crate::data::{augment, sample_patch, DatasetPair, Manifest, PatchFallback};
use crate::error::{Error, Result};
use crate::lightfield::extract_light_field;
use crate::losses::{total_loss, FeatureExtractor, LfcTarget, LossConfig, LossWeights};
use crate::network::{init_params, stack_input, unet_forward_tape, NetworkConfig, TapeParams};
use crate::physics::underwater_dark_channel;
use crate::seed::derive_rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::types::ImagePlane;
use rand::seq::SliceRandom;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Ablation switches mirroring the w/o rows of the evaluation tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub disable_rec: bool,
    pub disable_per: bool,
    pub disable_udc: bool,
    pub disable_lfc: bool,
    pub disable_sa: bool,
    pub disable_ca: bool,
    pub disable_mhc: bool,
    pub replace_lfr_with_dcp: bool,
}

/// Full training recipe. Serialized as the JSON config file consumed by
/// `train`; every field has a default so partial configs stay valid.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_start: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub network: NetworkConfig,
    pub udc_window: usize,
    pub sigmas: Vec<f64>,
    pub lfc_target: LfcTarget,
    pub patch_fallback: PatchFallback,
    /// Extra state checkpoints every this many steps (0 = final only).
    pub checkpoint_every_steps: usize,
    /// Stop after this many optimizer steps while keeping the full
    /// schedule; for staged/resumed runs.
    pub max_steps: Option<usize>,
    /// Global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
    /// Seed of the frozen perceptual extractor.
    pub fx_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr0: 2e-4,
            decay_start: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            patch_size: 256,
            loss_weights: LossWeights::default(),
            seed: 0,
            ablation: AblationFlags::default(),
            network: NetworkConfig::default(),
            udc_window: crate::physics::DEFAULT_UDC_WINDOW,
            sigmas: crate::lightfield::DEFAULT_SIGMAS.to_vec(),
            lfc_target: LfcTarget::default(),
            patch_fallback: PatchFallback::default(),
            checkpoint_every_steps: 0,
            max_steps: None,
            grad_clip: None,
            fx_seed: crate::losses::DEFAULT_FX_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_start == 0 || self.decay_start > self.epochs {
            return Err(Error::Config(format!(
                "decay_start {} must satisfy 0 < decay_start <= epochs {}",
                self.decay_start, self.epochs
            )));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} must be in [0,1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("batch and patch sizes must be positive".into()));
        }
        self.network.validate()?;
        self.effective_weights()?.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loss weights with the ablation flags applied.
    pub fn effective_weights(&self) -> Result<LossWeights> {
        let mut w = self.loss_weights;
        if self.ablation.disable_rec {
            w.rec = 0.0;
        }
        if self.ablation.disable_per {
            w.per = 0.0;
        }
        if self.ablation.disable_udc {
            w.udc = 0.0;
        }
        if self.ablation.disable_lfc {
            w.lfc = 0.0;
        }
        Ok(w)
    }

    /// Network config with the architecture ablations applied.
    pub fn effective_network(&self) -> NetworkConfig {
        let mut n = self.network.clone();
        if self.ablation.disable_sa {
            n.use_spatial_attention = false;
        }
        if self.ablation.disable_ca {
            n.use_channel_attention = false;
        }
        if self.ablation.disable_mhc {
            n.use_multi_branch = false;
        }
        n
    }

    fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            weights: self.effective_weights()?,
            udc_window: self.udc_window,
            sigmas: self.sigmas.clone(),
            lfc_target: self.lfc_target,
        })
    }

    /// Names of the loss terms that will appear in the log.
    pub fn enabled_terms(&self) -> Vec<&'static str> {
        let w = self.effective_weights().unwrap_or(self.loss_weights);
        let mut out = Vec::new();
        if w.rec > 0.0 {
            out.push("rec");
        }
        if w.per > 0.0 {
            out.push("per");
        }
        if w.udc > 0.0 {
            out.push("udc");
        }
        if w.lfc > 0.0 {
            out.push("lfc");
        }
        out
    }
}

/// Learning rate at `epoch`: constant `lr0` before `decay_start`, then
/// linear to zero at `epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} out of range 0..{}",
            cfg.epochs
        )));
    }
    if epoch < cfg.decay_start {
        Ok(cfg.lr0)
    } else {
        Ok(cfg.lr0 * (cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.decay_start) as f64)
    }
}

/// Adam first/second moments aligned with the parameter list.
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[(String, Tensor)]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.dims().to_vec())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.dims().to_vec())).collect(),
        }
    }

    fn from_opt(opt: &OptimState, params: &[(String, Tensor)]) -> Result<Self> {
        let pick = |set: &[(String, Tensor)], name: &str| -> Result<Tensor> {
            set.iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint missing moment for {name}")))
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, _) in params {
            m.push(pick(&opt.m, name)?);
            v.push(pick(&opt.v, name)?);
        }
        Ok(AdamState { step: opt.step, m, v })
    }

    fn to_opt(&self, params: &[(String, Tensor)]) -> OptimState {
        OptimState {
            step: self.step,
            m: params
                .iter()
                .zip(&self.m)
                .map(|((n, _), t)| (n.clone(), t.clone()))
                .collect(),
            v: params
                .iter()
                .zip(&self.v)
                .map(|((n, _), t)| (n.clone(), t.clone()))
                .collect(),
        }
    }
}

/// One bias-corrected Adam update. `grads[i] = None` means a zero
/// gradient (the moments still decay). A non-finite gradient aborts,
/// naming the parameter.
pub fn adam_step(
    params: &mut [(String, Tensor)],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam_step got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, _), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} for parameter {name}"
                )));
            }
        }
    }

    // optional global-norm clip
    let scale = match cfg.grad_clip {
        Some(c) => {
            let norm_sq: f64 = grads
                .iter()
                .flatten()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum();
            let norm = norm_sq.sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    let t = state.step + 1;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);

    for i in 0..params.len() {
        let zeros;
        let g: &Tensor = match &grads[i] {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(params[i].1.dims().to_vec());
                &zeros
            }
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = &mut params[i].1;
        for j in 0..p.len() {
            let gj = g.data()[j] * scale;
            let mj = b1 * m.data()[j] + (1.0 - b1) * gj;
            let vj = b2 * v.data()[j] + (1.0 - b2) * (gj * gj);
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            p.data_mut()[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// DCP-style background light of an exemplar: the mean RGB over the
/// top 0.1% brightest dark-channel positions, as a constant map. The
/// ablation substitute for the extracted light field.
pub fn dcp_background_map(exemplar: &ImagePlane, window: usize) -> Result<Tensor> {
    let dc = underwater_dark_channel(exemplar, window)?;
    let hw = dc.len();
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&a, &b| dc.data()[b].partial_cmp(&dc.data()[a]).unwrap());
    let take = ((hw as f64 * 0.001).ceil() as usize).max(1);
    let mut rgb = [0.0; 3];
    for &i in &order[..take] {
        for (c, chan) in rgb.iter_mut().enumerate() {
            *chan += exemplar.channel(c)[i];
        }
    }
    let (h, w) = (exemplar.height(), exemplar.width());
    let mut data = Vec::with_capacity(3 * hw);
    for chan in rgb {
        data.extend(std::iter::repeat(chan / take as f64).take(hw));
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Per-step record of the loss log.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub rec: Option<f64>,
    pub per: Option<f64>,
    pub udc: Option<f64>,
    pub lfc: Option<f64>,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<StepLog>,
    /// f32 export checkpoint for rendering.
    pub final_path: PathBuf,
    /// f64 state checkpoint (parameters + moments) for exact resume.
    pub state_path: PathBuf,
    pub log_path: PathBuf,
}

fn concat_batch(parts: &[Tensor]) -> Tensor {
    let inner = &parts[0].dims()[1..];
    let mut dims = vec![parts.len()];
    dims.extend_from_slice(inner);
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_parts(dims, data)
}

fn write_log(path: &Path, terms: &[&str], log: &[StepLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = String::from("epoch,step,lr,total");
    for t in terms {
        header.push(',');
        header.push_str(t);
    }
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for row in log {
        let mut line = format!("{},{},{},{}", row.epoch, row.step, row.lr, row.total);
        for t in terms {
            let v = match *t {
                "rec" => row.rec,
                "per" => row.per,
                "udc" => row.udc,
                "lfc" => row.lfc,
                _ => None,
            };
            line.push(',');
            if let Some(v) = v {
                line.push_str(&v.to_string());
            }
        }
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_run_metadata(path: &Path, cfg: &TrainConfig, net: &NetworkConfig) -> Result<()> {
    let config_json = serde_json::to_string(cfg)
        .map_err(|e| Error::Format(format!("serialize config: {e}")))?;
    let config_hash = {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(config_json.as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    let meta = serde_json::json!({
        "seed": cfg.seed,
        "config_hash": config_hash,
        "code_version": env!("CARGO_PKG_VERSION"),
        "network_fingerprint": format!("{:016x}", net.fingerprint()),
        "enabled_terms": cfg.enabled_terms(),
        "spatial_attention": net.use_spatial_attention,
        "channel_attention": net.use_channel_attention,
        "multi_branch": net.use_multi_branch,
        "lf_source": if cfg.ablation.replace_lfr_with_dcp { "dcp" } else { "lightfield" },
        "config": serde_json::from_str::<serde_json::Value>(&config_json).unwrap(),
    });
    std::fs::write(path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(path, e))
}

/// Run the training loop over `manifest`'s train split, writing
/// checkpoints, a CSV loss log and a run-metadata record into `out_dir`.
/// `resume` continues from a state checkpoint's step counter.
pub fn train(
    manifest: &Manifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&ModelCheckpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::Contract("manifest is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let records: Vec<_> = manifest
        .records()
        .iter()
        .filter(|r| r.split == "train")
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Error::Contract("manifest has no train-split records".into()));
    }

    let net_cfg = cfg.effective_network();
    let loss_cfg = cfg.loss_config()?;
    let fx = FeatureExtractor::new_seeded(cfg.fx_seed);

    let (mut params, mut adam) = match resume {
        Some(ckpt) => {
            if ckpt.config() != &net_cfg {
                return Err(Error::Config(
                    "resume checkpoint architecture differs from the configured one".into(),
                ));
            }
            let params = ckpt.params().to_vec();
            let adam = match ckpt.opt() {
                Some(opt) => AdamState::from_opt(opt, &params)?,
                None => AdamState::zeros_like(&params),
            };
            (params, adam)
        }
        None => {
            let ckpt = init_params(&net_cfg)?;
            let adam = AdamState::zeros_like(ckpt.params());
            (ckpt.params().to_vec(), adam)
        }
    };

    let n = records.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let stop_at = cfg
        .max_steps
        .map(|m| (m as u64).min(total_steps))
        .unwrap_or(total_steps);

    let final_path = out_dir.join("final.uwnr");
    let state_path = out_dir.join("state.uwnr");
    let log_path = out_dir.join("loss_log.csv");
    write_run_metadata(&out_dir.join("run_meta.json"), cfg, &net_cfg)?;

    let save_state = |params: &[(String, Tensor)], adam: &AdamState| -> Result<()> {
        let mut ckpt = ModelCheckpoint::new(net_cfg.clone(), params.to_vec());
        ckpt.set_opt(Some(adam.to_opt(params)));
        ckpt.save(&state_path, Dtype::F64)
    };

    let mut log: Vec<StepLog> = Vec::new();
    let terms = cfg.enabled_terms();
    let mut global_step = adam.step;

    'outer: while global_step < stop_at {
        let epoch = (global_step / steps_per_epoch as u64) as usize;
        let lr = lr_at(epoch, cfg)?;

        // epoch ordering is derived, not carried, so resume replays it
        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = derive_rng(cfg.seed, "epoch-order", epoch as u64);
        order.shuffle(&mut order_rng);

        let first_in_epoch = (global_step % steps_per_epoch as u64) as usize;
        for step_in_epoch in first_in_epoch..steps_per_epoch {
            let lo = step_in_epoch * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(n);

            let mut inputs = Vec::with_capacity(hi - lo);
            let mut targets = Vec::with_capacity(hi - lo);
            let mut lf_maps = Vec::with_capacity(hi - lo);
            for (slot, &rec_idx) in order[lo..hi].iter().enumerate() {
                let rec = &records[rec_idx];
                let pair = manifest
                    .load_pair(rec)
                    .map_err(|e| Error::Io {
                        path: PathBuf::from(&rec.uw),
                        msg: format!("loading record {}: {e}", rec.id),
                    })?;
                let sample_idx = epoch as u64 * n as u64 + (lo + slot) as u64;
                let mut rng = derive_rng(cfg.seed, "sample", sample_idx);
                let pair = augment(&pair, &mut rng);
                let pair: DatasetPair =
                    sample_patch(&pair, cfg.patch_size, &mut rng, cfg.patch_fallback)?;

                let lf_tensor = if cfg.ablation.replace_lfr_with_dcp {
                    dcp_background_map(&pair.underwater, cfg.udc_window)?
                } else {
                    extract_light_field(
                        &pair.underwater,
                        &pair.id,
                        &cfg.sigmas,
                        crate::lightfield::DEFAULT_LOG_EPSILON,
                    )?
                    .planes()
                    .clone()
                };
                let lf_map = crate::lightfield::LightFieldMap::new(
                    lf_tensor,
                    pair.id.clone(),
                    cfg.sigmas.clone(),
                )?;

                inputs.push(stack_input(&pair.reference, &pair.depth, &lf_map)?);
                let ps = cfg.patch_size;
                targets.push(pair.underwater.tensor().clone().reshaped(vec![1, 3, ps, ps])?);
                lf_maps.push(lf_map.planes().clone().reshaped(vec![1, 3, ps, ps])?);
            }

            let mut tape = Tape::new();
            let in_memory = ModelCheckpoint::new(net_cfg.clone(), params.clone());
            let bound = TapeParams::bind(&mut tape, &in_memory, true)?;
            let x = tape.constant(concat_batch(&inputs))?;
            let target = tape.constant(concat_batch(&targets))?;
            let lf_map = tape.constant(concat_batch(&lf_maps))?;

            // divergence anywhere in the step keeps the last good state
            // checkpoint on disk and reports where it is
            let diverged = |e: Error| {
                Error::Numeric(format!(
                    "aborting at step {global_step}: {e}; last good checkpoint: {}",
                    state_path.display()
                ))
            };
            let pred = unet_forward_tape(&mut tape, &bound, &net_cfg, x).map_err(diverged)?;
            let tl =
                total_loss(&mut tape, pred, target, lf_map, &loss_cfg, &fx).map_err(diverged)?;
            let total_value = tl.value(&tape);
            tape.backward(tl.total).map_err(diverged)?;

            let grads: Vec<Option<Tensor>> = params
                .iter()
                .map(|(name, _)| {
                    bound
                        .get(name)
                        .ok()
                        .and_then(|v| tape.grad(v).cloned())
                })
                .collect();
            adam_step(&mut params, &grads, &mut adam, lr, cfg)?;
            global_step = adam.step;

            log.push(StepLog {
                epoch,
                step: global_step,
                lr,
                total: total_value,
                rec: tl.rec,
                per: tl.per,
                udc: tl.udc,
                lfc: tl.lfc,
            });

            if cfg.checkpoint_every_steps > 0
                && global_step % cfg.checkpoint_every_steps as u64 == 0
            {
                save_state(&params, &adam)?;
            }
            if global_step >= stop_at {
                break 'outer;
            }
        }
    }

    save_state(&params, &adam)?;
    let export = ModelCheckpoint::new(net_cfg.clone(), params.clone());
    export.save(&final_path, Dtype::F32)?;
    write_log(&log_path, &terms, &log)?;

    let mut checkpoint = ModelCheckpoint::new(net_cfg, params);
    checkpoint.set_opt(Some(adam.to_opt(checkpoint.params())));
    Ok(TrainOutcome {
        checkpoint,
        log,
        final_path,
        state_path,
        log_path,
    })
}
