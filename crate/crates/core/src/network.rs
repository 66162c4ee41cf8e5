//! MHB-Unet generator: an encoder-decoder whose blocks fuse 1x1/3x3
//! convolution branches with residual connections, channel attention and
//! spatial attention, mapping a 7-channel stack (clean RGB, normalized
//! depth, light field RGB) to a rendered underwater RGB image.
//!
//! Canonical architecture (widths for `base_channels = B`, `depth_levels = L`):
//!
//! | stage        | op                                            | width out |
//! |--------------|-----------------------------------------------|-----------|
//! | stem         | conv3x3(7 -> B), ReLU                         | B         |
//! | enc i (0..L) | MHB(B*2^i); conv3x3 stride2 (x2 width), ReLU  | B*2^(i+1) |
//! | bottleneck   | MHB(B*2^L)                                    | B*2^L     |
//! | dec i (L..0) | up2x + conv3x3 (-> B*2^i), ReLU; concat skip i; MHB(2*B*2^i) | 2*B*2^i |
//! | head         | conv3x3(2B -> 3), sigmoid                     | 3         |
//!
//! MHB(C): branches relu(conv1x1), relu(conv3x3), relu(conv3x3(relu(conv1x1)));
//! channel concat, conv1x1 fuse back to C; channel attention (GAP, 1x1 reduce
//! by 4, ReLU, 1x1 expand, sigmoid gate); spatial attention (channel mean+max,
//! conv7x7, sigmoid gate); residual add of the block input.
//!
//! Every conv counts `C_out*C_in*kH*kW` weights plus `C_out` biases, which
//! gives the closed-form parameter count pinned in the tests.

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::lightfield::LightFieldMap;
use crate::seed::derive_rng;
use crate::tape::{PadMode, ReduceOp, Tape, Var};
use crate::tensor::Tensor;
use crate::types::{DepthMap, ImagePlane};
use rand::Rng;
use std::collections::HashMap;

/// Clean RGB + depth + light field RGB.
pub const INPUT_CHANNELS: usize = 7;
pub const OUTPUT_CHANNELS: usize = 3;
/// Channel attention bottleneck ratio.
pub const CA_REDUCTION: usize = 4;
/// Spatial attention kernel size; spatial dims below this are rejected.
pub const SA_KERNEL: usize = 7;

/// Scale and ablation switches of the generator. Part of the checkpoint
/// fingerprint: the architecture flags change the parameter set.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub depth_levels: usize,
    pub seed: u64,
    pub use_multi_branch: bool,
    pub use_channel_attention: bool,
    pub use_spatial_attention: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            depth_levels: 3,
            seed: 0,
            use_multi_branch: true,
            use_channel_attention: true,
            use_spatial_attention: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if self.depth_levels < 1 {
            return Err(Error::Config(format!(
                "depth_levels must be >= 1, got {}",
                self.depth_levels
            )));
        }
        Ok(())
    }

    /// Smallest H (or W) a valid input may have, accounting for the
    /// downsampling factor and the spatial-attention kernel at the
    /// bottleneck.
    pub fn min_side(&self) -> usize {
        let factor = 1usize << self.depth_levels;
        if self.use_spatial_attention {
            factor * SA_KERNEL
        } else {
            factor
        }
    }

    /// Round `side` up to the nearest size accepted by `validate_input_dims`.
    pub fn padded_side(&self, side: usize) -> usize {
        let factor = 1usize << self.depth_levels;
        let mut s = side.div_ceil(factor) * factor;
        if s < self.min_side() {
            s = self.min_side();
        }
        s
    }

    pub fn validate_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << self.depth_levels;
        if h % factor != 0 || w % factor != 0 || h < self.min_side() || w < self.min_side() {
            return Err(Error::Shape(format!(
                "input {h}x{w} not renderable at {} levels: needs sides divisible by {factor} \
                 and >= {}; pad to {}x{} (the CLI flag --pad does this and crops back)",
                self.depth_levels,
                self.min_side(),
                self.padded_side(h),
                self.padded_side(w),
            )));
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint over everything that defines the
    /// parameter set (the init seed is excluded: two models with the same
    /// architecture are interchangeable at load time).
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let s = format!(
            "uwnr-v1:base={};levels={};in={};out={};mb={};ca={};sa={}",
            self.base_channels,
            self.depth_levels,
            INPUT_CHANNELS,
            OUTPUT_CHANNELS,
            self.use_multi_branch,
            self.use_channel_attention,
            self.use_spatial_attention
        );
        let digest = Sha256::digest(s.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// One named parameter slot of the architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, f: usize, c: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        dims: vec![f, c, k, k],
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        dims: vec![f],
    });
}

fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, cfg: &NetworkConfig) {
    if cfg.use_multi_branch {
        conv_specs(out, &format!("{prefix}.b1"), c, c, 1);
        conv_specs(out, &format!("{prefix}.b2"), c, c, 3);
        conv_specs(out, &format!("{prefix}.b3a"), c, c, 1);
        conv_specs(out, &format!("{prefix}.b3b"), c, c, 3);
        out.push(ParamSpec {
            name: format!("{prefix}.fuse.w"),
            dims: vec![c, 3 * c, 1, 1],
        });
        out.push(ParamSpec {
            name: format!("{prefix}.fuse.b"),
            dims: vec![c],
        });
    } else {
        conv_specs(out, &format!("{prefix}.single"), c, c, 3);
    }
    if cfg.use_channel_attention {
        let red = (c / CA_REDUCTION).max(1);
        conv_specs(out, &format!("{prefix}.ca.fc1"), red, c, 1);
        conv_specs(out, &format!("{prefix}.ca.fc2"), c, red, 1);
    }
    if cfg.use_spatial_attention {
        conv_specs(out, &format!("{prefix}.sa.conv"), 1, 2, SA_KERNEL);
    }
}

/// The architecture table: every parameter, in canonical order.
pub fn param_specs(cfg: &NetworkConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let l = cfg.depth_levels;
    let mut out = Vec::new();
    conv_specs(&mut out, "stem.conv", b, INPUT_CHANNELS, 3);
    for i in 0..l {
        let w = b << i;
        block_specs(&mut out, &format!("enc{i}.block"), w, cfg);
        conv_specs(&mut out, &format!("enc{i}.down"), 2 * w, w, 3);
    }
    block_specs(&mut out, "bottleneck.block", b << l, cfg);
    let mut width = b << l;
    for i in (0..l).rev() {
        let skip = b << i;
        conv_specs(&mut out, &format!("dec{i}.up"), skip, width, 3);
        block_specs(&mut out, &format!("dec{i}.block"), 2 * skip, cfg);
        width = 2 * skip;
    }
    conv_specs(&mut out, "head.conv", OUTPUT_CHANNELS, width, 3);
    Ok(out)
}

/// Total parameter count for a config.
pub fn param_count(cfg: &NetworkConfig) -> Result<usize> {
    Ok(param_specs(cfg)?
        .iter()
        .map(|s| s.dims.iter().product::<usize>())
        .sum())
}

/// He-uniform fan-in initialization: kernels uniform in
/// `±sqrt(6/fan_in)`, biases zero. Each parameter draws from its own
/// seed-derived stream, so the values depend only on `(seed, name)`.
pub fn init_params(cfg: &NetworkConfig) -> Result<ModelCheckpoint> {
    let specs = param_specs(cfg)?;
    let mut params = Vec::with_capacity(specs.len());
    for spec in &specs {
        let n: usize = spec.dims.iter().product();
        let data = if spec.name.ends_with(".b") {
            vec![0.0; n]
        } else {
            // fan_in = C_in * kH * kW
            let fan_in: usize = spec.dims[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = derive_rng(cfg.seed, &spec.name, 0);
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        params.push((spec.name.clone(), Tensor::from_parts(spec.dims.clone(), data)));
    }
    Ok(ModelCheckpoint::new(cfg.clone(), params))
}

/// Checkpoint parameters registered on a tape, addressable by name.
pub struct TapeParams {
    map: HashMap<String, Var>,
}

impl TapeParams {
    /// Register every parameter of `ckpt` on the tape.
    pub fn bind(tape: &mut Tape, ckpt: &ModelCheckpoint, requires_grad: bool) -> Result<Self> {
        let mut map = HashMap::new();
        for (name, tensor) in ckpt.params() {
            let var = tape.leaf(tensor.clone(), requires_grad)?;
            map.insert(name.clone(), var);
        }
        Ok(TapeParams { map })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }
}

fn conv(
    tape: &mut Tape,
    p: &TapeParams,
    prefix: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, stride, padding, PadMode::Zero)?;
    tape.bias_add(y, b)
}

/// Channel attention: GAP, 1x1 reduce, ReLU, 1x1 expand, sigmoid gate in
/// `(0,1)^C`, broadcast multiply.
pub fn channel_attention(
    tape: &mut Tape,
    p: &TapeParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let c = tape.dims(x)[1];
    if c < CA_REDUCTION {
        return Err(Error::Config(format!(
            "channel attention needs C >= {CA_REDUCTION}, got {c}"
        )));
    }
    let pooled = tape.global_avg_pool(x)?;
    let h = conv(tape, p, &format!("{prefix}.fc1"), pooled, 1, 0)?;
    let h = tape.relu(h)?;
    let h = conv(tape, p, &format!("{prefix}.fc2"), h, 1, 0)?;
    let gate = tape.sigmoid(h)?;
    tape.mul_broadcast(x, gate)
}

/// Spatial attention: channel mean and max maps, 7x7 conv, sigmoid gate
/// over positions, broadcast multiply.
pub fn spatial_attention(
    tape: &mut Tape,
    p: &TapeParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let d = tape.dims(x);
    if d[2] < SA_KERNEL || d[3] < SA_KERNEL {
        return Err(Error::Config(format!(
            "spatial attention needs H,W >= {SA_KERNEL}, got {}x{}",
            d[2], d[3]
        )));
    }
    let mean_map = tape.reduce(x, 1, ReduceOp::Mean)?;
    let max_map = tape.reduce(x, 1, ReduceOp::Max)?;
    let stacked = tape.concat_channels(&[mean_map, max_map])?;
    let h = conv(tape, p, &format!("{prefix}.conv"), stacked, 1, SA_KERNEL / 2)?;
    let gate = tape.sigmoid(h)?;
    tape.mul_broadcast(x, gate)
}

/// Multi-branch hybrid block: parallel 1x1 / 3x3 / 1x1-then-3x3 branches,
/// concat + 1x1 fuse, channel then spatial attention, residual add.
pub fn mhb_block(
    tape: &mut Tape,
    p: &TapeParams,
    prefix: &str,
    cfg: &NetworkConfig,
    x: Var,
) -> Result<Var> {
    let fused = if cfg.use_multi_branch {
        let b1 = conv(tape, p, &format!("{prefix}.b1"), x, 1, 0)?;
        let b1 = tape.relu(b1)?;
        let b2 = conv(tape, p, &format!("{prefix}.b2"), x, 1, 1)?;
        let b2 = tape.relu(b2)?;
        let b3 = conv(tape, p, &format!("{prefix}.b3a"), x, 1, 0)?;
        let b3 = tape.relu(b3)?;
        let b3 = conv(tape, p, &format!("{prefix}.b3b"), b3, 1, 1)?;
        let b3 = tape.relu(b3)?;
        let cat = tape.concat_channels(&[b1, b2, b3])?;
        conv(tape, p, &format!("{prefix}.fuse"), cat, 1, 0)?
    } else {
        let s = conv(tape, p, &format!("{prefix}.single"), x, 1, 1)?;
        tape.relu(s)?
    };
    let attended = if cfg.use_channel_attention {
        channel_attention(tape, p, &format!("{prefix}.ca"), fused)?
    } else {
        fused
    };
    let attended = if cfg.use_spatial_attention {
        spatial_attention(tape, p, &format!("{prefix}.sa"), attended)?
    } else {
        attended
    };
    tape.add(x, attended)
}

/// Full generator forward on a tape over a `[N,7,H,W]` input.
pub fn unet_forward_tape(
    tape: &mut Tape,
    p: &TapeParams,
    cfg: &NetworkConfig,
    input: Var,
) -> Result<Var> {
    let d = tape.dims(input).to_vec();
    if d.len() != 4 || d[1] != INPUT_CHANNELS {
        return Err(Error::Shape(format!(
            "generator input must be [N,{INPUT_CHANNELS},H,W], got {d:?}"
        )));
    }
    cfg.validate_input_dims(d[2], d[3])?;

    let mut x = conv(tape, p, "stem.conv", input, 1, 1)?;
    x = tape.relu(x)?;

    let mut skips = Vec::with_capacity(cfg.depth_levels);
    for i in 0..cfg.depth_levels {
        x = mhb_block(tape, p, &format!("enc{i}.block"), cfg, x)?;
        skips.push(x);
        x = conv(tape, p, &format!("enc{i}.down"), x, 2, 1)?;
        x = tape.relu(x)?;
    }

    x = mhb_block(tape, p, "bottleneck.block", cfg, x)?;

    for i in (0..cfg.depth_levels).rev() {
        x = tape.upsample2x(x)?;
        x = conv(tape, p, &format!("dec{i}.up"), x, 1, 1)?;
        x = tape.relu(x)?;
        x = tape.concat_channels(&[skips[i], x])?;
        x = mhb_block(tape, p, &format!("dec{i}.block"), cfg, x)?;
    }

    let head = conv(tape, p, "head.conv", x, 1, 1)?;
    tape.sigmoid(head)
}

/// Stack (clean, normalized depth, light field) into one `[1,7,H,W]` input.
pub fn stack_input(
    clean: &ImagePlane,
    depth: &DepthMap,
    lf: &LightFieldMap,
) -> Result<Tensor> {
    let (h, w) = (clean.height(), clean.width());
    if depth.height() != h || depth.width() != w || lf.height() != h || lf.width() != w {
        return Err(Error::Shape(format!(
            "input planes disagree: clean {h}x{w}, depth {}x{}, light field {}x{}",
            depth.height(),
            depth.width(),
            lf.height(),
            lf.width()
        )));
    }
    let mut data = Vec::with_capacity(INPUT_CHANNELS * h * w);
    data.extend_from_slice(clean.tensor().data());
    data.extend_from_slice(depth.normalized().data());
    data.extend_from_slice(lf.planes().data());
    Ok(Tensor::from_parts(vec![1, INPUT_CHANNELS, h, w], data))
}

/// Image-level forward: stack inputs, run the generator under the
/// checkpoint's parameters, return the rendered image.
pub fn unet_forward(
    clean: &ImagePlane,
    depth: &DepthMap,
    lf: &LightFieldMap,
    ckpt: &ModelCheckpoint,
) -> Result<ImagePlane> {
    let cfg = ckpt.config();
    let input = stack_input(clean, depth, lf)?;
    let mut tape = Tape::new();
    let params = TapeParams::bind(&mut tape, ckpt, false)?;
    let x = tape.constant(input)?;
    let out = unet_forward_tape(&mut tape, &params, cfg, x)?;
    let (h, w) = (clean.height(), clean.width());
    let t = tape.value(out).clone().reshaped(vec![3, h, w])?;
    ImagePlane::new(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            depth_levels: 1,
            seed: 9,
            ..NetworkConfig::default()
        }
    }

    fn rand_tensor(rng: &mut impl Rng, dims: Vec<usize>) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_parts(dims, (0..n).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn init_respects_he_uniform_bound() {
        let cfg = tiny_cfg();
        let ckpt = init_params(&cfg).unwrap();
        for (name, t) in ckpt.params() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let fan_in: usize = t.dims()[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                assert!(
                    t.data().iter().all(|&v| v.abs() <= bound),
                    "{name} exceeds He bound"
                );
            }
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // Closed form from the architecture table, written out by hand.
        let conv = |f: usize, c: usize, k: usize| f * c * k * k + f;
        let mhb = |c: usize| {
            conv(c, c, 1)            // b1
                + conv(c, c, 3)      // b2
                + conv(c, c, 1)      // b3a
                + conv(c, c, 3)      // b3b
                + conv(c, 3 * c, 1)  // fuse
                + conv(c / 4, c, 1)  // ca.fc1
                + conv(c, c / 4, 1)  // ca.fc2
                + conv(1, 2, 7)      // sa.conv
        };
        // base 16, 3 levels
        let expected = conv(16, 7, 3)
            + mhb(16) + conv(32, 16, 3)
            + mhb(32) + conv(64, 32, 3)
            + mhb(64) + conv(128, 64, 3)
            + mhb(128)
            + conv(64, 128, 3) + mhb(128)
            + conv(32, 128, 3) + mhb(64)
            + conv(16, 64, 3) + mhb(32)
            + conv(3, 32, 3);
        let cfg = NetworkConfig {
            base_channels: 16,
            depth_levels: 3,
            seed: 0,
            ..NetworkConfig::default()
        };
        assert_eq!(param_count(&cfg).unwrap(), expected);
        assert_eq!(expected, 1_239_100);
    }

    #[test]
    fn fingerprint_tracks_architecture_not_seed() {
        let a = NetworkConfig { seed: 1, ..tiny_cfg() };
        let b = NetworkConfig { seed: 2, ..tiny_cfg() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = NetworkConfig {
            use_spatial_attention: false,
            ..tiny_cfg()
        };
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn mhb_block_preserves_shape() {
        let cfg = tiny_cfg();
        let ckpt = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = TapeParams::bind(&mut tape, &ckpt, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.leaf(rand_tensor(&mut rng, vec![2, 4, 8, 8]), false).unwrap();
        let y = mhb_block(&mut tape, &p, "enc0.block", &cfg, x).unwrap();
        assert_eq!(tape.dims(y), &[2, 4, 8, 8]);
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let cfg = tiny_cfg();
        let mut ckpt = init_params(&cfg).unwrap();
        ckpt.zero_params();
        let mut tape = Tape::new();
        let p = TapeParams::bind(&mut tape, &ckpt, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = tape.leaf(rand_tensor(&mut rng, vec![1, 4, 8, 8]), false).unwrap();
        let y = mhb_block(&mut tape, &p, "enc0.block", &cfg, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn zero_weight_channel_attention_halves() {
        let cfg = tiny_cfg();
        let mut ckpt = init_params(&cfg).unwrap();
        ckpt.zero_params();
        let mut tape = Tape::new();
        let p = TapeParams::bind(&mut tape, &ckpt, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x_t = rand_tensor(&mut rng, vec![1, 4, 8, 8]);
        let x = tape.leaf(x_t.clone(), false).unwrap();
        let y = channel_attention(&mut tape, &p, "enc0.block.ca", x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x_t.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_attention_gate_is_spatial_permutation_invariant() {
        let cfg = tiny_cfg();
        let ckpt = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x_t = rand_tensor(&mut rng, vec![1, 4, 8, 8]);

        // permute spatial positions identically in every channel
        let mut perm: Vec<usize> = (0..64).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut permuted = vec![0.0; x_t.len()];
        for c in 0..4 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted[c * 64 + dst] = x_t.data()[c * 64 + src];
            }
        }
        let x_p = Tensor::from_parts(vec![1, 4, 8, 8], permuted);

        // gate == attended / input wherever input != 0
        let gate_of = |input: Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let p = TapeParams::bind(&mut tape, &ckpt, false).unwrap();
            let x = tape.leaf(input.clone(), false).unwrap();
            let y = channel_attention(&mut tape, &p, "enc0.block.ca", x).unwrap();
            (0..4)
                .map(|c| tape.value(y).data()[c * 64] / input.data()[c * 64])
                .collect()
        };
        let ga = gate_of(x_t);
        let gb = gate_of(x_p);
        for (a, b) in ga.iter().zip(&gb) {
            assert!((a - b).abs() < 1e-12, "gate changed under permutation");
        }
    }

    #[test]
    fn channel_attention_rejects_too_few_channels() {
        let cfg = tiny_cfg();
        let ckpt = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = TapeParams::bind(&mut tape, &ckpt, false).unwrap();
        let x = tape.leaf(Tensor::full(vec![1, 2, 8, 8], 0.5), false).unwrap();
        assert!(matches!(
            channel_attention(&mut tape, &p, "enc0.block.ca", x),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn spatial_attention_rejects_small_maps() {
        let cfg = tiny_cfg();
        let ckpt = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = TapeParams::bind(&mut tape, &ckpt, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = tape.leaf(rand_tensor(&mut rng, vec![1, 4, 6, 6]), false).unwrap();
        assert!(matches!(
            spatial_attention(&mut tape, &p, "enc0.block.sa", x),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_gates_stay_in_unit_interval() {
        // gates are sigmoid outputs; check via the attended/input ratio
        let cfg = tiny_cfg();
        let ckpt = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = TapeParams::bind(&mut tape, &ckpt, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x_t = rand_tensor(&mut rng, vec![1, 4, 8, 8]).map(|v| v + 0.1);
        let x = tape.leaf(x_t.clone(), false).unwrap();
        let y = spatial_attention(&mut tape, &p, "enc0.block.sa", x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x_t.data()) {
            let ratio = a / b;
            assert!(ratio > 0.0 && ratio < 1.0, "gate {ratio} outside (0,1)");
        }
    }

    #[test]
    fn channel_constant_input_has_equal_mean_and_max_maps() {
        let mut tape = Tape::new();
        let x_t = Tensor::full(vec![1, 4, 8, 8], 0.37);
        let x = tape.leaf(x_t, false).unwrap();
        let mean = tape.reduce(x, 1, ReduceOp::Mean).unwrap();
        let max = tape.reduce(x, 1, ReduceOp::Max).unwrap();
        assert_eq!(tape.value(mean).data(), tape.value(max).data());
    }

    #[test]
    fn forward_shape_and_range() {
        let cfg = NetworkConfig {
            base_channels: 4,
            depth_levels: 1,
            seed: 3,
            ..NetworkConfig::default()
        };
        let ckpt = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clean = ImagePlane::new(rand_tensor(&mut rng, vec![3, 16, 16]).map(|v| v.clamp(0.0, 1.0))).unwrap();
        let depth = DepthMap::vertical_gradient(16, 16);
        let lf = LightFieldMap::new(
            rand_tensor(&mut rng, vec![3, 16, 16]).map(|v| v.clamp(0.0, 1.0)),
            "t".into(),
            vec![1.0],
        )
        .unwrap();
        let out = unet_forward(&clean, &depth, &lf, &ckpt).unwrap();
        assert_eq!(out.tensor().dims(), &[3, 16, 16]);
        assert!(out.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_rejects_indivisible_dims_with_hint() {
        let cfg = NetworkConfig {
            base_channels: 4,
            depth_levels: 2,
            seed: 3,
            ..NetworkConfig::default()
        };
        let ckpt = init_params(&cfg).unwrap();
        let clean = ImagePlane::constant(30, 30, [0.5, 0.5, 0.5]).unwrap();
        let depth = DepthMap::vertical_gradient(30, 30);
        let lf = LightFieldMap::new(Tensor::full(vec![3, 30, 30], 0.5), "t".into(), vec![1.0]).unwrap();
        let err = unet_forward(&clean, &depth, &lf, &ckpt).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pad"), "hint missing from: {msg}");
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let ckpt = init_params(&cfg).unwrap();
        let clean = ImagePlane::constant(16, 16, [0.3, 0.5, 0.7]).unwrap();
        let depth = DepthMap::vertical_gradient(16, 16);
        let lf = LightFieldMap::new(Tensor::full(vec![3, 16, 16], 0.4), "t".into(), vec![1.0]).unwrap();
        let a = unet_forward(&clean, &depth, &lf, &ckpt).unwrap();
        let b = unet_forward(&clean, &depth, &lf, &ckpt).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
    }
}
