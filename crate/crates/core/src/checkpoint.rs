//! Versioned binary model checkpoints.
//!
//! Layout: magic `UWNR`, format version (u32 LE), config fingerprint
//! (u64 LE), then length-prefixed records until EOF. Each record is
//! `name_len u32 | name | dtype u8 | rank u32 | dims u32[rank] | payload`
//! with little-endian float payloads. Dtype 0 is float32 (compact export),
//! dtype 1 is float64 (exact, used for resumable training state).
//!
//! Reserved record names: `meta/config` encodes the architecture config,
//! `opt/step` and `opt/{m,v}/<param>` carry Adam state. Everything else is
//! a `net/<param>` entry; each architecture parameter appears exactly once
//! under its canonical name.

use crate::error::{Error, Result};
use crate::network::{param_specs, NetworkConfig};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"UWNR";
pub const FORMAT_VERSION: u32 = 1;

/// Payload precision for [`ModelCheckpoint::save`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

/// Adam moments plus the global step, stored alongside parameters so a
/// resumed run continues bit-for-bit.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
}

/// Named parameter set + architecture config + optional optimizer state.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    config: NetworkConfig,
    params: Vec<(String, Tensor)>,
    opt: Option<OptimState>,
}

impl ModelCheckpoint {
    pub fn new(config: NetworkConfig, params: Vec<(String, Tensor)>) -> Self {
        ModelCheckpoint {
            config,
            params,
            opt: None,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn opt(&self) -> Option<&OptimState> {
        self.opt.as_ref()
    }

    pub fn set_opt(&mut self, opt: Option<OptimState>) {
        self.opt = opt;
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Replace all parameter values with zeros (test scaffolding for
    /// residual-identity checks).
    pub fn zero_params(&mut self) {
        for (_, t) in &mut self.params {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Hex fingerprint over config + exact f64 parameter bytes; identifies
    /// the model content independent of the file's payload dtype.
    pub fn content_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.config.fingerprint().to_le_bytes());
        for (name, t) in &self.params {
            hasher.update(name.as_bytes());
            for &v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Check the parameter list against the architecture table: every
    /// canonical name exactly once, with the right dims.
    pub fn validate(&self) -> Result<()> {
        let specs = param_specs(&self.config)?;
        if specs.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture needs {}",
                self.params.len(),
                specs.len()
            )));
        }
        for spec in &specs {
            let mut found = self.params.iter().filter(|(n, _)| *n == spec.name);
            let Some((_, t)) = found.next() else {
                return Err(Error::Format(format!("missing parameter {}", spec.name)));
            };
            if found.next().is_some() {
                return Err(Error::Format(format!("duplicate parameter {}", spec.name)));
            }
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has dims {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims
                )));
            }
        }
        if let Some(opt) = &self.opt {
            for (label, moments) in [("m", &opt.m), ("v", &opt.v)] {
                if moments.len() != self.params.len() {
                    return Err(Error::Format(format!(
                        "optimizer {label}-moments cover {} of {} parameters",
                        moments.len(),
                        self.params.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config.fingerprint().to_le_bytes());

        write_record(&mut buf, "meta/config", &config_record(&self.config), Dtype::F64);
        for (name, t) in &self.params {
            write_tensor_record(&mut buf, &format!("net/{name}"), t, dtype);
        }
        if let Some(opt) = &self.opt {
            write_record(&mut buf, "opt/step", &[opt.step as f64], Dtype::F64);
            for (name, t) in &opt.m {
                write_tensor_record(&mut buf, &format!("opt/m/{name}"), t, dtype);
            }
            for (name, t) in &opt.v {
                write_tensor_record(&mut buf, &format!("opt/v/{name}"), t, dtype);
            }
        }

        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a UWNR checkpoint".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {version}"
            )));
        }
        let header_fp = u64::from_le_bytes(r.take(8)?.try_into().unwrap());

        let mut config: Option<NetworkConfig> = None;
        let mut params: Vec<(String, Tensor)> = Vec::new();
        let mut opt_step: Option<u64> = None;
        let mut opt_m: Vec<(String, Tensor)> = Vec::new();
        let mut opt_v: Vec<(String, Tensor)> = Vec::new();

        while !r.at_end() {
            let (name, tensor) = read_record(&mut r)?;
            if name == "meta/config" {
                config = Some(parse_config_record(tensor.data())?);
            } else if name == "opt/step" {
                opt_step = Some(tensor.item()? as u64);
            } else if let Some(p) = name.strip_prefix("net/") {
                params.push((p.to_string(), tensor));
            } else if let Some(p) = name.strip_prefix("opt/m/") {
                opt_m.push((p.to_string(), tensor));
            } else if let Some(p) = name.strip_prefix("opt/v/") {
                opt_v.push((p.to_string(), tensor));
            } else {
                return Err(Error::Format(format!("unknown record {name}")));
            }
        }

        let config = config.ok_or_else(|| Error::Format("missing meta/config record".into()))?;
        if config.fingerprint() != header_fp {
            return Err(Error::Format(format!(
                "fingerprint mismatch: header {header_fp:#x} vs config {:#x}",
                config.fingerprint()
            )));
        }

        let mut ckpt = ModelCheckpoint::new(config, params);
        if let Some(step) = opt_step {
            ckpt.opt = Some(OptimState {
                step,
                m: opt_m,
                v: opt_v,
            });
        } else if !opt_m.is_empty() || !opt_v.is_empty() {
            return Err(Error::Format("optimizer moments without opt/step".into()));
        }
        ckpt.validate()?;
        Ok(ckpt)
    }
}

/// Encode a bare record container (same grammar as a model checkpoint);
/// used for auxiliary weight files like the perceptual feature extractor.
pub fn encode_container(fingerprint: u64, records: &[(String, Tensor)], dtype: Dtype) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint.to_le_bytes());
    for (name, t) in records {
        write_tensor_record(&mut buf, name, t, dtype);
    }
    buf
}

/// Decode a record container, returning the header fingerprint and the
/// raw records.
pub fn decode_container(bytes: &[u8]) -> Result<(u64, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a UWNR container".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container format version {version}"
        )));
    }
    let fp = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut records = Vec::new();
    while !r.at_end() {
        records.push(read_record(&mut r)?);
    }
    Ok((fp, records))
}

fn config_record(cfg: &NetworkConfig) -> Vec<f64> {
    vec![
        cfg.base_channels as f64,
        cfg.depth_levels as f64,
        if cfg.use_multi_branch { 1.0 } else { 0.0 },
        if cfg.use_channel_attention { 1.0 } else { 0.0 },
        if cfg.use_spatial_attention { 1.0 } else { 0.0 },
        (cfg.seed >> 32) as f64,
        (cfg.seed & 0xffff_ffff) as f64,
    ]
}

fn parse_config_record(data: &[f64]) -> Result<NetworkConfig> {
    if data.len() != 7 {
        return Err(Error::Format(format!(
            "meta/config must have 7 entries, got {}",
            data.len()
        )));
    }
    Ok(NetworkConfig {
        base_channels: data[0] as usize,
        depth_levels: data[1] as usize,
        use_multi_branch: data[2] != 0.0,
        use_channel_attention: data[3] != 0.0,
        use_spatial_attention: data[4] != 0.0,
        seed: ((data[5] as u64) << 32) | (data[6] as u64),
    })
}

fn write_record(buf: &mut Vec<u8>, name: &str, data: &[f64], dtype: Dtype) {
    write_header(buf, name, dtype, &[data.len()]);
    write_payload(buf, data, dtype);
}

fn write_tensor_record(buf: &mut Vec<u8>, name: &str, t: &Tensor, dtype: Dtype) {
    write_header(buf, name, dtype, t.dims());
    write_payload(buf, t.data(), dtype);
}

fn write_header(buf: &mut Vec<u8>, name: &str, dtype: Dtype, dims: &[usize]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype.code());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn write_payload(buf: &mut Vec<u8>, data: &[f64], dtype: Dtype) {
    match dtype {
        Dtype::F32 => {
            for &v in data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_record(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    if name_len > 4096 {
        return Err(Error::Format("unreasonable record name length".into()));
    }
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
    let dtype = match r.take(1)?[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        d => return Err(Error::Format(format!("unknown dtype code {d}"))),
    };
    let rank = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("unreasonable rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
    }
    let n: usize = dims.iter().product();
    let data = match dtype {
        Dtype::F32 => {
            let raw = r.take(4 * n)?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect::<Vec<f64>>()
        }
        Dtype::F64 => {
            let raw = r.take(8 * n)?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f64>>()
        }
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("record {name} holds non-finite values")));
    }
    Ok((name, Tensor::from_parts(dims, data)))
}
