//! Dataset plumbing: image and depth file I/O, the line-delimited JSON
//! manifest, light-field sidecars, augmentation and patch sampling.

use crate::error::{Error, Result};
use crate::lightfield::LightFieldMap;
use crate::tensor::Tensor;
use crate::types::{DepthMap, ImagePlane};
use rand::Rng;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Paired training sample: underwater exemplar, clean reference, depth.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub underwater: ImagePlane,
    pub reference: ImagePlane,
    pub depth: DepthMap,
    pub id: String,
}

impl DatasetPair {
    pub fn new(
        underwater: ImagePlane,
        reference: ImagePlane,
        depth: DepthMap,
        id: String,
    ) -> Result<Self> {
        let (h, w) = (underwater.height(), underwater.width());
        if reference.height() != h
            || reference.width() != w
            || depth.height() != h
            || depth.width() != w
        {
            return Err(Error::Shape(format!(
                "pair {id}: planes disagree (uw {h}x{w}, ref {}x{}, depth {}x{})",
                reference.height(),
                reference.width(),
                depth.height(),
                depth.width()
            )));
        }
        Ok(DatasetPair {
            underwater,
            reference,
            depth,
            id,
        })
    }

    pub fn height(&self) -> usize {
        self.underwater.height()
    }

    pub fn width(&self) -> usize {
        self.underwater.width()
    }
}

// ---------------------------------------------------------------------------
// image files

fn to_unit(v: u16, max: f64) -> f64 {
    f64::from(v) / max
}

/// Load an 8- or 16-bit PNG/PPM as a `[0,1]` RGB image plane; grayscale
/// inputs are replicated to three channels.
pub fn load_image(path: &Path) -> Result<ImagePlane> {
    let dyn_img = image::open(path).map_err(|e| Error::io(path, e))?;
    let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
    let rgb = dyn_img.into_rgb16();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = to_unit(px.0[c], 65535.0);
        }
    }
    ImagePlane::new(Tensor::new(vec![3, h, w], data)?)
        .map_err(|e| Error::io(path, format!("invalid image content: {e}")))
}

/// Save an image plane as an 8-bit file; format chosen by extension
/// (`.png` or `.ppm`).
pub fn save_image(img: &ImagePlane, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.pixel(0, y, x) * 255.0).round() as u8,
                (img.pixel(1, y, x) * 255.0).round() as u8,
                (img.pixel(2, y, x) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::io(path, e))
}

/// Load a depth file: luma of the image, kept in its stored scale.
pub fn load_depth(path: &Path) -> Result<DepthMap> {
    let dyn_img = image::open(path).map_err(|e| Error::io(path, e))?;
    let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
    let gray = dyn_img.into_luma16();
    let data: Vec<f64> = gray.pixels().map(|p| to_unit(p.0[0], 65535.0)).collect();
    DepthMap::new(Tensor::new(vec![1, h, w], data)?)
        .map_err(|e| Error::io(path, format!("invalid depth content: {e}")))
}

// ---------------------------------------------------------------------------
// light-field sidecar (lossless float copy of a quantized map image)

const LF_MAGIC: &[u8; 4] = b"UWLF";
const LF_VERSION: u32 = 1;

/// Write the float sidecar of a light field map.
pub fn save_lf_sidecar(lf: &LightFieldMap, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(LF_MAGIC);
    buf.extend_from_slice(&LF_VERSION.to_le_bytes());
    let id = lf.source_id().as_bytes();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(lf.sigmas().len() as u32).to_le_bytes());
    for &s in lf.sigmas() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.extend_from_slice(&(lf.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(lf.width() as u32).to_le_bytes());
    for &v in lf.planes().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a light field sidecar written by [`save_lf_sidecar`].
pub fn load_lf_sidecar(path: &Path) -> Result<LightFieldMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format(format!("truncated sidecar {}", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != LF_MAGIC {
        return Err(Error::Format("not a UWLF sidecar".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != LF_VERSION {
        return Err(Error::Format(format!("unsupported sidecar version {version}")));
    }
    let id_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
        .map_err(|_| Error::Format("sidecar id is not UTF-8".into()))?;
    let n_sigmas = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut sigmas = Vec::with_capacity(n_sigmas);
    for _ in 0..n_sigmas {
        sigmas.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    let h = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let raw = take(&mut pos, 3 * h * w * 4)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    LightFieldMap::new(Tensor::new(vec![3, h, w], data)?, id, sigmas)
}

// ---------------------------------------------------------------------------
// manifest

/// One line of a manifest file. Paths are relative to the manifest's
/// directory unless absolute. `depth` may be omitted; loaders then fall
/// back to the synthetic vertical gradient. `checksums` optionally maps
/// `uw`/`ref`/`depth` to hex SHA-256 digests, verified when the files
/// are loaded.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub uw: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksums: Option<std::collections::BTreeMap<String, String>>,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone)]
pub struct Manifest {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: PathBuf, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.clone()) {
                return Err(Error::Format(format!("duplicate manifest id {}", r.id)));
            }
        }
        Ok(Manifest { root, records })
    }

    /// Parse a JSONL manifest and verify every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut records = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(rec);
        }
        let m = Manifest::new(root, records)?;
        for r in &m.records {
            for p in [Some(&r.uw), Some(&r.reference), r.depth.as_ref()]
                .into_iter()
                .flatten()
            {
                let full = m.resolve(p);
                if !full.exists() {
                    return Err(Error::Io {
                        path: full,
                        msg: format!("referenced by manifest record {}", r.id),
                    });
                }
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::Format(format!("serialize record {}: {e}", r.id)))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            self.root.join(pb)
        }
    }

    fn verify_checksum(&self, record: &ManifestRecord, key: &str, rel: &str) -> Result<()> {
        let Some(map) = &record.checksums else {
            return Ok(());
        };
        let Some(expected) = map.get(key) else {
            return Ok(());
        };
        use sha2::{Digest, Sha256};
        let path = self.resolve(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let got: String = Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        if &got != expected {
            return Err(Error::Format(format!(
                "checksum mismatch for {key} of record {}: {got} != {expected}",
                record.id
            )));
        }
        Ok(())
    }

    /// Load the images behind a record, verifying any declared checksums.
    /// A missing depth entry synthesizes the vertical-gradient fallback at
    /// the reference's size.
    pub fn load_pair(&self, record: &ManifestRecord) -> Result<DatasetPair> {
        self.verify_checksum(record, "uw", &record.uw)?;
        self.verify_checksum(record, "ref", &record.reference)?;
        let uw = load_image(&self.resolve(&record.uw))?;
        let reference = load_image(&self.resolve(&record.reference))?;
        let depth = match &record.depth {
            Some(p) => {
                self.verify_checksum(record, "depth", p)?;
                load_depth(&self.resolve(p))?
            }
            None => DepthMap::vertical_gradient(reference.height(), reference.width()),
        };
        DatasetPair::new(uw, reference, depth, record.id.clone())
    }
}

/// Scan the directory convention `uw/`, `ref/`, `depth/` under `root` and
/// build a manifest from matching file stems (depth optional per file).
pub fn scan_convention(root: &Path) -> Result<Manifest> {
    let uw_dir = root.join("uw");
    let ref_dir = root.join("ref");
    let depth_dir = root.join("depth");
    if !uw_dir.is_dir() || !ref_dir.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            msg: "expected uw/ and ref/ subdirectories".into(),
        });
    }
    let mut stems: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&uw_dir).map_err(|e| Error::io(&uw_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&uw_dir, e))?;
        let path = entry.path();
        if path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push((stem.to_string(), path.clone()));
            }
        }
    }
    stems.sort_by(|a, b| a.0.cmp(&b.0));

    let find_match = |dir: &Path, stem: &str| -> Option<PathBuf> {
        for ext in ["png", "ppm", "pgm"] {
            let p = dir.join(format!("{stem}.{ext}"));
            if p.exists() {
                return Some(p);
            }
        }
        None
    };

    let rel = |p: &Path| -> String {
        p.strip_prefix(root)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };

    let mut records = Vec::new();
    for (stem, uw_path) in stems {
        let Some(ref_path) = find_match(&ref_dir, &stem) else {
            continue;
        };
        let depth_path = find_match(&depth_dir, &stem);
        records.push(ManifestRecord {
            id: stem,
            uw: rel(&uw_path),
            reference: rel(&ref_path),
            depth: depth_path.as_deref().map(rel),
            split: default_split(),
            checksums: None,
        });
    }
    if records.is_empty() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            msg: "no uw/ref stem pairs found".into(),
        });
    }
    Manifest::new(root.to_path_buf(), records)
}

// ---------------------------------------------------------------------------
// augmentation and patching

fn rot90_cw(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let mut out = vec![0.0; t.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                // (y, x) -> (x, h-1-y)
                out[(ci * w + x) * h + (h - 1 - y)] = t.data()[(ci * h + y) * w + x];
            }
        }
    }
    Tensor::from_parts(vec![c, w, h], out)
}

fn hflip(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let mut out = vec![0.0; t.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + (w - 1 - x)] = t.data()[(ci * h + y) * w + x];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

fn transform_plane(t: &Tensor, quarter_turns: u8, flip: bool) -> Tensor {
    let mut out = t.clone();
    for _ in 0..quarter_turns % 4 {
        out = rot90_cw(&out);
    }
    if flip {
        out = hflip(&out);
    }
    out
}

/// Apply a fixed rotation (quarter turns clockwise) and optional
/// horizontal flip identically to all three planes.
pub fn apply_augment(pair: &DatasetPair, quarter_turns: u8, flip: bool) -> DatasetPair {
    let uw = ImagePlane::new(transform_plane(pair.underwater.tensor(), quarter_turns, flip))
        .expect("pixel permutation preserves range");
    let reference = ImagePlane::new(transform_plane(pair.reference.tensor(), quarter_turns, flip))
        .expect("pixel permutation preserves range");
    let depth = DepthMap::new(transform_plane(pair.depth.tensor(), quarter_turns, flip))
        .expect("pixel permutation preserves range");
    DatasetPair {
        underwater: uw,
        reference,
        depth,
        id: pair.id.clone(),
    }
}

/// Random augmentation: a uniform rotation from {0, 90, 180, 270} degrees
/// and an independent 50% horizontal flip.
pub fn augment(pair: &DatasetPair, rng: &mut impl Rng) -> DatasetPair {
    let quarter_turns = rng.gen_range(0u8..4);
    let flip = rng.gen_bool(0.5);
    apply_augment(pair, quarter_turns, flip)
}

/// What to do when an image is smaller than the requested patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchFallback {
    #[default]
    Reject,
    Resize,
}

fn crop_plane(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    debug_assert!(y0 + size <= h && x0 + size <= w);
    let mut out = vec![0.0; c * size * size];
    for ci in 0..c {
        for y in 0..size {
            let src = (ci * h + y0 + y) * w + x0;
            let dst = (ci * size + y) * size;
            out[dst..dst + size].copy_from_slice(&t.data()[src..src + size]);
        }
    }
    Tensor::from_parts(vec![c, size, size], out)
}

/// Crop the same `size`x`size` window, uniform over valid offsets, from
/// all three planes.
pub fn sample_patch(
    pair: &DatasetPair,
    size: usize,
    rng: &mut impl Rng,
    fallback: PatchFallback,
) -> Result<DatasetPair> {
    let (h, w) = (pair.height(), pair.width());
    if h < size || w < size {
        return match fallback {
            PatchFallback::Reject => Err(Error::Shape(format!(
                "pair {} is {h}x{w}, smaller than patch {size}",
                pair.id
            ))),
            PatchFallback::Resize => {
                let resized = DatasetPair {
                    underwater: pair.underwater.resize_bilinear(size, size),
                    reference: pair.reference.resize_bilinear(size, size),
                    depth: pair.depth.resize_bilinear(size, size),
                    id: pair.id.clone(),
                };
                Ok(resized)
            }
        };
    }
    let y0 = rng.gen_range(0..=(h - size));
    let x0 = rng.gen_range(0..=(w - size));
    Ok(DatasetPair {
        underwater: ImagePlane::new(crop_plane(pair.underwater.tensor(), y0, x0, size))
            .expect("crop preserves range"),
        reference: ImagePlane::new(crop_plane(pair.reference.tensor(), y0, x0, size))
            .expect("crop preserves range"),
        depth: DepthMap::new(crop_plane(pair.depth.tensor(), y0, x0, size))
            .expect("crop preserves range"),
        id: pair.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64, h: usize, w: usize) -> DatasetPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            let data = (0..3 * h * w).map(|_| rng.gen::<f64>()).collect();
            ImagePlane::new(Tensor::new(vec![3, h, w], data).unwrap()).unwrap()
        };
        let uw = mk(&mut rng);
        let reference = mk(&mut rng);
        let ddata = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let depth = DepthMap::new(Tensor::new(vec![1, h, w], ddata).unwrap()).unwrap();
        DatasetPair::new(uw, reference, depth, format!("pair{seed}")).unwrap()
    }

    #[test]
    fn image_roundtrip_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_pair(1, 9, 11).underwater;
        let path = dir.path().join("img.png");
        save_image(&img, &path).unwrap();
        let loaded = load_image(&path).unwrap();
        let max_diff = img
            .tensor()
            .data()
            .iter()
            .zip(loaded.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1.0 / (2.0 * 255.0), "max diff {max_diff}");
    }

    #[test]
    fn eight_bit_codes_map_by_max_code_division() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.png");
        let mut buf = image::RgbImage::new(2, 1);
        buf.put_pixel(0, 0, image::Rgb([255, 255, 255]));
        buf.put_pixel(1, 0, image::Rgb([128, 128, 128]));
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(0, 0, 0), 1.0);
        assert!((img.pixel(0, 0, 1) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn grayscale_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let mut buf = image::GrayImage::new(2, 2);
        buf.put_pixel(0, 0, image::Luma([100]));
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(0, 0, 0), img.pixel(1, 0, 0));
        assert_eq!(img.pixel(1, 0, 0), img.pixel(2, 0, 0));
    }

    #[test]
    fn missing_file_error_carries_path() {
        let err = load_image(Path::new("/nope/missing.png")).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
    }

    #[test]
    fn sidecar_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_pair(2, 8, 8).underwater;
        let lf = crate::lightfield::extract_light_field(&img, "src-42", &[1.0, 2.0], 1e-6).unwrap();
        let path = dir.path().join("map.uwlf");
        save_lf_sidecar(&lf, &path).unwrap();
        let loaded = load_lf_sidecar(&path).unwrap();
        assert_eq!(loaded.source_id(), "src-42");
        assert_eq!(loaded.sigmas(), lf.sigmas());
        for (a, b) in lf.planes().data().iter().zip(loaded.planes().data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn augment_identity_and_involution() {
        let pair = random_pair(3, 6, 8);
        let same = apply_augment(&pair, 0, false);
        assert_eq!(same.underwater.tensor().data(), pair.underwater.tensor().data());
        let twice = apply_augment(&apply_augment(&pair, 2, false), 2, false);
        assert_eq!(twice.underwater.tensor().data(), pair.underwater.tensor().data());
        assert_eq!(twice.depth.tensor().data(), pair.depth.tensor().data());
    }

    #[test]
    fn augment_preserves_value_multiset_and_range() {
        let pair = random_pair(4, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let aug = augment(&pair, &mut rng);
        let mut a: Vec<u64> = pair
            .underwater
            .tensor()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let mut b: Vec<u64> = aug
            .underwater
            .tensor()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b, "augmentation is a pure pixel permutation");
    }

    #[test]
    fn augment_moves_all_planes_identically() {
        // mark the same probe positions in every plane, transform, and
        // check the marks land together
        let h = 6;
        let w = 6;
        let probes = [(0usize, 0usize), (0, 5), (3, 2), (5, 4)];
        let mut uw = vec![0.25; 3 * h * w];
        let mut rf = vec![0.5; 3 * h * w];
        let mut dp = vec![0.75; h * w];
        for (k, (y, x)) in probes.iter().enumerate() {
            let mark = 0.9 + k as f64 * 0.02;
            for c in 0..3 {
                uw[(c * h + y) * w + x] = mark;
                rf[(c * h + y) * w + x] = mark;
            }
            dp[y * w + x] = mark;
        }
        let pair = DatasetPair::new(
            ImagePlane::new(Tensor::new(vec![3, h, w], uw).unwrap()).unwrap(),
            ImagePlane::new(Tensor::new(vec![3, h, w], rf).unwrap()).unwrap(),
            DepthMap::new(Tensor::new(vec![1, h, w], dp).unwrap()).unwrap(),
            "probe".into(),
        )
        .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let aug = augment(&pair, &mut rng);
        for k in 0..probes.len() {
            let mark = 0.9 + k as f64 * 0.02;
            let find = |data: &[f64]| {
                data.iter()
                    .position(|v| (v - mark).abs() < 1e-12)
                    .expect("mark present")
            };
            let pos_uw = find(aug.underwater.channel(0));
            let pos_rf = find(aug.reference.channel(0));
            let pos_dp = find(aug.depth.tensor().data());
            assert_eq!(pos_uw, pos_rf);
            assert_eq!(pos_uw, pos_dp);
        }
    }

    #[test]
    fn full_size_patch_is_the_image() {
        let pair = random_pair(5, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = sample_patch(&pair, 8, &mut rng, PatchFallback::Reject).unwrap();
        assert_eq!(p.underwater.tensor().data(), pair.underwater.tensor().data());
    }

    #[test]
    fn patch_offsets_are_uniform() {
        let size = 8;
        let pair = random_pair(6, 2 * size, 2 * size);
        let bins = size + 1; // offsets 0..=size
        let mut counts = vec![0usize; bins];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trials = 10_000;
        for _ in 0..trials {
            let y0 = rng.gen_range(0..=(2 * size - size));
            counts[y0] += 1;
        }
        let p = 1.0 / bins as f64;
        let expect = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "offset {i} count {c} outside 3 sigma of {expect}"
            );
        }
    }

    #[test]
    fn patch_planes_stay_aligned() {
        let pair = random_pair(7, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = sample_patch(&pair, 8, &mut rng, PatchFallback::Reject).unwrap();
        // locate the patch corner in the source by value and confirm all
        // planes cropped the same window
        let corner = p.underwater.pixel(0, 0, 0);
        let mut found = None;
        for y in 0..9 {
            for x in 0..9 {
                if pair.underwater.pixel(0, y, x) == corner {
                    found = Some((y, x));
                }
            }
        }
        let (y0, x0) = found.expect("corner located");
        assert_eq!(p.reference.pixel(0, 0, 0), pair.reference.pixel(0, y0, x0));
        assert_eq!(
            p.depth.tensor().data()[0],
            pair.depth.tensor().data()[y0 * 16 + x0]
        );
    }

    #[test]
    fn small_image_rejected_or_resized_per_config() {
        let pair = random_pair(8, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        assert!(sample_patch(&pair, 8, &mut rng, PatchFallback::Reject).is_err());
        let resized = sample_patch(&pair, 8, &mut rng, PatchFallback::Resize).unwrap();
        assert_eq!(resized.height(), 8);
        assert_eq!(resized.width(), 8);
    }

    #[test]
    fn manifest_roundtrip_is_order_stable() {
        let dir = tempfile::tempdir().unwrap();
        // create backing files
        let img = random_pair(9, 4, 4);
        for name in ["a.png", "b.png", "c.png"] {
            save_image(&img.underwater, &dir.path().join(name)).unwrap();
        }
        let records = vec![
            ManifestRecord {
                id: "z-last".into(),
                uw: "a.png".into(),
                reference: "b.png".into(),
                depth: None,
                split: "train".into(),
                checksums: None,
            },
            ManifestRecord {
                id: "a-first".into(),
                uw: "c.png".into(),
                reference: "a.png".into(),
                depth: Some("b.png".into()),
                split: "val".into(),
                checksums: None,
            },
        ];
        let m = Manifest::new(dir.path().to_path_buf(), records).unwrap();
        let path = dir.path().join("set.jsonl");
        m.write(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        let ids: Vec<&str> = loaded.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["z-last", "a-first"]);
    }

    #[test]
    fn checksums_verified_when_present() {
        use sha2::{Digest, Sha256};
        let dir = tempfile::tempdir().unwrap();
        let pair = random_pair(20, 4, 4);
        save_image(&pair.underwater, &dir.path().join("uw.png")).unwrap();
        save_image(&pair.reference, &dir.path().join("ref.png")).unwrap();
        let digest_of = |name: &str| -> String {
            Sha256::digest(std::fs::read(dir.path().join(name)).unwrap())
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect()
        };
        let mut rec = ManifestRecord {
            id: "x".into(),
            uw: "uw.png".into(),
            reference: "ref.png".into(),
            depth: None,
            split: "train".into(),
            checksums: Some(
                [("uw".to_string(), digest_of("uw.png"))]
                    .into_iter()
                    .collect(),
            ),
        };
        let m = Manifest::new(dir.path().to_path_buf(), vec![rec.clone()]).unwrap();
        assert!(m.load_pair(&rec).is_ok());

        rec.checksums = Some(
            [("uw".to_string(), "deadbeef".to_string())]
                .into_iter()
                .collect(),
        );
        let err = m.load_pair(&rec).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"));
    }

    #[test]
    fn manifest_rejects_duplicates_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |id: &str| ManifestRecord {
            id: id.into(),
            uw: "missing.png".into(),
            reference: "missing.png".into(),
            depth: None,
            split: "train".into(),
            checksums: None,
        };
        assert!(Manifest::new(dir.path().to_path_buf(), vec![rec("x"), rec("x")]).is_err());

        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"x\",\"uw\":\"missing.png\",\"ref\":\"missing.png\"}\n",
        )
        .unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
    }
}
