//! `synth-dataset`: pair clean images with exemplar light fields and
//! render an underwater dataset with provenance, resumably.

use crate::render_with_exemplar;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use uwnr_core::checkpoint::ModelCheckpoint;
use uwnr_core::data::{load_image, save_image, ManifestRecord};
use uwnr_core::seed::{derive_rng, hash_str};
use uwnr_core::types::DepthMap;
use uwnr_core::{Error, Result};
use rand::Rng;

/// How clean images pick their exemplar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingPolicy {
    /// Seed-derived per record id; stable across reruns and resumes.
    Random,
    /// Record index modulo pool size.
    RoundRobin,
    /// Every record uses the first (or `--exemplar`-selected) pool entry.
    Fixed,
}

impl std::str::FromStr for PairingPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PairingPolicy::Random),
            "round-robin" => Ok(PairingPolicy::RoundRobin),
            "fixed" => Ok(PairingPolicy::Fixed),
            _ => Err(Error::Config(format!(
                "unknown pairing policy {s:?} (random|round-robin|fixed)"
            ))),
        }
    }
}

/// One line of the clean-image manifest: `id`, `clean` path, optional
/// `depth` path.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CleanRecord {
    pub id: String,
    pub clean: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ProvenanceRecord {
    id: String,
    clean: String,
    exemplar: String,
    checkpoint: String,
    seed: u64,
    out: String,
}

pub struct SynthJob {
    pub clean_manifest: PathBuf,
    pub exemplar_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub policy: PairingPolicy,
    /// Pool entry used by the fixed policy (file name within the pool).
    pub fixed_exemplar: Option<String>,
    pub sigmas: Vec<f64>,
    pub seed: u64,
    pub pad: bool,
}

fn load_clean_manifest(path: &Path) -> Result<Vec<CleanRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CleanRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Format(format!(
            "{}: no clean records",
            path.display()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for r in &out {
        if !seen.insert(&r.id) {
            return Err(Error::Format(format!("duplicate clean id {}", r.id)));
        }
    }
    Ok(out)
}

fn list_pool(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut pool = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if matches!(ext, "png" | "ppm" | "pgm") {
                pool.push(path);
            }
        }
    }
    pool.sort();
    if pool.is_empty() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            msg: "exemplar pool is empty".into(),
        });
    }
    Ok(pool)
}

fn read_provenance(path: &Path) -> BTreeMap<String, ProvenanceRecord> {
    let mut map = BTreeMap::new();
    let Ok(file) = std::fs::File::open(path) else {
        return map;
    };
    for line in std::io::BufReader::new(file).lines().map_while(|l| l.ok()) {
        if let Ok(rec) = serde_json::from_str::<ProvenanceRecord>(&line) {
            map.insert(rec.id.clone(), rec);
        }
    }
    map
}

/// Run (or resume) a synthesis job. Completed records — provenance line
/// present and output file on disk — are skipped; everything else is
/// (re)rendered. Returns the number of images rendered in this call.
pub fn synth_dataset_cmd(job: &SynthJob) -> Result<usize> {
    let records = load_clean_manifest(&job.clean_manifest)?;
    let pool = list_pool(&job.exemplar_dir)?;
    let ckpt = ModelCheckpoint::load(&job.checkpoint)?;
    let ckpt_fp = ckpt.content_fingerprint();
    let manifest_root = job
        .clean_manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let images_dir = job.out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let prov_path = job.out_dir.join("provenance.jsonl");
    let existing = read_provenance(&prov_path);

    let fixed_index = match (&job.policy, &job.fixed_exemplar) {
        (PairingPolicy::Fixed, Some(name)) => {
            let idx = pool
                .iter()
                .position(|p| p.file_name().and_then(|n| n.to_str()) == Some(name.as_str()));
            Some(idx.ok_or_else(|| {
                Error::Config(format!("fixed exemplar {name:?} not found in pool"))
            })?)
        }
        (PairingPolicy::Fixed, None) => Some(0),
        _ => None,
    };

    let mut journal = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&prov_path)
        .map_err(|e| Error::io(&prov_path, e))?;

    let mut rendered = 0usize;
    let mut final_records: Vec<ProvenanceRecord> = Vec::with_capacity(records.len());

    for (idx, rec) in records.iter().enumerate() {
        let out_rel = format!("images/{}.png", rec.id);
        let out_path = job.out_dir.join(&out_rel);

        if let Some(done) = existing.get(&rec.id) {
            if out_path.exists() {
                final_records.push(done.clone());
                continue;
            }
        }

        let exemplar_idx = match job.policy {
            PairingPolicy::Random => {
                let mut rng = derive_rng(job.seed, "pair", hash_str(&rec.id));
                rng.gen_range(0..pool.len())
            }
            PairingPolicy::RoundRobin => idx % pool.len(),
            PairingPolicy::Fixed => fixed_index.unwrap_or(0),
        };
        let exemplar_path = &pool[exemplar_idx];
        let exemplar_id = exemplar_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("exemplar")
            .to_string();

        let resolve = |p: &str| {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                manifest_root.join(pb)
            }
        };
        let clean_img = load_image(&resolve(&rec.clean))?;
        let depth = match &rec.depth {
            Some(p) => uwnr_core::data::load_depth(&resolve(p))?,
            None => DepthMap::vertical_gradient(clean_img.height(), clean_img.width()),
        };
        let exemplar_img = load_image(exemplar_path)?;
        let out_img = render_with_exemplar(
            &ckpt,
            &clean_img,
            &depth,
            &exemplar_img,
            &exemplar_id,
            &job.sigmas,
            job.pad,
        )?;

        // tmp + rename keeps a crashed run resumable
        let tmp = out_path.with_extension("tmp.png");
        save_image(&out_img, &tmp)?;
        std::fs::rename(&tmp, &out_path).map_err(|e| Error::io(&out_path, e))?;

        let prov = ProvenanceRecord {
            id: rec.id.clone(),
            clean: rec.clean.clone(),
            exemplar: exemplar_id,
            checkpoint: ckpt_fp.clone(),
            seed: job.seed,
            out: out_rel.clone(),
        };
        let line = serde_json::to_string(&prov)
            .map_err(|e| Error::Format(format!("serialize provenance: {e}")))?;
        writeln!(journal, "{line}").map_err(|e| Error::io(&prov_path, e))?;
        final_records.push(prov);
        rendered += 1;
    }

    // training-style manifest over the synthesized tree
    let manifest_records: Vec<ManifestRecord> = records
        .iter()
        .map(|rec| {
            let resolve = |p: &str| {
                let pb = PathBuf::from(p);
                if pb.is_absolute() {
                    pb
                } else {
                    manifest_root.join(pb)
                }
            };
            ManifestRecord {
                id: rec.id.clone(),
                uw: format!("images/{}.png", rec.id),
                reference: resolve(&rec.clean).to_string_lossy().into_owned(),
                depth: rec
                    .depth
                    .as_ref()
                    .map(|p| resolve(p).to_string_lossy().into_owned()),
                split: "train".into(),
                checksums: None,
            }
        })
        .collect();
    let manifest = uwnr_core::data::Manifest::new(job.out_dir.clone(), manifest_records)?;
    manifest.write(&job.out_dir.join("manifest.jsonl"))?;

    Ok(rendered)
}
