//! `eval-metrics`: score a prediction directory against a reference
//! directory, emit the JSON report and a plain-text summary table.

use std::path::{Path, PathBuf};
use uwnr_core::data::load_image;
use uwnr_core::losses::FeatureExtractor;
use uwnr_core::metrics::{embed_for_fid, fid, psnr, ssim, uiqm, ImageMetrics, MetricReport};
use uwnr_core::{Error, Result};

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && matches!(ext, "png" | "ppm" | "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Evaluate `pred_dir` against `ref_dir` (pairing by file stem), write the
/// JSON report, and return it together with the rendered text table.
pub fn eval_metrics_cmd(
    pred_dir: &Path,
    ref_dir: &Path,
    with_fid: bool,
    report_path: &Path,
) -> Result<(MetricReport, String)> {
    let preds = list_images(pred_dir)?;
    let refs = list_images(ref_dir)?;
    if preds.is_empty() {
        return Err(Error::Io {
            path: pred_dir.to_path_buf(),
            msg: "no images found".into(),
        });
    }

    let mut per_image = Vec::new();
    let mut pred_images = Vec::new();
    let mut ref_images = Vec::new();
    for (stem, pred_path) in &preds {
        let Some((_, ref_path)) = refs.iter().find(|(s, _)| s == stem) else {
            continue;
        };
        let pred = load_image(pred_path)?;
        let reference = load_image(ref_path)?;
        let u = uiqm(&pred);
        per_image.push(ImageMetrics {
            id: stem.clone(),
            psnr: psnr(&pred, &reference)?,
            ssim: ssim(&pred, &reference)?,
            uiqm: u.uiqm,
            uicm: u.uicm,
            uism: u.uism,
            uiconm: u.uiconm,
        });
        pred_images.push(pred);
        ref_images.push(reference);
    }
    if per_image.is_empty() {
        return Err(Error::Contract(
            "no prediction/reference pairs share a file stem".into(),
        ));
    }

    let (fid_value, fx_fp) = if with_fid {
        let fx = FeatureExtractor::new_default();
        let ea = embed_for_fid(&pred_images, &fx)?;
        let eb = embed_for_fid(&ref_images, &fx)?;
        (Some(fid(&ea, &eb)?), Some(fx.fingerprint()))
    } else {
        (None, None)
    };

    let report = MetricReport {
        pred_corpus: pred_dir.to_string_lossy().into_owned(),
        ref_corpus: ref_dir.to_string_lossy().into_owned(),
        per_image,
        fid: fid_value,
        embedding_fingerprint: fx_fp,
    };
    report.validate()?;

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("serialize report: {e}")))?;
    std::fs::write(report_path, json).map_err(|e| Error::io(report_path, e))?;

    Ok((report.clone(), render_table(&report)))
}

/// Summary table: one row per metric, means over the corpus.
pub fn render_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "corpus: {} vs {} ({} images)\n",
        report.pred_corpus,
        report.ref_corpus,
        report.per_image.len()
    ));
    out.push_str("metric  | mean\n");
    out.push_str("--------+---------\n");
    if let Some(f) = report.fid {
        out.push_str(&format!("FID     | {f:.2}"));
        if let Some(fp) = &report.embedding_fingerprint {
            out.push_str(&format!("   (embedding {fp}, not Inception-comparable)"));
        }
        out.push('\n');
    }
    out.push_str(&format!("PSNR    | {:.2}\n", report.mean(|m| m.psnr)));
    out.push_str(&format!("SSIM    | {:.4}\n", report.mean(|m| m.ssim)));
    out.push_str(&format!("UIQM    | {:.4}\n", report.mean(|m| m.uiqm)));
    out.push_str(&format!("  UICM  | {:.4}\n", report.mean(|m| m.uicm)));
    out.push_str(&format!("  UISM  | {:.4}\n", report.mean(|m| m.uism)));
    out.push_str(&format!("  UIConM| {:.4}\n", report.mean(|m| m.uiconm)));
    out
}
