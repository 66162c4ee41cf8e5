//! `extract-lf`, `render` and `render-physical`.

use crate::{depth_or_fallback, render_with_exemplar};
use std::path::Path;
use uwnr_core::checkpoint::ModelCheckpoint;
use uwnr_core::data::{load_image, save_image, save_lf_sidecar};
use uwnr_core::lightfield::{extract_light_field, DEFAULT_LOG_EPSILON};
use uwnr_core::physics::{render_physical_from_depth, ScatterParams};
use uwnr_core::Result;

/// Extract a light field map and write it as an 8-bit image, with an
/// optional lossless float sidecar.
pub fn extract_lf_cmd(
    input: &Path,
    output: &Path,
    sigmas: &[f64],
    sidecar: Option<&Path>,
) -> Result<()> {
    let exemplar = load_image(input)?;
    let source_id = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("exemplar")
        .to_string();
    let lf = extract_light_field(&exemplar, &source_id, sigmas, DEFAULT_LOG_EPSILON)?;
    save_image(&lf.as_image(), output)?;
    if let Some(sc) = sidecar {
        save_lf_sidecar(&lf, sc)?;
    }
    Ok(())
}

/// Neural render: clean image + depth + exemplar light field -> output.
pub fn render_cmd(
    clean: &Path,
    depth: Option<&Path>,
    exemplar: &Path,
    checkpoint: &Path,
    out: &Path,
    sigmas: &[f64],
    pad: bool,
) -> Result<()> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let clean_img = load_image(clean)?;
    let depth_map = depth_or_fallback(depth, &clean_img)?;
    let exemplar_img = load_image(exemplar)?;
    let exemplar_id = exemplar
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("exemplar");
    let rendered = render_with_exemplar(
        &ckpt,
        &clean_img,
        &depth_map,
        &exemplar_img,
        exemplar_id,
        sigmas,
        pad,
    )?;
    save_image(&rendered, out)
}

/// Physical-model baseline render.
pub fn render_physical_cmd(
    clean: &Path,
    depth: Option<&Path>,
    beta: [f64; 3],
    background: [f64; 3],
    output: &Path,
) -> Result<()> {
    let params = ScatterParams::new(beta, background)?;
    let clean_img = load_image(clean)?;
    let depth_map = depth_or_fallback(depth, &clean_img)?;
    let rendered = render_physical_from_depth(&clean_img, &depth_map, &params)?;
    save_image(&rendered, output)
}
