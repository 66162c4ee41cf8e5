//! Command implementations behind the `uwnr` binary. Each subcommand is an
//! ordinary function so integration and acceptance tests can drive the
//! pipeline without spawning processes.

pub mod evalcmd;
pub mod font;
pub mod gridcmd;
pub mod manifestcmd;
pub mod rendercmd;
pub mod synthcmd;
pub mod traincmd;

use uwnr_core::checkpoint::ModelCheckpoint;
use uwnr_core::lightfield::{extract_light_field, LightFieldMap, DEFAULT_LOG_EPSILON};
use uwnr_core::network::unet_forward;
use uwnr_core::types::{DepthMap, ImagePlane};
use uwnr_core::{Error, Result};

/// Render one clean image under an exemplar's light field.
///
/// The light field map is extracted at the exemplar's native resolution
/// (the blur scales are tied to the exemplar) and, being smooth, is
/// bilinearly resampled to the clean image's size. With `pad`, inputs are
/// reflect-padded up to the nearest renderable size and the output is
/// cropped back.
pub fn render_with_exemplar(
    ckpt: &ModelCheckpoint,
    clean: &ImagePlane,
    depth: &DepthMap,
    exemplar: &ImagePlane,
    exemplar_id: &str,
    sigmas: &[f64],
    pad: bool,
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
    let lf = extract_light_field(exemplar, exemplar_id, sigmas, DEFAULT_LOG_EPSILON)?;
    render_with_lf_map(ckpt, clean, depth, &lf, pad)
}

/// Render against an already-extracted light field map (resampled to the
/// clean image's size as needed).
pub fn render_with_lf_map(
    ckpt: &ModelCheckpoint,
    clean: &ImagePlane,
    depth: &DepthMap,
    lf: &LightFieldMap,
    pad: bool,
) -> Result<ImagePlane> {
    let (h, w) = (clean.height(), clean.width());
    let cfg = ckpt.config();

    let (run_h, run_w, padded) = if cfg.validate_input_dims(h, w).is_ok() {
        (h, w, false)
    } else if pad {
        (cfg.padded_side(h), cfg.padded_side(w), true)
    } else {
        // surface the hint-carrying error
        cfg.validate_input_dims(h, w)?;
        unreachable!()
    };

    let lf_resized = resize_lf(lf, run_h, run_w)?;
    let (clean_run, depth_run) = if padded {
        (clean.pad_reflect(run_h, run_w), depth.pad_reflect(run_h, run_w))
    } else {
        (clean.clone(), depth.clone())
    };

    let out = unet_forward(&clean_run, &depth_run, &lf_resized, ckpt)?;
    if padded {
        out.crop(h, w)
    } else {
        Ok(out)
    }
}

fn resize_lf(lf: &LightFieldMap, h: usize, w: usize) -> Result<LightFieldMap> {
    if lf.height() == h && lf.width() == w {
        return Ok(lf.clone());
    }
    let img = lf.as_image().resize_bilinear(h, w);
    LightFieldMap::new(
        img.into_tensor(),
        lf.source_id().to_string(),
        lf.sigmas().to_vec(),
    )
}

/// Parse an `r,g,b` triple; a single value broadcasts to all channels.
pub fn parse_rgb(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| {
        p.trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad component {p:?} in {s:?}: {e}")))
    };
    match parts.len() {
        1 => {
            let v = parse(parts[0])?;
            Ok([v; 3])
        }
        3 => Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?]),
        _ => Err(Error::Config(format!(
            "expected r,g,b triple (or one scalar), got {s:?}"
        ))),
    }
}

/// Parse a comma-separated sigma list.
pub fn parse_sigmas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad sigma {p:?}: {e}")))
        })
        .collect()
}

/// Depth for a clean image: from a file when given, otherwise the
/// synthetic vertical gradient at the image's size.
pub fn depth_or_fallback(
    depth_path: Option<&std::path::Path>,
    clean: &ImagePlane,
) -> Result<DepthMap> {
    match depth_path {
        Some(p) => uwnr_core::data::load_depth(p),
        None => Ok(DepthMap::vertical_gradient(clean.height(), clean.width())),
    }
}
