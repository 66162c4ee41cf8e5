//! `grid`: labeled comparison montage for qualitative inspection.

use crate::font;
use std::path::{Path, PathBuf};
use uwnr_core::data::{load_image, save_image};
use uwnr_core::tensor::Tensor;
use uwnr_core::types::ImagePlane;
use uwnr_core::{Error, Result};

const LABEL_H: usize = 11;
const MARGIN: usize = 2;

/// Build the fixed-layout grid: `ceil(sqrt(n))` columns, each cell the
/// common (max) input size with a label strip underneath. Mixed input
/// sizes are bilinearly resized up; the resized names are reported back.
pub fn grid_cmd(inputs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    if inputs.is_empty() {
        return Err(Error::Contract("grid needs at least one input".into()));
    }
    let mut images = Vec::with_capacity(inputs.len());
    let mut labels = Vec::with_capacity(inputs.len());
    for p in inputs {
        images.push(load_image(p)?);
        labels.push(
            p.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string(),
        );
    }

    let cell_h = images.iter().map(ImagePlane::height).max().unwrap();
    let cell_w = images.iter().map(ImagePlane::width).max().unwrap();
    let mut resized_names = Vec::new();
    let images: Vec<ImagePlane> = images
        .into_iter()
        .zip(&labels)
        .map(|(img, label)| {
            if img.height() != cell_h || img.width() != cell_w {
                resized_names.push(label.clone());
                img.resize_bilinear(cell_h, cell_w)
            } else {
                img
            }
        })
        .collect();

    let n = images.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);

    let tile_h = cell_h + LABEL_H;
    let total_h = rows * tile_h + (rows + 1) * MARGIN;
    let total_w = cols * cell_w + (cols + 1) * MARGIN;
    let mut canvas = vec![0.08; 3 * total_h * total_w];

    for (i, (img, label)) in images.iter().zip(&labels).enumerate() {
        let row = i / cols;
        let col = i % cols;
        let y0 = MARGIN + row * (tile_h + MARGIN);
        let x0 = MARGIN + col * (cell_w + MARGIN);
        for c in 0..3 {
            for y in 0..cell_h {
                for x in 0..cell_w {
                    canvas[(c * total_h + y0 + y) * total_w + x0 + x] = img.pixel(c, y, x);
                }
            }
        }
        // label strip: glyphs stamped into a luma buffer, then copied
        let mut strip = vec![0.0; LABEL_H * cell_w];
        font::stamp(label, &mut strip, cell_w, LABEL_H, 1, 2);
        for c in 0..3 {
            for y in 0..LABEL_H {
                for x in 0..cell_w {
                    let v = if strip[y * cell_w + x] > 0.0 { 0.95 } else { 0.0 };
                    canvas[(c * total_h + y0 + cell_h + y) * total_w + x0 + x] = v;
                }
            }
        }
    }

    let img = ImagePlane::new(Tensor::new(vec![3, total_h, total_w], canvas)?)?;
    save_image(&img, out)?;
    Ok(resized_names)
}

