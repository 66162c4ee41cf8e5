//! Shared fixtures for the CLI and acceptance suites: small synthetic
//! datasets with genuinely varied water colors, so the light field input
//! carries signal at toy scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use uwnr_core::data::{save_image, scan_convention, Manifest};
use uwnr_core::physics::{render_physical_from_depth, ScatterParams};
use uwnr_core::tensor::{separable_gaussian_blur, Tensor};
use uwnr_core::types::{DepthMap, ImagePlane};

pub fn smooth_random_image(rng: &mut impl Rng, h: usize, w: usize) -> ImagePlane {
    let noise = Tensor::new(
        vec![3, h, w],
        (0..3 * h * w).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap();
    let sm = separable_gaussian_blur(&noise, 1.0).unwrap();
    ImagePlane::new(sm.map(|v| v.clamp(0.0, 1.0))).unwrap()
}

/// Two mirrored water types, strongly tinted: green water and blue water
/// with swapped channel roles. Attenuation is strong and sharply
/// wavelength-dependent so the toy targets are visibly tinted and the
/// light field input carries real signal.
pub fn water_params(i: usize) -> ScatterParams {
    let presets = [
        ([2.4, 0.5, 1.6], [0.06, 0.70, 0.20]),
        ([2.4, 1.6, 0.5], [0.06, 0.20, 0.70]),
    ];
    let (beta, bg) = presets[i % presets.len()];
    ScatterParams::new(beta, bg).unwrap()
}

/// Write `n` paired images under root/{uw,ref}/: clean smooth images and
/// physically attenuated "underwater" versions with varied water colors.
pub fn build_dataset(root: &Path, n: usize, side: usize, seed: u64) -> Manifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(root.join("uw")).unwrap();
    std::fs::create_dir_all(root.join("ref")).unwrap();
    for i in 0..n {
        let clean = smooth_random_image(&mut rng, side, side);
        // the whole scene sits under water: offset the depth ramp so even
        // the nearest row is attenuated and every target is tinted
        let ramp = DepthMap::vertical_gradient(side, side);
        let depth = DepthMap::new(ramp.tensor().map(|d| 0.6 + 0.8 * d)).unwrap();
        let uw = render_physical_from_depth(&clean, &depth, &water_params(i)).unwrap();
        save_image(&clean, &root.join("ref").join(format!("p{i:02}.png"))).unwrap();
        save_image(&uw, &root.join("uw").join(format!("p{i:02}.png"))).unwrap();
    }
    scan_convention(root).unwrap()
}

/// A strongly colored exemplar: smooth texture pushed toward `tint`.
pub fn tinted_exemplar(seed: u64, side: usize, tint: [f64; 3]) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = smooth_random_image(&mut rng, side, side);
    let mut data = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for &v in base.channel(c) {
            data.push((0.25 * v + 0.75 * tint[c]).clamp(0.0, 1.0));
        }
    }
    ImagePlane::new(Tensor::new(vec![3, side, side], data).unwrap()).unwrap()
}
