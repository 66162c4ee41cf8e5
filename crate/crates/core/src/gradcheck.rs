//! Central finite-difference utilities for gradient verification.
//!
//! These re-evaluate a scalar function at perturbed inputs and never touch
//! the tape's backward pass, so they serve as the independent oracle for
//! every differentiable operation.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference derivative of `f` with respect to every coordinate
/// of `x`, step `h`.
pub fn finite_difference<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut work = x.clone();
    for i in 0..x.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + h;
        let fp = f(&work)?;
        work.data_mut()[i] = orig - h;
        let fm = f(&work)?;
        work.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), grad))
}

/// Central-difference derivative at selected coordinates only; used to
/// sample large parameter sets.
pub fn finite_difference_at<F>(f: F, x: &Tensor, coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(coords.len());
    let mut work = x.clone();
    for &i in coords {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + h;
        let fp = f(&work)?;
        work.data_mut()[i] = orig - h;
        let fm = f(&work)?;
        work.data_mut()[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error with a small floor so near-zero gradient pairs compare
/// on absolute terms.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Knobs for [`verify_scalar_graph`].
pub struct GradCheckOptions {
    pub tol: f64,
    pub h: f64,
    /// Inputs up to this many coordinates are checked exhaustively.
    pub max_full_coords: usize,
    /// Larger inputs are spot-checked at this many sampled coordinates.
    pub sampled_coords: usize,
    /// Seed for the coordinate sample.
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tol: 1e-4,
            h: 1e-5,
            max_full_coords: 256,
            sampled_coords: 48,
            sample_seed: 0,
        }
    }
}

/// Verify a scalar-valued tape graph against central finite differences.
///
/// A coordinate whose perturbation straddles a ReLU/abs/min kink gives a
/// bogus estimate at step `h` but a clean one once the step shrinks below
/// the distance to the kink, so failing coordinates are retried at
/// smaller steps; a genuine VJP bug fails at every step size.
pub fn verify_scalar_graph<F>(
    input: &crate::tensor::Tensor,
    opts: &GradCheckOptions,
    build: F,
) -> std::result::Result<(), String>
where
    F: Fn(&mut crate::tape::Tape, crate::tape::Var) -> Result<crate::tape::Var>,
{
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};

    let mut tape = Tape::new();
    let x = tape
        .leaf(input.clone(), true)
        .map_err(|e| format!("leaf: {e}"))?;
    let loss = build(&mut tape, x).map_err(|e| format!("forward: {e}"))?;
    tape.backward(loss).map_err(|e| format!("backward: {e}"))?;
    let analytic = tape
        .grad(x)
        .ok_or_else(|| "input gradient untracked".to_string())?
        .clone();

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone(), true)?;
        let loss = build(&mut tape, x)?;
        tape.value(loss).item()
    };

    let coords: Vec<usize> = if input.len() <= opts.max_full_coords {
        (0..input.len()).collect()
    } else {
        let mut pick = rand_chacha::ChaCha8Rng::seed_from_u64(opts.sample_seed);
        (0..opts.sampled_coords)
            .map(|_| pick.gen_range(0..input.len()))
            .collect()
    };
    let numeric =
        finite_difference_at(&eval, input, &coords, opts.h).map_err(|e| e.to_string())?;

    for (k, &i) in coords.iter().enumerate() {
        let mut err = relative_error(analytic.data()[i], numeric[k]);
        let mut h = opts.h;
        while err >= opts.tol && h > 1e-8 {
            h /= 4.0;
            let retry =
                finite_difference_at(&eval, input, &[i], h).map_err(|e| e.to_string())?[0];
            err = relative_error(analytic.data()[i], retry);
        }
        if err >= opts.tol {
            return Err(format!("coordinate {i}: relative error {err}"));
        }
    }
    Ok(())
}
