//! Fréchet distance between Gaussian fits of two feature-embedding sets:
//! `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
//!
//! The matrix square root comes from eigendecomposing the symmetrized
//! product `sqrt(S_a) S_b sqrt(S_a)`; covariances are regularized by
//! `1e-6 I` before anything else touches them.

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::types::ImagePlane;
use nalgebra::{DMatrix, DVector};

/// Diagonal regularizer added to every covariance.
pub const COV_REGULARIZER: f64 = 1e-6;

/// One embedding vector per image, via the extractor's pooled final stage.
pub fn embed_for_fid(images: &[ImagePlane], fx: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    fx.embed(images)
}

fn mean_and_cov(set: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mean = DVector::zeros(d);
    for row in set {
        for (i, &v) in row.iter().enumerate() {
            mean[i] += v;
        }
    }
    mean /= n as f64;

    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for row in set {
            let dev = DVector::from_iterator(d, row.iter().copied()) - &mean;
            cov += &dev * dev.transpose();
        }
        cov /= (n - 1) as f64;
    }
    for i in 0..d {
        cov[(i, i)] += COV_REGULARIZER;
    }
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition; tiny negative
/// eigenvalues from roundoff are clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "covariance eigendecomposition produced non-finite values".into(),
        ));
    }
    let sqrt_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between the Gaussian fits of two embedding sets.
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Contract("fid needs nonempty sets".into()));
    }
    let d = set_a[0].len();
    if d == 0 || set_a.iter().chain(set_b).any(|r| r.len() != d) {
        return Err(Error::Shape(
            "fid embedding rows must share a nonzero dimension".into(),
        ));
    }
    let (mu_a, cov_a) = mean_and_cov(set_a, d);
    let (mu_b, cov_b) = mean_and_cov(set_b, d);

    let sqrt_a = sqrtm_psd(&cov_a)?;
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let covmean = sqrtm_psd(&inner)?;

    let mean_term = (mu_a - mu_b).norm_squared();
    let trace_term = cov_a.trace() + cov_b.trace() - 2.0 * covmean.trace();
    let value = mean_term + trace_term;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("fid produced {value}")));
    }
    // roundoff can leave a tiny negative residue on identical sets
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
            .collect()
    }

    #[test]
    fn identical_sets_score_zero() {
        let a = random_set(1, 24, 6);
        assert!(fid(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn point_masses_reduce_to_squared_mean_distance() {
        let a = vec![vec![1.0, 2.0]; 5];
        let b = vec![vec![4.0, 6.0]; 5];
        // regularizers cancel in the trace term
        let got = fid(&a, &b).unwrap();
        assert!((got - 25.0).abs() < 1e-10, "{got}");
    }

    #[test]
    fn diagonal_sets_match_scalar_closed_form() {
        // four points arranged so the sample covariance is exactly diagonal
        let diag_set = |mu: [f64; 2], a: f64, b: f64| {
            vec![
                vec![mu[0] + a, mu[1]],
                vec![mu[0] - a, mu[1]],
                vec![mu[0], mu[1] + b],
                vec![mu[0], mu[1] - b],
            ]
        };
        let sa = diag_set([0.5, -1.0], 0.9, 0.4);
        let sb = diag_set([2.0, 1.5], 0.3, 1.1);
        // sample covariance (ddof 1): diag(2a^2/3, 2b^2/3) + regularizer
        let var = |x: f64| 2.0 * x * x / 3.0 + COV_REGULARIZER;
        let mean_term = (0.5f64 - 2.0).powi(2) + (-1.0f64 - 1.5).powi(2);
        let trace_term = (var(0.9).sqrt() - var(0.3).sqrt()).powi(2)
            + (var(0.4).sqrt() - var(1.1).sqrt()).powi(2);
        let expect = mean_term + trace_term;
        let got = fid(&sa, &sb).unwrap();
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative() {
        let a = random_set(2, 30, 5);
        let b = random_set(3, 30, 5);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
    }

    #[test]
    fn degenerate_sets_survive_via_regularizer() {
        // n < d+1: rank-deficient covariance, regularizer keeps it PSD
        let a = random_set(4, 3, 8);
        let b = random_set(5, 3, 8);
        assert!(fid(&a, &b).unwrap().is_finite());
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = vec![vec![1.0, 2.0]];
        let b = vec![vec![1.0, 2.0, 3.0]];
        assert!(fid(&a, &b).is_err());
    }
}
