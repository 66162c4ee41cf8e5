//! Dense row-major float64 tensors and the eager (non-recorded) numeric
//! kernels shared by the whole pipeline: elementwise maps, the Gaussian
//! kernel builder and the separable reflect-padded blur.
//!
//! Layout is always row-major `[N,C,H,W]` (or a prefix of it); there is no
//! stride machinery. Differentiable execution lives in [`crate::tape`],
//! which stores its values in these tensors.

use crate::error::{Error, Result};
use crate::runtime;
use rayon::prelude::*;

/// Dense N-dimensional float64 array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from dims and a flat buffer, validating the boundary
    /// invariants: element count matches and every value is finite.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} require {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} rejected at tensor boundary"
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Internal constructor for op outputs; skips the O(n) finiteness scan.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: Vec<usize>, value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar (1-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !self.same_dims(other) {
            return Err(Error::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.dims.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Fold an out-of-range coordinate back into `0..len` by mirror reflection
/// (edge pixel not repeated), valid for arbitrarily large excursions.
pub(crate) fn reflect_index(i: i64, len: usize) -> usize {
    debug_assert!(len >= 1);
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= len as i64 {
        m = period - m;
    }
    m as usize
}

/// Truncated, normalized 1-D Gaussian: radius `r = ceil(3·sigma)`,
/// entries proportional to `exp(-i²/2σ²)`, rescaled to sum exactly 1.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as usize;
    let mut k = Vec::with_capacity(2 * r + 1);
    for i in -(r as i64)..=(r as i64) {
        let x = i as f64;
        k.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    Ok(Tensor::from_parts(vec![2 * r + 1], k))
}

/// One separable pass along `axis` (0 = vertical/rows, 1 = horizontal/cols)
/// with reflect padding, applied independently per leading plane.
///
/// `planes` counts everything before the two trailing spatial dims, so the
/// same kernel serves `[C,H,W]` and `[N,C,H,W]` inputs.
pub(crate) fn blur_pass(input: &Tensor, kernel: &[f64], axis: usize) -> Result<Tensor> {
    let rank = input.rank();
    if rank < 2 {
        return Err(Error::Shape(format!(
            "blur needs at least 2 dims, got {:?}",
            input.dims()
        )));
    }
    let h = input.dims()[rank - 2];
    let w = input.dims()[rank - 1];
    let planes: usize = input.dims()[..rank - 2].iter().product();
    let r = (kernel.len() / 2) as i64;
    let src = input.data();
    let mut out = vec![0.0; src.len()];

    let run_plane = |p: usize, out_plane: &mut [f64]| {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                if axis == 1 {
                    for (j, &kv) in kernel.iter().enumerate() {
                        let xi = reflect_index(x as i64 + j as i64 - r, w);
                        acc += kv * src[base + y * w + xi];
                    }
                } else {
                    for (j, &kv) in kernel.iter().enumerate() {
                        let yi = reflect_index(y as i64 + j as i64 - r, h);
                        acc += kv * src[base + yi * w + x];
                    }
                }
                out_plane[y * w + x] = acc;
            }
        }
    };

    if runtime::parallel_enabled() && planes > 1 {
        out.par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(p, chunk)| run_plane(p, chunk));
    } else {
        for (p, chunk) in out.chunks_mut(h * w).enumerate() {
            run_plane(p, chunk);
        }
    }
    Ok(Tensor::from_parts(input.dims().to_vec(), out))
}

/// Transpose of [`blur_pass`]: scatters each output position's contribution
/// back through the reflect-padded taps. Used by the tape's blur VJP.
pub(crate) fn blur_pass_adjoint(grad_out: &Tensor, kernel: &[f64], axis: usize) -> Tensor {
    let rank = grad_out.rank();
    let h = grad_out.dims()[rank - 2];
    let w = grad_out.dims()[rank - 1];
    let planes: usize = grad_out.dims()[..rank - 2].iter().product();
    let r = (kernel.len() / 2) as i64;
    let g = grad_out.data();
    let mut out = vec![0.0; g.len()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let go = g[base + y * w + x];
                if axis == 1 {
                    for (j, &kv) in kernel.iter().enumerate() {
                        let xi = reflect_index(x as i64 + j as i64 - r, w);
                        out[base + y * w + xi] += kv * go;
                    }
                } else {
                    for (j, &kv) in kernel.iter().enumerate() {
                        let yi = reflect_index(y as i64 + j as i64 - r, h);
                        out[base + yi * w + x] += kv * go;
                    }
                }
            }
        }
    }
    Tensor::from_parts(grad_out.dims().to_vec(), out)
}

/// Separable Gaussian blur with reflect padding: horizontal then vertical
/// 1-D pass, equal to the dense 2-D Gaussian convolution.
pub fn separable_gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let kernel = gaussian_kernel_1d(sigma)?;
    let hpass = blur_pass(image, kernel.data(), 1)?;
    blur_pass(&hpass, kernel.data(), 0)
}
