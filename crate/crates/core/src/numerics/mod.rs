//! Dense linear algebra, optimization and gradient-verification primitives.

mod adam;
mod grad_check;
mod mmd;
mod rng;
mod svd;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use grad_check::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};
pub use mmd::mmd2;
pub use rng::Rng;
pub use svd::{svd, Svd};
pub(crate) use svd::complete_orthonormal as svd_complete;
pub use tensor::Tensor;

/// Dot product with left-to-right summation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
