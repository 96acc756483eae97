use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let fp = f(&probe);
        probe[k] = x[k] - h;
        let fm = f(&probe);
        probe[k] = x[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteValue(k));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = super::norm(a).max(super::norm(b)).max(floor);
    diff / scale
}
