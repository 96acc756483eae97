use crate::error::{Error, Result};

/// Biased (V-statistic) squared MMD with a Gaussian kernel
/// `k(a, b) = exp(−‖a − b‖² / (2·bandwidth²))`.
///
/// The cross term is summed in the same order whichever argument comes
/// first, so the value is symmetric bit-for-bit.
pub fn mmd2<V: AsRef<[f64]>>(x: &[V], y: &[V], bandwidth: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySet);
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth {bandwidth}")));
    }
    let dim = x[0].as_ref().len();
    if x.iter().chain(y).any(|v| v.as_ref().len() != dim) {
        return Err(Error::Shape("mmd2 vectors of unequal length".into()));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kernel = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        libm::exp(-gamma * d2)
    };
    let mean_gram = |a: &[V], b: &[V]| {
        let mut acc = 0.0;
        for u in a {
            for w in b {
                acc += kernel(u.as_ref(), w.as_ref());
            }
        }
        acc / (a.len() * b.len()) as f64
    };
    let kxx = mean_gram(x, x);
    let kyy = mean_gram(y, y);
    // canonical orientation for the cross term
    let (p, q) = if canonical_first(x, y) { (x, y) } else { (y, x) };
    let kxy = mean_gram(p, q);
    let (a, b) = if canonical_first(x, y) { (kxx, kyy) } else { (kyy, kxx) };
    Ok((a + b - 2.0 * kxy).max(0.0))
}

fn canonical_first<V: AsRef<[f64]>>(x: &[V], y: &[V]) -> bool {
    if x.len() != y.len() {
        return x.len() < y.len();
    }
    for (u, w) in x.iter().zip(y) {
        for (a, b) in u.as_ref().iter().zip(w.as_ref()) {
            match a.total_cmp(b) {
                std::cmp::Ordering::Less => return true,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Equal => {}
            }
        }
    }
    true
}
