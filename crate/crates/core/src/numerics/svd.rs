//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use super::Tensor;
use crate::error::{Error, Result};

/// `A = U · diag(S) · Vt` with `U: m×r`, `S: r`, `Vt: r×n`, `r = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

const MAX_SWEEPS: usize = 80;

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.shape().len() != 2 || a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Shape(format!("svd needs a non-empty matrix, got {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::NonFiniteMatrix);
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose()?)?;
        Ok(Svd {
            u: t.vt.transpose()?,
            s: t.s,
            vt: t.u.transpose()?,
        })
    }
}

fn jacobi_tall(a: &Tensor) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = super::dot(&cols[p], &cols[p]);
                let beta = super::dot(&cols[q], &cols[q]);
                let gamma = super::dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = cols.iter().map(|c| super::norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let s_max = order.first().map_or(0.0, |&i| sigma[i]);
    let negligible = s_max * 1e-13;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[j] > negligible && sigma[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            pending.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &pending, m);

    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..m {
            u.set(i, slot, u_cols[slot][i]);
        }
        for i in 0..n {
            vt.set(slot, i, v[j][i]);
        }
    }
    Ok(Svd {
        u,
        s: order.iter().map(|&j| sigma[j]).collect(),
        vt,
    })
}

fn rotate(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(q);
    let (vp, vq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill the listed slots of `basis` with unit vectors orthogonal to every
/// other slot, by twice-repeated Gram-Schmidt of coordinate axes.
pub(crate) fn complete_orthonormal(basis: &mut [Vec<f64>], pending: &[usize], dim: usize) {
    let mut filled: Vec<bool> = vec![true; basis.len()];
    for &p in pending {
        filled[p] = false;
    }
    for &slot in pending {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..dim {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            for _ in 0..2 {
                for (b, f) in basis.iter().zip(&filled) {
                    if *f {
                        let c = super::dot(b, &e);
                        super::axpy(-c, b, &mut e);
                    }
                }
            }
            let nrm = super::norm(&e);
            if best.as_ref().is_none_or(|(bn, _)| nrm > *bn + 1e-12) {
                best = Some((nrm, e));
            }
        }
        let (nrm, e) = best.expect("dimension is positive");
        basis[slot] = e.iter().map(|x| x / nrm).collect();
        filled[slot] = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn reconstruct(d: &Svd) -> Tensor {
        let us = d.u.matmul(&Tensor::diag(&d.s)).unwrap();
        us.matmul(&d.vt).unwrap()
    }

    fn orthonormality_defect(q: &Tensor) -> f64 {
        // columns of q
        let g = q.transpose().unwrap().matmul(q).unwrap();
        g.max_abs_diff(&Tensor::identity(g.rows())).unwrap()
    }

    fn random_matrix(rng: &mut Rng, m: usize, n: usize) -> Tensor {
        Tensor::new(vec![m, n], rng.normal_vec(m * n)).unwrap()
    }

    #[test]
    fn identity() {
        let d = svd(&Tensor::identity(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal() {
        let a = Tensor::diag(&[1.0, 3.0, 2.0]);
        let d = svd(&a).unwrap();
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
        // right singular vectors are coordinate axes up to sign
        let v = d.vt.transpose().unwrap();
        for (col, axis) in [(0, 1), (1, 2), (2, 0)] {
            assert!((v.get(axis, col).abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn random_wide_matrix_seed7() {
        let mut rng = Rng::new(7);
        let a = random_matrix(&mut rng, 8, 16);
        let d = svd(&a).unwrap();
        assert_eq!(d.s.len(), 8);
        let res = reconstruct(&d).sub(&a).unwrap().frobenius();
        assert!(res <= 1e-10 * a.frobenius(), "residual {res}");
        assert!(orthonormality_defect(&d.vt.transpose().unwrap()) <= 1e-10);
        assert!(orthonormality_defect(&d.u) <= 1e-10);
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_deficient_gets_orthonormal_u() {
        let mut a = Tensor::zeros(&[5, 3]);
        a.set(0, 0, 2.0);
        a.set(1, 0, 1.0);
        let d = svd(&a).unwrap();
        assert!(d.s[1] == 0.0 && d.s[2] == 0.0);
        assert!(orthonormality_defect(&d.u) <= 1e-12);
        assert!(reconstruct(&d).sub(&a).unwrap().frobenius() <= 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let d = svd(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(d.s, vec![0.0; 3]);
        assert!(orthonormality_defect(&d.u) <= 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = Tensor::identity(2);
        a.set(0, 1, f64::INFINITY);
        assert!(matches!(svd(&a), Err(Error::NonFiniteMatrix)));
    }

    #[test]
    fn round_trip_many_shapes() {
        let mut rng = Rng::new(11);
        for case in 0..200 {
            let m = 1 + rng.below(64);
            let n = 1 + rng.below(64);
            let a = random_matrix(&mut rng, m, n);
            let d = svd(&a).unwrap();
            let res = reconstruct(&d).sub(&a).unwrap().frobenius();
            assert!(res <= 1e-10 * a.frobenius(), "case {case} {m}x{n}: {res}");
            assert!(orthonormality_defect(&d.u) <= 1e-10, "case {case} U");
            assert!(orthonormality_defect(&d.vt.transpose().unwrap()) <= 1e-10, "case {case} V");
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
