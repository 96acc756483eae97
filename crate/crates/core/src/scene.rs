//! Procedural point-cloud domains, the frozen embedding space, and domain
//! anchors.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_POINTS: usize = 32;

/// Factors of variation of a rendered shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub r: f64,
    pub cx: f64,
    pub cy: f64,
    pub ecc: f64,
}

impl FactorVector {
    pub const UNIT: Self = Self {
        r: 1.0,
        cx: 0.0,
        cy: 0.0,
        ecc: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) || !(self.ecc.abs() <= 0.5) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid factors {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.r, self.cx, self.cy, self.ecc]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            r: a[0],
            cx: a[1],
            cy: a[2],
            ecc: a[3],
        }
    }
}

/// Shape family. The ellipse is the source domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DomainKind {
    Ellipse,
    /// Axis-aligned square, `r` is the half side.
    Square,
    /// Radius modulated by `1 + 0.5·cos 5t`.
    Star5,
    /// Radius modulated by `1 + 0.25·cos 8t`.
    SpikyEllipse,
    /// Even points on radius `1.3`, odd points on `0.7`.
    DoubleRing,
    /// Equilateral triangle with circumradius `r`, one vertex on +x.
    Triangle,
}

impl DomainKind {
    pub const ALL: [DomainKind; 6] = [
        DomainKind::Ellipse,
        DomainKind::Square,
        DomainKind::Star5,
        DomainKind::SpikyEllipse,
        DomainKind::DoubleRing,
        DomainKind::Triangle,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            DomainKind::Ellipse => "ellipse",
            DomainKind::Square => "square",
            DomainKind::Star5 => "star5",
            DomainKind::SpikyEllipse => "spiky-ellipse",
            DomainKind::DoubleRing => "double-ring",
            DomainKind::Triangle => "triangle",
        }
    }

    /// Radial profile at angle `t` for point `k`.
    fn radius(self, t: f64, k: usize) -> f64 {
        match self {
            DomainKind::Ellipse => 1.0,
            DomainKind::Square => 1.0 / libm::fabs(libm::cos(t)).max(libm::fabs(libm::sin(t))),
            DomainKind::Star5 => 1.0 + 0.5 * libm::cos(5.0 * t),
            DomainKind::SpikyEllipse => 1.0 + 0.25 * libm::cos(8.0 * t),
            DomainKind::DoubleRing => {
                if k % 2 == 0 {
                    1.3
                } else {
                    0.7
                }
            }
            DomainKind::Triangle => {
                let sector = 2.0 * PI / 3.0;
                let local = t.rem_euclid(sector) - sector / 2.0;
                0.5 / libm::cos(local)
            }
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DomainKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

impl TryFrom<String> for DomainKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DomainKind> for String {
    fn from(k: DomainKind) -> String {
        k.tag().to_string()
    }
}

/// `K` planar points stored interleaved as `[x0, y0, x1, y1, …]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn from_coords(coords: Vec<f64>) -> Result<Self> {
        if coords.len() % 2 != 0 || coords.is_empty() {
            return Err(Error::Shape(format!("{} coordinates is not a point list", coords.len())));
        }
        Ok(Self { coords })
    }

    pub fn from_points(points: &[[f64; 2]]) -> Self {
        Self {
            coords: points.iter().flatten().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.coords[2 * k], self.coords[2 * k + 1]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.coords.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), 2], self.coords.clone()).expect("interleaved coordinates")
    }

    pub fn centroid(&self) -> [f64; 2] {
        let k = self.len() as f64;
        let (sx, sy) = self.points().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / k, sy / k]
    }

    pub fn sq_distance(&self, other: &Self) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Render `points` samples of `kind` with factors `theta`.
pub fn render(kind: DomainKind, theta: &FactorVector, points: usize) -> Result<PointCloud> {
    theta.validate()?;
    Ok(render_unchecked(kind, theta, points))
}

/// Render without validating the factors; the formulas are defined for any
/// real factors, which the pretraining targets rely on.
pub fn render_unchecked(kind: DomainKind, theta: &FactorVector, points: usize) -> PointCloud {
    let a = theta.r * (1.0 + theta.ecc);
    let b = theta.r * (1.0 - theta.ecc);
    let mut coords = Vec::with_capacity(2 * points);
    for k in 0..points {
        let t = 2.0 * PI * k as f64 / points as f64;
        let rad = kind.radius(t, k);
        coords.push(theta.cx + a * rad * libm::cos(t));
        coords.push(theta.cy + b * rad * libm::sin(t));
    }
    PointCloud { coords }
}

/// Factor prior used for anchors and procedural data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPrior {
    pub r: (f64, f64),
    pub center: (f64, f64),
    pub ecc: (f64, f64),
}

impl Default for FactorPrior {
    fn default() -> Self {
        Self {
            r: (0.5, 1.5),
            center: (-1.0, 1.0),
            ecc: (-0.3, 0.3),
        }
    }
}

impl FactorPrior {
    pub fn sample(&self, rng: &mut Rng) -> FactorVector {
        FactorVector {
            r: rng.uniform_range(self.r.0, self.r.1),
            cx: rng.uniform_range(self.center.0, self.center.1),
            cy: rng.uniform_range(self.center.0, self.center.1),
            ecc: rng.uniform_range(self.ecc.0, self.ecc.1),
        }
    }
}

// Feature layout: 6 moment features, radial histogram, angular histogram,
// and 8 log spectral energies of the whitened radius profile.
const MOMENT_FEATURES: usize = 6;
const SPECTRAL_ORDERS: [usize; 8] = [3, 4, 5, 6, 7, 8, 9, 10];
/// Energy scale of the log spectrum, `ln(1 + p/τ)`.
const SPECTRAL_SCALE: f64 = 0.02;
const RADIUS_FLOOR: f64 = 1e-12;
/// Added to both covariance eigenvalues before whitening.
const COVARIANCE_FLOOR: f64 = 1e-9;
/// Group weights: centroid, moments, mean distance, radial, angular, spectral.
const STANDARD_GROUP_WEIGHTS: [f64; 6] = [3.0, 6.5, 2.0, 0.065, 0.075, 1.1];

/// Frozen, differentiable feature map from point clouds to vectors.
///
/// Features, in order:
/// - `0..2`: centroid `μx, μy`
/// - `2..5`: central second moments `σxx, σxy, σyy` divided by `d̄²`
/// - `5`: mean centroid distance `d̄`
/// - radial histogram: Gaussian bins over `ρ = d/d̄` of the whitened cloud
/// - angular histogram: von Mises bins over the whitened centroid angle
/// - spectrum: `ln(1 + |mean ρ·e^{imφ}|²/τ)` for `m = 3..=10`, whitened
///
/// The whitened cloud is `Σ^{-1/2}(p − μ)`, so the last three groups do not
/// see position, scale, stretch or rotation. Every raw feature is mapped to
/// `(raw − offset)·weight`, with offsets equal to the raw features of the
/// unit circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpace {
    bins: usize,
    radial_centers: Vec<f64>,
    radial_width: f64,
    angular_centers: Vec<f64>,
    angular_kappa: f64,
    offsets: Vec<f64>,
    weights: Vec<f64>,
}

impl Default for EmbeddingSpace {
    fn default() -> Self {
        Self::with_bins(8)
    }
}

impl EmbeddingSpace {
    /// Radial bins span `ρ ∈ [0.4, 1.6]`; bin width is 0.6 of the spacing.
    /// Angular bins are uniform on the circle with concentration
    /// `2·(B / 2π)²`.
    pub fn with_bins(bins: usize) -> Self {
        assert!(bins >= 2);
        let spacing = 1.2 / (bins - 1) as f64;
        let radial_centers = (0..bins).map(|b| 0.4 + spacing * b as f64).collect();
        let angular_centers = (0..bins).map(|b| 2.0 * PI * b as f64 / bins as f64).collect();
        let dim = MOMENT_FEATURES + 2 * bins + SPECTRAL_ORDERS.len();
        let mut space = Self {
            bins,
            radial_centers,
            radial_width: 0.6 * spacing,
            angular_centers,
            angular_kappa: 2.0 * (bins as f64 / (2.0 * PI)).powi(2),
            offsets: vec![0.0; dim],
            weights: vec![1.0; dim],
        };
        space.set_group_weights(STANDARD_GROUP_WEIGHTS);
        space
    }

    /// Variant used only for evaluation, never for training.
    pub fn held_out() -> Self {
        Self::with_bins(12)
    }

    /// Per-group weights; offsets stay at the unit circle.
    fn set_group_weights(&mut self, gw: [f64; 6]) {
        let (radial, angular, spectral) = self.group_ranges();
        self.offsets.iter_mut().for_each(|o| *o = 0.0);
        self.weights[0] = gw[0];
        self.weights[1] = gw[0];
        for j in 2..5 {
            self.weights[j] = gw[1];
        }
        self.offsets[2] = 0.5;
        self.offsets[4] = 0.5;
        self.weights[5] = gw[2];
        self.offsets[5] = 1.0;
        let w2 = self.radial_width * self.radial_width;
        for (j, c) in radial.zip(self.radial_centers.clone()) {
            self.offsets[j] = libm::exp(-(1.0 - c) * (1.0 - c) / (2.0 * w2));
            self.weights[j] = gw[3];
        }
        let angular_mean = bessel_i0_scaled(self.angular_kappa);
        for j in angular {
            self.offsets[j] = angular_mean;
            self.weights[j] = gw[4];
        }
        for j in spectral {
            self.weights[j] = gw[5];
        }
    }

    fn group_ranges(
        &self,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let r0 = MOMENT_FEATURES;
        let a0 = r0 + self.bins;
        let f0 = a0 + self.bins;
        (r0..a0, a0..f0, f0..f0 + SPECTRAL_ORDERS.len())
    }

    pub fn dim(&self) -> usize {
        self.offsets.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn embed(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        Ok(self.evaluate(cloud, None)?.0)
    }

    /// Embedding together with `∂(upstream·embed)/∂coords`.
    pub fn embed_vjp(&self, cloud: &PointCloud, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if upstream.len() != self.dim() {
            return Err(Error::Shape(format!(
                "upstream of length {} for embedding of {}",
                upstream.len(),
                self.dim()
            )));
        }
        let (e, g) = self.evaluate(cloud, Some(upstream))?;
        Ok((e, g.expect("requested")))
    }

    fn evaluate(&self, cloud: &PointCloud, upstream: Option<&[f64]>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let k = cloud.len();
        if k < 2 {
            return Err(Error::InvalidArgument("embedding needs at least 2 points".into()));
        }
        if cloud.coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point coordinates".into()));
        }
        let kf = k as f64;
        let mu = cloud.centroid();
        let q: Vec<[f64; 2]> = cloud.points().map(|p| [p[0] - mu[0], p[1] - mu[1]]).collect();
        let dist: Vec<f64> = q.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + RADIUS_FLOOR).sqrt()).collect();
        let dbar = dist.iter().sum::<f64>() / kf;
        let (sxx, sxy, syy) = q.iter().fold((0.0, 0.0, 0.0), |(a, b, c), v| {
            (a + v[0] * v[0], b + v[0] * v[1], c + v[1] * v[1])
        });
        let (sxx, sxy, syy) = (sxx / kf, sxy / kf, syy / kf);
        let d2 = dbar * dbar;

        let white = Whitening::new(sxx, sxy, syy);
        let u: Vec<[f64; 2]> = q.iter().map(|v| white.apply(*v)).collect();
        let ur2: Vec<f64> = u.iter().map(|v| v[0] * v[0] + v[1] * v[1] + RADIUS_FLOOR).collect();
        let udist: Vec<f64> = ur2.iter().map(|x| x.sqrt()).collect();
        let ubar = udist.iter().sum::<f64>() / kf;
        let rho: Vec<f64> = udist.iter().map(|d| d / ubar).collect();
        let phi: Vec<f64> = u.iter().map(|v| libm::atan2(v[1], v[0])).collect();
        let spectrum: Vec<(f64, f64)> = SPECTRAL_ORDERS
            .iter()
            .map(|&m| {
                let mf = m as f64;
                let (mut c, mut s) = (0.0, 0.0);
                for (p, f) in rho.iter().zip(&phi) {
                    c += p * libm::cos(mf * f);
                    s += p * libm::sin(mf * f);
                }
                (c / kf, s / kf)
            })
            .collect();

        let (radial, angular, spectral) = self.group_ranges();
        let mut raw = vec![0.0; self.dim()];
        raw[0] = mu[0];
        raw[1] = mu[1];
        raw[2] = sxx / d2;
        raw[3] = sxy / d2;
        raw[4] = syy / d2;
        raw[5] = dbar;
        let w2 = self.radial_width * self.radial_width;
        for (j, c) in radial.clone().zip(&self.radial_centers) {
            raw[j] = rho.iter().map(|p| libm::exp(-(p - c) * (p - c) / (2.0 * w2))).sum::<f64>() / kf;
        }
        let kappa = self.angular_kappa;
        for (j, a) in angular.clone().zip(&self.angular_centers) {
            raw[j] = phi.iter().map(|f| libm::exp(kappa * (libm::cos(f - a) - 1.0))).sum::<f64>() / kf;
        }
        for (j, (c, s)) in spectral.clone().zip(&spectrum) {
            raw[j] = libm::log1p((c * c + s * s) / SPECTRAL_SCALE);
        }
        let embedding: Vec<f64> = raw
            .iter()
            .zip(self.offsets.iter().zip(&self.weights))
            .map(|(x, (o, w))| (x - o) * w)
            .collect();

        let Some(up) = upstream else {
            return Ok((embedding, None));
        };

        // reverse pass
        let g: Vec<f64> = up.iter().zip(&self.weights).map(|(u, w)| u * w).collect();
        let mut grad_mu = [g[0], g[1]];
        let mut grad_q = vec![[0.0f64; 2]; k];
        let mut grad_rho = vec![0.0; k];
        let mut grad_phi = vec![0.0; k];

        for (j, c) in radial.zip(&self.radial_centers) {
            let gj = g[j];
            if gj == 0.0 {
                continue;
            }
            for (gr, p) in grad_rho.iter_mut().zip(&rho) {
                let d = p - c;
                *gr += gj * libm::exp(-d * d / (2.0 * w2)) * (-d / w2) / kf;
            }
        }
        for (j, a) in angular.zip(&self.angular_centers) {
            let gj = g[j];
            if gj == 0.0 {
                continue;
            }
            for (gf, f) in grad_phi.iter_mut().zip(&phi) {
                let e = libm::exp(kappa * (libm::cos(f - a) - 1.0));
                *gf += gj * e * kappa * (-libm::sin(f - a)) / kf;
            }
        }
        for ((j, &m), &(c, s)) in spectral.zip(&SPECTRAL_ORDERS).zip(&spectrum) {
            let scale = g[j] * 2.0 / (SPECTRAL_SCALE + c * c + s * s);
            let (gc, gs) = (scale * c, scale * s);
            let mf = m as f64;
            for i in 0..k {
                let (cm, sm) = (libm::cos(mf * phi[i]), libm::sin(mf * phi[i]));
                grad_rho[i] += (gc * cm + gs * sm) / kf;
                grad_phi[i] += rho[i] * mf * (-gc * sm + gs * cm) / kf;
            }
        }

        // ρ = |u| / mean |u|, φ = atan2(u)
        let mut grad_udist: Vec<f64> = grad_rho.iter().map(|gr| gr / ubar).collect();
        let grad_ubar = -grad_rho.iter().zip(&udist).map(|(gr, d)| gr * d).sum::<f64>() / (ubar * ubar);
        for gd in grad_udist.iter_mut() {
            *gd += grad_ubar / kf;
        }
        let grad_u: Vec<[f64; 2]> = (0..k)
            .map(|i| {
                let v = u[i];
                [
                    grad_udist[i] * v[0] / udist[i] - grad_phi[i] * v[1] / ur2[i],
                    grad_udist[i] * v[1] / udist[i] + grad_phi[i] * v[0] / ur2[i],
                ]
            })
            .collect();
        // u = M q with M = S^{-1/2}
        let (grad_cov, direct) = white.backward(&q, &grad_u);
        for (gq, d) in grad_q.iter_mut().zip(&direct) {
            gq[0] += d[0];
            gq[1] += d[1];
        }

        // moments over d̄² and d̄
        let mut grad_sxx = g[2] / d2 + grad_cov[0];
        let mut grad_sxy = g[3] / d2 + grad_cov[1];
        let mut grad_syy = g[4] / d2 + grad_cov[2];
        let grad_dbar = g[5] - 2.0 * (sxx * g[2] + sxy * g[3] + syy * g[4]) / (d2 * dbar);
        grad_sxx /= kf;
        grad_sxy /= kf;
        grad_syy /= kf;
        for (i, gq) in grad_q.iter_mut().enumerate() {
            let v = q[i];
            gq[0] += 2.0 * v[0] * grad_sxx + v[1] * grad_sxy + grad_dbar * v[0] / (kf * dist[i]);
            gq[1] += 2.0 * v[1] * grad_syy + v[0] * grad_sxy + grad_dbar * v[1] / (kf * dist[i]);
        }
        // q = p − μ
        let mean_gq = grad_q.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]]);
        grad_mu[0] -= mean_gq[0];
        grad_mu[1] -= mean_gq[1];
        let mut grad = Vec::with_capacity(2 * k);
        for gq in &grad_q {
            grad.push(gq[0] + grad_mu[0] / kf);
            grad.push(gq[1] + grad_mu[1] / kf);
        }
        Ok((embedding, Some(grad)))
    }
}

/// `M = (S + εI)^{-1/2}` for a 2×2 covariance, through its eigenbasis.
struct Whitening {
    /// Eigenvectors as columns: `[[c, −s], [s, c]]`.
    rot: (f64, f64),
    lambda: [f64; 2],
    m: [[f64; 2]; 2],
}

impl Whitening {
    fn new(sxx: f64, sxy: f64, syy: f64) -> Self {
        let mean = 0.5 * (sxx + syy);
        let half = 0.5 * (sxx - syy);
        let r = (half * half + sxy * sxy).sqrt();
        let lambda = [mean + r + COVARIANCE_FLOOR, (mean - r).max(0.0) + COVARIANCE_FLOOR];
        let angle = 0.5 * libm::atan2(sxy, half);
        let rot = (libm::cos(angle), libm::sin(angle));
        let f = [1.0 / lambda[0].sqrt(), 1.0 / lambda[1].sqrt()];
        let m = Self::compose(rot, f);
        Self { rot, lambda, m }
    }

    /// `V·diag(f)·Vᵀ`.
    fn compose((c, s): (f64, f64), f: [f64; 2]) -> [[f64; 2]; 2] {
        let off = (f[0] - f[1]) * c * s;
        [
            [f[0] * c * c + f[1] * s * s, off],
            [off, f[0] * s * s + f[1] * c * c],
        ]
    }

    fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * v[0] + self.m[0][1] * v[1],
            self.m[1][0] * v[0] + self.m[1][1] * v[1],
        ]
    }

    /// Gradients with respect to `(sxx, sxy, syy)` and the direct path
    /// `Mᵀ·∂u` for each point.
    fn backward(&self, q: &[[f64; 2]], grad_u: &[[f64; 2]]) -> ([f64; 3], Vec<[f64; 2]>) {
        let mut gm = [[0.0; 2]; 2];
        let direct = q
            .iter()
            .zip(grad_u)
            .map(|(v, g)| {
                for r in 0..2 {
                    for c in 0..2 {
                        gm[r][c] += g[r] * v[c];
                    }
                }
                [
                    self.m[0][0] * g[0] + self.m[1][0] * g[1],
                    self.m[0][1] * g[0] + self.m[1][1] * g[1],
                ]
            })
            .collect();
        // divided differences of λ^{-1/2}, stable at equal eigenvalues
        let sq = [self.lambda[0].sqrt(), self.lambda[1].sqrt()];
        let dd = |a: usize, b: usize| -1.0 / (sq[a] * sq[b] * (sq[a] + sq[b]));
        let (c, s) = self.rot;
        let v = [[c, -s], [s, c]];
        // Vᵀ·G·V, scaled elementwise, rotated back
        let mut t = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for r in 0..2 {
                    for col in 0..2 {
                        acc += v[r][a] * gm[r][col] * v[col][b];
                    }
                }
                t[a][b] = acc * dd(a, b);
            }
        }
        let mut h = [[0.0; 2]; 2];
        for r in 0..2 {
            for col in 0..2 {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += v[r][a] * t[a][b] * v[col][b];
                    }
                }
                h[r][col] = acc;
            }
        }
        ([h[0][0], h[0][1] + h[1][0], h[1][1]], direct)
    }
}

/// `e^{−κ}·I₀(κ)`: the mean of `exp(κ(cos φ − 1))` over a uniform angle.
fn bessel_i0_scaled(kappa: f64) -> f64 {
    // power series of I₀; converges quickly for the small κ used here
    let x = kappa / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..60 {
        term *= (x / n as f64) * (x / n as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum * libm::exp(-kappa)
}

/// Mean embedding of a domain under the default factor prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAnchor {
    pub kind: DomainKind,
    pub n: usize,
    pub seed: u64,
    pub anchor: Vec<f64>,
}

pub const MIN_ANCHOR_SAMPLES: usize = 16;

pub fn anchor(space: &EmbeddingSpace, kind: DomainKind, n: usize, seed: u64, points: usize) -> Result<DomainAnchor> {
    if n < MIN_ANCHOR_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "anchor needs at least {MIN_ANCHOR_SAMPLES} samples, got {n}"
        )));
    }
    let prior = FactorPrior::default();
    let mut rng = Rng::new(seed);
    let mut acc = vec![0.0; space.dim()];
    for _ in 0..n {
        let theta = prior.sample(&mut rng);
        let e = space.embed(&render(kind, &theta, points)?)?;
        for (a, x) in acc.iter_mut().zip(&e) {
            *a += x;
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Ok(DomainAnchor {
        kind,
        n,
        seed,
        anchor: acc,
    })
}

/// Write anchors as JSON with full-precision decimal floats.
pub fn write_anchors(path: &std::path::Path, anchors: &[DomainAnchor]) -> Result<()> {
    let text = serde_json::to_string_pretty(anchors).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_anchors(path: &std::path::Path) -> Result<Vec<DomainAnchor>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn approx(a: [f64; 2], b: [f64; 2]) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn unit_circle_axis_points() {
        let c = render(DomainKind::Ellipse, &FactorVector::UNIT, 4).unwrap();
        let expected = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (p, e) in c.points().zip(expected) {
            assert!(approx(p, e), "{p:?} vs {e:?}");
        }
    }

    #[test]
    fn translated_circle() {
        let theta = FactorVector { cx: 5.0, ..FactorVector::UNIT };
        let c = render(DomainKind::Ellipse, &theta, 4).unwrap();
        let expected = [[6.0, 0.0], [5.0, 1.0], [4.0, 0.0], [5.0, -1.0]];
        for (p, e) in c.points().zip(expected) {
            assert!(approx(p, e));
        }
    }

    #[test]
    fn star5_matches_hand_computed_vertices() {
        let c = render(DomainKind::Star5, &FactorVector::UNIT, 10).unwrap();
        let fixture = [
            [1.5, 0.0],
            [0.4045084971874737, 0.29389262614623657],
            [0.4635254915624212, 1.4265847744427302],
            [-0.1545084971874737, 0.47552825814757677],
            [-1.2135254915624212, 0.8816778784387097],
            [-0.5, 0.0],
            [-1.2135254915624212, -0.8816778784387097],
            [-0.1545084971874737, -0.47552825814757677],
            [0.4635254915624212, -1.4265847744427302],
            [0.4045084971874737, -0.29389262614623657],
        ];
        for (p, e) in c.points().zip(fixture) {
            assert!(approx(p, e), "{p:?} vs {e:?}");
        }
    }

    #[test]
    fn invalid_factors_and_kind() {
        let bad = FactorVector { r: -1.0, ..FactorVector::UNIT };
        assert!(render(DomainKind::Ellipse, &bad, 8).is_err());
        assert!(matches!("hexagon".parse::<DomainKind>(), Err(Error::UnknownKind(_))));
        assert_eq!("double-ring".parse::<DomainKind>().unwrap(), DomainKind::DoubleRing);
    }

    #[test]
    fn unit_circle_embedding() {
        let space = EmbeddingSpace::default();
        assert_eq!(space.dim(), 30);
        let c = render(DomainKind::Ellipse, &FactorVector::UNIT, 64).unwrap();
        let e = space.embed(&c).unwrap();
        assert!(e[0].abs() < 1e-12 && e[1].abs() < 1e-12);
        // d̄ = 1 maps to (1 − offset)·weight = 0
        assert!(e[5].abs() < 1e-12);
    }

    #[test]
    fn translation_only_moves_centroid() {
        let space = EmbeddingSpace::default();
        let theta = FactorVector { r: 0.8, cx: 0.3, cy: -0.2, ecc: 0.2 };
        let a = render(DomainKind::Star5, &theta, 32).unwrap();
        let shifted: Vec<f64> = a
            .coords()
            .chunks(2)
            .flat_map(|p| [p[0] + 1.5, p[1]])
            .collect();
        let b = PointCloud::from_coords(shifted).unwrap();
        let (ea, eb) = (space.embed(&a).unwrap(), space.embed(&b).unwrap());
        // the raw feature moves by exactly the shift
        assert!(((eb[0] - ea[0]) / space.weights()[0] - 1.5).abs() < 1e-12);
        for j in 1..space.dim() {
            assert!((ea[j] - eb[j]).abs() < 1e-12, "feature {j}");
        }
    }

    #[test]
    fn permutation_invariant() {
        let space = EmbeddingSpace::default();
        let theta = FactorVector { r: 1.1, cx: 0.1, cy: 0.4, ecc: -0.1 };
        let a = render(DomainKind::Square, &theta, 32).unwrap();
        let mut pts: Vec<[f64; 2]> = a.points().collect();
        pts.reverse();
        pts.rotate_left(5);
        let b = PointCloud::from_points(&pts);
        for (x, y) in space.embed(&a).unwrap().iter().zip(space.embed(&b).unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for space in [EmbeddingSpace::default(), EmbeddingSpace::held_out()] {
            for _ in 0..10 {
                let coords: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
                let cloud = PointCloud::from_coords(coords.clone()).unwrap();
                for j in 0..space.dim() {
                    let mut up = vec![0.0; space.dim()];
                    up[j] = 1.0;
                    let (_, g) = space.embed_vjp(&cloud, &up).unwrap();
                    let fd = finite_diff_grad(
                        |x| space.embed(&PointCloud::from_coords(x.to_vec()).unwrap()).unwrap()[j],
                        &coords,
                        1e-6,
                    )
                    .unwrap();
                    let err = relative_error(&g, &fd, 1e-8);
                    assert!(err < 1e-5, "feature {j}: {err}");
                }
            }
        }
    }

    #[test]
    fn anchors_are_deterministic_and_distinct() {
        let space = EmbeddingSpace::default();
        let a = anchor(&space, DomainKind::Ellipse, 256, 0, 32).unwrap();
        let b = anchor(&space, DomainKind::Ellipse, 256, 0, 32).unwrap();
        assert_eq!(a, b);
        let s = anchor(&space, DomainKind::Square, 256, 0, 32).unwrap();
        let gap = crate::numerics::norm(
            &s.anchor.iter().zip(&a.anchor).map(|(x, y)| x - y).collect::<Vec<_>>(),
        );
        assert!(gap > 0.05, "gap {gap}");
        assert!(anchor(&space, DomainKind::Square, 8, 0, 32).is_err());
    }

    #[test]
    fn bessel_mean_matches_quadrature() {
        let kappa = 3.0;
        let n = 20_000;
        let quad: f64 = (0..n)
            .map(|i| (kappa * ((2.0 * PI * i as f64 / n as f64).cos() - 1.0)).exp())
            .sum::<f64>()
            / n as f64;
        assert!((bessel_i0_scaled(kappa) - quad).abs() < 1e-12);
    }
}
