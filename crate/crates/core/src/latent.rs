//! Latent basis from the first generator layer, dormancy, and the affine
//! base / repurposed subspaces.

use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::numerics::{axpy, dot, svd, Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Orthonormal latent directions sorted by descending singular value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentBasis {
    /// `directions[i]` is `v_i`.
    pub directions: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Singular values at or below `max(S)·RANK_TOLERANCE` are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

impl LatentBasis {
    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// `V` with the directions as columns.
    pub fn matrix(&self) -> Tensor {
        let d = self.dim();
        let mut m = Tensor::zeros(&[d, d]);
        for (j, v) in self.directions.iter().enumerate() {
            for (i, x) in v.iter().enumerate() {
                m.set(i, j, *x);
            }
        }
        m
    }

    /// Coordinates of `z − z̄` along each direction.
    pub fn coefficients(&self, z: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.directions.iter().map(|v| dot(v, &centered)).collect()
    }

    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (i, a) in self.directions.iter().enumerate() {
            for (j, b) in self.directions.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }
}

/// Right singular vectors of `w1` completed to a basis of the latent space.
pub fn factorize(w1: &Tensor, mean: &[f64]) -> Result<LatentBasis> {
    let d = w1.cols();
    if mean.len() != d {
        return Err(Error::Shape(format!("mean of length {} for {} latent dims", mean.len(), d)));
    }
    let dec = svd(w1)?;
    let s_max = dec.s.first().copied().unwrap_or(0.0);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut singular_values = Vec::with_capacity(d);
    let mut pending = Vec::new();
    for (i, s) in dec.s.iter().enumerate() {
        if *s > s_max * RANK_TOLERANCE && *s > 0.0 {
            directions.push(dec.vt.row(i).to_vec());
            singular_values.push(*s);
        }
    }
    while directions.len() < d {
        pending.push(directions.len());
        directions.push(vec![0.0; d]);
        singular_values.push(0.0);
    }
    crate::numerics::svd_complete(&mut directions, &pending, d);
    Ok(LatentBasis {
        directions,
        singular_values,
        mean: mean.to_vec(),
    })
}

/// Mean output displacement `‖G(z + scale·v_i) − G(z)‖₂` over `z ~ N(0, I)`.
pub fn dormancy_scores(
    params: &GeneratorParams,
    basis: &LatentBasis,
    n_samples: usize,
    scale: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("dormancy needs at least one sample".into()));
    }
    let d = basis.dim();
    let zs: Vec<Vec<f64>> = (0..n_samples).map(|_| rng.normal_vec(d)).collect();
    let base: Vec<_> = zs.iter().map(|z| params.forward(z)).collect::<Result<_>>()?;
    basis
        .directions
        .iter()
        .map(|v| {
            let mut acc = 0.0;
            for (z, x0) in zs.iter().zip(&base) {
                let moved = traverse(z, v, scale);
                acc += params.forward(&moved)?.sq_distance(x0).sqrt();
            }
            Ok(acc / n_samples as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "indices")]
pub enum SelectionPolicy {
    /// The last `N` basis columns.
    Last,
    /// Caller-chosen columns, not checked against dormancy.
    Explicit(Vec<usize>),
    /// The `N` columns with the smallest dormancy score.
    LowestScore,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::Last
    }
}

/// Column indices to repurpose, plus warnings for the run log.
pub fn select_directions(
    basis: &LatentBasis,
    scores: Option<&[f64]>,
    count: usize,
    policy: &SelectionPolicy,
) -> Result<(Vec<usize>, Vec<String>)> {
    let d = basis.dim();
    if count > d {
        return Err(Error::InvalidArgument(format!("{count} directions requested from {d}")));
    }
    let mut warnings = Vec::new();
    let picked = match policy {
        SelectionPolicy::Last => (d - count..d).collect(),
        SelectionPolicy::Explicit(idx) => {
            if idx.len() != count {
                return Err(Error::InvalidArgument(format!(
                    "{} explicit indices for {count} domains",
                    idx.len()
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &i in idx {
                if i >= d {
                    return Err(Error::InvalidArgument(format!("direction {i} out of range")));
                }
                if !seen.insert(i) {
                    return Err(Error::InvalidArgument(format!("duplicate direction {i}")));
                }
                if basis.singular_values[i] > basis.singular_values[0] * 1e-3 {
                    warnings.push(format!(
                        "direction {i} is not dormant (singular value {:.3e}); existing behavior along it will be rewritten",
                        basis.singular_values[i]
                    ));
                }
            }
            idx.clone()
        }
        SelectionPolicy::LowestScore => {
            let scores = scores.ok_or_else(|| {
                Error::InvalidArgument("lowest-score policy needs dormancy scores".into())
            })?;
            if scores.len() != d {
                return Err(Error::Shape("one dormancy score per direction".into()));
            }
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            order.truncate(count);
            order
        }
    };
    Ok((picked, warnings))
}

/// Which latent direction each new domain occupies, and the shift `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceRegistry {
    pub s: f64,
    pub assignments: BTreeMap<String, usize>,
}

pub const DEFAULT_SHIFT: f64 = 20.0;

impl SubspaceRegistry {
    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("shift magnitude {s} must be positive")));
        }
        Ok(Self {
            s,
            assignments: BTreeMap::new(),
        })
    }

    pub fn assign(&mut self, domain_id: &str, index: usize) -> Result<()> {
        if self.assignments.values().any(|&i| i == index) {
            return Err(Error::InvalidArgument(format!("direction {index} already assigned")));
        }
        if self.assignments.insert(domain_id.to_string(), index).is_some() {
            return Err(Error::InvalidArgument(format!("domain `{domain_id}` assigned twice")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn index_of(&self, domain_id: &str) -> Result<usize> {
        self.assignments
            .get(domain_id)
            .copied()
            .ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))
    }

    pub fn repurposed(&self) -> impl Iterator<Item = usize> + '_ {
        self.assignments.values().copied()
    }
}

/// A target of projection.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Subspace {
    Base,
    Domain(String),
}

impl std::fmt::Display for Subspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Subspace::Base => f.write_str("base"),
            Subspace::Domain(id) => f.write_str(id),
        }
    }
}

/// `z̄ + Σ_{j not repurposed} ⟨v_j, z − z̄⟩·v_j`.
pub fn project_base(z: &[f64], basis: &LatentBasis, registry: &SubspaceRegistry) -> Result<Vec<f64>> {
    let d = basis.dim();
    if z.len() != d {
        return Err(Error::Shape(format!("latent of length {}, expected {d}", z.len())));
    }
    let centered: Vec<f64> = z.iter().zip(&basis.mean).map(|(a, b)| a - b).collect();
    let mut out = basis.mean.clone();
    for (j, v) in basis.directions.iter().enumerate() {
        if registry.assignments.values().any(|&i| i == j) {
            continue;
        }
        axpy(dot(v, &centered), v, &mut out);
    }
    Ok(out)
}

/// `project_base(z) + s·v_i` for the direction assigned to `domain_id`.
pub fn project_repurposed(
    z: &[f64],
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    domain_id: &str,
) -> Result<Vec<f64>> {
    let i = registry.index_of(domain_id)?;
    let base = project_base(z, basis, registry)?;
    Ok(traverse(&base, &basis.directions[i], registry.s))
}

pub fn project(z: &[f64], basis: &LatentBasis, registry: &SubspaceRegistry, target: &Subspace) -> Result<Vec<f64>> {
    match target {
        Subspace::Base => project_base(z, basis, registry),
        Subspace::Domain(id) => project_repurposed(z, basis, registry, id),
    }
}

/// `z + α·v`.
pub fn traverse(z: &[f64], direction: &[f64], alpha: f64) -> Vec<f64> {
    z.iter().zip(direction).map(|(a, v)| a + alpha * v).collect()
}

/// `z + Σ α_i·v_i`, summed in ascending index order so the result does not
/// depend on the order of `steps`.
pub fn compose(z: &[f64], basis: &LatentBasis, steps: &[(usize, f64)]) -> Result<Vec<f64>> {
    let mut sorted = steps.to_vec();
    sorted.sort_by_key(|(i, _)| *i);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument("duplicate direction in composition".into()));
    }
    if let Some((i, _)) = sorted.iter().find(|(i, _)| *i >= basis.dim()) {
        return Err(Error::InvalidArgument(format!("direction {i} out of range")));
    }
    let mut out = z.to_vec();
    for (i, alpha) in sorted {
        out = traverse(&out, &basis.directions[i], alpha);
    }
    Ok(out)
}
