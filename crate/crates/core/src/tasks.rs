//! Loss terms: source fit, replay alignment, directional and few-shot
//! adaptation, and their sums.

use crate::error::{Error, Result};
use crate::generator::{FrozenGenerator, GeneratorParams};
use crate::latent::{project_base, project_repurposed, LatentBasis, SubspaceRegistry};
use crate::numerics::{dot, norm, Rng};
use crate::scene::{render_unchecked, DomainKind, EmbeddingSpace, FactorVector, PointCloud};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Guard added to both norms of the directional cosine.
pub const COSINE_EPS: f64 = 1e-8;

/// At most this many tasks contribute to one iteration.
pub const MAX_TASKS_PER_STEP: usize = 16;

/// Affine map from latent codes to ellipse factors, `θ = θ̄ + diag(scales)·Q·z`
/// with orthonormal rows `Q` (4×D).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMap {
    pub rows: Vec<Vec<f64>>,
    pub scales: [f64; 4],
    pub offset: [f64; 4],
}

impl FactorMap {
    /// Default per-factor spread for `(r, cx, cy, ecc)`.
    pub const DEFAULT_SCALES: [f64; 4] = [0.15, 0.35, 0.35, 0.1];

    /// Random orthonormal rows drawn from `rng`.
    pub fn random(latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        if latent_dim < 4 {
            return Err(Error::InvalidArgument("factor map needs at least 4 latent dimensions".into()));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(4);
        while rows.len() < 4 {
            let mut v = rng.normal_vec(latent_dim);
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for r in &rows {
                    let c = dot(r, &v);
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= c * b);
                }
            }
            let n = norm(&v);
            if n > 1e-6 {
                rows.push(v.iter().map(|x| x / n).collect());
            }
        }
        Ok(Self {
            rows,
            scales: Self::DEFAULT_SCALES,
            offset: FactorVector::UNIT.to_array(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.rows[0].len()
    }

    /// Largest `|⟨q_i, q_j⟩ − δ_ij|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.rows.iter().enumerate() {
            for (j, b) in self.rows.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }

    /// Factors for the latent part of `z` (extra trailing inputs are ignored).
    pub fn theta(&self, z: &[f64]) -> FactorVector {
        let d = self.latent_dim();
        let mut t = self.offset;
        for (k, row) in self.rows.iter().enumerate() {
            t[k] += self.scales[k] * dot(row, &z[..d]);
        }
        FactorVector::from_array(t)
    }

    /// Source-domain target cloud for `z`.
    pub fn target(&self, z: &[f64], points: usize) -> PointCloud {
        self.target_kind(DomainKind::Ellipse, z, points)
    }

    /// The same scene rendered as another kind.
    pub fn target_kind(&self, kind: DomainKind, z: &[f64], points: usize) -> PointCloud {
        render_unchecked(kind, &self.theta(z), points)
    }
}

/// Loss weights shared by every term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_lpips: f64,
    pub lambda_l2: f64,
    pub lambda_src: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lpips: 10.0,
            lambda_l2: 10.0,
            lambda_src: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_lpips, self.lambda_l2, self.lambda_src]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Everything a loss needs besides parameters and samples.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub space: EmbeddingSpace,
    pub weights: LossWeights,
    pub factor_map: FactorMap,
}

/// Scalar loss, named sub-terms and the parameter gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub terms: BTreeMap<String, f64>,
    pub grads: Vec<f64>,
}

impl LossReport {
    pub fn zero(param_count: usize) -> Self {
        Self {
            value: 0.0,
            terms: BTreeMap::new(),
            grads: vec![0.0; param_count],
        }
    }

    fn single(name: &str, value: f64, grads: Vec<f64>) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(name.to_string(), value);
        Self { value, terms, grads }
    }

    /// Adds `scale·other`, prefixing its term names.
    pub fn accumulate(&mut self, other: &LossReport, scale: f64, prefix: &str) {
        self.value += scale * other.value;
        for (k, v) in &other.terms {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}{k}")
            };
            *self.terms.entry(key).or_insert(0.0) += scale * v;
        }
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            *g += scale * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.iter().all(|g| g.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<String> {
        self.terms
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.clone())
            .or_else(|| (!self.is_finite()).then(|| "gradient".to_string()))
    }
}

/// Where the source image of the directional loss comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NadaMode {
    FrozenCopy,
    #[default]
    BaseSubspace,
}

/// Reference pair for few-shot adaptation: a latent code and its image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub z: Vec<f64>,
    pub x: PointCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    Directional {
        source_anchor: Vec<f64>,
        target_anchor: Vec<f64>,
        mode: NadaMode,
    },
    Fewshot {
        references: Vec<Reference>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTask {
    pub domain_id: String,
    pub kind: TaskKind,
}

impl AdaptationTask {
    pub fn directional(domain_id: &str, source_anchor: Vec<f64>, target_anchor: Vec<f64>, mode: NadaMode) -> Result<Self> {
        if source_anchor.len() != target_anchor.len() {
            return Err(Error::Shape("anchors of different length".into()));
        }
        Ok(Self {
            domain_id: domain_id.to_string(),
            kind: TaskKind::Directional {
                source_anchor,
                target_anchor,
                mode,
            },
        })
    }

    pub fn fewshot(domain_id: &str, references: Vec<Reference>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::EmptyReferences);
        }
        Ok(Self {
            domain_id: domain_id.to_string(),
            kind: TaskKind::Fewshot { references },
        })
    }
}

/// Produces the source image `X_src(z)` for the directional loss. No
/// gradient flows through it.
pub enum SourceProvider<'a> {
    /// `G_frozen` on the latent part of the input.
    Frozen(&'a FrozenGenerator),
    /// The generator being trained, on a remapped input.
    Current(&'a dyn Fn(&[f64]) -> Result<Vec<f64>>),
    /// A snapshot on a remapped input.
    Snapshot(&'a FrozenGenerator, &'a dyn Fn(&[f64]) -> Result<Vec<f64>>),
}

impl SourceProvider<'_> {
    fn source(&self, g: &GeneratorParams, input: &[f64]) -> Result<PointCloud> {
        match self {
            SourceProvider::Frozen(f) => f.forward(&input[..f.params().arch.input_dim()]),
            SourceProvider::Current(map) => g.forward(&map(input)?),
            SourceProvider::Snapshot(f, map) => f.forward(&map(input)?),
        }
    }
}

fn check_batch(inputs: &[Vec<f64>]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(())
}

/// `mean ‖G(z) − render(ellipse, θ(z))‖²`.
pub fn loss_src(g: &GeneratorParams, inputs: &[Vec<f64>], map: &FactorMap) -> Result<LossReport> {
    check_batch(inputs)?;
    let n = inputs.len() as f64;
    let mut grads = vec![0.0; g.values.len()];
    let mut value = 0.0;
    for z in inputs {
        let trace = g.trace(z)?;
        let target = map.target(z, g.arch.points);
        let diff: Vec<f64> = trace.output.iter().zip(target.coords()).map(|(a, b)| a - b).collect();
        value += dot(&diff, &diff) / n;
        let up: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
        g.backward_into(&trace, &up, &mut grads);
    }
    Ok(LossReport::single("src", value, grads))
}

/// `λ_lpips·mean‖E(G_f(z)) − E(G(z))‖² + λ_L2·mean‖G_f(z) − G(z)‖₂`.
pub fn loss_recon_replay(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    inputs: &[Vec<f64>],
    ctx: &LossContext,
) -> Result<LossReport> {
    check_batch(inputs)?;
    let n = inputs.len() as f64;
    let w = ctx.weights;
    let fd = frozen.params().arch.input_dim();
    let mut grads = vec![0.0; g.values.len()];
    let (mut perceptual, mut pixel) = (0.0, 0.0);
    for z in inputs {
        let reference = frozen.forward(&z[..fd])?;
        let trace = g.trace(z)?;
        let out = PointCloud::from_coords(trace.output.clone())?;
        let e_ref = ctx.space.embed(&reference)?;
        let e_out = ctx.space.embed(&out)?;
        let de: Vec<f64> = e_out.iter().zip(&e_ref).map(|(a, b)| a - b).collect();
        perceptual += dot(&de, &de) / n;
        let up_e: Vec<f64> = de.iter().map(|d| w.lambda_lpips * 2.0 * d / n).collect();
        let (_, mut up) = ctx.space.embed_vjp(&out, &up_e)?;

        let dx: Vec<f64> = trace.output.iter().zip(reference.coords()).map(|(a, b)| a - b).collect();
        let dist = norm(&dx);
        pixel += dist / n;
        if dist > 0.0 {
            for (u, d) in up.iter_mut().zip(&dx) {
                *u += w.lambda_l2 * d / (dist * n);
            }
        }
        g.backward_into(&trace, &up, &mut grads);
    }
    let mut terms = BTreeMap::new();
    terms.insert("recon_lpips".to_string(), w.lambda_lpips * perceptual);
    terms.insert("recon_l2".to_string(), w.lambda_l2 * pixel);
    Ok(LossReport {
        value: w.lambda_lpips * perceptual + w.lambda_l2 * pixel,
        terms,
        grads,
    })
}

/// `mean(1 − cos(ΔI, ΔT))` with `ΔI = E(G(z)) − E(X_src(z))` and
/// `ΔT = target − source` anchor.
pub fn loss_directional(
    g: &GeneratorParams,
    source: &SourceProvider<'_>,
    inputs: &[Vec<f64>],
    source_anchor: &[f64],
    target_anchor: &[f64],
    space: &EmbeddingSpace,
) -> Result<LossReport> {
    check_batch(inputs)?;
    if source_anchor.len() != space.dim() || target_anchor.len() != space.dim() {
        return Err(Error::Shape("anchor length differs from embedding dimension".into()));
    }
    let dt: Vec<f64> = target_anchor.iter().zip(source_anchor).map(|(a, b)| a - b).collect();
    let dt_norm = norm(&dt);
    if dt_norm < COSINE_EPS {
        return Err(Error::DegenerateAnchors);
    }
    let n = inputs.len() as f64;
    let dt_guard = dt_norm + COSINE_EPS;
    let mut grads = vec![0.0; g.values.len()];
    let mut value = 0.0;
    for z in inputs {
        let e_src = space.embed(&source.source(g, z)?)?;
        let trace = g.trace(z)?;
        let out = PointCloud::from_coords(trace.output.clone())?;
        let e_out = space.embed(&out)?;
        let di: Vec<f64> = e_out.iter().zip(&e_src).map(|(a, b)| a - b).collect();
        let di_norm = norm(&di);
        let di_guard = di_norm + COSINE_EPS;
        let inner = dot(&di, &dt);
        value += (1.0 - inner / (di_guard * dt_guard)) / n;

        // ∂/∂ΔI of −⟨ΔI, ΔT⟩ / ((|ΔI| + ε)(|ΔT| + ε))
        let radial = if di_norm > 0.0 {
            inner / (di_guard * di_guard * dt_guard * di_norm)
        } else {
            0.0
        };
        let up_e: Vec<f64> = di
            .iter()
            .zip(&dt)
            .map(|(i, t)| (-t / (di_guard * dt_guard) + radial * i) / n)
            .collect();
        let (_, up) = space.embed_vjp(&out, &up_e)?;
        g.backward_into(&trace, &up, &mut grads);
    }
    Ok(LossReport::single("directional", value, grads))
}

/// `mean_m ‖E(G(z_m)) − E(x_m)‖² + ‖G(z_m) − x_m‖₂`, with `z_m` already
/// projected by the caller.
pub fn loss_fewshot(
    g: &GeneratorParams,
    inputs: &[Vec<f64>],
    targets: &[PointCloud],
    space: &EmbeddingSpace,
) -> Result<LossReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if inputs.len() != targets.len() {
        return Err(Error::Shape("few-shot inputs and targets differ in count".into()));
    }
    let n = inputs.len() as f64;
    let mut grads = vec![0.0; g.values.len()];
    let mut value = 0.0;
    for (z, x) in inputs.iter().zip(targets) {
        let trace = g.trace(z)?;
        let out = PointCloud::from_coords(trace.output.clone())?;
        let e_out = space.embed(&out)?;
        let e_ref = space.embed(x)?;
        let de: Vec<f64> = e_out.iter().zip(&e_ref).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = trace.output.iter().zip(x.coords()).map(|(a, b)| a - b).collect();
        let dist = norm(&dx);
        value += (dot(&de, &de) + dist) / n;
        let up_e: Vec<f64> = de.iter().map(|d| 2.0 * d / n).collect();
        let (_, mut up) = space.embed_vjp(&out, &up_e)?;
        if dist > 0.0 {
            for (u, d) in up.iter_mut().zip(&dx) {
                *u += d / (dist * n);
            }
        }
        g.backward_into(&trace, &up, &mut grads);
    }
    Ok(LossReport::single("fewshot", value, grads))
}

/// Loss of one task on latent codes that are already inside its subspace.
pub fn task_loss(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    task: &AdaptationTask,
    projected: &[Vec<f64>],
    space: &EmbeddingSpace,
) -> Result<LossReport> {
    match &task.kind {
        TaskKind::Directional {
            source_anchor,
            target_anchor,
            mode,
        } => {
            let to_base = |z: &[f64]| project_base(z, basis, registry);
            let provider = match mode {
                NadaMode::FrozenCopy => SourceProvider::Frozen(frozen),
                NadaMode::BaseSubspace => SourceProvider::Current(&to_base),
            };
            loss_directional(g, &provider, projected, source_anchor, target_anchor, space)
        }
        TaskKind::Fewshot { references } => {
            let targets: Vec<PointCloud> = references.iter().map(|r| r.x.clone()).collect();
            loss_fewshot(g, projected, &targets, space)
        }
    }
}

/// Latent codes a task trains on before projection: a fresh standard-normal
/// batch for directional tasks, the fixed reference codes for few-shot ones.
pub fn task_samples(task: &AdaptationTask, latent_dim: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    match &task.kind {
        TaskKind::Directional { .. } => (0..batch).map(|_| rng.normal_vec(latent_dim)).collect(),
        TaskKind::Fewshot { references } => references.iter().map(|r| r.z.clone()).collect(),
    }
}

/// `Σ_i ℒ_i(G(proj_{𝒵_i}(z)))` on caller-supplied, unprojected codes (one
/// batch per task, in task order).
#[allow(clippy::too_many_arguments)]
pub fn loss_expand_on(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    tasks: &[&AdaptationTask],
    batches: &[Vec<Vec<f64>>],
    scale: f64,
    space: &EmbeddingSpace,
) -> Result<LossReport> {
    if tasks.len() != batches.len() {
        return Err(Error::Shape("one batch per task".into()));
    }
    let mut report = LossReport::zero(g.values.len());
    for (task, batch) in tasks.iter().zip(batches) {
        let projected: Vec<Vec<f64>> = batch
            .iter()
            .map(|z| project_repurposed(z, basis, registry, &task.domain_id))
            .collect::<Result<_>>()?;
        let part = task_loss(g, frozen, basis, registry, task, &projected, space)?;
        report.accumulate(&part, scale, &format!("{}/", task.domain_id));
    }
    Ok(report)
}

/// Monte-Carlo estimate of the expansion loss with `batch` fresh samples per
/// task. With more than [`MAX_TASKS_PER_STEP`] tasks a uniform subset is
/// used and rescaled.
#[allow(clippy::too_many_arguments)]
pub fn loss_expand(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    tasks: &[AdaptationTask],
    rng: &mut Rng,
    batch: usize,
    space: &EmbeddingSpace,
) -> Result<LossReport> {
    let (chosen, scale): (Vec<&AdaptationTask>, f64) = if tasks.len() > MAX_TASKS_PER_STEP {
        let mut idx = rng.sample_indices(tasks.len(), MAX_TASKS_PER_STEP);
        idx.sort_unstable();
        (
            idx.iter().map(|&i| &tasks[i]).collect(),
            tasks.len() as f64 / MAX_TASKS_PER_STEP as f64,
        )
    } else {
        (tasks.iter().collect(), 1.0)
    };
    let d = basis.dim();
    let batches: Vec<Vec<Vec<f64>>> = chosen.iter().map(|t| task_samples(t, d, batch, rng)).collect();
    loss_expand_on(g, frozen, basis, registry, &chosen, &batches, scale, space)
}

/// `λ_src·ℒ_src + ℒ_recon` on base projections of caller-supplied codes.
pub fn loss_reg_on(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    inputs: &[Vec<f64>],
    ctx: &LossContext,
) -> Result<LossReport> {
    let projected: Vec<Vec<f64>> = inputs
        .iter()
        .map(|z| project_base(z, basis, registry))
        .collect::<Result<_>>()?;
    let mut report = LossReport::zero(g.values.len());
    if ctx.weights.lambda_src != 0.0 {
        let src = loss_src(g, &projected, &ctx.factor_map)?;
        report.accumulate(&src, ctx.weights.lambda_src, "");
    }
    let recon = loss_recon_replay(g, frozen, &projected, ctx)?;
    report.accumulate(&recon, 1.0, "");
    Ok(report)
}

/// Regularization objective on `batch` fresh source samples.
pub fn loss_reg(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    rng: &mut Rng,
    batch: usize,
    ctx: &LossContext,
) -> Result<LossReport> {
    let zs: Vec<Vec<f64>> = (0..batch).map(|_| rng.normal_vec(basis.dim())).collect();
    loss_reg_on(g, frozen, basis, registry, &zs, ctx)
}

/// `ℒ_expand + ℒ_reg`. Task batches are drawn before the regularization
/// batch.
#[allow(clippy::too_many_arguments)]
pub fn loss_full(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    tasks: &[AdaptationTask],
    rng: &mut Rng,
    batch: usize,
    ctx: &LossContext,
) -> Result<LossReport> {
    let mut report = loss_expand(g, frozen, basis, registry, tasks, rng, batch, &ctx.space)?;
    let reg = loss_reg(g, frozen, basis, registry, rng, batch, ctx)?;
    report.accumulate(&reg, 1.0, "");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Architecture;
    use crate::latent::factorize;
    use crate::numerics::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};
    use crate::scene::anchor;

    fn setup(seed: u64) -> (GeneratorParams, LossContext, Rng) {
        let mut rng = Rng::new(seed);
        let g = GeneratorParams::init(Architecture::default(), &mut rng);
        let ctx = LossContext {
            space: EmbeddingSpace::default(),
            weights: LossWeights::default(),
            factor_map: FactorMap::random(16, &mut rng).unwrap(),
        };
        (g, ctx, rng)
    }

    fn batch(rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| rng.normal_vec(16)).collect()
    }

    #[test]
    fn factor_map_rows_orthonormal() {
        let m = FactorMap::random(16, &mut Rng::new(3)).unwrap();
        assert!(m.orthonormality_defect() < 1e-12);
        assert_eq!(m.theta(&[0.0; 16]), FactorVector::UNIT);
    }

    #[test]
    fn src_loss_of_zero_generator_is_target_energy() {
        let (_, ctx, mut rng) = setup(1);
        let g = GeneratorParams::zeros(Architecture::default());
        let zs = batch(&mut rng, 5);
        let expected = zs
            .iter()
            .map(|z| {
                let t = ctx.factor_map.target(z, 32);
                dot(t.coords(), t.coords())
            })
            .sum::<f64>()
            / 5.0;
        let r = loss_src(&g, &zs, &ctx.factor_map).unwrap();
        assert!((r.value - expected).abs() < 1e-12);
    }

    #[test]
    fn replay_is_zero_against_itself() {
        let (g, ctx, mut rng) = setup(2);
        let frozen = g.clone_frozen();
        let r = loss_recon_replay(&g, &frozen, &batch(&mut rng, 4), &ctx).unwrap();
        assert!(r.value.abs() < 1e-12);
        assert!(r.grads.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn replay_pixel_term_is_linear_in_bias_shift() {
        let (g, ctx, mut rng) = setup(3);
        let frozen = g.clone_frozen();
        let zs = batch(&mut rng, 3);
        let b3 = g.layout().b3;
        // shifting every output coordinate by δ moves the embedding only by
        // a centroid translation of (δ, δ): the perceptual term is 2(wδ)²
        let w = ctx.space.weights()[0];
        for delta in [1e-3, 2e-3, 4e-3] {
            let mut moved = g.clone();
            moved.values[b3.clone()].iter_mut().for_each(|b| *b += delta);
            let r = loss_recon_replay(&moved, &frozen, &zs, &ctx).unwrap();
            let pixel = 10.0 * (64.0f64).sqrt() * delta;
            assert!((r.terms["recon_l2"] - pixel).abs() < 1e-10);
            assert!((r.terms["recon_lpips"] - 10.0 * 2.0 * (w * delta).powi(2)).abs() < 1e-10);
        }
    }

    #[test]
    fn directional_loss_edge_values() {
        let (g, ctx, mut rng) = setup(4);
        let frozen = g.clone_frozen();
        let zs = batch(&mut rng, 4);
        let src = anchor(&ctx.space, DomainKind::Ellipse, 64, 0, 32).unwrap().anchor;
        let tgt = anchor(&ctx.space, DomainKind::Star5, 64, 0, 32).unwrap().anchor;
        let r = loss_directional(&g, &SourceProvider::Frozen(&frozen), &zs, &src, &tgt, &ctx.space).unwrap();
        assert_eq!(r.value, 1.0);

        let err = loss_directional(&g, &SourceProvider::Frozen(&frozen), &zs, &src, &src, &ctx.space);
        assert!(matches!(err, Err(Error::DegenerateAnchors)));

        // make ΔI parallel to ΔT by choosing the target anchor after the fact
        let mut moved = g.clone();
        let b3 = g.layout().b3;
        moved.values[b3.start] += 0.3;
        let z = &zs[..1];
        let e0 = ctx.space.embed(&frozen.forward(&z[0]).unwrap()).unwrap();
        let e1 = ctx.space.embed(&moved.forward(&z[0]).unwrap()).unwrap();
        let target: Vec<f64> = e0.iter().zip(&e1).map(|(a, b)| a + 2.5 * (b - a)).collect();
        let r = loss_directional(&moved, &SourceProvider::Frozen(&frozen), z, &e0, &target, &ctx.space).unwrap();
        let di: Vec<f64> = e1.iter().zip(&e0).map(|(a, b)| a - b).collect();
        let (a, b) = (norm(&di), 2.5 * norm(&di));
        let guard_residual = 1.0 - a * b / ((a + COSINE_EPS) * (b + COSINE_EPS));
        assert!((r.value - guard_residual).abs() < 1e-10);
    }

    #[test]
    fn fewshot_zero_on_own_outputs_and_single_reference() {
        let (g, ctx, mut rng) = setup(5);
        let zs = batch(&mut rng, 3);
        let xs: Vec<PointCloud> = zs.iter().map(|z| g.forward(z).unwrap()).collect();
        assert!(loss_fewshot(&g, &zs, &xs, &ctx.space).unwrap().value.abs() < 1e-12);

        let x = render_unchecked(DomainKind::Star5, &FactorVector::UNIT, 32);
        let r = loss_fewshot(&g, &zs[..1], std::slice::from_ref(&x), &ctx.space).unwrap();
        let out = g.forward(&zs[0]).unwrap();
        let de: Vec<f64> = ctx
            .space
            .embed(&out)
            .unwrap()
            .iter()
            .zip(ctx.space.embed(&x).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        let direct = dot(&de, &de) + out.sq_distance(&x).sqrt();
        assert!((r.value - direct).abs() < 1e-12);
        assert!(matches!(loss_fewshot(&g, &[], &[], &ctx.space), Err(Error::EmptyReferences)));
    }

    struct Expansion {
        g: GeneratorParams,
        frozen: FrozenGenerator,
        basis: LatentBasis,
        registry: SubspaceRegistry,
        tasks: Vec<AdaptationTask>,
        ctx: LossContext,
    }

    fn expansion(seed: u64) -> Expansion {
        let (g, ctx, mut rng) = setup(seed);
        let frozen = g.clone_frozen();
        let basis = factorize(&g.w1_latent(), &vec![0.0; 16]).unwrap();
        let mut registry = SubspaceRegistry::new(20.0).unwrap();
        registry.assign("star", 15).unwrap();
        registry.assign("few", 14).unwrap();
        let src = anchor(&ctx.space, DomainKind::Ellipse, 32, 0, 32).unwrap().anchor;
        let tgt = anchor(&ctx.space, DomainKind::Star5, 32, 0, 32).unwrap().anchor;
        let refs = (0..2)
            .map(|k| Reference {
                z: rng.normal_vec(16),
                x: render_unchecked(DomainKind::DoubleRing, &FactorVector { r: 1.0 + 0.1 * k as f64, ..FactorVector::UNIT }, 32),
            })
            .collect();
        let tasks = vec![
            AdaptationTask::directional("star", src, tgt, NadaMode::BaseSubspace).unwrap(),
            AdaptationTask::fewshot("few", refs).unwrap(),
        ];
        Expansion {
            g,
            frozen,
            basis,
            registry,
            tasks,
            ctx,
        }
    }

    #[test]
    fn expand_is_additive_over_tasks() {
        let e = expansion(6);
        assert_eq!(
            loss_expand(&e.g, &e.frozen, &e.basis, &e.registry, &[], &mut Rng::new(0), 4, &e.ctx.space)
                .unwrap()
                .value,
            0.0
        );
        let mut rng = Rng::new(9);
        let b0 = task_samples(&e.tasks[0], 16, 4, &mut rng);
        let b1 = task_samples(&e.tasks[1], 16, 4, &mut rng);
        let both = loss_expand_on(
            &e.g,
            &e.frozen,
            &e.basis,
            &e.registry,
            &[&e.tasks[0], &e.tasks[1]],
            &[b0.clone(), b1.clone()],
            1.0,
            &e.ctx.space,
        )
        .unwrap();
        let one = |t: &AdaptationTask, b: &Vec<Vec<f64>>| {
            loss_expand_on(&e.g, &e.frozen, &e.basis, &e.registry, &[t], std::slice::from_ref(b), 1.0, &e.ctx.space)
                .unwrap()
        };
        let (a, b) = (one(&e.tasks[0], &b0), one(&e.tasks[1], &b1));
        assert!((both.value - a.value - b.value).abs() < 1e-12);

        // a single directional task is the directional loss on the projected batch
        let projected: Vec<Vec<f64>> = b0
            .iter()
            .map(|z| project_repurposed(z, &e.basis, &e.registry, "star").unwrap())
            .collect();
        let direct = task_loss(&e.g, &e.frozen, &e.basis, &e.registry, &e.tasks[0], &projected, &e.ctx.space).unwrap();
        assert_eq!(direct.value, a.value);
    }

    #[test]
    fn expand_ignores_repurposed_components() {
        let e = expansion(7);
        let mut rng = Rng::new(1);
        let b0 = task_samples(&e.tasks[0], 16, 4, &mut rng);
        let shifted: Vec<Vec<f64>> = b0
            .iter()
            .map(|z| {
                let z = crate::latent::traverse(z, &e.basis.directions[15], 3.7);
                crate::latent::traverse(&z, &e.basis.directions[14], -1.2)
            })
            .collect();
        let eval = |b: &Vec<Vec<f64>>| {
            loss_expand_on(&e.g, &e.frozen, &e.basis, &e.registry, &[&e.tasks[0]], std::slice::from_ref(b), 1.0, &e.ctx.space)
                .unwrap()
                .value
        };
        assert!((eval(&b0) - eval(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn reg_at_source_has_zero_replay_and_lambda_zero_is_replay_only() {
        let e = expansion(8);
        let zs = batch(&mut Rng::new(2), 4);
        let r = loss_reg_on(&e.g, &e.frozen, &e.basis, &e.registry, &zs, &e.ctx).unwrap();
        assert_eq!(r.terms["recon_l2"], 0.0);
        assert!(r.terms["recon_lpips"].abs() < 1e-12);
        let projected: Vec<Vec<f64>> = zs.iter().map(|z| project_base(z, &e.basis, &e.registry).unwrap()).collect();
        let src = loss_src(&e.g, &projected, &e.ctx.factor_map).unwrap();
        assert!((r.value - src.value).abs() < 1e-12);

        let mut ctx = e.ctx.clone();
        ctx.weights.lambda_src = 0.0;
        let mut moved = e.g.clone();
        moved.values[0] += 0.1;
        let r = loss_reg_on(&moved, &e.frozen, &e.basis, &e.registry, &zs, &ctx).unwrap();
        let replay = loss_recon_replay(&moved, &e.frozen, &projected, &ctx).unwrap();
        assert_eq!(r.value, replay.value);
    }

    #[test]
    fn full_is_sum_of_parts() {
        let e = expansion(9);
        let full = loss_full(&e.g, &e.frozen, &e.basis, &e.registry, &e.tasks, &mut Rng::new(4), 4, &e.ctx).unwrap();
        let mut rng = Rng::new(4);
        let ex = loss_expand(&e.g, &e.frozen, &e.basis, &e.registry, &e.tasks, &mut rng, 4, &e.ctx.space).unwrap();
        let reg = loss_reg(&e.g, &e.frozen, &e.basis, &e.registry, &mut rng, 4, &e.ctx).unwrap();
        assert!((full.value - ex.value - reg.value).abs() < 1e-12);
        let diff = full
            .grads
            .iter()
            .zip(ex.grads.iter().zip(&reg.grads))
            .map(|(f, (a, b))| (f - a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12);

        let none = loss_full(&e.g, &e.frozen, &e.basis, &e.registry, &[], &mut Rng::new(4), 4, &e.ctx).unwrap();
        let reg = loss_reg(&e.g, &e.frozen, &e.basis, &e.registry, &mut Rng::new(4), 4, &e.ctx).unwrap();
        assert_eq!(none.value, reg.value);
    }

    /// Analytic gradient against central differences on a spread of
    /// coordinates covering every parameter block.
    pub(crate) fn check_gradient<F>(g: &GeneratorParams, f: F) -> f64
    where
        F: Fn(&GeneratorParams) -> LossReport,
    {
        let analytic = f(g).grads;
        let l = g.layout();
        let mut coords = Vec::new();
        for r in [l.w1, l.b1, l.w2, l.b2, l.w3, l.b3] {
            let step = (r.len() / 6).max(1);
            coords.extend(r.step_by(step).take(6));
        }
        let x0: Vec<f64> = coords.iter().map(|&c| g.values[c]).collect();
        let numeric = finite_diff_grad(
            |x| {
                let mut p = g.clone();
                for (&c, v) in coords.iter().zip(x) {
                    p.values[c] = *v;
                }
                f(&p).value
            },
            &x0,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        relative_error(&picked, &numeric, 1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut e = expansion(20 + seed);
            let mut rng = Rng::new(seed);
            // move away from the frozen copy so every term is active
            for v in e.g.values.iter_mut() {
                *v += 0.01 * rng.normal();
            }
            let zs = batch(&mut rng, 3);
            // the base-subspace source branch carries no gradient, so the
            // oracle holds it at the unperturbed parameters
            let snapshot = e.g.clone_frozen();
            let to_base = |z: &[f64]| project_base(z, &e.basis, &e.registry);
            let held = SourceProvider::Snapshot(&snapshot, &to_base);
            let TaskKind::Directional { source_anchor, target_anchor, .. } = e.tasks[0].kind.clone() else {
                unreachable!()
            };
            let inside: Vec<Vec<f64>> =
                zs.iter().map(|z| project_repurposed(z, &e.basis, &e.registry, "star").unwrap()).collect();
            let current = SourceProvider::Current(&to_base);
            let analytic = loss_directional(&e.g, &current, &inside, &source_anchor, &target_anchor, &e.ctx.space).unwrap();
            let held_at = loss_directional(&e.g, &held, &inside, &source_anchor, &target_anchor, &e.ctx.space).unwrap();
            assert_eq!(analytic, held_at);
            let mut copy_tasks = e.tasks.clone();
            if let TaskKind::Directional { mode, .. } = &mut copy_tasks[0].kind {
                *mode = NadaMode::FrozenCopy;
            }
            let errs = [
                check_gradient(&e.g, |p| {
                    loss_directional(p, &held, &inside, &source_anchor, &target_anchor, &e.ctx.space).unwrap()
                }),
                check_gradient(&e.g, |p| loss_fewshot(p, &inside, &[render_unchecked(DomainKind::Square, &FactorVector::UNIT, 32), render_unchecked(DomainKind::Star5, &FactorVector::UNIT, 32), render_unchecked(DomainKind::Ellipse, &FactorVector::UNIT, 32)], &e.ctx.space).unwrap()),
                check_gradient(&e.g, |p| loss_src(p, &zs, &e.ctx.factor_map).unwrap()),
                check_gradient(&e.g, |p| loss_recon_replay(p, &e.frozen, &zs, &e.ctx).unwrap()),
                check_gradient(&e.g, |p| {
                    loss_full(p, &e.frozen, &e.basis, &e.registry, &copy_tasks, &mut Rng::new(seed), 3, &e.ctx).unwrap()
                }),
            ];
            for err in errs {
                assert!(err < 1e-4, "relative error {err}");
            }
            e.ctx.weights.lambda_src = 0.5;
        }
    }
}
