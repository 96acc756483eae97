//! Training entry points and checkpoints.

use crate::error::{Error, Result};
use crate::generator::{Architecture, FrozenGenerator, GeneratorParams};
use crate::latent::{
    dormancy_scores, factorize, project_repurposed, select_directions, LatentBasis, SelectionPolicy,
    SubspaceRegistry, DEFAULT_SHIFT,
};
use crate::numerics::{AdamConfig, AdamState, Rng};
use crate::scene::{EmbeddingSpace, PointCloud};
use crate::tasks::{
    loss_directional, loss_fewshot, loss_full, loss_recon_replay, loss_src, task_loss, AdaptationTask, FactorMap,
    LossContext, LossReport, LossWeights, NadaMode, SourceProvider, TaskKind,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Loss level pretraining must reach.
pub const PRETRAIN_TARGET: f64 = 1e-3;
/// Pretraining may run this many times its nominal budget.
pub const PRETRAIN_BUDGET_FACTOR: usize = 4;
/// Past the nominal budget the probe loss is checked this often.
pub const PRETRAIN_CHECK_INTERVAL: usize = 500;
/// Size of the fixed probe batch used for terminal losses.
pub const PROBE_SIZE: usize = 256;

// Substream ids, so that unrelated consumers of one seed never overlap.
const STREAM_INIT: u64 = 1;
const STREAM_FACTORS: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_PROBE: u64 = 4;
const STREAM_DORMANCY: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            lr: 1e-3,
            batch: 64,
            seed: 0,
        }
    }
}

/// One row of a metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<LogRow>,
}

impl MetricLog {
    pub fn push(&mut self, iteration: usize, values: BTreeMap<String, f64>) {
        self.rows.push(LogRow { iteration, values });
    }

    /// Values of one column, in row order (rows lacking it are skipped).
    pub fn series(&self, key: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.values.get(key).map(|v| (r.iteration, *v)))
            .collect()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.rows.iter().flat_map(|r| r.values.keys().cloned()).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    pub fn tail(&self, n: usize) -> MetricLog {
        let start = self.rows.len().saturating_sub(n);
        MetricLog {
            rows: self.rows[start..].to_vec(),
        }
    }

    /// CSV with an `iteration` column followed by every metric; missing
    /// entries are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let cols = self.columns();
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header = vec!["iteration".to_string()];
        header.extend(cols.iter().cloned());
        w.write_record(&header).map_err(csv_error)?;
        for row in &self.rows {
            let mut rec = vec![row.iteration.to_string()];
            for c in &cols {
                rec.push(row.values.get(c).map(|v| format_float(*v)).unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Decimal float with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// A pretrained source generator together with its factor map.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: GeneratorParams,
    pub factor_map: FactorMap,
    /// Source loss on the fixed probe batch.
    pub terminal_loss: f64,
    pub iterations: usize,
    pub log: MetricLog,
}

fn probe_batch(seed: u64, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::substream(seed, STREAM_PROBE);
    (0..PROBE_SIZE).map(|_| rng.normal_vec(dim)).collect()
}

fn check_report(report: &LossReport, iteration: usize) -> Result<()> {
    match report.non_finite_term() {
        Some(term) => Err(Error::Divergence { iteration, term }),
        None => Ok(()),
    }
}

fn adam_for(g: &GeneratorParams, lr: f64) -> AdamState {
    AdamState::with_blocks(g.arch.blocks(), AdamConfig::with_lr(lr))
}

/// Fits the generator to rendered ellipses whose factors are an affine
/// image of the latent code. Stops once the probe loss is at most
/// [`PRETRAIN_TARGET`], checked at the end of the nominal budget and then
/// every [`PRETRAIN_CHECK_INTERVAL`] iterations up to
/// [`PRETRAIN_BUDGET_FACTOR`] budgets.
pub fn pretrain_source(arch: Architecture, cfg: &PretrainConfig) -> Result<Pretrained> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("pretraining needs batch ≥ 1 and lr > 0".into()));
    }
    if arch.cond_dim != 0 {
        return Err(Error::InvalidArgument("source generator must be unconditional".into()));
    }
    let mut params = GeneratorParams::init(arch, &mut Rng::substream(cfg.seed, STREAM_INIT));
    let factor_map = FactorMap::random(arch.latent_dim, &mut Rng::substream(cfg.seed, STREAM_FACTORS))?;
    let probe = probe_batch(cfg.seed, arch.latent_dim);
    let mut rng = Rng::substream(cfg.seed, STREAM_TRAIN);
    let mut adam = adam_for(&params, cfg.lr);
    let mut log = MetricLog::default();
    let mut probe_loss = f64::INFINITY;
    let budget = cfg.iterations * PRETRAIN_BUDGET_FACTOR;
    for it in 1..=budget {
        let zs: Vec<Vec<f64>> = (0..cfg.batch).map(|_| rng.normal_vec(arch.latent_dim)).collect();
        let r = loss_src(&params, &zs, &factor_map)?;
        check_report(&r, it - 1)?;
        adam.step(&mut params.values, &r.grads)?;
        if it % 100 == 0 {
            log.push(it, r.terms);
        }
        let check = it == cfg.iterations || (it > cfg.iterations && it % PRETRAIN_CHECK_INTERVAL == 0) || it == budget;
        if !check {
            continue;
        }
        probe_loss = loss_src(&params, &probe, &factor_map)?.value;
        let mut values = BTreeMap::new();
        values.insert("probe_src".to_string(), probe_loss);
        log.push(it, values);
        if probe_loss <= PRETRAIN_TARGET {
            return Ok(Pretrained {
                params,
                factor_map,
                terminal_loss: probe_loss,
                iterations: it,
                log,
            });
        }
    }
    Err(Error::NotConverged {
        loss: probe_loss,
        iterations: budget,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpandConfig {
    /// Defaults to `3000·max(1, N/5)` when absent.
    pub iterations: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    pub s: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub policy: SelectionPolicy,
    pub nada_mode: NadaMode,
    /// Probe losses are recorded every this many iterations.
    pub log_interval: usize,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            iterations: None,
            lr: 1e-3,
            batch: 16,
            s: DEFAULT_SHIFT,
            weights: LossWeights::default(),
            seed: 0,
            policy: SelectionPolicy::Last,
            nada_mode: NadaMode::BaseSubspace,
            log_interval: 100,
        }
    }
}

impl ExpandConfig {
    pub fn iterations_for(&self, tasks: usize) -> usize {
        self.iterations.unwrap_or(3000 * (tasks / 5).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::InvalidArgument("shift s must be positive".into()));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.log_interval == 0 {
            return Err(Error::InvalidArgument("lr, batch and log interval must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Everything produced by one expansion run.
#[derive(Clone, Debug)]
pub struct Expansion {
    pub params: GeneratorParams,
    pub basis: LatentBasis,
    pub registry: SubspaceRegistry,
    pub tasks: Vec<AdaptationTask>,
    pub log: MetricLog,
    pub warnings: Vec<String>,
    /// Checksum of the frozen source copy, identical at start and end.
    pub frozen_checksum: String,
}

/// Basis and registry for `tasks` on the pretrained `source`. The basis mean
/// is the standard-normal sampler mean, zero.
pub fn structure_latent_space(
    source: &GeneratorParams,
    tasks: &[AdaptationTask],
    cfg: &ExpandConfig,
) -> Result<(LatentBasis, SubspaceRegistry, Vec<String>)> {
    let d = source.arch.latent_dim;
    let basis = factorize(&source.w1_latent(), &vec![0.0; d])?;
    let n = tasks.len();
    let mut warnings = Vec::new();
    match cfg.policy {
        SelectionPolicy::Explicit(_) => {
            warnings.push("explicit direction indices bypass the dormant-capacity check".to_string())
        }
        _ => {
            if n + 4 > d {
                return Err(Error::InvalidArgument(format!(
                    "{n} tasks exceed the {} dormant directions",
                    d.saturating_sub(4)
                )));
            }
        }
    }
    let scores = match cfg.policy {
        SelectionPolicy::LowestScore => Some(dormancy_scores(
            source,
            &basis,
            256,
            3.0,
            &mut Rng::substream(cfg.seed, STREAM_DORMANCY),
        )?),
        _ => None,
    };
    let (indices, mut w) = select_directions(&basis, scores.as_deref(), n, &cfg.policy)?;
    warnings.append(&mut w);
    let mut registry = SubspaceRegistry::new(cfg.s)?;
    for (task, idx) in tasks.iter().zip(indices) {
        registry.assign(&task.domain_id, idx)?;
    }
    Ok((basis, registry, warnings))
}

fn with_mode(tasks: &[AdaptationTask], mode: NadaMode) -> Vec<AdaptationTask> {
    tasks
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if let TaskKind::Directional { mode: m, .. } = &mut t.kind {
                *m = mode;
            }
            t
        })
        .collect()
}

/// Task loss of every task on the fixed probe batch, inside its subspace.
pub fn expansion_probe(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    tasks: &[AdaptationTask],
    space: &EmbeddingSpace,
    probe: &[Vec<f64>],
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for task in tasks {
        let zs: Vec<Vec<f64>> = match &task.kind {
            TaskKind::Directional { .. } => probe.to_vec(),
            TaskKind::Fewshot { references } => references.iter().map(|r| r.z.clone()).collect(),
        };
        let projected: Vec<Vec<f64>> = zs
            .iter()
            .map(|z| project_repurposed(z, basis, registry, &task.domain_id))
            .collect::<Result<_>>()?;
        let r = task_loss(g, frozen, basis, registry, task, &projected, space)?;
        out.insert(task.domain_id.clone(), r.value);
    }
    Ok(out)
}

/// Domain expansion: each task trains inside its own repurposed subspace
/// while the base subspace is regularized towards a frozen source copy.
pub fn expand(
    source: &GeneratorParams,
    factor_map: &FactorMap,
    space: &EmbeddingSpace,
    tasks: &[AdaptationTask],
    cfg: &ExpandConfig,
) -> Result<Expansion> {
    cfg.validate()?;
    let tasks = with_mode(tasks, cfg.nada_mode);
    let (basis, registry, warnings) = structure_latent_space(source, &tasks, cfg)?;
    let frozen = source.clone_frozen();
    let ctx = LossContext {
        space: space.clone(),
        weights: cfg.weights,
        factor_map: factor_map.clone(),
    };
    let mut params = source.clone();
    let mut adam = adam_for(&params, cfg.lr);
    let mut rng = Rng::substream(cfg.seed, STREAM_TRAIN);
    let probe = probe_batch(cfg.seed, basis.dim());
    let iterations = cfg.iterations_for(tasks.len());
    let mut log = MetricLog::default();
    for it in 0..iterations {
        let r = loss_full(&params, &frozen, &basis, &registry, &tasks, &mut rng, cfg.batch, &ctx)?;
        check_report(&r, it)?;
        adam.step(&mut params.values, &r.grads)?;
        let mut values = r.terms;
        values.insert("total".to_string(), r.value);
        if (it + 1) % cfg.log_interval == 0 || it + 1 == iterations {
            for (id, v) in expansion_probe(&params, &frozen, &basis, &registry, &tasks, space, &probe)? {
                values.insert(format!("probe/{id}"), v);
            }
        }
        log.push(it + 1, values);
    }
    debug_assert!(frozen.verify());
    Ok(Expansion {
        params,
        basis,
        registry,
        tasks,
        log,
        warnings,
        frozen_checksum: frozen.checksum().to_string(),
    })
}

/// Task loss on unprojected codes, the classic adaptation objective. The
/// directional source is always the frozen copy.
fn dedicated_loss(
    g: &GeneratorParams,
    frozen: &FrozenGenerator,
    task: &AdaptationTask,
    zs: &[Vec<f64>],
    space: &EmbeddingSpace,
) -> Result<LossReport> {
    match &task.kind {
        TaskKind::Directional {
            source_anchor,
            target_anchor,
            ..
        } => loss_directional(g, &SourceProvider::Frozen(frozen), zs, source_anchor, target_anchor, space),
        TaskKind::Fewshot { references } => {
            let inputs: Vec<Vec<f64>> = references.iter().map(|r| r.z.clone()).collect();
            let targets: Vec<PointCloud> = references.iter().map(|r| r.x.clone()).collect();
            loss_fewshot(g, &inputs, &targets, space)
        }
    }
}

/// Result of a single-task baseline.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub params: GeneratorParams,
    pub log: MetricLog,
}

/// Fine-tunes a copy of the source on one task over the whole latent space.
pub fn adapt_dedicated(
    source: &GeneratorParams,
    space: &EmbeddingSpace,
    task: &AdaptationTask,
    iterations: usize,
    cfg: &ExpandConfig,
) -> Result<Adapted> {
    cfg.validate()?;
    let frozen = source.clone_frozen();
    let mut params = source.clone();
    let mut adam = adam_for(&params, cfg.lr);
    let mut rng = Rng::substream(cfg.seed, STREAM_TRAIN);
    let probe = probe_batch(cfg.seed, source.arch.latent_dim);
    let d = source.arch.latent_dim;
    let mut log = MetricLog::default();
    for it in 0..iterations {
        let zs: Vec<Vec<f64>> = (0..cfg.batch).map(|_| rng.normal_vec(d)).collect();
        let r = dedicated_loss(&params, &frozen, task, &zs, space)?;
        check_report(&r, it)?;
        adam.step(&mut params.values, &r.grads)?;
        let mut values = r.terms;
        if (it + 1) % cfg.log_interval == 0 || it + 1 == iterations {
            let p = dedicated_loss(&params, &frozen, task, &probe, space)?;
            values.insert(format!("probe/{}", task.domain_id), p.value);
        }
        log.push(it + 1, values);
    }
    Ok(Adapted { params, log })
}

/// Dedicated-adapter task loss on the fixed probe batch.
pub fn dedicated_probe(
    adapted: &GeneratorParams,
    source: &GeneratorParams,
    space: &EmbeddingSpace,
    task: &AdaptationTask,
    seed: u64,
) -> Result<f64> {
    let probe = probe_batch(seed, source.arch.latent_dim);
    Ok(dedicated_loss(adapted, &source.clone_frozen(), task, &probe, space)?.value)
}

/// Continued source-only training; returns `snapshots` parameter sets evenly
/// spaced over the budget (the last one at the end) and the probe loss log.
pub fn continue_training(
    source: &GeneratorParams,
    factor_map: &FactorMap,
    cfg: &PretrainConfig,
    snapshots: usize,
) -> Result<(Vec<GeneratorParams>, MetricLog)> {
    let mut params = source.clone();
    let mut adam = adam_for(&params, cfg.lr);
    let mut rng = Rng::substream(cfg.seed, STREAM_TRAIN);
    let probe = probe_batch(cfg.seed, source.arch.latent_dim);
    let d = source.arch.latent_dim;
    let marks: Vec<usize> = (1..=snapshots).map(|k| k * cfg.iterations / snapshots.max(1)).collect();
    let mut out = Vec::with_capacity(snapshots);
    let mut log = MetricLog::default();
    for it in 0..cfg.iterations {
        let zs: Vec<Vec<f64>> = (0..cfg.batch).map(|_| rng.normal_vec(d)).collect();
        let r = loss_src(&params, &zs, factor_map)?;
        check_report(&r, it)?;
        adam.step(&mut params.values, &r.grads)?;
        if (it + 1) % 100 == 0 || marks.contains(&(it + 1)) {
            let mut values = BTreeMap::new();
            values.insert("probe_src".to_string(), loss_src(&params, &probe, factor_map)?.value);
            log.push(it + 1, values);
        }
        while out.len() < snapshots && marks[out.len()] == it + 1 {
            out.push(params.clone());
        }
    }
    while out.len() < snapshots {
        out.push(params.clone());
    }
    Ok((out, log))
}

/// Source generator with a one-hot class input appended; the new first-layer
/// columns start at zero so class 0 reproduces the source exactly.
pub fn widen_conditional(source: &GeneratorParams, classes: usize) -> Result<GeneratorParams> {
    if source.arch.cond_dim != 0 {
        return Err(Error::InvalidArgument("generator is already conditional".into()));
    }
    let arch = Architecture {
        cond_dim: classes,
        ..source.arch
    };
    let mut out = GeneratorParams::zeros(arch);
    let (old, new) = (source.layout(), out.layout());
    let (d, i) = (source.arch.latent_dim, arch.input_dim());
    for r in 0..arch.hidden {
        let src = &source.values[old.w1.start + r * d..old.w1.start + (r + 1) * d];
        out.values[new.w1.start + r * i..new.w1.start + r * i + d].copy_from_slice(src);
    }
    let rest = old.b1.start..source.values.len();
    let len = rest.len();
    out.values[new.b1.start..new.b1.start + len].copy_from_slice(&source.values[rest]);
    Ok(out)
}

/// `[z; onehot(class)]`.
pub fn conditional_input(z: &[f64], class: usize, classes: usize) -> Vec<f64> {
    let mut v = z.to_vec();
    v.extend((0..classes).map(|c| if c == class { 1.0 } else { 0.0 }));
    v
}

/// Class-conditional baseline: every iteration sums class 0 on the source
/// and replay losses with class `i` on task `i − 1` over unprojected codes.
pub fn train_class_conditional(
    source: &GeneratorParams,
    factor_map: &FactorMap,
    space: &EmbeddingSpace,
    tasks: &[AdaptationTask],
    iterations: usize,
    cfg: &ExpandConfig,
) -> Result<Adapted> {
    cfg.validate()?;
    let tasks = with_mode(tasks, cfg.nada_mode);
    let classes = tasks.len() + 1;
    let frozen = source.clone_frozen();
    let ctx = LossContext {
        space: space.clone(),
        weights: cfg.weights,
        factor_map: factor_map.clone(),
    };
    let mut params = widen_conditional(source, classes)?;
    let mut adam = adam_for(&params, cfg.lr);
    let mut rng = Rng::substream(cfg.seed, STREAM_TRAIN);
    let d = source.arch.latent_dim;
    let to_class0 = |x: &[f64]| Ok(conditional_input(&x[..d], 0, classes));
    let mut log = MetricLog::default();
    for it in 0..iterations {
        let mut r = LossReport::zero(params.values.len());
        for class in 0..classes {
            let zs: Vec<Vec<f64>> = (0..cfg.batch).map(|_| rng.normal_vec(d)).collect();
            if class == 0 {
                let inputs: Vec<Vec<f64>> = zs.iter().map(|z| conditional_input(z, 0, classes)).collect();
                r.accumulate(&loss_src(&params, &inputs, factor_map)?, cfg.weights.lambda_src, "");
                r.accumulate(&loss_recon_replay(&params, &frozen, &inputs, &ctx)?, 1.0, "");
                continue;
            }
            let task = &tasks[class - 1];
            let part = match &task.kind {
                TaskKind::Directional {
                    source_anchor,
                    target_anchor,
                    mode,
                } => {
                    let inputs: Vec<Vec<f64>> = zs.iter().map(|z| conditional_input(z, class, classes)).collect();
                    let provider = match mode {
                        NadaMode::FrozenCopy => SourceProvider::Frozen(&frozen),
                        NadaMode::BaseSubspace => SourceProvider::Current(&to_class0),
                    };
                    loss_directional(&params, &provider, &inputs, source_anchor, target_anchor, space)?
                }
                TaskKind::Fewshot { references } => {
                    let inputs: Vec<Vec<f64>> =
                        references.iter().map(|r| conditional_input(&r.z, class, classes)).collect();
                    let targets: Vec<PointCloud> = references.iter().map(|r| r.x.clone()).collect();
                    loss_fewshot(&params, &inputs, &targets, space)?
                }
            };
            r.accumulate(&part, 1.0, &format!("{}/", task.domain_id));
        }
        check_report(&r, it)?;
        adam.step(&mut params.values, &r.grads)?;
        log.push(it + 1, r.terms);
    }
    Ok(Adapted { params, log })
}

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DEXP";

/// Stored latent code and the output it produced when saved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub z: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RegistryEntry {
    domain_id: String,
    index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RegistryRecord {
    s: f64,
    assignments: Vec<RegistryEntry>,
}

mod registry_format {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Option<SubspaceRegistry>, ser: S) -> std::result::Result<S::Ok, S::Error> {
        r.as_ref()
            .map(|r| RegistryRecord {
                s: r.s,
                assignments: r
                    .assignments
                    .iter()
                    .map(|(k, v)| RegistryEntry {
                        domain_id: k.clone(),
                        index: *v,
                    })
                    .collect(),
            })
            .serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Option<SubspaceRegistry>, D::Error> {
        let rec: Option<RegistryRecord> = Option::deserialize(de)?;
        rec.map(|rec| {
            let mut reg = SubspaceRegistry::new(rec.s).map_err(serde::de::Error::custom)?;
            for e in rec.assignments {
                reg.assign(&e.domain_id, e.index).map_err(serde::de::Error::custom)?;
            }
            Ok(reg)
        })
        .transpose()
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub params: GeneratorParams,
    pub factor_map: FactorMap,
    /// Source loss the pretrained generator reached.
    pub source_loss: f64,
    pub basis: Option<LatentBasis>,
    #[serde(with = "registry_format")]
    pub registry: Option<SubspaceRegistry>,
    pub tasks: Vec<AdaptationTask>,
    pub config: serde_json::Value,
    pub metric_tail: MetricLog,
    pub probes: Vec<Probe>,
}

impl Checkpoint {
    pub fn new(params: GeneratorParams, factor_map: FactorMap, source_loss: f64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            architecture: params.arch,
            params,
            factor_map,
            source_loss,
            basis: None,
            registry: None,
            tasks: Vec::new(),
            config: serde_json::Value::Null,
            metric_tail: MetricLog::default(),
            probes: Vec::new(),
        }
    }

    /// Records outputs for `count` fixed latent codes so a reload can be
    /// checked for forward parity.
    pub fn record_probes(&mut self, count: usize) -> Result<()> {
        let mut rng = Rng::substream(0, STREAM_PROBE);
        let d = self.architecture.input_dim();
        self.probes = (0..count)
            .map(|_| {
                let z = rng.normal_vec(d);
                let output = self.params.trace(&z)?.output;
                Ok(Probe { z, output })
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Whether the stored probes reproduce bit-for-bit.
    pub fn probes_match(&self) -> Result<bool> {
        for p in &self.probes {
            let out = self.params.trace(&p.z)?.output;
            if out.iter().zip(&p.output).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        // through Value so that every object has sorted keys
        let value = serde_json::to_value(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let body = serde_json::to_vec(&value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(body.len() + 9);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&body);
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing DEXP header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let ck: Checkpoint =
            serde_json::from_slice(&bytes[8..]).map_err(|e| Error::Checkpoint(format!("malformed body: {e}")))?;
        if ck.version != version {
            return Err(Error::Checkpoint("header and body versions differ".into()));
        }
        if ck.params.arch != ck.architecture || ck.params.values.len() != ck.architecture.param_count() {
            return Err(Error::Checkpoint("parameters do not match the architecture".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
