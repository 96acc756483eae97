//! Command-line front end: experiment configs, commands and exit codes.

use crate::error::{Error, Result};
use crate::eval::{
    composition_grid, conditional_alignment, default_alphas, dormancy_csv, expansion_alignment,
    interpolation_tradeoff, leakage_matrix, source_fidelity, svg_clouds, svg_lines, table_csv,
    LeakageMatrix, NamedAnchor, Report,
};
use crate::generator::{invert, Architecture, GeneratorParams};
use crate::latent::{compose, dormancy_scores, factorize, project_base, traverse};
use crate::numerics::Rng;
use crate::scene::{anchor, DomainKind, EmbeddingSpace, PointCloud};
use crate::tasks::{AdaptationTask, NadaMode, Reference};
use crate::trainer::{
    adapt_dedicated, continue_training, expand, pretrain_source, train_class_conditional, Checkpoint, ExpandConfig,
    MetricLog, PretrainConfig,
};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

/// Outputs recorded in every checkpoint for forward-parity checks.
const CHECKPOINT_PROBES: usize = 4;
/// Rows of the metric log kept inside a checkpoint.
const METRIC_TAIL: usize = 100;
const STREAM_REFERENCES: u64 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSpecKind {
    Directional,
    Fewshot,
}

/// How few-shot references are produced: `count` scenes from the source
/// factor map rendered as the target kind, each inverted through the
/// source generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSpec {
    pub count: usize,
    pub seed: u64,
    pub inversion_steps: usize,
    pub inversion_lr: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            count: 8,
            seed: 0,
            inversion_steps: 500,
            inversion_lr: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub domain_id: String,
    pub kind: TaskSpecKind,
    pub target_kind: DomainKind,
    /// Directional tasks only; defaults to the expansion's mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<NadaMode>,
    /// Few-shot tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<ReferenceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Latent codes per metric.
    pub probes: usize,
    pub seed: u64,
    pub anchor_samples: usize,
    pub anchor_seed: u64,
    /// Continued-training checkpoints forming the fidelity band.
    pub band_snapshots: usize,
    /// Iterations of each dedicated adapter and of the class-conditional
    /// baseline; the expansion budget when absent.
    pub baseline_iterations: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probes: 256,
            seed: 7,
            anchor_samples: 256,
            anchor_seed: 0,
            band_snapshots: 5,
            baseline_iterations: None,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment. The top-level seed drives every stage and replaces the
/// nested pretraining and expansion seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub expand: ExpandConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates; JSON errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!(
                "invalid config at line {}, column {}: {}",
                e.line(),
                e.column(),
                strip_position(&e.to_string())
            ))
        })?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.expand.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.architecture;
        if a.latent_dim == 0 || a.hidden == 0 || a.points < 2 || a.cond_dim != 0 {
            return Err(Error::Config("architecture needs latent_dim, hidden ≥ 1, points ≥ 2 and no conditioning".into()));
        }
        if self.pretrain.iterations == 0 || self.pretrain.batch == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretrain iterations, batch and lr must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if t.domain_id.is_empty() || t.domain_id == "base" {
                return Err(Error::Config(format!("invalid domain id {:?}", t.domain_id)));
            }
            if !ids.insert(t.domain_id.as_str()) {
                return Err(Error::Config(format!("duplicate domain id {:?}", t.domain_id)));
            }
            if t.target_kind == DomainKind::Ellipse {
                return Err(Error::Config(format!("task {:?} targets the source kind", t.domain_id)));
            }
            match t.kind {
                TaskSpecKind::Directional if t.references.is_some() => {
                    return Err(Error::Config(format!("directional task {:?} has references", t.domain_id)))
                }
                TaskSpecKind::Fewshot if t.mode.is_some() => {
                    return Err(Error::Config(format!("few-shot task {:?} has a mode", t.domain_id)))
                }
                _ => {}
            }
            if let Some(r) = &t.references {
                if r.count == 0 || r.inversion_steps == 0 || !(r.inversion_lr > 0.0) {
                    return Err(Error::Config(format!("task {:?}: empty or invalid references", t.domain_id)));
                }
            }
        }
        self.expand.validate().map_err(|e| Error::Config(e.to_string()))?;
        let e = &self.eval;
        if e.probes == 0 || e.anchor_samples < crate::scene::MIN_ANCHOR_SAMPLES || e.band_snapshots == 0 {
            return Err(Error::Config("eval probes, anchor samples (≥ 16) and band snapshots must be positive".into()));
        }
        Ok(())
    }

    pub fn baseline_iterations(&self) -> usize {
        self.eval
            .baseline_iterations
            .unwrap_or_else(|| self.expand.iterations_for(self.tasks.len()))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.is_null() {
            return Err(Error::Config("checkpoint carries no experiment config".into()));
        }
        serde_json::from_value(ck.config.clone()).map_err(|e| Error::Config(format!("stored config: {e}")))
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Evaluation anchors of every task, in config order.
pub fn task_anchors(cfg: &ExperimentConfig, space: &EmbeddingSpace) -> Result<Vec<NamedAnchor>> {
    cfg.tasks
        .iter()
        .map(|t| {
            Ok(NamedAnchor {
                domain_id: t.domain_id.clone(),
                anchor: anchor(
                    space,
                    t.target_kind,
                    cfg.eval.anchor_samples,
                    cfg.eval.anchor_seed,
                    cfg.architecture.points,
                )?
                .anchor,
            })
        })
        .collect()
}

/// Turns task specs into adaptation tasks against a pretrained source.
pub fn build_tasks(cfg: &ExperimentConfig, source: &Checkpoint, space: &EmbeddingSpace) -> Result<Vec<AdaptationTask>> {
    let points = cfg.architecture.points;
    let source_anchor = anchor(
        space,
        DomainKind::Ellipse,
        cfg.eval.anchor_samples,
        cfg.eval.anchor_seed,
        points,
    )?
    .anchor;
    let anchors = task_anchors(cfg, space)?;
    cfg.tasks
        .iter()
        .zip(anchors)
        .map(|(t, a)| match t.kind {
            TaskSpecKind::Directional => AdaptationTask::directional(
                &t.domain_id,
                source_anchor.clone(),
                a.anchor,
                t.mode.unwrap_or(cfg.expand.nada_mode),
            ),
            TaskSpecKind::Fewshot => {
                let spec = t.references.clone().unwrap_or_default();
                let mut rng = Rng::substream(spec.seed, STREAM_REFERENCES);
                let d = source.architecture.latent_dim;
                let refs = (0..spec.count)
                    .map(|_| {
                        let scene = rng.normal_vec(d);
                        let x = source.factor_map.target_kind(t.target_kind, &scene, points);
                        let z = invert(&source.params, &x, spec.inversion_steps, spec.inversion_lr)?;
                        Ok(Reference { z, x })
                    })
                    .collect::<Result<Vec<_>>>()?;
                AdaptationTask::fewshot(&t.domain_id, refs)
            }
        })
        .collect()
}

#[derive(Parser, Debug)]
#[command(name = "dexp", about = "Domain expansion of a toy point-cloud generator")]
pub struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain the source generator.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to a file under the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latent factorization and dormancy spectrum of a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand the source with the config's tasks.
    Expand {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to a file under the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dedicated single-task adaptation baseline.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        /// Defaults to a file under the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class-conditional baseline.
    BaselineCc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to a file under the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full evaluation report of an expanded checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Pretrained source, for pre-expansion leakage and the fidelity band.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Dedicated adapters and class-conditional checkpoints.
        #[arg(long, value_delimiter = ',')]
        baselines: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clouds along one domain direction.
    Traverse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        z_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid of two composed domain shifts.
    Compose {
        #[arg(long)]
        ckpt: PathBuf,
        /// `i:αi,j:αj`
        #[arg(long)]
        domains: String,
        #[arg(long)]
        z_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit code of an error: 2 config or usage, 3 numeric, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteMatrix
        | Error::NonFiniteGradient { .. }
        | Error::NonFiniteValue(_)
        | Error::Divergence { .. }
        | Error::NotConverged { .. } => 3,
        Error::Io(_) | Error::Checkpoint(_) => 4,
        _ => 2,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match threads().and_then(|_| run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Worker cap from `DEXP_THREADS`. Every command currently runs on one
/// thread, so the value is only validated.
fn threads() -> Result<usize> {
    match std::env::var("DEXP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| Error::Config(format!("DEXP_THREADS must be a positive integer, got {v:?}"))),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    Ok(cfg)
}

fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics.csv")
}

fn out_path(out: &Option<PathBuf>, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn write_log(log: &MetricLog, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn save(mut ck: Checkpoint, out: &Path) -> Result<()> {
    ck.record_probes(CHECKPOINT_PROBES)?;
    create_parent(out)?;
    ck.save(out)
}

pub fn run(cli: &Cli) -> Result<()> {
    let space = EmbeddingSpace::default();
    match &cli.command {
        Command::Pretrain { config, out } => {
            let cfg = load_config(config, cli.seed)?;
            let out = &out_path(out, &cfg, "source.dexp");
            let p = pretrain_source(cfg.architecture, &cfg.pretrain)?;
            let mut ck = Checkpoint::new(p.params, p.factor_map, p.terminal_loss);
            ck.config = cfg.to_value();
            ck.metric_tail = p.log.tail(METRIC_TAIL);
            write_log(&p.log, &metrics_path(out))?;
            save(ck, out)
        }
        Command::Analyze { ckpt, out } => analyze(&Checkpoint::load(ckpt)?, out, cli.seed.unwrap_or(0)),
        Command::Expand { config, ckpt, out } => {
            let cfg = load_config(config, cli.seed)?;
            let out = &out_path(out, &cfg, "expanded.dexp");
            let source = Checkpoint::load(ckpt)?;
            check_source(&source, &cfg)?;
            let tasks = build_tasks(&cfg, &source, &space)?;
            let ex = expand(&source.params, &source.factor_map, &space, &tasks, &cfg.expand)?;
            for w in &ex.warnings {
                eprintln!("warning: {w}");
            }
            write_log(&ex.log, &metrics_path(out))?;
            let mut ck = Checkpoint::new(ex.params, source.factor_map.clone(), source.source_loss);
            ck.basis = Some(ex.basis);
            ck.registry = Some(ex.registry);
            ck.tasks = ex.tasks;
            ck.config = cfg.to_value();
            ck.metric_tail = ex.log.tail(METRIC_TAIL);
            save(ck, out)
        }
        Command::Adapt { config, ckpt, task, out } => {
            let cfg = load_config(config, cli.seed)?;
            let out = &out_path(out, &cfg, &format!("adapt_{task}.dexp"));
            let source = Checkpoint::load(ckpt)?;
            check_source(&source, &cfg)?;
            let tasks = build_tasks(&cfg, &source, &space)?;
            let t = tasks
                .into_iter()
                .find(|t| &t.domain_id == task)
                .ok_or_else(|| Error::UnknownDomain(task.clone()))?;
            let a = adapt_dedicated(&source.params, &space, &t, cfg.baseline_iterations(), &cfg.expand)?;
            write_log(&a.log, &metrics_path(out))?;
            let mut ck = Checkpoint::new(a.params, source.factor_map.clone(), source.source_loss);
            ck.tasks = vec![t];
            ck.config = cfg.to_value();
            ck.metric_tail = a.log.tail(METRIC_TAIL);
            save(ck, out)
        }
        Command::BaselineCc { config, ckpt, out } => {
            let cfg = load_config(config, cli.seed)?;
            let out = &out_path(out, &cfg, "baseline_cc.dexp");
            let source = Checkpoint::load(ckpt)?;
            check_source(&source, &cfg)?;
            let tasks = build_tasks(&cfg, &source, &space)?;
            let a = train_class_conditional(
                &source.params,
                &source.factor_map,
                &space,
                &tasks,
                cfg.baseline_iterations(),
                &cfg.expand,
            )?;
            write_log(&a.log, &metrics_path(out))?;
            let mut ck = Checkpoint::new(a.params, source.factor_map.clone(), source.source_loss);
            ck.tasks = tasks;
            ck.config = cfg.to_value();
            ck.metric_tail = a.log.tail(METRIC_TAIL);
            save(ck, out)
        }
        Command::Evaluate {
            ckpt,
            source,
            baselines,
            out,
        } => {
            let expanded = Checkpoint::load(ckpt)?;
            let source = source.as_deref().map(Checkpoint::load).transpose()?;
            let baselines = baselines
                .iter()
                .map(|p| Checkpoint::load(p))
                .collect::<Result<Vec<_>>>()?;
            evaluate(&expanded, source.as_ref(), &baselines, cli.seed)?.write(out)
        }
        Command::Traverse {
            ckpt,
            domain,
            alphas,
            z_seed,
            out,
        } => traverse_strip(&Checkpoint::load(ckpt)?, domain, alphas, *z_seed)?.write(out),
        Command::Compose {
            ckpt,
            domains,
            z_seed,
            out,
        } => compose_grid(&Checkpoint::load(ckpt)?, domains, *z_seed)?.write(out),
    }
}

fn check_source(source: &Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    if source.architecture != cfg.architecture {
        return Err(Error::Config("checkpoint architecture differs from the config".into()));
    }
    if source.registry.is_some() {
        return Err(Error::Config("expected a pretrained source, got an expanded checkpoint".into()));
    }
    Ok(())
}

fn expanded_parts(ck: &Checkpoint) -> Result<(&crate::latent::LatentBasis, &crate::latent::SubspaceRegistry)> {
    match (&ck.basis, &ck.registry) {
        (Some(b), Some(r)) => Ok((b, r)),
        _ => Err(Error::Config("checkpoint is not an expanded generator".into())),
    }
}

fn round_key(v: f64) -> String {
    crate::trainer::format_float(v)
}

/// Dormancy spectrum of a checkpoint's latent layer.
pub fn analyze(ck: &Checkpoint, out: &Path, seed: u64) -> Result<()> {
    let d = ck.architecture.latent_dim;
    let basis = factorize(&ck.params.w1_latent(), &vec![0.0; d])?;
    let scores = dormancy_scores(&ck.params, &basis, 256, 3.0, &mut Rng::new(seed))?;
    let mut report = Report::default();
    report.add("dormancy.csv", dormancy_csv(&basis, &scores)?);
    let top = scores.iter().take(4).sum::<f64>() / 4.0f64.min(d as f64);
    let series = vec![
        (
            "displacement / top-4 mean".to_string(),
            scores.iter().enumerate().map(|(i, s)| (i as f64, s / top)).collect(),
        ),
        (
            "singular value / σ₁".to_string(),
            basis
                .singular_values
                .iter()
                .enumerate()
                .map(|(i, s)| (i as f64, s / basis.singular_values[0].max(f64::MIN_POSITIVE)))
                .collect(),
        ),
    ];
    report.add("dormancy.svg", svg_lines("dormancy spectrum", &series));
    report.metric("singular_values", &basis.singular_values);
    report.metric("dormancy_scores", &scores);
    report.metric("top4_mean_score", top);
    report.write(out)
}

/// Every evaluation of an expanded checkpoint against optional baselines.
pub fn evaluate(
    expanded: &Checkpoint,
    source: Option<&Checkpoint>,
    baselines: &[Checkpoint],
    seed: Option<u64>,
) -> Result<Report> {
    let mut cfg = ExperimentConfig::from_checkpoint(expanded)?;
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    let space = EmbeddingSpace::default();
    let (basis, registry) = expanded_parts(expanded)?;
    let g = &expanded.params;
    let (n, es) = (cfg.eval.probes, cfg.eval.seed);
    let anchors = task_anchors(&cfg, &space)?;
    let mut report = Report::default();

    let post = leakage_matrix(g, basis, registry, &anchors, &space, n, es)?;
    report.add("leakage.csv", post.to_csv()?);
    report.metric("leakage", &post);
    if let Some(src) = source {
        let pre = leakage_matrix(&src.params, basis, registry, &anchors, &space, n, es)?;
        report.add("leakage_pre.csv", pre.to_csv()?);
        let (drop, leak) = leakage_change(&pre, &post);
        report.metric("leakage_pre", &pre);
        report.metric("min_diagonal_drop", drop);
        report.metric("max_leakage_change", leak);
    }

    // the same protocol in an embedding never used for training
    let held = EmbeddingSpace::held_out();
    let held_anchors = task_anchors(&cfg, &held)?;
    let post_held = leakage_matrix(g, basis, registry, &held_anchors, &held, n, es)?;
    report.add("leakage_held_out.csv", post_held.to_csv()?);
    if let Some(src) = source {
        let pre_held = leakage_matrix(&src.params, basis, registry, &held_anchors, &held, n, es)?;
        report.add("leakage_held_out_pre.csv", pre_held.to_csv()?);
        let (drop, leak) = leakage_change(&pre_held, &post_held);
        report.metric("held_out_min_diagonal_drop", drop);
        report.metric("held_out_max_leakage_change", leak);
    }

    let alphas = default_alphas(registry.s);
    let mut series = Vec::new();
    for a in &anchors {
        let sweep = crate::eval::traversal_sweep(g, basis, registry, &a.domain_id, &a.anchor, &alphas, &space, n, es)?;
        report.add(
            &format!("traversal_{}.csv", a.domain_id),
            table_csv(&[
                ("alpha", sweep.iter().map(|x| x.0).collect()),
                ("domain_error", sweep.iter().map(|x| x.1).collect()),
            ])?,
        );
        let mut pts = sweep.clone();
        pts.sort_by(|x, y| x.0.total_cmp(&y.0));
        series.push((a.domain_id.clone(), pts));
    }
    report.add("traversal.svg", svg_lines("domain error along each direction", &series));

    let grid = [0.0, 0.5 * registry.s, registry.s];
    let ts: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
    let adapters: Vec<(&str, &GeneratorParams)> = baselines
        .iter()
        .filter(|b| b.architecture.cond_dim == 0 && b.tasks.len() == 1)
        .map(|b| (b.tasks[0].domain_id.as_str(), &b.params))
        .collect();
    for (x, ai) in anchors.iter().enumerate() {
        for aj in &anchors[x + 1..] {
            let cells = composition_grid(g, basis, registry, ai, aj, &grid, &space, n, es)?;
            let name = format!("{}+{}", ai.domain_id, aj.domain_id);
            report.add(
                &format!("composition_{name}.csv"),
                table_csv(&[
                    ("alpha", cells.iter().map(|c| c.alpha).collect()),
                    ("beta", cells.iter().map(|c| c.beta).collect()),
                    ("error_i", cells.iter().map(|c| c.error_i).collect()),
                    ("error_j", cells.iter().map(|c| c.error_j).collect()),
                ])?,
            );
            let corner = cells.last().expect("non-empty grid");
            report.metric(&format!("composition_corner/{name}"), [corner.error_i, corner.error_j]);
            let find = |id: &str| adapters.iter().find(|(d, _)| *d == id).map(|(_, p)| *p);
            if let (Some(gi), Some(gj)) = (find(&ai.domain_id), find(&aj.domain_id)) {
                let tr = interpolation_tradeoff(gi, gj, &ai.anchor, &aj.anchor, &ts, &space, n, es)?;
                report.add(
                    &format!("interpolation_{name}.csv"),
                    table_csv(&[
                        ("t", tr.iter().map(|x| x.0).collect()),
                        ("error_i", tr.iter().map(|x| x.1).collect()),
                        ("error_j", tr.iter().map(|x| x.2).collect()),
                    ])?,
                );
                let best = tr.iter().map(|x| x.1.max(x.2)).fold(f64::INFINITY, f64::min);
                report.metric(&format!("interpolation_best_max/{name}"), best);
            }
        }
    }

    let fidelity = source_fidelity(g, basis, registry, &expanded.factor_map, &space, n, es)?;
    report.metric("fidelity", fidelity);
    if let Some(src) = source {
        let f0 = source_fidelity(&src.params, basis, registry, &src.factor_map, &space, n, es)?;
        let (snaps, _) = continue_training(&src.params, &src.factor_map, &cfg.pretrain, cfg.eval.band_snapshots)?;
        let band = snaps
            .iter()
            .map(|p| source_fidelity(p, basis, registry, &src.factor_map, &space, n, es))
            .collect::<Result<Vec<_>>>()?;
        report.add(
            "fidelity_band.csv",
            table_csv(&[
                ("snapshot", (1..=band.len()).map(|k| k as f64).collect()),
                ("fidelity", band.clone()),
            ])?,
        );
        report.metric("fidelity_source", f0);
        report.metric("fidelity_band", &band);
    }

    let mut align = Vec::new();
    for a in &anchors {
        align.push(expansion_alignment(g, basis, registry, &a.domain_id, n, es)?);
    }
    report.metric("alignment_expanded", &align);
    let mut cols = vec![("expanded", align)];
    if let Some(cc) = baselines.iter().find(|b| b.architecture.cond_dim > 0) {
        let cc_align = (1..cc.architecture.cond_dim)
            .map(|c| conditional_alignment(&cc.params, c, n, es))
            .collect::<Result<Vec<_>>>()?;
        report.metric("alignment_class_conditional", &cc_align);
        cols.push(("class_conditional", cc_align));
    }
    report.add(
        "alignment.csv",
        table_csv(&cols.iter().map(|(k, v)| (*k, v.clone())).collect::<Vec<_>>())?,
    );
    report.metric("domains", anchors.iter().map(|a| a.domain_id.clone()).collect::<Vec<_>>());
    report.metric("seed", cfg.seed);
    Ok(report)
}

/// Smallest diagonal drop and largest off-diagonal or base-column change.
pub fn leakage_change(pre: &LeakageMatrix, post: &LeakageMatrix) -> (f64, f64) {
    let mut drop = f64::INFINITY;
    let mut leak: f64 = 0.0;
    for (r, row) in pre.rows.iter().enumerate() {
        for (c, col) in pre.columns.iter().enumerate() {
            let delta = post.entries[r][c] - pre.entries[r][c];
            if col == row {
                drop = drop.min(-delta);
            } else {
                leak = leak.max(delta.abs());
            }
        }
    }
    (drop, leak)
}

fn single_latent(ck: &Checkpoint, z_seed: u64) -> Result<(Vec<f64>, Vec<NamedAnchor>)> {
    let cfg = ExperimentConfig::from_checkpoint(ck)?;
    let (basis, registry) = expanded_parts(ck)?;
    let z = Rng::new(z_seed).normal_vec(basis.dim());
    Ok((project_base(&z, basis, registry)?, task_anchors(&cfg, &EmbeddingSpace::default())?))
}

fn cloud_error(space: &EmbeddingSpace, cloud: &PointCloud, anchor: &[f64]) -> Result<f64> {
    Ok(crate::eval::cosine_error(&space.embed(cloud)?, anchor))
}

/// Clouds of one latent code along a domain direction.
pub fn traverse_strip(ck: &Checkpoint, domain: &str, alphas: &[f64], z_seed: u64) -> Result<Report> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("no alphas given".into()));
    }
    let (basis, registry) = expanded_parts(ck)?;
    let i = registry.index_of(domain)?;
    let (z, anchors) = single_latent(ck, z_seed)?;
    let target = anchors
        .iter()
        .find(|a| a.domain_id == domain)
        .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
    let space = EmbeddingSpace::default();
    let mut panels = Vec::new();
    let mut errors = Vec::new();
    for &a in alphas {
        let cloud = ck.params.forward(&traverse(&z, &basis.directions[i], a))?;
        errors.push(cloud_error(&space, &cloud, &target.anchor)?);
        panels.push((format!("α = {}", round_key(a)), cloud));
    }
    let mut report = Report::default();
    report.add("traverse.svg", svg_clouds(&panels, alphas.len()));
    report.add(
        "traverse.csv",
        table_csv(&[("alpha", alphas.to_vec()), ("domain_error", errors)])?,
    );
    report.metric("domain", domain);
    report.metric("z_seed", z_seed);
    Ok(report)
}

fn parse_domains(spec: &str) -> Result<Vec<(String, f64)>> {
    spec.split(',')
        .map(|part| {
            let (id, a) = part
                .rsplit_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("expected id:alpha, got {part:?}")))?;
            let a: f64 = a
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad alpha in {part:?}")))?;
            Ok((id.to_string(), a))
        })
        .collect()
}

/// 3×3 grid `{0, α/2, α}` of two composed domain shifts for one code.
pub fn compose_grid(ck: &Checkpoint, domains: &str, z_seed: u64) -> Result<Report> {
    let parsed = parse_domains(domains)?;
    if parsed.len() != 2 {
        return Err(Error::InvalidArgument("compose takes exactly two domains".into()));
    }
    let (basis, registry) = expanded_parts(ck)?;
    let (z, anchors) = single_latent(ck, z_seed)?;
    let space = EmbeddingSpace::default();
    let (ia, ib) = (registry.index_of(&parsed[0].0)?, registry.index_of(&parsed[1].0)?);
    let find = |id: &str| {
        anchors
            .iter()
            .find(|a| a.domain_id == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    };
    let (aa, ab) = (find(&parsed[0].0)?, find(&parsed[1].0)?);
    let mut panels = Vec::new();
    let mut cols: [Vec<f64>; 4] = Default::default();
    for fa in [0.0, 0.5, 1.0] {
        for fb in [0.0, 0.5, 1.0] {
            let (x, y) = (fa * parsed[0].1, fb * parsed[1].1);
            let cloud = ck.params.forward(&compose(&z, basis, &[(ia, x), (ib, y)])?)?;
            cols[0].push(x);
            cols[1].push(y);
            cols[2].push(cloud_error(&space, &cloud, &aa.anchor)?);
            cols[3].push(cloud_error(&space, &cloud, &ab.anchor)?);
            panels.push((format!("{}, {}", round_short(x), round_short(y)), cloud));
        }
    }
    let [c0, c1, c2, c3] = cols;
    let mut report = Report::default();
    report.add("compose.svg", svg_clouds(&panels, 3));
    report.add(
        "compose.csv",
        table_csv(&[("alpha_i", c0), ("alpha_j", c1), ("error_i", c2), ("error_j", c3)])?,
    );
    report.metric("domains", [&parsed[0].0, &parsed[1].0]);
    report.metric("z_seed", z_seed);
    Ok(report)
}

fn round_short(v: f64) -> String {
    format!("{v:.2}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"tasks": [{"domain_id": "star", "kind": "directional", "target_kind": "star5"}]}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.architecture, Architecture::default());
        assert_eq!(cfg.expand.s, 20.0);
        assert_eq!(cfg.eval.probes, 256);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"tasks": [], "bogus": 1}"#;
        assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))));
        let nested = r#"{"tasks": [{"domain_id": "a", "kind": "directional", "target_kind": "star5"}], "expand": {"lr": 0.1, "lr2": 1}}"#;
        assert!(matches!(ExperimentConfig::parse(nested), Err(Error::Config(_))));
    }

    #[test]
    fn json_errors_report_line_and_column() {
        let text = "{\n  \"tasks\": [\n    }\n";
        let Err(Error::Config(msg)) = ExperimentConfig::parse(text) else {
            panic!("expected a config error");
        };
        assert!(msg.contains("line 3, column 5"), "{msg}");
    }

    #[test]
    fn semantic_validation() {
        for bad in [
            r#"{"tasks": []}"#,
            r#"{"tasks": [{"domain_id": "a", "kind": "directional", "target_kind": "ellipse"}]}"#,
            r#"{"tasks": [{"domain_id": "a", "kind": "directional", "target_kind": "star5"}, {"domain_id": "a", "kind": "directional", "target_kind": "square"}]}"#,
            r#"{"tasks": [{"domain_id": "a", "kind": "directional", "target_kind": "hexagon"}]}"#,
            r#"{"tasks": [{"domain_id": "a", "kind": "fewshot", "target_kind": "star5", "references": {"count": 0}}]}"#,
            r#"{"tasks": [{"domain_id": "a", "kind": "directional", "target_kind": "star5"}], "expand": {"s": -1.0}}"#,
        ] {
            let e = ExperimentConfig::parse(bad).unwrap_err();
            assert_eq!(exit_code(&e), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.apply_seed(9);
        assert_eq!((cfg.seed, cfg.pretrain.seed, cfg.expand.seed), (9, 9, 9));
        let back: ExperimentConfig = serde_json::from_value(cfg.to_value()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::NotConverged { loss: 1.0, iterations: 1 }), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 4);
        assert_eq!(run_args(["dexp", "frobnicate"]), 2);
        assert_eq!(run_args(["dexp", "analyze", "--ckpt", "/nonexistent/x.dexp", "--out", "/tmp/x"]), 4);
    }

    #[test]
    fn domain_list_parsing() {
        assert_eq!(
            parse_domains("a:1.5,b-c:-2").unwrap(),
            vec![("a".to_string(), 1.5), ("b-c".to_string(), -2.0)]
        );
        assert!(parse_domains("a1.5").is_err());
        assert!(parse_domains("a:x").is_err());
    }
}
