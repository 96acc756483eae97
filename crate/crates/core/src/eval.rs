//! Measurements: domain error, leakage, traversal, composition, source
//! fidelity, alignment and dormancy, plus CSV/SVG/JSON emission.

use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::latent::{compose, project_base, traverse, LatentBasis, SubspaceRegistry, Subspace};
use crate::numerics::{dot, mmd2, norm, Rng};
use crate::scene::{EmbeddingSpace, PointCloud};
use crate::tasks::FactorMap;
use crate::trainer::{csv_error, format_float};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Default probe size for every metric.
pub const DEFAULT_PROBES: usize = 256;

/// Gaussian-kernel bandwidth of the fidelity MMD, in embedding units.
pub const FIDELITY_BANDWIDTH: f64 = 1.0;

/// `n` standard-normal latent codes from `seed`.
pub fn probe_latents(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.normal_vec(dim)).collect()
}

/// `1 − cos(e, anchor)`; a zero vector counts as orthogonal.
pub fn cosine_error(e: &[f64], anchor: &[f64]) -> f64 {
    let d = norm(e) * norm(anchor);
    if d == 0.0 {
        1.0
    } else {
        1.0 - dot(e, anchor) / d
    }
}

/// Mean cosine error of the generator on already-transformed inputs.
pub fn domain_error_on(g: &GeneratorParams, inputs: &[Vec<f64>], anchor: &[f64], space: &EmbeddingSpace) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut acc = 0.0;
    for z in inputs {
        acc += cosine_error(&space.embed(&g.forward(z)?)?, anchor);
    }
    Ok(acc / inputs.len() as f64)
}

/// Analog of one minus the CLIP score: mean `1 − cos(E(G(proj(z))), anchor)`
/// over `n` codes from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn domain_error(
    g: &GeneratorParams,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    subspace: &Subspace,
    anchor: &[f64],
    space: &EmbeddingSpace,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("domain error needs n ≥ 1".into()));
    }
    let zs: Vec<Vec<f64>> = probe_latents(seed, n, basis.dim())
        .iter()
        .map(|z| crate::latent::project(z, basis, registry, subspace))
        .collect::<Result<_>>()?;
    domain_error_on(g, &zs, anchor, space)
}

/// A named evaluation anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAnchor {
    pub domain_id: String,
    pub anchor: Vec<f64>,
}

/// Domain errors of every task anchor (rows) on every subspace (columns:
/// base first, then the tasks in row order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub entries: Vec<Vec<f64>>,
    pub n: usize,
    pub seed: u64,
}

impl LeakageMatrix {
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.entries[r][c])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv_writer();
        let mut header = vec!["anchor".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_error)?;
        for (name, row) in self.rows.iter().zip(&self.entries) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format_float(*v)));
            w.write_record(&rec).map_err(csv_error)?;
        }
        finish_csv(w)
    }
}

pub fn leakage_matrix(
    g: &GeneratorParams,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    anchors: &[NamedAnchor],
    space: &EmbeddingSpace,
    n: usize,
    seed: u64,
) -> Result<LeakageMatrix> {
    let mut subspaces = vec![Subspace::Base];
    subspaces.extend(anchors.iter().map(|a| Subspace::Domain(a.domain_id.clone())));
    let entries = anchors
        .iter()
        .map(|a| {
            subspaces
                .iter()
                .map(|s| domain_error(g, basis, registry, s, &a.anchor, space, n, seed))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(LeakageMatrix {
        rows: anchors.iter().map(|a| a.domain_id.clone()).collect(),
        columns: subspaces.iter().map(|s| s.to_string()).collect(),
        entries,
        n,
        seed,
    })
}

/// `0, s/10, …, s` followed by the extrapolants `−s/2` and `3s/2`.
pub fn default_alphas(s: f64) -> Vec<f64> {
    let mut a: Vec<f64> = (0..=10).map(|k| s * k as f64 / 10.0).collect();
    a.push(-0.5 * s);
    a.push(1.5 * s);
    a
}

/// Domain error along `project_base(z) + α·v_i` for each α.
#[allow(clippy::too_many_arguments)]
pub fn traversal_sweep(
    g: &GeneratorParams,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    domain_id: &str,
    anchor: &[f64],
    alphas: &[f64],
    space: &EmbeddingSpace,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let i = registry.index_of(domain_id)?;
    let base: Vec<Vec<f64>> = probe_latents(seed, n, basis.dim())
        .iter()
        .map(|z| project_base(z, basis, registry))
        .collect::<Result<_>>()?;
    alphas
        .iter()
        .map(|&alpha| {
            let zs: Vec<Vec<f64>> = base.iter().map(|z| traverse(z, &basis.directions[i], alpha)).collect();
            Ok((alpha, domain_error_on(g, &zs, anchor, space)?))
        })
        .collect()
}

/// One cell of a composition grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionCell {
    pub alpha: f64,
    pub beta: f64,
    pub error_i: f64,
    pub error_j: f64,
}

/// Both domain errors at `compose(project_base(z), {(i, α), (j, β)})` over
/// the grid `alphas × alphas`.
#[allow(clippy::too_many_arguments)]
pub fn composition_grid(
    g: &GeneratorParams,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    task_i: &NamedAnchor,
    task_j: &NamedAnchor,
    alphas: &[f64],
    space: &EmbeddingSpace,
    n: usize,
    seed: u64,
) -> Result<Vec<CompositionCell>> {
    let (i, j) = (registry.index_of(&task_i.domain_id)?, registry.index_of(&task_j.domain_id)?);
    let base: Vec<Vec<f64>> = probe_latents(seed, n, basis.dim())
        .iter()
        .map(|z| project_base(z, basis, registry))
        .collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(alphas.len() * alphas.len());
    for &alpha in alphas {
        for &beta in alphas {
            let zs: Vec<Vec<f64>> = base
                .iter()
                .map(|z| compose(z, basis, &[(i, alpha), (j, beta)]))
                .collect::<Result<_>>()?;
            let mut ei = 0.0;
            let mut ej = 0.0;
            for z in &zs {
                let e = space.embed(&g.forward(z)?)?;
                ei += cosine_error(&e, &task_i.anchor);
                ej += cosine_error(&e, &task_j.anchor);
            }
            cells.push(CompositionCell {
                alpha,
                beta,
                error_i: ei / n as f64,
                error_j: ej / n as f64,
            });
        }
    }
    Ok(cells)
}

/// `(1 − t)·a + t·b`, exact at the endpoints.
pub fn interpolate_params(a: &GeneratorParams, b: &GeneratorParams, t: f64) -> Result<GeneratorParams> {
    if a.arch != b.arch {
        return Err(Error::Shape("interpolating generators of different architectures".into()));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| (1.0 - t) * x + t * y).collect();
    GeneratorParams::from_values(a.arch, values)
}

/// Errors of both anchors on weight interpolations of two dedicated
/// adapters, over unprojected codes.
#[allow(clippy::too_many_arguments)]
pub fn interpolation_tradeoff(
    g_i: &GeneratorParams,
    g_j: &GeneratorParams,
    anchor_i: &[f64],
    anchor_j: &[f64],
    ts: &[f64],
    space: &EmbeddingSpace,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    let zs = probe_latents(seed, n, g_i.arch.latent_dim);
    ts.iter()
        .map(|&t| {
            let mix = interpolate_params(g_i, g_j, t)?;
            let mut ei = 0.0;
            let mut ej = 0.0;
            for z in &zs {
                let e = space.embed(&mix.forward(z)?)?;
                ei += cosine_error(&e, anchor_i);
                ej += cosine_error(&e, anchor_j);
            }
            Ok((t, ei / n as f64, ej / n as f64))
        })
        .collect()
}

/// Embeddings of `n` procedural source samples.
pub fn source_embeddings(factor_map: &FactorMap, space: &EmbeddingSpace, points: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = Rng::substream(seed, 1);
    (0..n)
        .map(|_| space.embed(&factor_map.target(&rng.normal_vec(factor_map.latent_dim()), points)))
        .collect()
}

/// Squared MMD between base-subspace generations and procedural source
/// samples, the FID analog.
#[allow(clippy::too_many_arguments)]
pub fn source_fidelity(
    g: &GeneratorParams,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    factor_map: &FactorMap,
    space: &EmbeddingSpace,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let generated: Vec<Vec<f64>> = probe_latents(seed, n, basis.dim())
        .iter()
        .map(|z| space.embed(&g.forward(&project_base(z, basis, registry)?)?))
        .collect::<Result<_>>()?;
    let data = source_embeddings(factor_map, space, g.arch.points, n, seed)?;
    mmd2(&generated, &data, FIDELITY_BANDWIDTH)
}

/// Mean misalignment of paired outputs: each cloud is taken relative to its
/// centroid, the mean paired difference (the intended domain change) is
/// removed, and the remaining per-pair differences are averaged in L2.
pub fn alignment_error(a: &[PointCloud], b: &[PointCloud]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape("alignment probe sets of unequal size".into()));
    }
    if a.is_empty() {
        return Err(Error::EmptySet);
    }
    let rel = |c: &PointCloud| -> Vec<f64> {
        let m = c.centroid();
        c.coords().chunks(2).flat_map(|p| [p[0] - m[0], p[1] - m[1]]).collect()
    };
    let diffs: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            if x.len() != y.len() {
                return Err(Error::Shape("clouds of different size".into()));
            }
            Ok(rel(y).iter().zip(rel(x)).map(|(p, q)| p - q).collect())
        })
        .collect::<Result<_>>()?;
    let n = diffs.len() as f64;
    let mut mean = vec![0.0; diffs[0].len()];
    for d in &diffs {
        mean.iter_mut().zip(d).for_each(|(m, v)| *m += v / n);
    }
    Ok(diffs
        .iter()
        .map(|d| d.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n)
}

/// Alignment between the base subspace and one repurposed subspace of an
/// expanded generator, on shared codes.
pub fn expansion_alignment(
    g: &GeneratorParams,
    basis: &LatentBasis,
    registry: &SubspaceRegistry,
    domain_id: &str,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let zs = probe_latents(seed, n, basis.dim());
    let base = zs
        .iter()
        .map(|z| g.forward(&project_base(z, basis, registry)?))
        .collect::<Result<Vec<_>>>()?;
    let moved = zs
        .iter()
        .map(|z| g.forward(&crate::latent::project_repurposed(z, basis, registry, domain_id)?))
        .collect::<Result<Vec<_>>>()?;
    alignment_error(&base, &moved)
}

/// Alignment between class 0 and `class` of a class-conditional generator,
/// on shared codes.
pub fn conditional_alignment(g: &GeneratorParams, class: usize, n: usize, seed: u64) -> Result<f64> {
    let classes = g.arch.cond_dim;
    if class == 0 || class >= classes {
        return Err(Error::InvalidArgument(format!("class {class} of {classes}")));
    }
    let zs = probe_latents(seed, n, g.arch.latent_dim);
    let at = |c: usize| {
        zs.iter()
            .map(|z| g.forward(&crate::trainer::conditional_input(z, c, classes)))
            .collect::<Result<Vec<_>>>()
    };
    alignment_error(&at(0)?, &at(class)?)
}

/// Dormancy spectrum as CSV: `index,singular_value,displacement`.
pub fn dormancy_csv(basis: &LatentBasis, scores: &[f64]) -> Result<String> {
    if scores.len() != basis.dim() {
        return Err(Error::Shape("one dormancy score per direction".into()));
    }
    let mut w = csv_writer();
    w.write_record(["index", "singular_value", "displacement"]).map_err(csv_error)?;
    for (i, (s, d)) in basis.singular_values.iter().zip(scores).enumerate() {
        w.write_record([i.to_string(), format_float(*s), format_float(*d)])
            .map_err(csv_error)?;
    }
    finish_csv(w)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// CSV of named columns of equal length.
pub fn table_csv(columns: &[(&str, Vec<f64>)]) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(columns.iter().map(|c| c.0)).map_err(csv_error)?;
    let rows = columns.first().map_or(0, |c| c.1.len());
    for r in 0..rows {
        w.write_record(columns.iter().map(|c| format_float(c.1[r])))
            .map_err(csv_error)?;
    }
    finish_csv(w)
}

fn svg_num(v: f64) -> String {
    format!("{v:.3}")
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const SVG_HEAD: &str = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";

/// A grid of point clouds, one panel per cloud, row-major, each drawn in
/// the square `[−3, 3]²`.
pub fn svg_clouds(panels: &[(String, PointCloud)], columns: usize) -> String {
    let cols = columns.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let cell = 120.0;
    let (w, h) = (cell * cols as f64, (cell + 16.0) * rows as f64);
    let mut s = String::from(SVG_HEAD);
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\">",
        svg_num(w),
        svg_num(h),
        svg_num(w),
        svg_num(h)
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>", svg_num(w), svg_num(h));
    for (k, (label, cloud)) in panels.iter().enumerate() {
        let (cx, cy) = ((k % cols) as f64 * cell, (k / cols) as f64 * (cell + 16.0));
        let _ = writeln!(
            s,
            "<g transform=\"translate({},{})\"><rect x=\"2\" y=\"2\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#ccc\"/>",
            svg_num(cx),
            svg_num(cy),
            svg_num(cell - 4.0),
            svg_num(cell - 4.0)
        );
        let mut path = String::new();
        for (i, p) in cloud.points().enumerate() {
            let x = cell / 2.0 + p[0] * cell / 6.0;
            let y = cell / 2.0 - p[1] * cell / 6.0;
            let _ = write!(path, "{}{},{} ", if i == 0 { "M" } else { "L" }, svg_num(x), svg_num(y));
        }
        path.push('Z');
        let _ = writeln!(s, "<path d=\"{path}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text></g>",
            svg_num(cell / 2.0),
            svg_num(cell + 10.0),
            svg_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of named series sharing one x axis.
pub fn svg_lines(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let mut s = String::from(SVG_HEAD);
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\">",
        svg_num(w),
        svg_num(h),
        svg_num(w),
        svg_num(h)
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>", svg_num(w), svg_num(h));
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        svg_num(w / 2.0),
        svg_escape(title)
    );
    let _ = writeln!(
        s,
        "<path d=\"M{},{} L{},{} L{},{}\" fill=\"none\" stroke=\"black\"/>",
        svg_num(pad),
        svg_num(pad),
        svg_num(pad),
        svg_num(h - pad),
        svg_num(w - pad),
        svg_num(h - pad)
    );
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"end\">{}</text>",
            svg_num(pad - 4.0),
            svg_num(y),
            svg_num(v)
        );
    }
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\">{}</text>",
            svg_num(x),
            svg_num(h - pad + 14.0),
            svg_num(v)
        );
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = colors[k % colors.len()];
        let mut d = String::new();
        for (i, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{},{} ", if i == 0 { "M" } else { "L" }, svg_num(px(x)), svg_num(py(y)));
        }
        let _ = writeln!(s, "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", d.trim_end());
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{}</text>",
            svg_num(w - pad + 2.0 - 80.0),
            svg_num(pad + 12.0 * k as f64),
            svg_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Files of one report, written under a directory in name order.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub files: std::collections::BTreeMap<String, String>,
    pub summary: serde_json::Map<String, serde_json::Value>,
}

impl Report {
    pub fn add(&mut self, name: &str, contents: String) {
        self.files.insert(name.to_string(), contents);
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    /// Writes every file plus `summary.json` (sorted keys).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, contents)?;
        }
        let mut json = serde_json::to_string_pretty(&serde_json::Value::Object(self.summary.clone()))
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        json.push('\n');
        std::fs::write(dir.join("summary.json"), json)?;
        Ok(())
    }
}
