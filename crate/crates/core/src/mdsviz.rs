//! Metric MDS (SMACOF) of probe-space embeddings, derivation traces, and
//! report files.
//!
//! Raw stress is `σ(X) = Σ_{i<j} (‖x_i − x_j‖ − δ_ij)²`. Each iteration
//! applies the Guttman transform `X ← n⁻¹ B(X) X`, which never increases σ.
//!
//! Report schemas (all CSVs have a header row, floats use 6 decimals, a
//! missing value is an empty field):
//!
//! | file | columns |
//! |------|---------|
//! | `global_uuas.csv` | `model,seed,layer,uuas,correct,total` |
//! | `category_uuas.csv` | `group,category,seed,layer,uuas,correct,total` |
//! | `expected_layers.csv` | `group,category,n,e_mean,e_std,valid_seeds,per_seed,status` |
//! | `agreement_expected_layers.csv` | same as `expected_layers.csv` |
//!
//! `per_seed` joins the per-seed expected layers with `;`. Traces are JSON
//! documents (`traces/<id>.json`, see [`DerivationTrace`]) with optional SVG
//! panels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{extract_subgraph_edges, Category, DepSentence, CorpusError};
use crate::decode::{distance_matrix, prim_mst, subgraph_uuas, DecodeError};
use crate::embedstore::SentenceEmbeddings;
use crate::fsutil::atomic_write_with;
use crate::metrics::{AgreementAnalysis, ExpectedLayerRow, LayerScoreSeries};
use crate::probe::{projected_embeddings, ProbeError, ProbeParams};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MdsError {
    #[error("MDS needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("points have inconsistent dimensions")]
    Ragged,
    #[error("non-finite input coordinate")]
    NonFinite,
    #[error("invalid MDS settings: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdsConfig {
    pub dims: usize,
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop when the relative stress decrease of one iteration falls below this.
    pub eps: f64,
    pub seed: u64,
}

impl Default for MdsConfig {
    fn default() -> Self {
        MdsConfig { dims: 2, n_init: 4, max_iter: 300, eps: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsResult {
    pub dims: usize,
    /// Row-major `T × dims`.
    pub coords: Vec<f64>,
    pub stress: f64,
    /// Stress before the first update and after each one, for the returned run.
    pub stress_history: Vec<f64>,
    pub iterations: usize,
}

impl MdsResult {
    pub fn len(&self) -> usize {
        self.coords.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dims..(i + 1) * self.dims]
    }

    /// Pairwise Euclidean distances of the output configuration.
    pub fn distances(&self) -> Vec<f64> {
        pairwise(&self.coords, self.len(), self.dims)
    }
}

fn pairwise(x: &[f64], n: usize, dims: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = (0..dims).map(|k| (x[i * dims + k] - x[j * dims + k]).powi(2)).sum::<f64>().sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn raw_stress(d: &[f64], delta: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (d[i * n + j] - delta[i * n + j]).powi(2);
        }
    }
    s
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Starting coordinates keyed by each point's content, so relabelling the
/// input relabels the start the same way.
fn initial(points: &[Vec<f64>], dims: usize, seed: u64, restart: usize) -> Vec<f64> {
    let base = mix(seed ^ mix(restart as u64 + 1));
    let mut x = Vec::with_capacity(points.len() * dims);
    for p in points {
        let h = p.iter().fold(base, |acc, v| mix(acc ^ v.to_bits()));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        x.extend((0..dims).map(|_| rng.random::<f64>()));
    }
    x
}

struct Run {
    coords: Vec<f64>,
    stress: f64,
    history: Vec<f64>,
}

fn smacof_run(delta: &[f64], n: usize, dims: usize, mut x: Vec<f64>, max_iter: usize, eps: f64) -> Run {
    let mut d = pairwise(&x, n, dims);
    let mut stress = raw_stress(&d, delta, n);
    let mut history = vec![stress];
    for _ in 0..max_iter {
        if stress == 0.0 {
            break;
        }
        let mut next = vec![0.0; n * dims];
        for i in 0..n {
            for j in 0..n {
                if i == j || d[i * n + j] == 0.0 {
                    continue;
                }
                let b = delta[i * n + j] / d[i * n + j];
                for k in 0..dims {
                    next[i * dims + k] += b * (x[i * dims + k] - x[j * dims + k]);
                }
            }
        }
        next.iter_mut().for_each(|v| *v /= n as f64);
        x = next;
        d = pairwise(&x, n, dims);
        let s = raw_stress(&d, delta, n);
        debug_assert!(s <= stress * (1.0 + 1e-9) + 1e-12, "stress rose from {stress} to {s}");
        history.push(s);
        let done = (stress - s) <= eps * stress;
        stress = s;
        if done {
            break;
        }
    }
    Run { coords: x, stress, history }
}

/// Metric SMACOF on the Euclidean distances between `points`. Returns the
/// lowest-stress run among `n_init` restarts (earliest on ties).
pub fn smacof_mds(points: &[Vec<f64>], cfg: &MdsConfig) -> Result<MdsResult, MdsError> {
    let n = points.len();
    if n < 2 {
        return Err(MdsError::TooFewPoints(n));
    }
    if cfg.dims == 0 || cfg.n_init == 0 || cfg.eps.is_nan() || cfg.eps < 0.0 {
        return Err(MdsError::BadConfig(format!("{cfg:?}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(MdsError::Ragged);
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MdsError::NonFinite);
    }
    let delta = pairwise(&points.concat(), n, dim);
    let dims = cfg.dims;
    if delta.iter().all(|v| *v == 0.0) {
        return Ok(MdsResult { dims, coords: vec![0.0; n * dims], stress: 0.0, stress_history: vec![0.0], iterations: 0 });
    }
    if n == 2 {
        let mut coords = vec![0.0; 2 * dims];
        coords[0] = -delta[1] / 2.0;
        coords[dims] = delta[1] / 2.0;
        return Ok(MdsResult { dims, coords, stress: 0.0, stress_history: vec![0.0], iterations: 0 });
    }
    let runs: Vec<Run> = (0..cfg.n_init)
        .into_par_iter()
        .map(|r| smacof_run(&delta, n, dims, initial(points, dims, cfg.seed, r), cfg.max_iter, cfg.eps))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.stress < a.stress { b } else { a })
        .expect("n_init > 0");
    Ok(MdsResult {
        dims,
        iterations: best.history.len() - 1,
        coords: best.coords,
        stress: best.stress,
        stress_history: best.history,
    })
}

/// Rigidly moves `y` (2-D points) onto `reference` by translation plus the
/// rotation or reflection with the smaller residual. Scale is untouched.
pub fn procrustes_align(reference: &[[f64; 2]], y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let centroid = |p: &[[f64; 2]]| {
        let n = p.len().max(1) as f64;
        p.iter().fold([0.0, 0.0], |a, q| [a[0] + q[0] / n, a[1] + q[1] / n])
    };
    let cr = centroid(reference);
    let cy = centroid(y);
    let r: Vec<[f64; 2]> = reference.iter().map(|p| [p[0] - cr[0], p[1] - cr[1]]).collect();
    let best = [false, true]
        .iter()
        .map(|&reflect| {
            let yc: Vec<[f64; 2]> = y
                .iter()
                .map(|p| [p[0] - cy[0], if reflect { cy[1] - p[1] } else { p[1] - cy[1] }])
                .collect();
            let (mut dot, mut cross) = (0.0, 0.0);
            for (a, b) in yc.iter().zip(&r) {
                dot += a[0] * b[0] + a[1] * b[1];
                cross += a[0] * b[1] - a[1] * b[0];
            }
            let (s, c) = cross.atan2(dot).sin_cos();
            let moved: Vec<[f64; 2]> = yc.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
            let residual: f64 = moved.iter().zip(&r).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum();
            (residual, moved)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
        .1;
    best.into_iter().map(|p| [p[0] + cr[0], p[1] + cr[1]]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLayer {
    pub layer: usize,
    /// One `[x, y]` per token.
    pub coords: Vec<[f64; 2]>,
    pub stress: f64,
    /// Predicted edges as 0-based `[lo, hi]` token pairs.
    pub edges: Vec<[usize; 2]>,
    /// UUAS per category name; `null` when the category has no gold edges.
    pub uuas: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivationTrace {
    pub format_version: u32,
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub gold_edges: Vec<[usize; 2]>,
    pub procrustes: bool,
    pub layers: Vec<TraceLayer>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub mds: MdsConfig,
    /// Align each layer to the previous one (presentation only).
    pub procrustes: bool,
}


/// MDS coordinates, decoded tree and category UUAS of one sentence at every
/// layer of a probe stack. Each layer is embedded independently.
pub fn derivation_trace(
    probes: &[ProbeParams],
    sentence: &DepSentence,
    emb: &SentenceEmbeddings,
    categories: &[Category],
    cfg: &TraceConfig,
) -> Result<DerivationTrace, MdsError> {
    if cfg.mds.dims != 2 {
        return Err(MdsError::BadConfig("traces are two-dimensional".into()));
    }
    let subs = categories
        .iter()
        .map(|c| extract_subgraph_edges(sentence, c).map(|s| (c.to_string(), s)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut layers = probes
        .par_iter()
        .enumerate()
        .map(|(l, p)| -> Result<TraceLayer, MdsError> {
            let flat = projected_embeddings(p, emb)?;
            let points: Vec<Vec<f64>> = flat.chunks(p.rank()).map(<[f64]>::to_vec).collect();
            let mds_cfg = MdsConfig { seed: mix(cfg.mds.seed ^ mix(l as u64)), ..cfg.mds.clone() };
            let mds = smacof_mds(&points, &mds_cfg)?;
            let tree = prim_mst(&distance_matrix(p, emb)?)?;
            let uuas = subs.iter().map(|(name, s)| (name.clone(), subgraph_uuas(&tree, s).score())).collect();
            Ok(TraceLayer {
                layer: l,
                coords: (0..mds.len()).map(|i| [mds.point(i)[0], mds.point(i)[1]]).collect(),
                stress: mds.stress,
                edges: tree.edges.iter().map(|e| [e.lo(), e.hi()]).collect(),
                uuas,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if cfg.procrustes {
        for l in 1..layers.len() {
            let aligned = procrustes_align(&layers[l - 1].coords, &layers[l].coords);
            layers[l].coords = aligned;
        }
    }
    Ok(DerivationTrace {
        format_version: TRACE_FORMAT_VERSION,
        sentence_id: sentence.id().to_string(),
        tokens: sentence.tokens().to_vec(),
        gold_edges: sentence.edges().iter().map(|e| [e.lo(), e.hi()]).collect(),
        procrustes: cfg.procrustes,
        layers,
    })
}

#[derive(Debug, Error)]
#[error("cannot write {path}: {source}")]
pub struct ReportError {
    pub path: PathBuf,
    #[source]
    pub source: io::Error,
}

/// Everything a report run can emit; empty slices and `None` are skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReportInputs<'a> {
    pub model: &'a str,
    /// Global UUAS curve per seed.
    pub global: &'a [(u64, LayerScoreSeries)],
    /// Category curves per seed (any category, any structure set).
    pub series: &'a [(u64, LayerScoreSeries)],
    pub expected_layers: &'a [ExpectedLayerRow],
    pub agreement: Option<&'a AgreementAnalysis>,
    pub traces: &'a [DerivationTrace],
    pub svg: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_file(path: &Path, body: &[u8]) -> Result<(), ReportError> {
    atomic_write_with(path, |w: &mut dyn Write| w.write_all(body)).map_err(|source| ReportError { path: path.into(), source })
}

fn expected_csv(rows: &[ExpectedLayerRow]) -> String {
    let mut s = String::from("group,category,n,e_mean,e_std,valid_seeds,per_seed,status\n");
    for r in rows {
        let per: Vec<String> = r.per_seed.iter().map(|v| fmt_opt(*v)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.group),
            r.category,
            r.n,
            fmt_opt(r.e_mean),
            fmt_opt(r.e_std),
            r.valid_seeds,
            per.join(";"),
            csv_field(&r.status)
        );
    }
    s
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("report values serialise");
    b.push(b'\n');
    b
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes the report files into `outdir` and returns their paths in
/// write order. Output is a pure function of the inputs.
pub fn emit_reports(inputs: &ReportInputs<'_>, outdir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(outdir).map_err(|source| ReportError { path: outdir.into(), source })?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &[u8]| -> Result<(), ReportError> {
        let path = outdir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| ReportError { path: parent.into(), source })?;
        }
        write_file(&path, body)?;
        written.push(path);
        Ok(())
    };

    if !inputs.global.is_empty() {
        let mut s = String::from("model,seed,layer,uuas,correct,total\n");
        for (seed, series) in inputs.global {
            for (l, (v, c)) in series.scores.iter().zip(&series.counts).enumerate() {
                let _ = writeln!(s, "{},{seed},{l},{v:.6},{},{}", csv_field(inputs.model), c.correct, c.total);
            }
        }
        put("global_uuas.csv", s.as_bytes())?;
    }
    if !inputs.series.is_empty() {
        let mut s = String::from("group,category,seed,layer,uuas,correct,total\n");
        for (seed, series) in inputs.series {
            let group = series.key.as_ref().map(|k| k.to_string()).unwrap_or_else(|| "all".into());
            for (l, (v, c)) in series.scores.iter().zip(&series.counts).enumerate() {
                let _ = writeln!(s, "{group},{},{seed},{l},{v:.6},{},{}", series.category, c.correct, c.total);
            }
        }
        put("category_uuas.csv", s.as_bytes())?;
    }
    if !inputs.expected_layers.is_empty() {
        put("expected_layers.csv", expected_csv(inputs.expected_layers).as_bytes())?;
        put("expected_layers.json", &json_bytes(&inputs.expected_layers))?;
        if inputs.svg {
            put("expected_layers.svg", expected_layer_svg(inputs.expected_layers).as_bytes())?;
        }
    }
    if let Some(a) = inputs.agreement {
        put("agreement_summary.json", &json_bytes(a))?;
        let rows: Vec<ExpectedLayerRow> = a.success.rows.iter().chain(&a.failure.rows).cloned().collect();
        put("agreement_expected_layers.csv", expected_csv(&rows).as_bytes())?;
        if inputs.svg {
            put("agreement_expected_layers.svg", expected_layer_svg(&rows).as_bytes())?;
        }
    }
    for t in inputs.traces {
        let stem = format!("traces/{}", safe_name(&t.sentence_id));
        put(&format!("{stem}.json"), &json_bytes(t))?;
        if inputs.svg {
            put(&format!("{stem}.svg"), trace_svg(t).as_bytes())?;
        }
    }
    Ok(written)
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart: one group per row group, one bar per category, error
/// bars of one seed standard deviation. Invalid rows draw no bar.
pub fn expected_layer_svg(rows: &[ExpectedLayerRow]) -> String {
    let mut groups: Vec<&str> = Vec::new();
    let mut cats: Vec<String> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
        let c = r.category.to_string();
        if !cats.contains(&c) {
            cats.push(c);
        }
    }
    let top = rows
        .iter()
        .filter_map(|r| Some(r.e_mean? + r.e_std.unwrap_or(0.0)))
        .fold(1.0f64, f64::max)
        .ceil();
    let (bar, gap, left, plot_h, base) = (18.0, 24.0, 50.0, 240.0, 270.0);
    let group_w = bar * cats.len() as f64 + gap;
    let width = left + group_w * groups.len() as f64 + 140.0;
    let y = |v: f64| base - v / top * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="330" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<line x1="{left}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#, width - 140.0);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{base}" x2="{left}" y2="{:.1}" stroke="black"/>"#, base - plot_h);
    for t in 0..=(top as usize) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t}</text>"#,
            left - 4.0,
            y(t as f64) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})">expected layer</text>"#, base - plot_h / 2.0, base - plot_h / 2.0);
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + gap / 2.0 + gi as f64 * group_w;
        let _ = writeln!(
            s,
            r#"<g class="group" data-group="{}">"#,
            xml_escape(g)
        );
        for r in rows.iter().filter(|r| r.group == *g) {
            let ci = cats.iter().position(|c| *c == r.category.to_string()).unwrap();
            let (Some(m), sd) = (r.e_mean, r.e_std.unwrap_or(0.0)) else { continue };
            let x = x0 + ci as f64 * bar;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {m:.3}</title></rect>"#,
                y(m.max(0.0)),
                bar - 2.0,
                base - y(m.max(0.0)),
                PALETTE[ci % PALETTE.len()],
                xml_escape(g),
                r.category
            );
            let cx = x + (bar - 2.0) / 2.0;
            let _ = writeln!(
                s,
                r#"<line class="errorbar" x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                y(m + sd),
                y((m - sd).max(0.0))
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar * cats.len() as f64 / 2.0,
            base + 16.0,
            xml_escape(g)
        );
        s.push_str("</g>\n");
    }
    for (ci, c) in cats.iter().enumerate() {
        let ly = 30.0 + ci as f64 * 16.0;
        let lx = width - 130.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 9.0,
            PALETTE[ci % PALETTE.len()],
            lx + 14.0,
            xml_escape(c)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One scatter-plus-edges panel per layer, laid out in a row.
pub fn trace_svg(t: &DerivationTrace) -> String {
    let panel = 220.0;
    let pad = 20.0;
    let width = panel * t.layers.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{:.0}" font-family="sans-serif" font-size="10">"#,
        panel + 20.0
    );
    for (k, layer) in t.layers.iter().enumerate() {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in &layer.coords {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        let ox = k as f64 * panel;
        let map = |c: [f64; 2]| {
            (
                ox + pad + (c[0] - lo[0]) / span * (panel - 2.0 * pad),
                pad + (c[1] - lo[1]) / span * (panel - 2.0 * pad),
            )
        };
        let _ = writeln!(s, r#"<g class="layer" data-layer="{}">"#, layer.layer);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">layer {}</text>"#, ox + pad, panel + 12.0, layer.layer);
        for e in &layer.edges {
            let (x1, y1) = map(layer.coords[e[0]]);
            let (x2, y2) = map(layer.coords[e[1]]);
            let gold = t.gold_edges.contains(e);
            let _ = writeln!(
                s,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{}" />"#,
                if gold { "#55a868" } else { "#c44e52" }
            );
        }
        for (i, c) in layer.coords.iter().enumerate() {
            let (x, y) = map(*c);
            let _ = writeln!(
                s,
                r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#333"/><text x="{:.2}" y="{:.2}">{}</text>"##,
                x + 4.0,
                y - 4.0,
                xml_escape(&t.tokens[i])
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
