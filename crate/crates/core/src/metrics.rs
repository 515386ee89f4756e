//! Per-layer score series, expected layers, and the aggregate analyses built
//! on them.
//!
//! The expected layer of a series `S(0..=L)` weights each layer index by the
//! score gained at that layer:
//!
//! ```text
//! E = Σ_{ℓ=1..L} ℓ · (S(ℓ) − S(ℓ−1))  /  Σ_{ℓ=1..L} (S(ℓ) − S(ℓ−1))
//! ```
//!
//! Deltas are used raw (negative gains count against their layer) unless
//! [`DeltaMode::Clamped`] is requested.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    categories_for, extract_subgraph_edges_with, structure_key_with, Category, CorpusError, DepSentence, KeyConfig,
    StructureSetKey, SubgraphConfig,
};
use crate::decode::{distance_matrix, prim_mst, subgraph_uuas, Aggregation, DecodeError, PredictedTree, UuasAccumulator, UuasCount};
use crate::embedstore::SentenceEmbeddings;
use crate::probe::ProbeParams;
use crate::templates::AgreementItem;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("a score series needs at least 2 layers, got {0}")]
    TooShort(usize),
    #[error("no test sentence falls in {0}")]
    EmptySet(String),
    #[error("no gold edges to score for {0}")]
    NoGoldEdges(String),
    #[error("probe set is inconsistent: {0}")]
    Probes(String),
    #[error("sentence {id}: {reason}")]
    Sentence { id: String, reason: String },
    #[error("items without pseudo-log-likelihood scores: {}", .0.join(", "))]
    MissingScores(Vec<String>),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    #[default]
    Raw,
    /// Negative deltas are replaced by zero.
    Clamped,
}

/// Scoring options shared by every analysis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub aggregation: Aggregation,
    pub delta_mode: DeltaMode,
    pub subgraph: SubgraphConfig,
    pub key: KeyConfig,
}

/// UUAS of one category at every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreSeries {
    pub category: Category,
    pub key: Option<StructureSetKey>,
    /// `S(0..=L)`.
    pub scores: Vec<f64>,
    pub counts: Vec<UuasCount>,
    pub sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedLayerResult {
    /// `None` when the denominator vanishes.
    pub expected: Option<f64>,
    pub deltas: Vec<f64>,
    pub denominator: f64,
}

impl ExpectedLayerResult {
    pub fn is_valid(&self) -> bool {
        self.expected.is_some()
    }
}

const FLAT_TOL: f64 = 1e-12;

pub fn expected_layer(scores: &[f64]) -> Result<ExpectedLayerResult, MetricsError> {
    expected_layer_with(scores, DeltaMode::Raw)
}

pub fn expected_layer_with(scores: &[f64], mode: DeltaMode) -> Result<ExpectedLayerResult, MetricsError> {
    if scores.len() < 2 {
        return Err(MetricsError::TooShort(scores.len()));
    }
    let deltas: Vec<f64> = scores
        .windows(2)
        .map(|w| w[1] - w[0])
        .map(|d| match mode {
            DeltaMode::Raw => d,
            DeltaMode::Clamped => d.max(0.0),
        })
        .collect();
    let denominator: f64 = deltas.iter().sum();
    let numerator: f64 = deltas.iter().enumerate().map(|(i, d)| (i + 1) as f64 * d).sum();
    let expected = (denominator.abs() > FLAT_TOL).then(|| numerator / denominator);
    Ok(ExpectedLayerResult { expected, deltas, denominator })
}

/// One test sentence with the tree decoded at every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSentence {
    pub sentence: DepSentence,
    /// Index ℓ holds the tree from the layer-ℓ probe.
    pub trees: Vec<PredictedTree>,
}

/// Checks that `probes[ℓ]` is the probe for layer ℓ.
pub fn check_probe_stack(probes: &[ProbeParams]) -> Result<(), MetricsError> {
    if probes.len() < 2 {
        return Err(MetricsError::Probes(format!("need probes for at least layers 0 and 1, got {}", probes.len())));
    }
    for (l, p) in probes.iter().enumerate() {
        if p.layer() != l {
            return Err(MetricsError::Probes(format!("position {l} holds the probe for layer {}", p.layer())));
        }
        if p.input_dim() != probes[0].input_dim() {
            return Err(MetricsError::Probes("probes disagree on input dimension".into()));
        }
    }
    Ok(())
}

/// Decodes one sentence with every probe of a stack.
pub fn decode_layers(
    probes: &[ProbeParams],
    sentence: &DepSentence,
    emb: &SentenceEmbeddings,
) -> Result<DecodedSentence, MetricsError> {
    if emb.tokens() != sentence.len() {
        return Err(MetricsError::Sentence {
            id: sentence.id().to_string(),
            reason: format!("{} embedded tokens for {} words", emb.tokens(), sentence.len()),
        });
    }
    let trees = probes
        .iter()
        .map(|p| {
            let d = distance_matrix(p, emb)?;
            prim_mst(&d)
        })
        .collect::<Result<Vec<_>, DecodeError>>()?;
    Ok(DecodedSentence { sentence: sentence.clone(), trees })
}

/// Decodes a whole split in parallel, preserving input order.
pub fn decode_split(
    probes: &[ProbeParams],
    items: &[(DepSentence, SentenceEmbeddings)],
) -> Result<Vec<DecodedSentence>, MetricsError> {
    check_probe_stack(probes)?;
    items.par_iter().map(|(s, e)| decode_layers(probes, s, e)).collect()
}

fn describe(category: &Category, key: Option<&StructureSetKey>) -> String {
    match key {
        Some(k) => format!("{category} in structure set {k}"),
        None => category.to_string(),
    }
}

/// `S(ℓ)` for one category, over the decoded sentences in structure set
/// `key` (all sentences when `key` is `None`). Sentences lacking the micro
/// label at their root are skipped.
pub fn layer_scores(
    decoded: &[DecodedSentence],
    category: &Category,
    key: Option<&StructureSetKey>,
    cfg: &ScoreConfig,
) -> Result<LayerScoreSeries, MetricsError> {
    let layers = decoded.first().map_or(0, |d| d.trees.len());
    let mut accs = vec![UuasAccumulator::default(); layers];
    let mut sentences = 0;
    for d in decoded {
        if let Some(k) = key {
            if structure_key_with(&d.sentence, &cfg.key) != *k {
                continue;
            }
        }
        let sub = match extract_subgraph_edges_with(&d.sentence, category, &cfg.subgraph) {
            Ok(s) => s,
            Err(CorpusError::LabelNotAtRoot { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        if d.trees.len() != layers {
            return Err(MetricsError::Probes(format!(
                "sentence {} was decoded at {} layers, expected {layers}",
                d.sentence.id(),
                d.trees.len()
            )));
        }
        sentences += 1;
        for (acc, tree) in accs.iter_mut().zip(&d.trees) {
            acc.add(subgraph_uuas(tree, &sub));
        }
    }
    if sentences == 0 {
        return Err(MetricsError::EmptySet(describe(category, key)));
    }
    let scores = accs
        .iter()
        .map(|a| a.value(cfg.aggregation))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| MetricsError::NoGoldEdges(describe(category, key)))?;
    Ok(LayerScoreSeries {
        category: category.clone(),
        key: key.cloned(),
        scores,
        counts: accs.iter().map(UuasAccumulator::counts).collect(),
        sentences,
    })
}

/// Trees decoded from one seed's probe stack.
#[derive(Debug, Clone)]
pub struct SeedDecodes {
    pub seed: u64,
    pub sentences: Vec<DecodedSentence>,
}

/// Expected layer of one (group, category) cell, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedLayerRow {
    /// Structure-set key, or a partition name for agreement rows.
    pub group: String,
    pub category: Category,
    pub n: usize,
    pub per_seed: Vec<Option<f64>>,
    pub e_mean: Option<f64>,
    pub e_std: Option<f64>,
    pub valid_seeds: usize,
    /// `ok`, or the reason no expected layer could be computed.
    pub status: String,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn row_for(
    group: String,
    seeds: &[Vec<DecodedSentence>],
    category: &Category,
    key: Option<&StructureSetKey>,
    cfg: &ScoreConfig,
) -> ExpectedLayerRow {
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut n = 0;
    let mut reasons = Vec::new();
    for decoded in seeds {
        match layer_scores(decoded, category, key, cfg) {
            Ok(series) => {
                n = series.sentences;
                let e = expected_layer_with(&series.scores, cfg.delta_mode).ok().and_then(|r| r.expected);
                if e.is_none() {
                    reasons.push("flat score series".to_string());
                }
                per_seed.push(e);
            }
            Err(e) => {
                reasons.push(e.to_string());
                per_seed.push(None);
            }
        }
    }
    let valid: Vec<f64> = per_seed.iter().flatten().copied().collect();
    let stats = mean_std(&valid);
    let status = if stats.is_some() {
        "ok".to_string()
    } else {
        reasons.dedup();
        format!("invalid: {}", reasons.join("; "))
    };
    ExpectedLayerRow {
        group,
        category: category.clone(),
        n,
        per_seed,
        e_mean: stats.map(|s| s.0),
        e_std: stats.map(|s| s.1),
        valid_seeds: valid.len(),
        status,
    }
}

/// Expected layers for Macro and each micro relation of every structure set,
/// computed per seed then averaged.
pub fn structure_set_report(
    keys: &[StructureSetKey],
    seeds: &[SeedDecodes],
    cfg: &ScoreConfig,
) -> Vec<ExpectedLayerRow> {
    structure_set_report_for(keys, None, seeds, cfg)
}

/// Like [`structure_set_report`], but with a fixed category list for every
/// structure set when `categories` is given. Categories a set lacks yield
/// invalid rows.
pub fn structure_set_report_for(
    keys: &[StructureSetKey],
    categories: Option<&[Category]>,
    seeds: &[SeedDecodes],
    cfg: &ScoreConfig,
) -> Vec<ExpectedLayerRow> {
    let decoded: Vec<Vec<DecodedSentence>> = seeds.iter().map(|s| s.sentences.clone()).collect();
    let mut rows = Vec::new();
    for key in keys {
        let cats = categories.map_or_else(|| categories_for(key), <[Category]>::to_vec);
        for cat in cats {
            rows.push(row_for(key.to_string(), &decoded, &cat, Some(key), cfg));
        }
    }
    rows
}

/// Global UUAS curve of every seed.
pub fn global_curves(seeds: &[SeedDecodes], cfg: &ScoreConfig) -> Result<Vec<(u64, LayerScoreSeries)>, MetricsError> {
    seeds
        .iter()
        .map(|s| Ok((s.seed, layer_scores(&s.sentences, &Category::Global, None, cfg)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Equal scores count as a failure (and are flagged).
    #[default]
    Failure,
    Success,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub name: String,
    pub n: usize,
    pub rows: Vec<ExpectedLayerRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementAnalysis {
    pub total: usize,
    pub accuracy: f64,
    pub success: PartitionSummary,
    pub failure: PartitionSummary,
    /// Ids of items whose two scores were equal.
    pub ties: Vec<String>,
    pub excluded: usize,
}

/// Splits agreement items by whether the grammatical variant scored higher
/// and computes per-category expected layers in each partition.
pub fn agreement_split_analysis(
    items: &[AgreementItem],
    seeds: &[SeedDecodes],
    policy: TiePolicy,
    cfg: &ScoreConfig,
) -> Result<AgreementAnalysis, MetricsError> {
    let missing: Vec<String> = items
        .iter()
        .filter(|i| i.pll_gram.is_none() || i.pll_ungram.is_none())
        .map(|i| i.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingScores(missing));
    }
    let mut success_ids = Vec::new();
    let mut failure_ids = Vec::new();
    let mut ties = Vec::new();
    let mut excluded = 0;
    for item in items {
        let (g, u) = (item.pll_gram.unwrap(), item.pll_ungram.unwrap());
        if g == u {
            ties.push(item.id.clone());
            match policy {
                TiePolicy::Failure => failure_ids.push(item.id.as_str()),
                TiePolicy::Success => success_ids.push(item.id.as_str()),
                TiePolicy::Exclude => excluded += 1,
            }
        } else if g > u {
            success_ids.push(item.id.as_str());
        } else {
            failure_ids.push(item.id.as_str());
        }
    }
    let categories = match items.first() {
        Some(i) => categories_for(&structure_key_with(&i.gold, &cfg.key)),
        None => vec![Category::Macro],
    };
    let lookups: Vec<HashMap<&str, &DecodedSentence>> = seeds
        .iter()
        .map(|s| s.sentences.iter().map(|d| (d.sentence.id(), d)).collect())
        .collect();

    let partition = |name: &str, ids: &[&str]| -> Result<PartitionSummary, MetricsError> {
        let per_seed: Vec<Vec<DecodedSentence>> = lookups
            .iter()
            .map(|map| {
                ids.iter()
                    .map(|id| {
                        map.get(id).map(|d| (*d).clone()).ok_or_else(|| MetricsError::Sentence {
                            id: id.to_string(),
                            reason: "no decoded trees for this item".into(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let rows = categories
            .iter()
            .map(|c| {
                if ids.is_empty() {
                    ExpectedLayerRow {
                        group: name.to_string(),
                        category: c.clone(),
                        n: 0,
                        per_seed: vec![None; seeds.len()],
                        e_mean: None,
                        e_std: None,
                        valid_seeds: 0,
                        status: "empty partition".into(),
                    }
                } else {
                    row_for(name.to_string(), &per_seed, c, None, cfg)
                }
            })
            .collect();
        Ok(PartitionSummary { name: name.to_string(), n: ids.len(), rows })
    };

    let success = partition("success", &success_ids)?;
    let failure = partition("failure", &failure_ids)?;
    let scored = items.len() - excluded;
    Ok(AgreementAnalysis {
        total: items.len(),
        accuracy: if scored == 0 { 0.0 } else { success.n as f64 / scored as f64 },
        success,
        failure,
        ties,
        excluded,
    })
}

/// Counts of sentences per structure set among decoded sentences.
pub fn group_counts(decoded: &[DecodedSentence], cfg: &ScoreConfig) -> BTreeMap<StructureSetKey, usize> {
    let mut out = BTreeMap::new();
    for d in decoded {
        *out.entry(structure_key_with(&d.sentence, &cfg.key)).or_default() += 1;
    }
    out
}
