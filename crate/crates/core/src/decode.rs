//! Tree decoding from probe distances and unlabeled undirected attachment
//! scoring.

use std::collections::BTreeSet;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Edge, SubgraphEdges};
use crate::embedstore::SentenceEmbeddings;
use crate::probe::{projected_embeddings, ProbeError, ProbeParams};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("distance matrix entry ({i}, {j}) is not finite")]
    NonFinite { i: usize, j: usize },
    #[error("distance matrix is asymmetric at ({i}, {j}): {a} vs {b}")]
    Asymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("distance matrix entry ({i}, {j}) = {value} is negative or off-diagonal zero rule violated")]
    Invalid { i: usize, j: usize, value: f64 },
    #[error("distance matrix has {0} entries, which is not a square of the token count")]
    Shape(usize),
    #[error("empty distance matrix")]
    Empty,
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

const SYMMETRY_TOL: f64 = 1e-6;

/// Symmetric `n x n` matrix of non-negative distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self, DecodeError> {
        if data.len() != n * n {
            return Err(DecodeError::Shape(data.len()));
        }
        for i in 0..n {
            for j in 0..n {
                let v = data[i * n + j];
                if !v.is_finite() {
                    return Err(DecodeError::NonFinite { i, j });
                }
                if v < 0.0 || (i == j && v != 0.0) {
                    return Err(DecodeError::Invalid { i, j, value: v });
                }
                let w = data[j * n + i];
                if (v - w).abs() > SYMMETRY_TOL {
                    return Err(DecodeError::Asymmetric { i, j, a: v, b: w });
                }
            }
        }
        Ok(DistanceMatrix { n, data })
    }

    /// Fills the upper triangle from `f(i, j)` for `i < j` and mirrors it.
    pub fn from_fn<F: FnMut(usize, usize) -> f64>(n: usize, mut f: F) -> Result<Self, DecodeError> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        DistanceMatrix::new(n, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Applies `f` to every off-diagonal entry.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Result<Self, DecodeError> {
        DistanceMatrix::from_fn(self.n, |i, j| f(self.get(i, j)))
    }
}

/// Pairwise probe distances between the mixed, projected token embeddings.
pub fn distance_matrix(p: &ProbeParams, h: &SentenceEmbeddings) -> Result<DistanceMatrix, DecodeError> {
    let proj = projected_embeddings(p, h)?;
    let r = p.rank();
    DistanceMatrix::from_fn(h.tokens(), |i, j| {
        proj[i * r..(i + 1) * r]
            .iter()
            .zip(&proj[j * r..(j + 1) * r])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    })
}

/// A spanning tree over the tokens of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedTree {
    pub tokens: usize,
    pub edges: BTreeSet<Edge>,
}

impl PredictedTree {
    pub fn weight(&self, d: &DistanceMatrix) -> f64 {
        self.edges.iter().map(|e| d.get(e.lo(), e.hi())).sum()
    }
}

/// Prim's algorithm on the dense matrix, grown from token 0.
///
/// Among crossing edges of equal weight the one with the lowest smaller
/// endpoint wins, then the lowest larger endpoint, so the result is fully
/// determined by the matrix.
pub fn prim_mst(d: &DistanceMatrix) -> Result<PredictedTree, DecodeError> {
    let n = d.len();
    if n == 0 {
        return Err(DecodeError::Empty);
    }
    let mut in_tree = vec![false; n];
    // best[v] = (weight, edge) of the cheapest known edge from the tree to v.
    let mut best: Vec<Option<(f64, Edge)>> = vec![None; n];
    let mut edges = BTreeSet::new();
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let cand = (d.get(current, v), Edge::new(current, v));
            let better = match best[v] {
                None => true,
                Some(old) => cand.0 < old.0 || (cand.0 == old.0 && cand.1 < old.1),
            };
            if better {
                best[v] = Some(cand);
            }
        }
        let mut pick: Option<(usize, f64, Edge)> = None;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let (w, e) = best[v].expect("every outside vertex has a candidate");
            let better = match pick {
                None => true,
                Some((_, pw, pe)) => w < pw || (w == pw && e < pe),
            };
            if better {
                pick = Some((v, w, e));
            }
        }
        let (v, _, e) = pick.expect("an outside vertex remains");
        in_tree[v] = true;
        edges.insert(e);
        current = v;
    }
    Ok(PredictedTree { tokens: n, edges })
}

/// Correct and total edge counts for one comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UuasCount {
    pub correct: usize,
    pub total: usize,
}

impl UuasCount {
    /// `None` when there is no gold edge to score.
    pub fn score(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

impl std::ops::Add for UuasCount {
    type Output = UuasCount;

    fn add(self, o: UuasCount) -> UuasCount {
        UuasCount { correct: self.correct + o.correct, total: self.total + o.total }
    }
}

/// Undirected, unlabeled overlap between predicted and gold edges.
pub fn uuas(predicted: &BTreeSet<Edge>, gold: &BTreeSet<Edge>) -> UuasCount {
    UuasCount { correct: predicted.intersection(gold).count(), total: gold.len() }
}

/// Scores the edges of one subgraph against a tree decoded for the whole
/// sentence.
pub fn subgraph_uuas(tree: &PredictedTree, sub: &SubgraphEdges) -> UuasCount {
    uuas(&tree.edges, &sub.edges)
}

/// How per-sentence counts are combined over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Σ correct / Σ total.
    #[default]
    Micro,
    /// Mean of per-sentence scores.
    Macro,
}

/// Running corpus-level UUAS. Sentences with no gold edges are excluded.
#[derive(Debug, Clone, Default)]
pub struct UuasAccumulator {
    pooled: UuasCount,
    score_sum: f64,
    scored: usize,
}

impl UuasAccumulator {
    pub fn add(&mut self, c: UuasCount) {
        if let Some(s) = c.score() {
            self.pooled = self.pooled + c;
            self.score_sum += s;
            self.scored += 1;
        }
    }

    pub fn counts(&self) -> UuasCount {
        self.pooled
    }

    pub fn sentences(&self) -> usize {
        self.scored
    }

    pub fn micro(&self) -> Option<f64> {
        self.pooled.score()
    }

    pub fn macro_avg(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.score_sum / self.scored as f64)
    }

    pub fn value(&self, agg: Aggregation) -> Option<f64> {
        match agg {
            Aggregation::Micro => self.micro(),
            Aggregation::Macro => self.macro_avg(),
        }
    }
}

/// Writes trees as `sentence_id<TAB>layer<TAB>i<TAB>j` lines with 1-based
/// token positions, one line per edge.
pub fn write_edge_list<'a, W, I>(mut w: W, trees: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, usize, &'a PredictedTree)>,
{
    writeln!(w, "sentence_id\tlayer\thead_side\tdep_side")?;
    for (id, layer, tree) in trees {
        for e in &tree.edges {
            writeln!(w, "{id}\t{layer}\t{}\t{}", e.lo() + 1, e.hi() + 1)?;
        }
    }
    Ok(())
}

/// Parses the output of [`write_edge_list`] back into
/// `(sentence_id, layer, edges)` groups in file order.
pub fn read_edge_list(text: &str) -> Result<Vec<(String, usize, BTreeSet<Edge>)>, String> {
    let mut out: Vec<(String, usize, BTreeSet<Edge>)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(format!("line {}: expected 4 columns", n + 1));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("line {}: {e}", n + 1));
        let (layer, a, b) = (parse(cols[1])?, parse(cols[2])?, parse(cols[3])?);
        if a == 0 || b == 0 || a == b {
            return Err(format!("line {}: bad edge ({a}, {b})", n + 1));
        }
        let edge = Edge::new(a - 1, b - 1);
        match out.last_mut() {
            Some((id, l, edges)) if id == cols[0] && *l == layer => {
                edges.insert(edge);
            }
            _ => out.push((cols[0].to_string(), layer, BTreeSet::from([edge]))),
        }
    }
    Ok(out)
}
