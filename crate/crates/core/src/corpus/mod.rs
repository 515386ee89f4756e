//! Dependency treebanks: sentence model, CoNLL-U IO, filtering, structure
//! sets, subgraph extraction and gold tree distances.
//!
//! Token positions are 0-based everywhere in the API. Head indices keep the
//! CoNLL-U convention (1-based, `0` for the root attachment) because that is
//! how they are stored and exchanged.

mod conllu;
mod filter;
mod split;
mod subgraph;

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conllu::{parse_conllu, write_conllu, ParseOutcome, SkippedSentence};
pub use filter::{
    filter_sentences, group_and_prune, structure_key, structure_key_with, FilterConfig,
    FilterStats, GroupStat, Grouping, KeyConfig, PruneConfig, StructureSetKey,
};
pub use split::{split_dataset, SplitSizes, Splits};
pub use subgraph::{
    categories_for, extract_subgraph_edges, extract_subgraph_edges_with, Category, SubgraphConfig,
    SubgraphEdges,
};

/// Dependency relation label used for punctuation.
pub const PUNCT: &str = "punct";

/// Reasons a token sequence does not form a usable dependency tree.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("sentence has {0} tokens, at least 2 are required")]
    TooShort(usize),
    #[error("column lengths differ: {tokens} tokens, {heads} heads, {rels} relations")]
    LengthMismatch { tokens: usize, heads: usize, rels: usize },
    #[error("no unique root: found {0} root attachments")]
    NoUniqueRoot(usize),
    #[error("token {token} has head {head}, outside 0..={len}")]
    HeadOutOfRange { token: usize, head: usize, len: usize },
    #[error("token {0} is not reachable from the root (cycle)")]
    Cycle(usize),
}

/// Errors raised by the corpus operations themselves.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot group an empty sentence list")]
    EmptyInput,
    #[error("relation {label:?} is not attached to the root of sentence {sentence}")]
    LabelNotAtRoot { sentence: String, label: String },
    #[error(
        "not enough sentences: requested {requested} (train {train}, dev {dev}, test {test}) \
         but only {available} available, short by {}", requested - available
    )]
    InsufficientData {
        requested: usize,
        available: usize,
        train: usize,
        dev: usize,
        test: usize,
    },
    #[error("threshold must lie in [0, 1), got {0}")]
    BadThreshold(f64),
}

/// An undirected edge between two token positions, stored with the smaller
/// index first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Edge {
    lo: usize,
    hi: usize,
}

impl Edge {
    pub fn new(a: usize, b: usize) -> Self {
        debug_assert_ne!(a, b, "self-loop edge");
        if a <= b {
            Edge { lo: a, hi: b }
        } else {
            Edge { lo: b, hi: a }
        }
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    pub fn touches(&self, token: usize) -> bool {
        self.lo == token || self.hi == token
    }
}

impl From<(usize, usize)> for Edge {
    fn from((a, b): (usize, usize)) -> Self {
        Edge::new(a, b)
    }
}

impl From<Edge> for (usize, usize) {
    fn from(e: Edge) -> Self {
        (e.lo, e.hi)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lo, self.hi)
    }
}

/// A sentence with its gold dependency tree.
///
/// Construction validates the tree: one root, heads in range, no cycles and
/// at least two tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSentence", into = "RawSentence")]
pub struct DepSentence {
    id: String,
    tokens: Vec<String>,
    heads: Vec<usize>,
    rels: Vec<String>,
    root: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSentence {
    id: String,
    tokens: Vec<String>,
    heads: Vec<usize>,
    rels: Vec<String>,
}

impl TryFrom<RawSentence> for DepSentence {
    type Error = TreeError;

    fn try_from(raw: RawSentence) -> Result<Self, TreeError> {
        DepSentence::new(raw.id, raw.tokens, raw.heads, raw.rels)
    }
}

impl From<DepSentence> for RawSentence {
    fn from(s: DepSentence) -> Self {
        RawSentence { id: s.id, tokens: s.tokens, heads: s.heads, rels: s.rels }
    }
}

impl DepSentence {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        heads: Vec<usize>,
        rels: Vec<String>,
    ) -> Result<Self, TreeError> {
        let n = tokens.len();
        if heads.len() != n || rels.len() != n {
            return Err(TreeError::LengthMismatch {
                tokens: n,
                heads: heads.len(),
                rels: rels.len(),
            });
        }
        if n < 2 {
            return Err(TreeError::TooShort(n));
        }
        for (i, &h) in heads.iter().enumerate() {
            if h > n || h == i + 1 {
                return Err(TreeError::HeadOutOfRange { token: i, head: h, len: n });
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| heads[i] == 0).collect();
        if roots.len() != 1 {
            return Err(TreeError::NoUniqueRoot(roots.len()));
        }
        // Every token must reach the root within n steps.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while heads[cur] != 0 {
                cur = heads[cur] - 1;
                steps += 1;
                if steps > n {
                    return Err(TreeError::Cycle(start));
                }
            }
        }
        Ok(DepSentence { id: id.into(), tokens, heads, rels, root: roots[0] })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// 1-based heads, `0` marking the root.
    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn rels(&self) -> &[String] {
        &self.rels
    }

    /// 0-based position of the root token.
    pub fn root(&self) -> usize {
        self.root
    }

    /// 0-based head of `token`, `None` for the root.
    pub fn head_of(&self, token: usize) -> Option<usize> {
        match self.heads[token] {
            0 => None,
            h => Some(h - 1),
        }
    }

    /// Children of every token, in sentence order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for i in 0..self.len() {
            if let Some(h) = self.head_of(i) {
                out[h].push(i);
            }
        }
        out
    }

    /// Tokens of the subtree headed by `token`, including `token`, sorted.
    pub fn subtree(&self, token: usize) -> Vec<usize> {
        let children = self.children();
        let mut out = Vec::new();
        let mut stack = vec![token];
        while let Some(t) = stack.pop() {
            out.push(t);
            stack.extend(children[t].iter().copied());
        }
        out.sort_unstable();
        out
    }

    /// All `n - 1` gold edges.
    pub fn edges(&self) -> BTreeSet<Edge> {
        (0..self.len())
            .filter_map(|i| self.head_of(i).map(|h| Edge::new(i, h)))
            .collect()
    }

    /// Returns a copy with a different id.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

/// Pairwise tree path lengths of a sentence, stored as a dense row-major
/// `n x n` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldDistances {
    n: usize,
    data: Vec<u32>,
}

impl GoldDistances {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Builds a distance table from a full row-major matrix; used by tests and
    /// by callers holding precomputed distances.
    pub fn from_rows(n: usize, data: Vec<u32>) -> Self {
        assert_eq!(data.len(), n * n, "distance table must be n x n");
        GoldDistances { n, data }
    }
}

/// Number of edges on the undirected tree path between every token pair,
/// via one breadth-first search per token.
pub fn gold_distances(sent: &DepSentence) -> GoldDistances {
    let n = sent.len();
    let mut adj = vec![Vec::new(); n];
    for e in sent.edges() {
        adj[e.lo()].push(e.hi());
        adj[e.hi()].push(e.lo());
    }
    let mut data = vec![u32::MAX; n * n];
    let mut queue = VecDeque::with_capacity(n);
    for src in 0..n {
        let row = &mut data[src * n..(src + 1) * n];
        row[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = row[u];
            for &v in &adj[u] {
                if row[v] == u32::MAX {
                    row[v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    GoldDistances { n, data }
}

#[cfg(test)]
pub(crate) fn sentence(id: &str, spec: &[(&str, usize, &str)]) -> DepSentence {
    DepSentence::new(
        id,
        spec.iter().map(|t| t.0.to_string()).collect(),
        spec.iter().map(|t| t.1).collect(),
        spec.iter().map(|t| t.2.to_string()).collect(),
    )
    .unwrap()
}
