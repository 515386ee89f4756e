use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CorpusError, DepSentence, Edge, StructureSetKey, PUNCT};

/// Which part of the gold tree is scored.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Category {
    /// Every gold edge.
    Global,
    /// The root token and its direct dependents.
    Macro,
    /// Edges inside the subtree(s) of the root dependent(s) attached with
    /// this label, excluding the attachment edge itself.
    Micro(String),
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::Global => f.write_str("global"),
            Category::Macro => f.write_str("macro"),
            Category::Micro(l) => write!(f, "micro:{l}"),
        }
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(Category::Global),
            "macro" => Ok(Category::Macro),
            _ => match s.strip_prefix("micro:") {
                Some(l) if !l.is_empty() => Ok(Category::Micro(l.to_string())),
                _ => Err(format!("unknown category {s:?}; expected global, macro or micro:<label>")),
            },
        }
    }
}

impl TryFrom<String> for Category {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Category> for String {
    fn from(c: Category) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgraphConfig {
    pub punct_label: String,
    /// Leave the root's punctuation attachment out of the macro edge set.
    pub exclude_punct_from_macro: bool,
}

impl Default for SubgraphConfig {
    fn default() -> Self {
        SubgraphConfig { punct_label: PUNCT.to_string(), exclude_punct_from_macro: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphEdges {
    pub category: Category,
    pub edges: BTreeSet<Edge>,
}

impl SubgraphEdges {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Macro plus one micro category per distinct label of a structure-set key.
pub fn categories_for(key: &StructureSetKey) -> Vec<Category> {
    std::iter::once(Category::Macro)
        .chain(key.distinct().into_iter().map(|l| Category::Micro(l.to_string())))
        .collect()
}

pub fn extract_subgraph_edges(sent: &DepSentence, category: &Category) -> Result<SubgraphEdges, CorpusError> {
    extract_subgraph_edges_with(sent, category, &SubgraphConfig::default())
}

pub fn extract_subgraph_edges_with(
    sent: &DepSentence,
    category: &Category,
    cfg: &SubgraphConfig,
) -> Result<SubgraphEdges, CorpusError> {
    let root = sent.root();
    let root_children = (0..sent.len()).filter(|&i| sent.head_of(i) == Some(root));
    let edges = match category {
        Category::Global => sent.edges(),
        Category::Macro => root_children
            .filter(|&c| !(cfg.exclude_punct_from_macro && sent.rels()[c] == cfg.punct_label))
            .map(|c| Edge::new(root, c))
            .collect(),
        Category::Micro(label) => {
            let heads: Vec<usize> = root_children.filter(|&c| sent.rels()[c] == *label).collect();
            if heads.is_empty() {
                return Err(CorpusError::LabelNotAtRoot {
                    sentence: sent.id().to_string(),
                    label: label.clone(),
                });
            }
            let mut edges = BTreeSet::new();
            for h in heads {
                for t in sent.subtree(h) {
                    if t != h {
                        edges.insert(Edge::new(t, sent.head_of(t).expect("non-root token")));
                    }
                }
            }
            edges
        }
    };
    Ok(SubgraphEdges { category: category.clone(), edges })
}
