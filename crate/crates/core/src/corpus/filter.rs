use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CorpusError, DepSentence, PUNCT};

/// Sentence filter settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Sentences containing any of these relations are dropped.
    pub banned_rels: BTreeSet<String>,
    /// Label identifying punctuation tokens.
    pub punct_label: String,
    /// Keep a punctuation token when it is the last token of the sentence.
    pub allow_final_punct: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            banned_rels: ["relcl", "acl:relcl", "csubj", "csubjpass", "dep"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            punct_label: PUNCT.to_string(),
            allow_final_punct: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub retained: usize,
    /// Sentences dropped per banned relation; a sentence is counted under the
    /// first banned label it contains (label order).
    pub removed_by_rel: BTreeMap<String, usize>,
    pub removed_punct: usize,
}

enum Verdict {
    Keep,
    Banned(String),
    Punct,
}

fn judge(s: &DepSentence, cfg: &FilterConfig) -> Verdict {
    let mut banned: Option<&String> = None;
    for r in s.rels() {
        if cfg.banned_rels.contains(r) && banned.is_none_or(|b| r < b) {
            banned = Some(r);
        }
    }
    if let Some(b) = banned {
        return Verdict::Banned(b.clone());
    }
    let last = s.len() - 1;
    let stray_punct = s
        .rels()
        .iter()
        .enumerate()
        .any(|(i, r)| *r == cfg.punct_label && !(cfg.allow_final_punct && i == last));
    if stray_punct {
        Verdict::Punct
    } else {
        Verdict::Keep
    }
}

/// Keeps single-clause sentences: no banned relation and no punctuation other
/// than a sentence-final token.
pub fn filter_sentences(sents: &[DepSentence], cfg: &FilterConfig) -> (Vec<DepSentence>, FilterStats) {
    let mut stats = FilterStats { input: sents.len(), ..Default::default() };
    let mut kept = Vec::new();
    for s in sents {
        match judge(s, cfg) {
            Verdict::Keep => kept.push(s.clone()),
            Verdict::Banned(label) => *stats.removed_by_rel.entry(label).or_default() += 1,
            Verdict::Punct => stats.removed_punct += 1,
        }
    }
    stats.retained = kept.len();
    (kept, stats)
}

/// Which root-outgoing labels take part in structure-set keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyConfig {
    pub excluded: BTreeSet<String>,
}

impl Default for KeyConfig {
    fn default() -> Self {
        KeyConfig { excluded: [PUNCT.to_string()].into_iter().collect() }
    }
}

/// Sorted labels of the root's dependents. Duplicated labels appear once per
/// dependent.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct StructureSetKey(Vec<String>);

impl StructureSetKey {
    pub fn new(mut rels: Vec<String>) -> Self {
        rels.sort();
        StructureSetKey(rels)
    }

    pub fn rels(&self) -> &[String] {
        &self.0
    }

    /// Distinct labels, in key order.
    pub fn distinct(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.0.iter().map(String::as_str).collect();
        out.dedup();
        out
    }
}

impl fmt::Display for StructureSetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("+"))
    }
}

impl From<String> for StructureSetKey {
    fn from(s: String) -> Self {
        s.parse().unwrap_or_else(|e: std::convert::Infallible| match e {})
    }
}

impl From<StructureSetKey> for String {
    fn from(k: StructureSetKey) -> String {
        k.to_string()
    }
}

impl std::str::FromStr for StructureSetKey {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(StructureSetKey::new(
            s.split('+').filter(|p| !p.is_empty()).map(str::to_string).collect(),
        ))
    }
}

pub fn structure_key(sent: &DepSentence) -> StructureSetKey {
    structure_key_with(sent, &KeyConfig::default())
}

pub fn structure_key_with(sent: &DepSentence, cfg: &KeyConfig) -> StructureSetKey {
    let root = sent.root();
    let rels = (0..sent.len())
        .filter(|&i| sent.head_of(i) == Some(root))
        .map(|i| &sent.rels()[i])
        .filter(|r| !cfg.excluded.contains(*r))
        .cloned()
        .collect();
    StructureSetKey::new(rels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Minimum share of the data a group must hold.
    pub threshold: f64,
    /// Retain groups whose share equals the threshold exactly.
    pub inclusive: bool,
    pub key: KeyConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { threshold: 0.10, inclusive: false, key: KeyConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub key: StructureSetKey,
    pub count: usize,
    pub fraction: f64,
    pub retained: bool,
}

#[derive(Debug, Clone)]
pub struct Grouping {
    pub total: usize,
    pub groups: BTreeMap<StructureSetKey, Vec<DepSentence>>,
    /// Every group seen, largest first.
    pub stats: Vec<GroupStat>,
}

impl Grouping {
    pub fn retained_sentences(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }
}

/// Groups sentences by structure-set key and keeps only the groups holding
/// more than `threshold` of the input (at least, when `inclusive`).
pub fn group_and_prune(sents: &[DepSentence], cfg: &PruneConfig) -> Result<Grouping, CorpusError> {
    if sents.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    if !(0.0..1.0).contains(&cfg.threshold) {
        return Err(CorpusError::BadThreshold(cfg.threshold));
    }
    let mut all: BTreeMap<StructureSetKey, Vec<DepSentence>> = BTreeMap::new();
    for s in sents {
        all.entry(structure_key_with(s, &cfg.key)).or_default().push(s.clone());
    }
    let total = sents.len();
    let mut stats = Vec::with_capacity(all.len());
    let mut groups = BTreeMap::new();
    for (key, members) in all {
        let count = members.len();
        // Compare counts in integers where possible: count/total > t  <=>  count > t*total.
        let cut = cfg.threshold * total as f64;
        let retained = if cfg.inclusive { count as f64 >= cut } else { count as f64 > cut };
        stats.push(GroupStat {
            key: key.clone(),
            count,
            fraction: count as f64 / total as f64,
            retained,
        });
        if retained {
            groups.insert(key, members);
        }
    }
    stats.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.key.cmp(&b.key)));
    Ok(Grouping { total, groups, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sentence;

    fn concert() -> DepSentence {
        sentence(
            "t1",
            &[
                ("The", 2, "det"),
                ("concert", 3, "nsubj"),
                ("caused", 0, "ROOT"),
                ("a", 6, "det"),
                ("major", 6, "amod"),
                ("stir", 3, "dobj"),
                (".", 3, "punct"),
            ],
        )
    }

    fn film() -> DepSentence {
        sentence(
            "t4",
            &[
                ("The", 2, "det"),
                ("film", 3, "nsubj"),
                ("received", 0, "ROOT"),
                ("positive", 5, "amod"),
                ("reviews", 3, "dobj"),
                ("from", 3, "prep"),
                ("critics", 6, "pobj"),
                (".", 3, "punct"),
            ],
        )
    }

    fn with_root_child(id: &str, rel: &str) -> DepSentence {
        sentence(id, &[("a", 2, rel), ("b", 0, "ROOT")])
    }

    #[test]
    fn keys_for_table_examples() {
        assert_eq!(structure_key(&concert()).to_string(), "dobj+nsubj");
        assert_eq!(structure_key(&film()).to_string(), "dobj+nsubj+prep");
        assert_eq!(structure_key(&with_root_child("x", "nsubj")).rels(), &["nsubj"]);
    }

    #[test]
    fn key_config_can_keep_punct() {
        let cfg = KeyConfig { excluded: BTreeSet::new() };
        assert_eq!(structure_key_with(&concert(), &cfg).to_string(), "dobj+nsubj+punct");
    }

    #[test]
    fn filter_rules() {
        let cfg = FilterConfig::default();
        let dep = sentence("d", &[("a", 2, "dep"), ("b", 0, "ROOT"), (".", 2, "punct")]);
        let relcl = sentence("r", &[("a", 2, "relcl"), ("b", 0, "ROOT")]);
        let mid_punct = sentence("p", &[("a", 2, "punct"), ("b", 0, "ROOT"), ("c", 2, "dobj")]);
        let (kept, stats) = filter_sentences(&[concert(), dep, relcl, mid_punct], &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id(), "t1");
        assert_eq!(stats.input, 4);
        assert_eq!(stats.retained, 1);
        assert_eq!(stats.removed_by_rel["dep"], 1);
        assert_eq!(stats.removed_by_rel["relcl"], 1);
        assert_eq!(stats.removed_punct, 1);

        let strict = FilterConfig { allow_final_punct: false, ..FilterConfig::default() };
        assert!(filter_sentences(&[concert()], &strict).0.is_empty());
    }

    #[test]
    fn filter_is_idempotent() {
        let cfg = FilterConfig::default();
        let input = vec![
            concert(),
            film(),
            with_root_child("x", "dep"),
            with_root_child("y", "nsubj"),
            sentence("p", &[(",", 2, "punct"), ("b", 0, "ROOT"), ("c", 2, "dobj")]),
        ];
        let (once, _) = filter_sentences(&input, &cfg);
        let (twice, stats) = filter_sentences(&once, &cfg);
        assert_eq!(once, twice);
        assert_eq!(stats.retained, stats.input);
    }

    #[test]
    fn prune_is_strict_by_default() {
        let mut sents = Vec::new();
        for i in 0..50 {
            sents.push(with_root_child(&format!("a{i}"), "nsubj"));
        }
        for i in 0..40 {
            sents.push(with_root_child(&format!("b{i}"), "dobj"));
        }
        for i in 0..10 {
            sents.push(with_root_child(&format!("c{i}"), "attr"));
        }
        let g = group_and_prune(&sents, &PruneConfig::default()).unwrap();
        let kept: Vec<String> = g.groups.keys().map(|k| k.to_string()).collect();
        assert_eq!(kept, vec!["dobj", "nsubj"]);
        assert_eq!(g.stats[0].count, 50);
        assert!(!g.stats[2].retained);
        assert_eq!(g.retained_sentences(), 90);

        let inclusive = PruneConfig { inclusive: true, ..PruneConfig::default() };
        assert_eq!(group_and_prune(&sents, &inclusive).unwrap().groups.len(), 3);

        let zero = PruneConfig { threshold: 0.0, ..PruneConfig::default() };
        assert_eq!(group_and_prune(&sents, &zero).unwrap().groups.len(), 3);
    }

    #[test]
    fn prune_edge_cases() {
        let single = vec![with_root_child("a", "nsubj"), with_root_child("b", "nsubj")];
        assert_eq!(group_and_prune(&single, &PruneConfig::default()).unwrap().groups.len(), 1);
        assert!(matches!(
            group_and_prune(&[], &PruneConfig::default()),
            Err(CorpusError::EmptyInput)
        ));
        let bad = PruneConfig { threshold: 1.5, ..PruneConfig::default() };
        assert!(matches!(group_and_prune(&single, &bad), Err(CorpusError::BadThreshold(_))));
    }

    #[test]
    fn key_parses_from_display() {
        let k: StructureSetKey = "nsubj+dobj".parse().unwrap();
        assert_eq!(k.to_string(), "dobj+nsubj");
        let dup = StructureSetKey::new(vec!["prep".into(), "nsubj".into(), "prep".into()]);
        assert_eq!(dup.distinct(), vec!["nsubj", "prep"]);
    }
}
