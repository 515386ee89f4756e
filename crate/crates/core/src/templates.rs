//! Subject–verb agreement pairs with attractors.
//!
//! Every item instantiates one construction:
//!
//! ```text
//! The senators behind the brilliant architect avoid spicy dishes .
//! det nsubj    prep   det amod      pobj      ROOT amod  dobj   punct
//! ```
//!
//! The prepositional phrase hangs off the subject noun, so the root's
//! dependents are exactly `nsubj`, `dobj` and the final `punct`. The
//! ungrammatical twin differs only in the verb's inflection.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_conllu, DepSentence};
use crate::fsutil::atomic_write_with;

pub const ITEMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("{file}:{line}: {reason}")]
    Lexicon { file: String, line: usize, reason: String },
    #[error("lexicon list {0} is empty")]
    EmptyList(String),
    #[error("lexicon supports {capacity} distinct items, {requested} requested")]
    TooSmall { requested: usize, capacity: u128 },
    #[error("lexicon entries collide: {0:?} generated twice")]
    Duplicate(String),
    #[error("item manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Number {
    Singular,
    Plural,
}

impl Number {
    pub fn flip(self) -> Self {
        match self {
            Number::Singular => Number::Plural,
            Number::Plural => Number::Singular,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inflected {
    pub singular: String,
    pub plural: String,
}

impl Inflected {
    pub fn form(&self, n: Number) -> &str {
        match n {
            Number::Singular => &self.singular,
            Number::Plural => &self.plural,
        }
    }
}

/// Word lists, one entry per line. Inflected lists hold `singular plural`
/// pairs; `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub subjects: Vec<Inflected>,
    pub attractors: Vec<Inflected>,
    pub prepositions: Vec<String>,
    /// Third-person `singular plural` forms, e.g. `avoids avoid`.
    pub verbs: Vec<Inflected>,
    pub adjectives: Vec<String>,
    pub objects: Vec<String>,
}

const FILES: [&str; 6] = ["subjects", "attractors", "prepositions", "verbs", "adjectives", "objects"];

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_words(file: &str, text: &str) -> Result<Vec<String>, TemplateError> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 1 {
            return Err(TemplateError::Lexicon { file: file.into(), line, reason: "expected one word".into() });
        }
        out.push(fields[0].to_string());
    }
    if out.is_empty() {
        return Err(TemplateError::EmptyList(file.into()));
    }
    Ok(out)
}

fn parse_pairs(file: &str, text: &str) -> Result<Vec<Inflected>, TemplateError> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 2 || fields[0] == fields[1] {
            return Err(TemplateError::Lexicon {
                file: file.into(),
                line,
                reason: "expected two distinct forms: singular plural".into(),
            });
        }
        out.push(Inflected { singular: fields[0].into(), plural: fields[1].into() });
    }
    if out.is_empty() {
        return Err(TemplateError::EmptyList(file.into()));
    }
    Ok(out)
}

impl Lexicon {
    /// Parses the six lists from their text contents, in the order
    /// subjects, attractors, prepositions, verbs, adjectives, objects.
    pub fn parse(texts: [&str; 6]) -> Result<Self, TemplateError> {
        Ok(Lexicon {
            subjects: parse_pairs("subjects.txt", texts[0])?,
            attractors: parse_pairs("attractors.txt", texts[1])?,
            prepositions: parse_words("prepositions.txt", texts[2])?,
            verbs: parse_pairs("verbs.txt", texts[3])?,
            adjectives: parse_words("adjectives.txt", texts[4])?,
            objects: parse_words("objects.txt", texts[5])?,
        })
    }

    /// The lists shipped with the crate.
    pub fn builtin() -> Self {
        Lexicon::parse([
            include_str!("../lexicon/subjects.txt"),
            include_str!("../lexicon/attractors.txt"),
            include_str!("../lexicon/prepositions.txt"),
            include_str!("../lexicon/verbs.txt"),
            include_str!("../lexicon/adjectives.txt"),
            include_str!("../lexicon/objects.txt"),
        ])
        .expect("built-in lexicon is valid")
    }

    /// Reads `subjects.txt`, `attractors.txt`, ... from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let texts = FILES
            .iter()
            .map(|f| fs::read_to_string(dir.join(format!("{f}.txt"))))
            .collect::<io::Result<Vec<_>>>()?;
        Lexicon::parse([&texts[0], &texts[1], &texts[2], &texts[3], &texts[4], &texts[5]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttractorNumber {
    /// Attractor always takes the opposite number from the subject.
    #[default]
    Mismatch,
    /// Attractor number drawn independently.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub count: usize,
    pub seed: u64,
    pub attractor_number: AttractorNumber,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig { count: 1000, seed: 0, attractor_number: AttractorNumber::Mismatch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementItem {
    pub id: String,
    pub grammatical: String,
    pub ungrammatical: String,
    /// Tree of the grammatical variant; the id matches the item id.
    pub gold: DepSentence,
    pub subject_number: Number,
    pub attractor_number: Number,
    /// 0-based index of the verb token.
    pub verb_position: usize,
    pub pll_gram: Option<f64>,
    pub pll_ungram: Option<f64>,
}

impl AgreementItem {
    pub fn grammatical_id(&self) -> String {
        format!("{}-g", self.id)
    }

    pub fn ungrammatical_id(&self) -> String {
        format!("{}-u", self.id)
    }

    /// Whether the grammatical variant scored strictly higher.
    pub fn correct(&self) -> Option<bool> {
        Some(self.pll_gram? > self.pll_ungram?)
    }
}

fn render(tokens: &[&str]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 && !t.chars().all(|c| c.is_ascii_punctuation()) {
            s.push(' ');
        }
        s.push_str(t);
    }
    s
}

const HEADS: [usize; 10] = [2, 7, 2, 6, 6, 3, 0, 9, 7, 7];
const RELS: [&str; 10] = ["det", "nsubj", "prep", "det", "amod", "pobj", "ROOT", "amod", "dobj", "punct"];
const VERB: usize = 6;

/// Draws `count` distinct items. The same lexicon, count, seed and policy
/// always produce the same items.
pub fn generate_agreement_pairs(lex: &Lexicon, cfg: &TemplateConfig) -> Result<Vec<AgreementItem>, TemplateError> {
    let attr_numbers = match cfg.attractor_number {
        AttractorNumber::Mismatch => 1,
        AttractorNumber::Random => 2,
    };
    // Mixed-radix digits: subject, subject number, preposition, attractor
    // adjective, attractor, attractor number, verb, object adjective, object.
    let radices = [
        lex.subjects.len(),
        2,
        lex.prepositions.len(),
        lex.adjectives.len(),
        lex.attractors.len(),
        attr_numbers,
        lex.verbs.len(),
        lex.adjectives.len(),
        lex.objects.len(),
    ];
    let capacity: u128 = radices.iter().map(|&r| r as u128).product();
    if (cfg.count as u128) > capacity {
        return Err(TemplateError::TooSmall { requested: cfg.count, capacity });
    }
    let space = usize::try_from(capacity).unwrap_or(usize::MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = index::sample(&mut rng, space, cfg.count);
    let width = cfg.count.max(1).to_string().len().max(4);
    let mut seen = HashSet::with_capacity(cfg.count);

    let mut items = Vec::with_capacity(cfg.count);
    for (k, code) in picks.into_iter().enumerate() {
        let mut rest = code;
        let mut digit = [0usize; 9];
        for (d, r) in digit.iter_mut().zip(radices) {
            *d = rest % r;
            rest /= r;
        }
        let subj_num = if digit[1] == 0 { Number::Singular } else { Number::Plural };
        let attr_num = if digit[5] == 0 { subj_num.flip() } else { subj_num };
        let verb = &lex.verbs[digit[6]];
        let tokens: Vec<String> = vec![
            "The".into(),
            lex.subjects[digit[0]].form(subj_num).into(),
            lex.prepositions[digit[2]].clone(),
            "the".into(),
            lex.adjectives[digit[3]].clone(),
            lex.attractors[digit[4]].form(attr_num).into(),
            verb.form(subj_num).into(),
            lex.adjectives[digit[7]].clone(),
            lex.objects[digit[8]].clone(),
            ".".into(),
        ];
        let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
        let grammatical = render(&words);
        let mut twin = words.clone();
        twin[VERB] = verb.form(subj_num.flip());
        let ungrammatical = render(&twin);
        if !seen.insert(grammatical.clone()) {
            return Err(TemplateError::Duplicate(grammatical));
        }

        let id = format!("agr-{:0width$}", k + 1);
        let gold = DepSentence::new(
            id.clone(),
            tokens,
            HEADS.to_vec(),
            RELS.iter().map(|r| r.to_string()).collect(),
        )
        .expect("template tree is well formed");
        items.push(AgreementItem {
            id,
            grammatical,
            ungrammatical,
            gold,
            subject_number: subj_num,
            attractor_number: attr_num,
            verb_position: VERB,
            pll_gram: None,
            pll_ungram: None,
        });
    }
    Ok(items)
}

/// `id<TAB>sentence`, grammatical then ungrammatical for each item.
pub fn write_sentences<W: Write>(items: &[AgreementItem], mut w: W) -> io::Result<()> {
    for it in items {
        writeln!(w, "{}\t{}", it.grammatical_id(), it.grammatical)?;
        writeln!(w, "{}\t{}", it.ungrammatical_id(), it.ungrammatical)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemManifest {
    pub format_version: u32,
    pub items: Vec<AgreementItem>,
}

pub fn write_items_json(path: &Path, items: &[AgreementItem]) -> Result<(), TemplateError> {
    let manifest = ItemManifest { format_version: ITEMS_FORMAT_VERSION, items: items.to_vec() };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| TemplateError::Manifest(e.to_string()))?;
    atomic_write_with(path, |w| {
        w.write_all(&json)?;
        w.write_all(b"\n")
    })?;
    Ok(())
}

pub fn read_items_json(path: &Path) -> Result<Vec<AgreementItem>, TemplateError> {
    let text = fs::read_to_string(path)?;
    let m: ItemManifest = serde_json::from_str(&text).map_err(|e| TemplateError::Manifest(e.to_string()))?;
    if m.format_version != ITEMS_FORMAT_VERSION {
        return Err(TemplateError::Manifest(format!(
            "format version {} is not supported (expected {ITEMS_FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m.items)
}

/// Writes the sentences file, the CoNLL-U of the grammatical variants and
/// the item manifest into `dir`.
pub fn write_agreement_corpus(dir: &Path, items: &[AgreementItem]) -> Result<(), TemplateError> {
    fs::create_dir_all(dir)?;
    atomic_write_with(&dir.join("sentences.tsv"), |w| write_sentences(items, w))?;
    let gold: Vec<DepSentence> = items.iter().map(|i| i.gold.clone()).collect();
    atomic_write_with(&dir.join("gold.conllu"), |w| write_conllu(&gold, w))?;
    write_items_json(&dir.join("items.json"), items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{extract_subgraph_edges, structure_key, Category};

    fn items(n: usize, seed: u64) -> Vec<AgreementItem> {
        generate_agreement_pairs(&Lexicon::builtin(), &TemplateConfig { count: n, seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn known_pair_is_rendered_and_parsed() {
        let lex = Lexicon::parse([
            "senator senators",
            "architect architects",
            "behind",
            "avoids avoid",
            "brilliant",
            "dishes",
        ])
        .unwrap();
        // Subject number is the only free choice; draw until plural.
        let item = (0..20)
            .flat_map(|seed| {
                generate_agreement_pairs(&lex, &TemplateConfig { count: 1, seed, ..Default::default() }).unwrap()
            })
            .find(|i| i.subject_number == Number::Plural)
            .unwrap();
        assert_eq!(item.grammatical, "The senators behind the brilliant architect avoid brilliant dishes.");
        assert_eq!(item.ungrammatical, "The senators behind the brilliant architect avoids brilliant dishes.");
        assert_eq!(item.attractor_number, Number::Singular);
        let err = generate_agreement_pairs(&lex, &TemplateConfig { count: 3, ..Default::default() }).unwrap_err();
        assert!(matches!(err, TemplateError::TooSmall { requested: 3, capacity: 2 }));
    }

    #[test]
    fn invariants_hold_on_every_item() {
        let all = items(300, 7);
        assert_eq!(all.len(), 300);
        let distinct: HashSet<&str> = all.iter().map(|i| i.grammatical.as_str()).collect();
        assert_eq!(distinct.len(), 300);
        for it in &all {
            let g: Vec<&str> = it.grammatical.split(' ').collect();
            let u: Vec<&str> = it.ungrammatical.split(' ').collect();
            assert_eq!(g.len(), u.len());
            let diffs: Vec<usize> = (0..g.len()).filter(|&k| g[k] != u[k]).collect();
            assert_eq!(diffs, vec![it.verb_position]);
            assert_ne!(it.subject_number, it.attractor_number);
            assert_eq!(structure_key(&it.gold).to_string(), "dobj+nsubj");
            for c in [Category::Macro, Category::Micro("nsubj".into()), Category::Micro("dobj".into())] {
                assert!(!extract_subgraph_edges(&it.gold, &c).unwrap().is_empty(), "{c}");
            }
            assert_eq!(it.gold.id(), it.id);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(items(50, 3), items(50, 3));
        assert_ne!(items(50, 3), items(50, 4));
    }

    #[test]
    fn random_attractor_number_allows_matches() {
        let cfg = TemplateConfig { count: 200, seed: 1, attractor_number: AttractorNumber::Random };
        let all = generate_agreement_pairs(&Lexicon::builtin(), &cfg).unwrap();
        assert!(all.iter().any(|i| i.subject_number == i.attractor_number));
        assert!(all.iter().any(|i| i.subject_number != i.attractor_number));
    }

    #[test]
    fn lexicon_errors() {
        let bad = Lexicon::parse(["senator", "a b", "x", "a b", "x", "x"]).unwrap_err();
        assert!(matches!(bad, TemplateError::Lexicon { line: 1, .. }));
        let empty = Lexicon::parse(["a b", "a b", "# nothing", "a b", "x", "x"]).unwrap_err();
        assert!(matches!(empty, TemplateError::EmptyList(f) if f == "prepositions.txt"));
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let all = items(10, 0);
        write_agreement_corpus(dir.path(), &all).unwrap();
        assert_eq!(read_items_json(&dir.path().join("items.json")).unwrap(), all);
        let sents = fs::read_to_string(dir.path().join("sentences.tsv")).unwrap();
        assert_eq!(sents.lines().count(), 20);
        assert!(sents.starts_with("agr-0001-g\t"));
        let parsed = crate::corpus::parse_conllu(io::BufReader::new(
            fs::File::open(dir.path().join("gold.conllu")).unwrap(),
        ))
        .unwrap();
        assert_eq!(parsed.sentences.len(), 10);
        assert_eq!(parsed.sentences[3], all[3].gold);
    }
}
