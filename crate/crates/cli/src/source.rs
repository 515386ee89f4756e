use std::borrow::Cow;

use dprobe_core::corpus::{gold_distances, DepSentence, GoldDistances};
use dprobe_core::embedstore::BundleReader;
use dprobe_core::probe::{ExampleSource, ProbeError, ProbeExample};

use crate::invalid;

/// Bundle positions of `sentences`, matched by id, with token counts checked.
pub fn align(reader: &BundleReader, sentences: &[DepSentence]) -> anyhow::Result<Vec<usize>> {
    sentences
        .iter()
        .map(|s| {
            let i = reader
                .position(s.id())
                .ok_or_else(|| invalid(format!("sentence {} is missing from the bundle", s.id())))?;
            let tokens = reader.manifest().sentences[i].tokens;
            if tokens != s.len() {
                return Err(invalid(format!(
                    "sentence {}: bundle has {tokens} tokens, treebank has {}",
                    s.id(),
                    s.len()
                )));
            }
            Ok(i)
        })
        .collect()
}

/// Training examples read from a bundle on demand; only the hidden-state
/// sets a probe needs are loaded.
pub struct BundleSource<'a> {
    reader: &'a BundleReader,
    positions: &'a [usize],
    gold: &'a [GoldDistances],
    layers: usize,
}

impl<'a> BundleSource<'a> {
    pub fn new(reader: &'a BundleReader, positions: &'a [usize], gold: &'a [GoldDistances], layers: usize) -> Self {
        assert_eq!(positions.len(), gold.len());
        BundleSource { reader, positions, gold, layers }
    }
}

pub fn gold_all(sentences: &[DepSentence]) -> Vec<GoldDistances> {
    sentences.iter().map(gold_distances).collect()
}

impl ExampleSource for BundleSource<'_> {
    fn len(&self) -> usize {
        self.positions.len()
    }

    fn fetch(&self, index: usize) -> Result<Cow<'_, ProbeExample>, ProbeError> {
        let emb = self.reader.read_layers(self.positions[index], self.layers)?;
        Ok(Cow::Owned(ProbeExample::new(emb, self.gold[index].clone())?))
    }
}
