use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, DepSentence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 40_000, dev: 5_000, test: 5_000 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<DepSentence>,
    pub dev: Vec<DepSentence>,
    pub test: Vec<DepSentence>,
}

/// Samples `sizes.total()` sentences uniformly without replacement and deals
/// them into train, dev and test in sampling order.
pub fn split_dataset(sents: &[DepSentence], sizes: SplitSizes, seed: u64) -> Result<Splits, CorpusError> {
    let requested = sizes.total();
    if requested > sents.len() {
        return Err(CorpusError::InsufficientData {
            requested,
            available: sents.len(),
            train: sizes.train,
            dev: sizes.dev,
            test: sizes.test,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, sents.len(), requested).into_vec();
    let take = |range: std::ops::Range<usize>| -> Vec<DepSentence> {
        picked[range].iter().map(|&i| sents[i].clone()).collect()
    };
    Ok(Splits {
        train: take(0..sizes.train),
        dev: take(sizes.train..sizes.train + sizes.dev),
        test: take(sizes.train + sizes.dev..requested),
    })
}
