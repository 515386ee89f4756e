use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss_and_gradients, mean_loss, Adam, AdamConfig, ExampleSource, ProbeError, ProbeParams};

/// Reduce-on-plateau settings, monitored on dev loss (minimised).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Epochs without improvement tolerated before reducing.
    pub patience: usize,
    /// Relative improvement required to reset patience.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 1, threshold: 1e-4, min_lr: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig) -> Self {
        PlateauScheduler { cfg, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one epoch's metric and returns the (possibly reduced) rate.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best * (1.0 - self.cfg.threshold) {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.cfg.patience {
            self.bad_epochs = 0;
            let reduced = (lr * self.cfg.factor).max(self.cfg.min_lr);
            if lr - reduced > 1e-12 {
                return reduced;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub scheduler: PlateauConfig,
    pub seed: u64,
    /// Projection rank d'; `None` means full rank (d' = d).
    pub rank: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 40,
            batch_size: 32,
            adam: AdamConfig::default(),
            scheduler: PlateauConfig::default(),
            seed: 0,
            rank: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ProbeError::BadConfig(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(ProbeError::BadConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ProbeError::BadConfig("batch_size must be at least 1".into()));
        }
        if !(0.0 < self.scheduler.factor && self.scheduler.factor < 1.0) {
            return Err(ProbeError::BadConfig("scheduler factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Whether the scheduler reduced the rate after this epoch.
    pub lr_reduced: bool,
    pub zero_distance_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest dev loss.
    pub params: ProbeParams,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub history: Vec<EpochRecord>,
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    // splitmix64 finaliser over (seed, layer) so every probe gets its own stream.
    let mut z = seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains the probe for `layer`. Runs are deterministic for a given seed:
/// initialisation and shuffling draw from one seeded stream, and batch
/// reductions happen in a fixed order. When `dev` is empty the training loss
/// drives model selection and the scheduler.
pub fn train_probe<S: ExampleSource + ?Sized>(
    layer: usize,
    train: &S,
    dev: &S,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ProbeError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ProbeError::EmptyTrainingSet);
    }
    let dim = train.fetch(0)?.embeddings.dim();
    let rank = cfg.rank.unwrap_or(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(cfg.seed, layer));
    let mut params = ProbeParams::init(layer, dim, rank, &mut rng)?;
    let mut opt = Adam::new(&params, cfg.adam);
    let mut scheduler = PlateauScheduler::new(cfg.scheduler);
    let mut lr = cfg.lr;

    let mut best: Option<(ProbeParams, usize, f64)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0f64;
        let mut zero_pairs = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let examples = chunk.iter().map(|&i| train.fetch(i)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&super::ProbeExample> = examples.iter().map(|c| c.as_ref()).collect();
            let (loss, grads) = batch_loss_and_gradients(&params, &refs)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(ProbeError::Diverged { epoch, batch: b, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            zero_pairs += grads.zero_distance_pairs;
            opt.step(&mut params, &grads, lr);
        }
        let train_loss = loss_sum / train.len() as f64;
        let dev_loss = if dev.is_empty() { train_loss } else { mean_loss(&params, dev)? };
        if !dev_loss.is_finite() {
            return Err(ProbeError::Diverged { epoch, batch: 0, loss: dev_loss });
        }
        if best.as_ref().is_none_or(|(_, _, l)| dev_loss < *l) {
            best = Some((params.clone(), epoch, dev_loss));
        }
        let next_lr = scheduler.step(dev_loss, lr);
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            lr,
            lr_reduced: next_lr < lr,
            zero_distance_pairs: zero_pairs,
        });
        lr = next_lr;
    }
    let (params, best_epoch, best_dev_loss) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params, best_epoch, best_dev_loss, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GoldDistances;
    use crate::embedstore::SentenceEmbeddings;
    use crate::probe::ProbeExample;

    #[test]
    fn plateau_follows_reduce_on_plateau_semantics() {
        let mut s = PlateauScheduler::new(PlateauConfig::default());
        let mut lr = 1.0;
        lr = s.step(1.0, lr); // improvement
        assert_eq!(lr, 1.0);
        lr = s.step(1.0, lr); // bad 1 (patience 1 tolerates)
        assert_eq!(lr, 1.0);
        lr = s.step(0.99999, lr); // within threshold: bad 2 → reduce
        assert_eq!(lr, 0.5);
        lr = s.step(0.5, lr); // improvement
        assert_eq!(lr, 0.5);

        let floor = PlateauConfig { min_lr: 0.5, ..PlateauConfig::default() };
        let mut s = PlateauScheduler::new(floor);
        let mut lr = 0.5;
        for _ in 0..6 {
            lr = s.step(1.0, lr);
        }
        assert_eq!(lr, 0.5);
    }

    fn tiny_set(n: usize, shift: f32) -> Vec<ProbeExample> {
        // Three-token chains embedded on a line with slope 0.5: the probe
        // must learn to stretch.
        (0..n)
            .map(|i| {
                let off = shift + i as f32 * 0.01;
                let e = SentenceEmbeddings::new(2, 3, 2, vec![
                    off, 0.0, off + 0.5, 0.0, off + 1.0, 0.0,
                    0.0, off, 0.0, off + 0.5, 0.0, off + 1.0,
                ])
                .unwrap();
                let g = GoldDistances::from_rows(3, vec![0, 1, 2, 1, 0, 1, 2, 1, 0]);
                ProbeExample::new(e, g).unwrap()
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let train = tiny_set(40, 0.0);
        let dev = tiny_set(8, 0.3);
        let cfg = TrainConfig { lr: 1e-2, epochs: 30, batch_size: 8, seed: 3, ..Default::default() };
        let a = train_probe(1, &train, &dev, &cfg).unwrap();
        let b = train_probe(1, &train, &dev, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        assert!(a.best_dev_loss < a.history[0].dev_loss * 0.5, "{:?}", a.history);
        assert_eq!(a.history.len(), 30);
        let w = a.params.mix_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let train = tiny_set(10, 0.0);
        let cfg = TrainConfig { lr: 0.0, epochs: 3, batch_size: 4, seed: 5, ..Default::default() };
        let out = train_probe(0, &train, &train, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(5, 0));
        let init = ProbeParams::init(0, 2, 2, &mut rng).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn config_and_input_errors() {
        let train = tiny_set(2, 0.0);
        let empty: Vec<ProbeExample> = Vec::new();
        let cfg = TrainConfig::default();
        assert!(matches!(train_probe(0, &empty, &empty, &cfg), Err(ProbeError::EmptyTrainingSet)));
        let bad = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train_probe(0, &train, &train, &bad), Err(ProbeError::BadConfig(_))));
        // Layer 5 needs six hidden-state sets; the examples have two.
        assert!(matches!(train_probe(5, &train, &train, &cfg), Err(ProbeError::LayerMismatch { .. })));
    }

    #[test]
    fn divergence_is_reported() {
        let train = tiny_set(4, 0.0);
        let cfg = TrainConfig { lr: 1e300, epochs: 3, batch_size: 2, ..Default::default() };
        assert!(matches!(train_probe(0, &train, &train, &cfg), Err(ProbeError::Diverged { .. })));
    }
}
