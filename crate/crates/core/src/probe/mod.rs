//! Scalar-mixed structural probes.
//!
//! A probe for target layer `ℓ` mixes hidden-state sets `0..=ℓ` with softmax
//! weights and a scale, then projects with a matrix `B`; predicted tree
//! distances are Euclidean distances in the projected space. Parameters are
//! stored as `f32`; every loss, distance and gradient is accumulated in `f64`.

mod adam;
mod checkpoint;
mod train;

use std::borrow::Cow;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::GoldDistances;
use crate::embedstore::{EmbedError, SentenceEmbeddings};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, write_history_csv, CheckpointMeta, CHECKPOINT_MAGIC};
pub use train::{train_probe, EpochRecord, PlateauConfig, PlateauScheduler, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe for layer {layer} needs {needed} hidden-state sets, embeddings have {found}")]
    LayerMismatch { layer: usize, needed: usize, found: usize },
    #[error("embedding dimension {found} does not match probe input dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("embeddings cover {embeddings} tokens but gold distances cover {gold}")]
    TokenMismatch { embeddings: usize, gold: usize },
    #[error("invalid probe parameters: {0}")]
    InvalidParams(String),
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Format(#[from] EmbedError),
}

/// Parameters of the probe for one target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    layer: usize,
    input_dim: usize,
    rank: usize,
    mix_logits: Vec<f32>,
    gamma: f32,
    /// `rank x input_dim`, row-major.
    projection: Vec<f32>,
}

impl ProbeParams {
    pub fn new(
        layer: usize,
        input_dim: usize,
        rank: usize,
        mix_logits: Vec<f32>,
        gamma: f32,
        projection: Vec<f32>,
    ) -> Result<Self, ProbeError> {
        if input_dim == 0 || rank == 0 || rank > input_dim {
            return Err(ProbeError::InvalidParams(format!(
                "rank {rank} must lie in 1..={input_dim}"
            )));
        }
        if mix_logits.len() != layer + 1 {
            return Err(ProbeError::InvalidParams(format!(
                "layer {layer} needs {} mixing logits, got {}",
                layer + 1,
                mix_logits.len()
            )));
        }
        if projection.len() != rank * input_dim {
            return Err(ProbeError::InvalidParams(format!(
                "projection has {} entries, expected {rank} x {input_dim}",
                projection.len()
            )));
        }
        let finite = mix_logits.iter().chain(&projection).chain(std::iter::once(&gamma)).all(|v| v.is_finite());
        if !finite {
            return Err(ProbeError::InvalidParams("non-finite parameter".into()));
        }
        Ok(ProbeParams { layer, input_dim, rank, mix_logits, gamma, projection })
    }

    /// Uniform mixing, unit scale, and `B` drawn from
    /// `uniform(-1/sqrt(d), 1/sqrt(d))`.
    pub fn init<R: Rng>(layer: usize, input_dim: usize, rank: usize, rng: &mut R) -> Result<Self, ProbeError> {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let projection = (0..rank * input_dim)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        ProbeParams::new(layer, input_dim, rank, vec![0.0; layer + 1], 1.0, projection)
    }

    /// Identity projection (`rank == input_dim`), uniform mixing, unit scale.
    pub fn identity(layer: usize, input_dim: usize) -> Self {
        let mut projection = vec![0.0; input_dim * input_dim];
        for i in 0..input_dim {
            projection[i * input_dim + i] = 1.0;
        }
        ProbeParams::new(layer, input_dim, input_dim, vec![0.0; layer + 1], 1.0, projection)
            .expect("identity parameters are valid")
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mix_logits(&self) -> &[f32] {
        &self.mix_logits
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    pub fn set_gamma(&mut self, gamma: f32) {
        self.gamma = gamma;
    }

    pub fn set_mix_logits(&mut self, logits: &[f32]) {
        assert_eq!(logits.len(), self.mix_logits.len());
        self.mix_logits.copy_from_slice(logits);
    }

    pub fn projection_mut(&mut self) -> &mut [f32] {
        &mut self.projection
    }

    /// Softmax of the mixing logits.
    pub fn mix_weights(&self) -> Vec<f64> {
        softmax(&self.mix_logits)
    }

    /// `B x` for one `input_dim` vector.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        self.projection
            .chunks_exact(d)
            .map(|row| row.iter().zip(x).map(|(b, v)| f64::from(*b) * v).sum())
            .collect()
    }

    fn check_input(&self, h: &SentenceEmbeddings) -> Result<(), ProbeError> {
        if h.layers() < self.layer + 1 {
            return Err(ProbeError::LayerMismatch {
                layer: self.layer,
                needed: self.layer + 1,
                found: h.layers(),
            });
        }
        if h.dim() != self.input_dim {
            return Err(ProbeError::DimMismatch { expected: self.input_dim, found: h.dim() });
        }
        Ok(())
    }
}

pub(crate) fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(f64::from(a)));
    let exps: Vec<f64> = logits.iter().map(|&a| (f64::from(a) - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Scalar-mixed embeddings `m_i = γ Σ_k softmax(a)_k h_i^k` over layers
/// `0..=ℓ`, as a row-major `tokens x dim` matrix. Extra layers in `h` beyond
/// `ℓ` are ignored.
pub fn mix_embeddings(p: &ProbeParams, h: &SentenceEmbeddings) -> Result<Vec<f64>, ProbeError> {
    p.check_input(h)?;
    let unscaled = mix_unscaled(p, h);
    let g = f64::from(p.gamma);
    Ok(unscaled.into_iter().map(|v| g * v).collect())
}

fn mix_unscaled(p: &ProbeParams, h: &SentenceEmbeddings) -> Vec<f64> {
    let w = p.mix_weights();
    let mut out = vec![0f64; h.tokens() * h.dim()];
    for (k, wk) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(h.layer(k)) {
            *o += wk * f64::from(*v);
        }
    }
    out
}

/// Probe distance `‖B m_i − B m_j‖₂`.
pub fn predict_distance(p: &ProbeParams, m_i: &[f64], m_j: &[f64]) -> f64 {
    let diff: Vec<f64> = m_i.iter().zip(m_j).map(|(a, b)| a - b).collect();
    norm(&p.project(&diff))
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projected mixed embeddings `B m_i`, row-major `tokens x rank`.
pub fn projected_embeddings(p: &ProbeParams, h: &SentenceEmbeddings) -> Result<Vec<f64>, ProbeError> {
    let m = mix_embeddings(p, h)?;
    Ok(m.chunks_exact(p.input_dim).flat_map(|row| p.project(row)).collect())
}

/// One training sentence: its hidden states and gold tree distances.
#[derive(Debug, Clone)]
pub struct ProbeExample {
    pub embeddings: SentenceEmbeddings,
    pub distances: GoldDistances,
}

impl ProbeExample {
    pub fn new(embeddings: SentenceEmbeddings, distances: GoldDistances) -> Result<Self, ProbeError> {
        if embeddings.tokens() != distances.len() {
            return Err(ProbeError::TokenMismatch { embeddings: embeddings.tokens(), gold: distances.len() });
        }
        Ok(ProbeExample { embeddings, distances })
    }
}

/// Indexed access to training examples, borrowed from memory or loaded on
/// demand. Implementations must be safe to call from several threads.
pub trait ExampleSource: Sync {
    fn len(&self) -> usize;

    fn fetch(&self, index: usize) -> Result<Cow<'_, ProbeExample>, ProbeError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for [ProbeExample] {
    fn len(&self) -> usize {
        <[ProbeExample]>::len(self)
    }

    fn fetch(&self, index: usize) -> Result<Cow<'_, ProbeExample>, ProbeError> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl ExampleSource for Vec<ProbeExample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn fetch(&self, index: usize) -> Result<Cow<'_, ProbeExample>, ProbeError> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// Per-sentence probe loss: `(1/|s|²) Σ_{i<j} |Δ_ij − d_B(m_i, m_j)|`.
pub fn sentence_loss(p: &ProbeParams, h: &SentenceEmbeddings, gold: &GoldDistances) -> Result<f64, ProbeError> {
    if h.tokens() != gold.len() {
        return Err(ProbeError::TokenMismatch { embeddings: h.tokens(), gold: gold.len() });
    }
    let projected = projected_embeddings(p, h)?;
    let t = h.tokens();
    let r = p.rank;
    let mut total = 0f64;
    for i in 0..t {
        for j in i + 1..t {
            let d = pair_distance(&projected[i * r..(i + 1) * r], &projected[j * r..(j + 1) * r]);
            total += (f64::from(gold.get(i, j)) - d).abs();
        }
    }
    Ok(total / (t * t) as f64)
}

fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gradient of a loss with respect to every probe parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGradients {
    /// `rank x input_dim`, row-major.
    pub projection: Vec<f64>,
    pub mix_logits: Vec<f64>,
    pub gamma: f64,
    /// Pairs whose predicted distance was exactly zero; their subgradient is
    /// taken as zero.
    pub zero_distance_pairs: usize,
}

impl ProbeGradients {
    fn zeros(p: &ProbeParams) -> Self {
        ProbeGradients {
            projection: vec![0.0; p.projection.len()],
            mix_logits: vec![0.0; p.mix_logits.len()],
            gamma: 0.0,
            zero_distance_pairs: 0,
        }
    }

    fn add_scaled(&mut self, other: &ProbeGradients, scale: f64) {
        for (a, b) in self.projection.iter_mut().zip(&other.projection) {
            *a += scale * b;
        }
        for (a, b) in self.mix_logits.iter_mut().zip(&other.mix_logits) {
            *a += scale * b;
        }
        self.gamma += scale * other.gamma;
        self.zero_distance_pairs += other.zero_distance_pairs;
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.is_finite()
            && self.projection.iter().all(|v| v.is_finite())
            && self.mix_logits.iter().all(|v| v.is_finite())
    }
}

/// Loss and analytic gradients for a single sentence.
pub fn sentence_loss_and_gradients(p: &ProbeParams, ex: &ProbeExample) -> Result<(f64, ProbeGradients), ProbeError> {
    let h = &ex.embeddings;
    let gold = &ex.distances;
    if h.tokens() != gold.len() {
        return Err(ProbeError::TokenMismatch { embeddings: h.tokens(), gold: gold.len() });
    }
    p.check_input(h)?;
    let t = h.tokens();
    let d = p.input_dim;
    let r = p.rank;
    let gamma = f64::from(p.gamma);
    let weights = p.mix_weights();

    let unscaled = mix_unscaled(p, h);
    let mixed: Vec<f64> = unscaled.iter().map(|v| gamma * v).collect();
    let projected: Vec<f64> = mixed.chunks_exact(d).flat_map(|row| p.project(row)).collect();

    let norm_factor = 1.0 / (t * t) as f64;
    let mut loss = 0f64;
    let mut grad_proj_pts = vec![0f64; t * r];
    let mut grads = ProbeGradients::zeros(p);
    let mut diff = vec![0f64; r];
    for i in 0..t {
        for j in i + 1..t {
            let (pi, pj) = (&projected[i * r..(i + 1) * r], &projected[j * r..(j + 1) * r]);
            for ((o, a), b) in diff.iter_mut().zip(pi).zip(pj) {
                *o = a - b;
            }
            let dist = norm(&diff);
            let residual = f64::from(gold.get(i, j)) - dist;
            loss += residual.abs();
            if dist == 0.0 {
                grads.zero_distance_pairs += 1;
                continue;
            }
            // d|Δ − d|/dd = −sign(Δ − d), with sign(0) = 0.
            let coef = if residual > 0.0 {
                -norm_factor
            } else if residual < 0.0 {
                norm_factor
            } else {
                0.0
            };
            if coef == 0.0 {
                continue;
            }
            let s = coef / dist;
            for k in 0..r {
                let g = s * diff[k];
                grad_proj_pts[i * r + k] += g;
                grad_proj_pts[j * r + k] -= g;
            }
        }
    }
    loss *= norm_factor;

    // dL/dB = Σ_i g_i m_iᵀ ; dL/dm_i = Bᵀ g_i.
    let mut grad_mixed = vec![0f64; t * d];
    for i in 0..t {
        let gi = &grad_proj_pts[i * r..(i + 1) * r];
        let mi = &mixed[i * d..(i + 1) * d];
        let gmi = &mut grad_mixed[i * d..(i + 1) * d];
        for (row, &g) in gi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let brow = &p.projection[row * d..(row + 1) * d];
            let grow = &mut grads.projection[row * d..(row + 1) * d];
            for c in 0..d {
                grow[c] += g * mi[c];
                gmi[c] += g * f64::from(brow[c]);
            }
        }
    }

    grads.gamma = grad_mixed.iter().zip(&unscaled).map(|(g, u)| g * u).sum();

    let grad_weights: Vec<f64> = (0..weights.len())
        .map(|k| {
            gamma
                * grad_mixed
                    .iter()
                    .zip(h.layer(k))
                    .map(|(g, v)| g * f64::from(*v))
                    .sum::<f64>()
        })
        .collect();
    let weighted: f64 = weights.iter().zip(&grad_weights).map(|(w, g)| w * g).sum();
    for (m, out) in grads.mix_logits.iter_mut().enumerate() {
        *out = weights[m] * (grad_weights[m] - weighted);
    }
    Ok((loss, grads))
}

/// Mean sentence loss over a batch and its gradients. Sentences are
/// processed in parallel and reduced in batch order, so results are
/// independent of scheduling.
pub fn batch_loss_and_gradients(p: &ProbeParams, batch: &[&ProbeExample]) -> Result<(f64, ProbeGradients), ProbeError> {
    let parts: Vec<(f64, ProbeGradients)> = batch
        .par_iter()
        .map(|ex| sentence_loss_and_gradients(p, ex))
        .collect::<Result<_, _>>()?;
    let mut total = ProbeGradients::zeros(p);
    let mut loss = 0f64;
    let scale = 1.0 / batch.len().max(1) as f64;
    for (l, g) in &parts {
        loss += l * scale;
        total.add_scaled(g, scale);
    }
    Ok((loss, total))
}

/// Mean sentence loss over every example of a source.
pub fn mean_loss<S: ExampleSource + ?Sized>(p: &ProbeParams, source: &S) -> Result<f64, ProbeError> {
    if source.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let ex = source.fetch(i)?;
            sentence_loss(p, &ex.embeddings, &ex.distances)
        })
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
