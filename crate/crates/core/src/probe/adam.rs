use serde::{Deserialize, Serialize};

use super::{ProbeGradients, ProbeParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept in `f64`; parameters stay
/// `f32`.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(p: &ProbeParams, cfg: AdamConfig) -> Self {
        let n = p.projection.len() + p.mix_logits.len() + 1;
        Adam { cfg, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, p: &mut ProbeParams, g: &ProbeGradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        let grads = g.projection.iter().chain(&g.mix_logits).chain(std::iter::once(&g.gamma));
        let params = p
            .projection
            .iter_mut()
            .chain(p.mix_logits.iter_mut())
            .chain(std::iter::once(&mut p.gamma));
        for (((theta, grad), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * grad;
            *v = beta2 * *v + (1.0 - beta2) * grad * grad;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            *theta = (f64::from(*theta) - update) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ProbeParams {
        ProbeParams::new(1, 2, 1, vec![0.5, -0.5], 1.0, vec![0.25, -0.75]).unwrap()
    }

    fn grads() -> ProbeGradients {
        ProbeGradients { projection: vec![0.3, -2.0], mix_logits: vec![1e-3, 0.0], gamma: -0.1, zero_distance_pairs: 0 }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = params();
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &grads(), 0.01);
        // With bias correction the first update is lr * g / (|g| + eps).
        assert!((p.projection()[0] - 0.24).abs() < 1e-6);
        assert!((p.projection()[1] - (-0.74)).abs() < 1e-6);
        assert!((p.gamma() - 1.01).abs() < 1e-6);
        assert_eq!(p.mix_logits()[1], -0.5);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut p, &grads(), 0.0);
        }
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 5);
    }
}
