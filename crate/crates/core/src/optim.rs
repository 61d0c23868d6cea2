//! Adam with optional coupled (L2-style) weight decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for a fixed list of parameter slots.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Advances the step counter; call once before the slot updates of a step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Applies one update to `param` given its gradient. A missing gradient
    /// (parameter unused this step) is treated as zero.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: Option<&[f64]>) {
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t.max(1));
        let bc2 = 1.0 - c.beta2.powi(self.t.max(1));
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        debug_assert_eq!(m.len(), param.len());
        for i in 0..param.len() {
            let p = f64::from(param[i]);
            let g = grad.map_or(0.0, |g| g[i]) + c.weight_decay * p;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] = (p - c.learning_rate * mhat / (vhat.sqrt() + c.eps)) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut adam = Adam::new(AdamConfig::new(0.1), &[3]);
        let mut p = [1.0f32, -2.0, 0.5];
        adam.tick();
        adam.update(0, &mut p, Some(&[4.0, -0.01, 0.0]));
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-5);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(AdamConfig::new(0.05), &[2]);
        let mut p = [3.0f32, -4.0];
        for _ in 0..2000 {
            let g = [2.0 * f64::from(p[0] - 1.0), 2.0 * f64::from(p[1] + 0.5)];
            adam.tick();
            adam.update(0, &mut p, Some(&g));
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn weight_decay_shrinks_unused_params() {
        let mut cfg = AdamConfig::new(0.01);
        cfg.weight_decay = 0.1;
        let mut adam = Adam::new(cfg, &[1]);
        let mut p = [1.0f32];
        for _ in 0..10 {
            adam.tick();
            adam.update(0, &mut p, None);
        }
        assert!(p[0] < 1.0);
    }
}
