use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::Parameters;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<P> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: P,
    second: P,
    steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<P: Parameters + Clone> AdamW<P> {
    pub fn new(params: &P, cfg: AdamWConfig, weight_decay: f64) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let g_all = grads.tensors();
        let mut m_all = self.first.tensors_mut();
        let mut v_all = self.second.tensors_mut();
        for (i, (_, mut p)) in params.tensors_mut().into_iter().enumerate() {
            let g = &g_all[i].1;
            let m = &mut m_all[i].1;
            let v = &mut v_all[i].1;
            ndarray::Zip::from(&mut p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * wd * *p;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Linear warm-up from 0 to `base` over `warmup` epochs, then cosine decay
/// to 0 at `total`. `epoch` may be fractional.
pub fn warmup_cosine(epoch: f64, base: f64, warmup: f64, total: f64) -> f64 {
    if epoch < warmup {
        base * epoch / warmup
    } else if epoch >= total {
        0.0
    } else {
        let progress = (epoch - warmup) / (total - warmup);
        0.5 * base * (1.0 + (PI * progress).cos())
    }
}

/// One-cycle policy with cosine phases: `peak/div` → `peak` over the first
/// `pct_start` of training, then down to `peak/(div·final_div)`.
pub fn one_cycle(step: usize, total_steps: usize, peak: f64, pct_start: f64) -> f64 {
    const DIV: f64 = 25.0;
    const FINAL_DIV: f64 = 1e4;
    let initial = peak / DIV;
    let last = initial / FINAL_DIV;
    let total = total_steps.max(1) as f64;
    let up = (pct_start * total - 1.0).max(1.0);
    let s = step as f64;
    let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos());
    if s <= up {
        cos_interp(initial, peak, s / up)
    } else {
        let down = (total - 1.0 - up).max(1.0);
        cos_interp(peak, last, (s - up) / down)
    }
}
