use serde::{Deserialize, Serialize};

use crate::numerics::{Params, Tensor};

/// Linear warm-up from 0 to `base_lr`, then cosine annealing to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices and kernels
/// (rank >= 2) only, never to biases, norms or the state matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    state: Vec<(Tensor, Tensor)>,
    #[serde(skip)]
    steps: u32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            state: Vec::new(),
            steps: 0,
        }
    }
}

impl AdamW {
    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient (a missing buffer counts as zero).
    pub fn step<M: Params + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let state = &mut self.state;
        let mut slot = 0;
        model.visit_mut("", &mut |_, p| {
            if !p.requires_grad {
                return;
            }
            if slot == state.len() {
                state.push((Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            }
            let (m, v) = &mut state[slot];
            slot += 1;
            let decay = if p.value.rank() >= 2 { wd } else { 0.0 };
            let grad = p.grad.as_ref().map(|g| g.data());
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w -= lr * (update + decay * *w);
            }
        });
    }
}
