//! Adam with two learning-rate groups and a warm-up/linear-decay schedule.

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Linear warm-up to `peak`, then linear decay to `peak · floor_ratio` at
/// `total_steps`. Steps are 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_ratio: f64,
}

pub const DECAY_FLOOR_RATIO: f64 = 1.0 / 20.0;

impl Schedule {
    pub fn new(peak: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Schedule {
            peak,
            warmup_steps,
            total_steps,
            floor_ratio: DECAY_FLOOR_RATIO,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.max(1);
        if step <= self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let frac = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.peak * (1.0 - (1.0 - self.floor_ratio) * frac)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter: SV-backend parameters at
    /// `lr_head`, everything else at `lr_other`. Frozen parameters are never
    /// written.
    pub fn step(&mut self, store: &mut ParamStore, lr_head: f64, lr_other: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let lr = if p.component.is_head() { lr_head } else { lr_other };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let grad = p.grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Component, ParamKind};
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(5e-4, 200, 2000);
        assert!((s.lr_at(1) - 5e-4 / 200.0).abs() < 1e-18);
        assert!((s.lr_at(100) - 2.5e-4).abs() < 1e-15);
        assert!((s.lr_at(200) - 5e-4).abs() < 1e-15);
        assert!((s.lr_at(2000) - 2.5e-5).abs() < 1e-15);
        assert!((s.lr_at(5000) - 2.5e-5).abs() < 1e-15);
        let mid = s.lr_at(1100);
        assert!(mid < 5e-4 && mid > 2.5e-5);
    }

    #[test]
    fn frozen_params_are_bitwise_unchanged() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![0.1, 0.2]), Component::Transformer, ParamKind::Weight);
        let b = s.add("b", Tensor::vector(vec![0.3]), Component::SvHead, ParamKind::Weight);
        s.get_mut(a).trainable = false;
        let mut opt = Adam::new(AdamConfig::default(), &s);
        for _ in 0..50 {
            s.get_mut(a).grad = Tensor::vector(vec![1.0, -1.0]);
            s.get_mut(b).grad = Tensor::vector(vec![1.0]);
            opt.step(&mut s, 1e-2, 1e-2);
        }
        assert_eq!(s.value(a).data(), &[0.1, 0.2]);
        assert!(s.value(b).data()[0] < 0.3);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut s = ParamStore::new();
        let other = s.add("o", Tensor::vector(vec![1.0]), Component::InnerAdapter, ParamKind::Weight);
        let head = s.add("h", Tensor::vector(vec![1.0]), Component::SvHead, ParamKind::Weight);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        s.get_mut(other).grad = Tensor::vector(vec![0.5]);
        s.get_mut(head).grad = Tensor::vector(vec![0.5]);
        opt.step(&mut s, 1e-3, 0.0);
        assert_eq!(s.value(other).data(), &[1.0]);
        // first Adam step moves by lr · g/|g| (up to eps)
        assert!((s.value(head).data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }
}
