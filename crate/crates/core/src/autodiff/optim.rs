//! Adam with decoupled weight decay, warmup-linear schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamSet};

/// Optimizer hyperparameters. Defaults follow the reference fine-tuning setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_max: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_max: 6.25e-5,
            epsilon: 1.0e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.005,
            max_grad_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return Err("lr must be finite and >= 0".into());
        }
        if !(self.epsilon > 0.0) {
            return Err("adam_epsilon must be > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return Err("weight_decay must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err("warmup_ratio must lie in [0, 1]".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return Err("max_grad_norm must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: usize,
    pub total_steps: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet, total_steps: usize) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Self { config, step: 0, total_steps: total_steps.max(1), m: zeros(), v: zeros() }
    }

    pub fn warmup_steps(&self) -> f64 {
        self.config.warmup_ratio * self.total_steps as f64
    }

    /// Learning rate used by the update at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps as f64;
        let warm = self.warmup_steps();
        let s = step as f64;
        let lr = if s < warm {
            self.config.lr_max * s / warm
        } else if total > warm {
            self.config.lr_max * (total - s) / (total - warm)
        } else {
            self.config.lr_max
        };
        lr.clamp(0.0, self.config.lr_max)
    }

    /// Clips the gradients, applies one Adam update and advances the schedule.
    /// Missing grad slots count as zero. Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<f64, AutodiffError> {
        if self.step >= self.total_steps {
            return Err(AutodiffError::ScheduleExhausted { step: self.step, total: self.total_steps });
        }
        if params.len() != self.m.len() {
            return Err(AutodiffError::LayoutMismatch { expected: self.m.len(), got: params.len() });
        }
        for (t, m) in params.tensors().iter().zip(&self.m) {
            if t.numel() != m.len() || t.grad().is_some_and(|g| g.len() != m.len()) {
                return Err(AutodiffError::LayoutMismatch { expected: m.len(), got: t.numel() });
            }
        }
        params.clip_grad_norm(self.config.max_grad_norm);

        let lr = self.lr_at(self.step);
        let AdamConfig { beta1, beta2, epsilon, weight_decay, .. } = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((tensor, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                data[i] -= lr * weight_decay * data[i];
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when already within bounds).
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![value]).unwrap());
        p
    }

    #[test]
    fn clip_examples() {
        let mut a = [2.0_f64];
        assert_eq!(clip_global_norm(&mut [&mut a[..]], 1.0), 0.5);
        let mut b = [0.3_f64];
        assert_eq!(clip_global_norm(&mut [&mut b[..]], 1.0), 1.0);
        assert_eq!(b, [0.3]);
        let mut c = [3.0_f64, 4.0];
        clip_global_norm(&mut [&mut c[..]], 1.0);
        assert_relative_eq!(c[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(c[1], 0.8, epsilon = 1e-15);
        let mut z = [0.0_f64; 3];
        assert_eq!(clip_global_norm(&mut [&mut z[..]], 1.0), 1.0);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..20), max in 0.1f64..5.0) {
            let mut once = v.clone();
            clip_global_norm(&mut [&mut once[..]], max);
            let mut twice = once.clone();
            clip_global_norm(&mut [&mut twice[..]], max);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn lr_stays_in_range(total in 1usize..500, ratio in 0.0f64..=1.0, step in 0usize..500) {
            let cfg = AdamConfig { lr_max: 1e-3, warmup_ratio: ratio, ..AdamConfig::default() };
            let st = AdamState::new(cfg, &single(0.0), total);
            let lr = st.lr_at(step.min(total - 1));
            prop_assert!((0.0..=1e-3).contains(&lr));
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = single(1.5);
        let cfg = AdamConfig { lr_max: 0.1, weight_decay: 0.0, warmup_ratio: 0.0, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &p, 10);
        p.tensors_mut()[0].accumulate_grad(&[0.0]).unwrap();
        st.step(&mut p).unwrap();
        assert_eq!(p.tensors()[0].data(), &[1.5]);
    }

    #[test]
    fn first_warmup_step_has_zero_lr() {
        let mut p = single(1.5);
        let cfg = AdamConfig { lr_max: 0.1, warmup_ratio: 0.5, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &p, 10);
        p.tensors_mut()[0].accumulate_grad(&[123.0]).unwrap();
        assert_eq!(st.step(&mut p).unwrap(), 0.0);
        assert_eq!(p.tensors()[0].data(), &[1.5]);
    }

    #[test]
    fn schedule_shape() {
        let cfg = AdamConfig { lr_max: 1.0, warmup_ratio: 0.2, ..AdamConfig::default() };
        let st = AdamState::new(cfg, &single(0.0), 10);
        let lrs: Vec<f64> = (0..10).map(|s| st.lr_at(s)).collect();
        assert_eq!(lrs[0], 0.0);
        assert_relative_eq!(lrs[1], 0.5);
        assert_relative_eq!(lrs[2], 1.0);
        assert_relative_eq!(lrs[6], 0.5);
        assert_relative_eq!(lrs[9], 0.125);
    }

    #[test]
    fn scalar_recurrence_matches_hand_rolled() {
        // Oracle: plain scalar Adam written out independently of the vectorized loop.
        let (lr_max, total, warm) = (0.1_f64, 4usize, 0.25_f64);
        let (b1, b2, eps, wd) = (0.9_f64, 0.999_f64, 1e-4_f64, 0.01_f64);
        let lr_of = |s: f64| {
            let w = warm * total as f64;
            if s < w { lr_max * s / w } else { lr_max * (total as f64 - s) / (total as f64 - w) }
        };
        let (mut x, mut m, mut v) = (2.0_f64, 0.0_f64, 0.0_f64);
        for s in 0..2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (s + 1) as i32;
            let lr = lr_of(s as f64);
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            x -= lr * wd * x;
        }
        // grad 1.0 stays under the clip threshold of 1.0
        let mut p = single(2.0);
        let cfg = AdamConfig { lr_max, warmup_ratio: warm, epsilon: eps, weight_decay: wd, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &p, total);
        for _ in 0..2 {
            p.zero_grads();
            p.tensors_mut()[0].accumulate_grad(&[1.0]).unwrap();
            st.step(&mut p).unwrap();
        }
        assert_relative_eq!(p.tensors()[0].data()[0], x, epsilon = 1e-15);
        assert!(x < 2.0);
    }

    #[test]
    fn exhausted_schedule_and_layout_errors() {
        let mut p = single(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p, 1);
        st.step(&mut p).unwrap();
        assert!(matches!(st.step(&mut p), Err(AutodiffError::ScheduleExhausted { .. })));
        let mut other = single(0.0);
        other.push("extra", Tensor::vector(vec![1.0]).unwrap());
        let mut st = AdamState::new(AdamConfig::default(), &p, 5);
        assert!(matches!(st.step(&mut other), Err(AutodiffError::LayoutMismatch { .. })));
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = ParamSet::new();
            p.push("w", Tensor::vector(vec![0.3, -0.7, 1.1]).unwrap());
            let cfg = AdamConfig { lr_max: 0.05, ..AdamConfig::default() };
            let mut st = AdamState::new(cfg, &p, 20);
            for k in 0..20 {
                p.zero_grads();
                let g: Vec<f64> = p.tensors()[0].data().iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                p.tensors_mut()[0].accumulate_grad(&g).unwrap();
                st.step(&mut p).unwrap();
            }
            p.checksum()
        };
        assert_eq!(run(), run());
    }
}
