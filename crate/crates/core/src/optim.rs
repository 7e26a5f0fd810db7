//! AdamW with decoupled weight decay, warmup + cosine schedule, and
//! global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// Optax `adamw` defaults.
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: usize,
    pub hyper: AdamWConfig,
}

impl OptimState {
    pub fn new(params: &[Tensor], hyper: AdamWConfig) -> Self {
        OptimState {
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            hyper,
        }
    }
}

/// One AdamW update of `params` in place using explicit `grads`.
pub fn adamw_step(
    params: &[Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Contract(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.first_moment[i].len() != g.len() {
            return Err(Error::Contract(format!(
                "param {} has {} elements, grad {}, moment {}",
                i,
                p.numel(),
                g.len(),
                state.first_moment[i].len()
            )));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        p.update_data(|w| {
            for j in 0..w.len() {
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * w[j]);
            }
        });
    }
    Ok(())
}

/// AdamW bound to a fixed parameter list, reading gradients off the leaves.
pub struct AdamW {
    params: Vec<Tensor>,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, hyper: AdamWConfig) -> Self {
        let state = OptimState::new(&params, hyper);
        AdamW { params, state }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Current gradients, zeros where a parameter received none.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    }

    pub fn step_with(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        adamw_step(&self.params, grads, &mut self.state, lr)
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Linear warmup from `init_lr` to `peak_lr`, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub init_lr: f64,
    pub peak_lr: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.init_lr + (self.peak_lr - self.init_lr) * frac;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.peak_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// scale applied (1.0 when already within bounds).
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    let mut flat = 0;
    for g in grads.iter() {
        for (j, v) in g.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    index: flat + j,
                    detail: format!("gradient entry is {}", v),
                });
            }
            sq += v * v;
        }
        flat += g.len();
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(scale)
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            total_steps: 2000,
            warmup_steps: 100,
            init_lr: 1e-6,
            peak_lr: 1e-3,
        };
        assert_eq!(s.lr_at(0), 1e-6);
        assert_eq!(s.lr_at(100), 1e-3);
        assert!(s.lr_at(2000).abs() < 1e-12);
        assert!(s.lr_at(50) > 1e-6 && s.lr_at(50) < 1e-3);
        assert!(s.lr_at(1000) < s.lr_at(500));
    }

    #[test]
    fn clip_cases() {
        let mut g = vec![vec![0.3, 0.4]];
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 1.0);
        assert_eq!(g, vec![vec![0.3, 0.4]]);

        let mut g = vec![vec![3.0, 4.0]];
        let s = clip_global_norm(&mut g, 1.0).unwrap();
        assert!((s - 0.2).abs() < 1e-15);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);

        let mut g = vec![vec![1.0], vec![f64::NAN]];
        assert!(matches!(
            clip_global_norm(&mut g, 1.0),
            Err(Error::Numeric { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_max(
            g in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..6), 1..4),
            max in 0.01f64..10.0,
        ) {
            let mut g = g;
            clip_global_norm(&mut g, max).unwrap();
            prop_assert!(global_norm(&g) <= max + 1e-9);
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let p = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(&[p.clone()], hyper);
        adamw_step(&[p.clone()], &[vec![0.0, 0.0]], &mut st, 1e-2).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn single_step_matches_hand_rolled_oracle() {
        // f(w) = w^2 at w = 1, gradient 2
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        let hyper = AdamWConfig::default();
        let mut st = OptimState::new(&[p.clone()], hyper);
        let lr = 1e-2;
        adamw_step(&[p.clone()], &[vec![2.0]], &mut st, lr).unwrap();
        let (w, g) = (1.0f64, 2.0f64);
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let want = w - lr * (mhat / (vhat.sqrt() + 1e-8) + 1e-4 * w);
        assert!((p.to_vec()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let p = Tensor::param(vec![0.5, -0.5], &[2]).unwrap();
        let hyper = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut st = OptimState::new(&[p.clone()], hyper);
        adamw_step(&[p.clone()], &[vec![0.0, 0.0]], &mut st, 0.1).unwrap();
        assert!(p.to_vec().iter().all(|w| w.abs() < 0.5));
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let p = Tensor::param(vec![0.5, -0.5], &[2]).unwrap();
        let mut st = OptimState::new(&[p.clone()], AdamWConfig::default());
        let err = adamw_step(&[p], &[vec![0.0]], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
