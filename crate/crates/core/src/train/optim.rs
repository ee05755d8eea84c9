use serde::{Deserialize, Serialize};

/// `η_min + ½(η_max − η_min)(1 + cos(π t / T_max))`, clamped to `η_min`
/// past the end of the cycle.
pub fn cosine_lr(t: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t >= t_max {
        return if t_max == 0 { lr_max } else { lr_min };
    }
    let phase = std::f64::consts::PI * t as f64 / t_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// completed steps
    pub t: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamWConfig) {
    debug_assert_eq!(theta.len(), grad.len());
    if state.m.len() != theta.len() {
        *state = AdamState::zeros(theta.len());
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        if cfg.weight_decay != 0.0 {
            theta[i] -= lr * cfg.weight_decay * theta[i];
        }
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        theta[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 2e-3, 1e-6), 2e-3);
        assert_eq!(cosine_lr(100, 100, 2e-3, 1e-6), 1e-6);
        assert!((cosine_lr(50, 100, 2e-3, 1e-6) - (2e-3 + 1e-6) / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(150, 100, 2e-3, 1e-6), 1e-6);
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut th = vec![0.5, -2.0];
        let mut st = AdamState::zeros(2);
        adamw_step(&mut th, &[0.0, 0.0], &mut st, 1e-2, &AdamWConfig::default());
        assert_eq!(th, vec![0.5, -2.0]);
    }

    #[test]
    fn zero_grad_with_decay_is_pure_shrinkage() {
        let mut th = vec![0.5, -2.0];
        let mut st = AdamState::zeros(2);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        adamw_step(&mut th, &[0.0, 0.0], &mut st, 1e-2, &cfg);
        assert_eq!(th, vec![0.5 - 1e-2 * 0.1 * 0.5, -2.0 - 1e-2 * 0.1 * -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut th = vec![1.0, 1.0, 1.0];
        let mut st = AdamState::zeros(3);
        adamw_step(&mut th, &[3.0, -0.02, 1e3], &mut st, 1e-3, &AdamWConfig::default());
        for (v, s) in th.iter().zip([1.0, -1.0, 1.0]) {
            assert!((v - (1.0 - 1e-3 * s)).abs() < 1e-9, "{v}");
        }
        assert_eq!(st.t, 1);
    }

    proptest! {
        #[test]
        fn cosine_is_monotone_and_bounded(t_max in 1usize..5000, a in 0usize..5000) {
            let t = a % (t_max + 1);
            let lr = cosine_lr(t, t_max, 2e-3, 1e-6);
            prop_assert!((1e-6..=2e-3).contains(&lr));
            if t < t_max {
                prop_assert!(cosine_lr(t + 1, t_max, 2e-3, 1e-6) <= lr);
            }
        }
    }
}
