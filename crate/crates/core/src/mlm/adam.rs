use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{decays, NamedTensors, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, skipped for biases and layer norms.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimError {
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: NamedTensors<T>,
    pub v: NamedTensors<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        Self {
            step: 0,
            m: NamedTensors::zeros_for(params),
            v: NamedTensors::zeros_for(params),
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`. Nothing is
/// modified if any gradient entry is NaN or infinite.
pub fn adam_step<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), OptimError> {
    let grads = grads.params();
    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient(name.clone()));
        }
    }
    let mut ps = params.params_mut();
    if ps.len() != grads.len() || ps.len() != state.m.0.len() {
        return Err(OptimError::StateMismatch(format!(
            "{} params, {} grads, {} moments",
            ps.len(),
            grads.len(),
            state.m.0.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let bc1 = one - T::lit(cfg.beta1.powi(t));
    let bc2 = one - T::lit(cfg.beta2.powi(t));
    let eps = T::lit(cfg.eps);
    let lr = T::lit(lr);
    let wd = T::lit(cfg.weight_decay);
    for (i, (name, p)) in ps.iter_mut().enumerate() {
        let g = grads[i].1;
        let m = &mut state.m.0[i].1;
        let v = &mut state.v.0[i].1;
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(OptimError::StateMismatch(name.clone()));
        }
        let decay = cfg.weight_decay > 0.0 && decays(name);
        for k in 0..p.data.len() {
            let gk = g.data[k];
            let mk = b1 * m.data[k] + (one - b1) * gk;
            let vk = b2 * v.data[k] + (one - b2) * gk * gk;
            m.data[k] = mk;
            v.data[k] = vk;
            let mut update = (mk / bc1) / ((vk / bc2).sqrt() + eps);
            if decay {
                update += wd * p.data[k];
            }
            p.data[k] -= lr * update;
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar, P: ParamSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sum_sq().as_f64().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn scalar(x: f64) -> NamedTensors<f64> {
        NamedTensors(vec![("w_weight".into(), Matrix::from_vec(1, 1, vec![x]))])
    }

    #[test]
    fn three_unit_gradient_steps_match_hand_trace() {
        // g = 1 every step: m̂ = v̂ = 1, so each update is lr / (1 + eps).
        let mut p = scalar(0.5);
        let g = scalar(1.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let lrs = [0.1, 0.05, 0.02];
        for lr in lrs {
            adam_step(&mut p, &g, &mut st, &cfg, lr).unwrap();
        }
        let want = 0.5 - (0.1 + 0.05 + 0.02) / (1.0 + 1e-8);
        assert!((p.0[0].1.data[0] - want).abs() < 1e-15);
        assert!((st.m.0[0].1.data[0] - 0.271).abs() < 1e-15);
        assert!((st.v.0[0].1.data[0] - 0.002_997_001).abs() < 1e-15);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = scalar(2.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &scalar(1.0), &mut st, &cfg, 0.0).unwrap();
        let m1 = st.m.0[0].1.data[0];
        adam_step(&mut p, &scalar(0.0), &mut st, &cfg, 0.1).unwrap();
        let m2 = st.m.0[0].1.data[0];
        assert!((m2 - 0.9 * m1).abs() < 1e-15);
        let mut q = scalar(2.0);
        let mut fresh = AdamState::new(&q);
        adam_step(&mut q, &scalar(0.0), &mut fresh, &cfg, 0.1).unwrap();
        assert_eq!(q.0[0].1.data[0], 2.0);
    }

    #[test]
    fn nan_gradient_is_rejected_without_side_effects() {
        let mut p = scalar(2.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut st, &AdamConfig::default(), 0.1).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("w_weight".into()));
        assert_eq!(st.step, 0);
        assert_eq!(p.0[0].1.data[0], 2.0);
    }

    #[test]
    fn weight_decay_skips_bias() {
        let mut p = NamedTensors(vec![
            ("a_weight".into(), Matrix::from_vec(1, 1, vec![1.0f64])),
            ("a_bias".into(), Matrix::from_vec(1, 1, vec![1.0])),
        ]);
        let g = NamedTensors::zeros_for(&p);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert!((p.0[0].1.data[0] - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert_eq!(p.0[1].1.data[0], 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = NamedTensors(vec![("x".into(), Matrix::from_vec(1, 2, vec![3.0f64, 4.0]))]);
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g.0[0].1.data[0] - 0.6).abs() < 1e-15);
    }
}
