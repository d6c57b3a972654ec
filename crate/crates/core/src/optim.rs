//! Adam with bias correction and the cosine learning-rate schedule.

use crate::error::{dim_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub first_moment: Vec<Vec<S>>,
    pub second_moment: Vec<Vec<S>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &[Tensor<S>], config: AdamConfig) -> Self {
        Self {
            first_moment: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            step: 0,
            config,
        }
    }
}

pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Vec<S>],
    state: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return dim_err(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        );
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.first_moment[i].len() != g.len() {
            return dim_err("adam_step", format!("parameter {i}: {} vs {}", p.numel(), g.len()));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let (b1, b2, eps): (S, S, S) = (lit(cfg.beta1), lit(cfg.beta2), lit(cfg.eps));
    let t = state.step as i32;
    let corr1 = S::one() - b1.powi(t);
    let corr2 = S::one() - b2.powi(t);
    let lr: S = lit(lr);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Range(format!("step {step} outside 0..={total_steps}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::from_fn(vec![2, 2], |i| i as f64 - 1.5).unwrap()];
        let before = p.clone();
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &[vec![0.0; 4]], &mut st, 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_matches_hand_expansion() {
        let mut p = scalar_param(0.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[vec![1.0]], &mut st, 1e-3).unwrap();
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
        assert!((p[0].data()[0] + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn second_identical_step_matches_hand_expansion() {
        let mut p = scalar_param(0.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[vec![1.0]], &mut st, 1e-3).unwrap();
        let after_one = p[0].data()[0];
        adam_step(&mut p, &[vec![1.0]], &mut st, 1e-3).unwrap();
        // m2 = 0.19, v2 = 0.001999; m_hat = 0.19/0.19 = 1, v_hat = 0.001999/0.001999 = 1
        let m2: f64 = 0.9 * 0.1 + 0.1;
        let v2: f64 = 0.999 * 0.001 + 0.001;
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let delta = -1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0].data()[0] - after_one - delta).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_param(1.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &[vec![1.0, 2.0]], &mut st, 1e-3).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(10, 10, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 1e-3, 1e-5).is_err());
        assert!(cosine_lr(0, 0, 1e-3, 1e-5).is_err());
    }
}
