//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One update using each parameter's `grad` buffer (absent = zero gradient).
///
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`
pub fn adamw_step(
    params: &mut [Tensor],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<(), TensorError> {
    if state.m.len() != params.len()
        || params
            .iter()
            .zip(state.m.iter().zip(&state.v))
            .any(|(p, (m, v))| m.len() != p.len() || v.len() != p.len())
    {
        return Err(TensorError::Shape {
            op: "adamw_step",
            detail: "optimizer state does not match parameters".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * data[j]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::new(vec![values.len()], values.to_vec()).unwrap();
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut ps = vec![param(&[1.0, -2.0], &[0.0, 0.0])];
        let before = ps[0].data().to_vec();
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut ps, &mut st, &cfg).unwrap();
        assert_eq!(ps[0].data(), before.as_slice());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        // After one step m_hat = g and v_hat = g^2, so the Adam term is g / (|g| + eps).
        let g = [0.5, -3.0, 1e-3];
        let p0 = [1.0, 2.0, -1.0];
        let mut ps = vec![param(&p0, &g)];
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.05,
            ..Default::default()
        };
        adamw_step(&mut ps, &mut st, &cfg).unwrap();
        for j in 0..3 {
            let expect = p0[j] - 0.1 * (g[j] / (g[j].abs() + 1e-8) + 0.05 * p0[j]);
            assert!((ps[0].data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps_follow_scalar_reference_trace() {
        // Reference written directly from the published update rule, one scalar at a time.
        fn reference(p: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
            let (mut p, mut m, mut v) = (p, 0.0, 0.0);
            for (t, g) in grads.iter().enumerate() {
                let t = (t + 1) as i32;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t));
                let vh = v / (1.0 - b2.powi(t));
                p -= lr * (mh / (vh.sqrt() + eps) + wd * p);
            }
            p
        }
        let cfg = AdamWConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let steps = [[0.3, -0.7], [0.1, 0.4]];
        let p0 = [0.25, -1.5];
        let mut ps = vec![param(&p0, &steps[0])];
        let mut st = AdamWState::new(&ps);
        adamw_step(&mut ps, &mut st, &cfg).unwrap();
        ps[0].set_grad(steps[1].to_vec()).unwrap();
        adamw_step(&mut ps, &mut st, &cfg).unwrap();
        for j in 0..2 {
            let expect = reference(p0[j], &[steps[0][j], steps[1][j]], 0.01, 0.9, 0.999, 1e-8, 0.1);
            assert!((ps[0].data()[j] - expect).abs() < 1e-12);
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn mismatched_state_is_shape_error() {
        let mut ps = vec![param(&[1.0], &[1.0])];
        let mut st = AdamWState::new(&[Tensor::zeros(vec![2])]);
        assert!(matches!(
            adamw_step(&mut ps, &mut st, &AdamWConfig::default()),
            Err(TensorError::Shape { .. })
        ));
    }
}
