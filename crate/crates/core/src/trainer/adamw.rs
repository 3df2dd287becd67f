//! AdamW with decoupled weight decay and bias correction.
//!
//! ```text
//! θ ← θ − lr·wd·θ
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m / (1 − β₁ᵗ), v̂ = v / (1 − β₂ᵗ)
//! ```

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: EncoderParams<T>,
    pub v: EncoderParams<T>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &EncoderParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update on a flat tensor. `t` is the (already incremented)
/// step count used for bias correction.
pub fn adamw_update_slice<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: T,
    hp: &AdamWHyper,
) -> Result<()> {
    let n = param.len();
    for len in [grad.len(), m.len(), v.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let b1 = T::of(hp.beta1);
    let b2 = T::of(hp.beta2);
    let eps = T::of(hp.eps);
    let decay = lr * T::of(hp.weight_decay);
    let step = t.min(i32::MAX as u64) as i32;
    let c1 = T::one() - b1.powi(step);
    let c2 = T::one() - b2.powi(step);
    for i in 0..n {
        let g = grad[i];
        param[i] -= decay * param[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies one AdamW step to every tensor in [`crate::encoder::TENSOR_NAMES`] order.
pub fn adamw_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    grads: &EncoderParams<T>,
    state: &mut OptimizerState<T>,
    lr: T,
    hp: &AdamWHyper,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let ps = params.tensors_mut();
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        adamw_update_slice(p, g, m, v, t, lr, hp)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderDims};

    fn no_decay() -> AdamWHyper {
        AdamWHyper {
            weight_decay: 0.0,
            ..AdamWHyper::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_without_decay() {
        let dims = EncoderDims {
            vocab_size: 5,
            d_model: 3,
            d_embed: 2,
            grid_rows: 2,
            grid_cols: 2,
        };
        let mut params: EncoderParams<f64> = init_params(&dims, 1).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(&params);
        for _ in 0..3 {
            adamw_step(&mut params, &grads, &mut state, 0.1, &no_decay()).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.t, 3);
    }

    #[test]
    fn first_step_hand_case() {
        let mut p = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update_slice(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &no_decay()).unwrap();
        // m̂ = 1, v̂ = 1
        assert!((p[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_hand_case() {
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let hp = AdamWHyper {
            weight_decay: 0.01,
            ..AdamWHyper::default()
        };
        adamw_update_slice(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &hp).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = [1.0f64, 2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        assert!(adamw_update_slice(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &no_decay()).is_err());
    }

    #[test]
    fn f32_step_matches_f64() {
        let mut p64 = [0.5f64, -0.25];
        let mut p32 = [0.5f32, -0.25];
        let (mut m64, mut v64) = ([0.0f64; 2], [0.0f64; 2]);
        let (mut m32, mut v32) = ([0.0f32; 2], [0.0f32; 2]);
        let hp = AdamWHyper::default();
        for t in 1..=5 {
            adamw_update_slice(&mut p64, &[0.3, -1.0], &mut m64, &mut v64, t, 1e-2, &hp).unwrap();
            adamw_update_slice(&mut p32, &[0.3, -1.0], &mut m32, &mut v32, t, 1e-2, &hp).unwrap();
        }
        for (a, b) in p64.iter().zip(p32) {
            assert!((a - b as f64).abs() < 1e-5);
        }
    }
}
