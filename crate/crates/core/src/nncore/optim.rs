use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Fails without touching anything if the gradients are not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Tensor;

    fn store(values: &[f64]) -> (ParamStore, crate::nncore::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::vector(values.to_vec()));
        (s, id)
    }

    #[test]
    fn clip_scales_down_only() {
        let (s, id) = store(&[0.0, 0.0]);
        let mut g = Grads::zeros_like(&s);
        g.get_mut(id).copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.get(id)[0] - 0.6).abs() < 1e-15 && (g.get(id)[1] - 0.8).abs() < 1e-15);

        g.get_mut(id).copy_from_slice(&[0.3, 0.4]);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g.get(id), &[0.3, 0.4]);

        g.get_mut(id).copy_from_slice(&[0.0, 0.0]);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g.get(id), &[0.0, 0.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_sign() {
        let (mut s, id) = store(&[1.0, -2.0, 0.5]);
        let mut g = Grads::zeros_like(&s);
        g.get_mut(id).copy_from_slice(&[0.3, -7.0, 1e-3]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s, &g).unwrap();
        let expected = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (p, e) in s.get(id).data().iter().zip(expected) {
            assert!((p - e).abs() < 1e-7, "{p} vs {e}");
        }
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let (mut s, id) = store(&[1.0, 2.0]);
        let g = Grads::zeros_like(&s);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let (s0, id) = store(&[1.0, 2.0]);
        let mut g = Grads::zeros_like(&s0);
        g.get_mut(id).copy_from_slice(&[0.1, -0.2]);
        let adam0 = AdamState::new(&s0, AdamConfig::default());
        let (mut a, mut b) = (s0.clone(), s0.clone());
        let (mut sa, mut sb) = (adam0.clone(), adam0.clone());
        sa.step(&mut a, &g).unwrap();
        sb.step(&mut b, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);

        g.get_mut(id)[0] = f64::NAN;
        let before = a.clone();
        assert!(sa.step(&mut a, &g).is_err());
        assert_eq!(a, before);
    }
}
