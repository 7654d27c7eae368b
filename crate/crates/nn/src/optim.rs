use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and step count for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return shape_err(
            "adam_step",
            format!(
                "params {}, grads {}, moments {}/{}",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        );
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<ParamId, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(store, lr)
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (id, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let st = self
                .states
                .entry(id)
                .or_insert_with(|| AdamState::new(p.value.numel()));
            let grad = p.grad.data().to_vec();
            adam_step(p.value.data_mut(), &grad, st, lr, &self.config)?;
            p.value.check_finite("adam")?;
        }
        Ok(())
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(&id)
    }

    /// Moments as tensors keyed by parameter name, for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, u64, Tensor, Tensor)> {
        self.states
            .iter()
            .map(|(id, st)| {
                let p = store.get(*id);
                (
                    p.name.clone(),
                    st.t,
                    Tensor::new(p.value.shape().to_vec(), st.m.clone()).expect("moment shape"),
                    Tensor::new(p.value.shape().to_vec(), st.v.clone()).expect("moment shape"),
                )
            })
            .collect()
    }

    pub fn import(&mut self, store: &ParamStore, entries: Vec<(String, u64, Tensor, Tensor)>) -> Result<()> {
        for (name, t, m, v) in entries {
            let id = store.id(&name)?;
            if m.numel() != store.value(id).numel() || v.numel() != m.numel() {
                return shape_err("Adam::import", format!("moments for {name}"));
            }
            self.states.insert(
                id,
                AdamState {
                    m: m.into_data(),
                    v: v.into_data(),
                    t,
                },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line scalar Adam used as an independent reference.
    fn scalar_adam(p: f64, g: f64, m: f64, v: f64, t: i32, c: &AdamConfig) -> (f64, f64, f64) {
        let m = c.beta1 * m + (1.0 - c.beta1) * g;
        let v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t));
        let vh = v / (1.0 - c.beta2.powi(t));
        (p - c.lr * mh / (vh.sqrt() + c.eps), m, v)
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.5, -1.25, 2.0];
        let g = vec![0.1, -3.0, 0.0007];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, cfg.lr, &cfg).unwrap();
        for (i, (&p0, &gi)) in [0.5, -1.25, 2.0].iter().zip(&g).enumerate() {
            let (pe, me, ve) = scalar_adam(p0, gi, 0.0, 0.0, 1, &cfg);
            assert!((p[i] - pe).abs() < 1e-12);
            assert!((st.m[i] - me).abs() < 1e-12);
            assert!((st.v[i] - ve).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState {
            m: vec![0.0, 0.0],
            v: vec![0.25, 0.25],
            t: 0,
        };
        adam_step(&mut p, &[0.0, 0.0], &mut st, cfg.lr, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert!(st.v.iter().all(|&v| v < 0.25));
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_sign() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        let mut last = p.clone();
        for _ in 0..5000 {
            last.copy_from_slice(&p);
            adam_step(&mut p, &[0.3, -7.0], &mut st, cfg.lr, &cfg).unwrap();
        }
        assert!(((p[0] - last[0]) + cfg.lr).abs() < 1e-6);
        assert!(((p[1] - last[1]) - cfg.lr).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut st, 1e-3, &cfg).is_err());
    }
}
