//! Adam with per-parameter step counts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Separate learning rate for gate logits; `None` uses `lr`.
    pub gate_lr: Option<f64>,
    /// Global-norm clipping over the gradients of one step.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gate_lr: None,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a positive finite number, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        if let Some(v) = self.gate_lr {
            positive("gate_lr", v)?;
        }
        if let Some(v) = self.clip_norm {
            positive("grad_clip", v)?;
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Moment buffers are created lazily, the first time a parameter receives a
/// gradient, so parameters never touched have no state and never move.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<ParamId, Moments>,
    updates: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: BTreeMap::new(),
            updates: 0,
        })
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    /// Number of `step` calls so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.state.keys().copied()
    }

    /// Applies one update to each parameter in `touched` from its stored
    /// gradient, then clears those gradients.
    pub fn step(&mut self, store: &mut ParamStore, touched: &[ParamId]) {
        self.updates += 1;
        let scale = match self.config.clip_norm {
            Some(max) => {
                let sq: f64 = touched
                    .iter()
                    .flat_map(|&id| store.tensor(id).grad().iter())
                    .map(|g| g * g)
                    .sum();
                let norm = sq.sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            gate_lr,
            ..
        } = self.config;
        for &id in touched {
            let lr = match (store.param(id).kind, gate_lr) {
                (ParamKind::Gate { .. }, Some(g)) => g,
                _ => lr,
            };
            let tensor = store.tensor_mut(id);
            let n = tensor.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            st.step += 1;
            let c1 = 1.0 - beta1.powi(st.step as i32);
            let c2 = 1.0 - beta2.powi(st.step as i32);
            let grads = tensor.grad().to_vec();
            for (i, value) in tensor.values_mut().iter_mut().enumerate() {
                let g = grads[i] * scale;
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                *value -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
    }
}
