use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Grads, Matrix, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state. Moment accumulators exist only for parameters that were
/// trainable when the optimizer was created.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let moments = params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(name, p)| {
                let (r, c) = p.value.shape();
                (name.to_string(), (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_state_for(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Applies one update. `grads` must name exactly the trainable
    /// parameters, with matching shapes; a gradient for a frozen parameter is
    /// an alignment error.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        for (name, g) in grads {
            let param = params
                .param(name)
                .ok_or_else(|| Error::Alignment(format!("gradient for unknown parameter `{name}`")))?;
            if param.frozen {
                return Err(Error::Alignment(format!("gradient supplied for frozen parameter `{name}`")));
            }
            if param.value.shape() != g.shape() {
                return Err(Error::Alignment(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    param.value.shape()
                )));
            }
            if !self.moments.contains_key(name) {
                return Err(Error::Alignment(format!("no optimizer state for `{name}`")));
            }
        }
        if let Some(missing) = self.moments.keys().find(|n| !grads.contains_key(*n)) {
            return Err(Error::Alignment(format!("missing gradient for `{missing}`")));
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, (m, v)) in self.moments.iter_mut() {
            let g = &grads[name];
            let w = params.get_mut(name).expect("checked above");
            let w = w.as_mut_slice();
            for (((wi, mi), vi), gi) in w
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *wi -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
