//! First-order optimizers.

use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimMode {
    /// Adaptive moment estimation with bias correction.
    #[default]
    Adam,
    /// `p -= lr * g`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub mode: OptimMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            mode: OptimMode::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            mode: OptimMode::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Moment accumulators for one component, in [`Params::arrays`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<P: Params>(config: OptimConfig, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .arrays()
            .iter()
            .map(|a| vec![0.0; a.values.len()])
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Apply one update. Fails without touching `params` if any gradient is
    /// non-finite or shapes disagree.
    pub fn apply<P: Params>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g_arrays = grads.arrays();
        if g_arrays.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "gradient has {} arrays, optimizer tracks {}",
                g_arrays.len(),
                self.first.len()
            )));
        }
        for (g, m) in g_arrays.iter().zip(&self.first) {
            if g.values.len() != m.len() {
                return Err(Error::Shape(format!(
                    "gradient array `{}` has wrong size",
                    g.name
                )));
            }
            if g.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {}", g.name)));
            }
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.arrays_mut().into_iter().enumerate() {
            let g = g_arrays[i].values;
            match cfg.mode {
                OptimMode::Sgd => {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= cfg.lr * gi;
                    }
                }
                OptimMode::Adam => {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for j in 0..p.len() {
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
