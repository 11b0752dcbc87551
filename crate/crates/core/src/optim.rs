//! Adaptive-moment optimizer over the trainable entries of a store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    /// Learning rate at `step` (0-based) of `total` steps.
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                if total <= 1 {
                    return base;
                }
                let t = step as f64 / (total - 1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Matrix, Matrix)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update. Every gradient must name a
    /// trainable entry of `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Matrix)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            match store.entry(name) {
                Some(e) if e.role == ParamRole::Trainable => {
                    if e.value.shape() != g.shape() {
                        return Err(Error::dim(format!(
                            "gradient for `{name}` has shape {:?}, parameter has {:?}",
                            g.shape(),
                            e.value.shape()
                        )));
                    }
                }
                Some(_) => {
                    return Err(Error::Input(format!("`{name}` is not trainable")));
                }
                None => return Err(Error::Input(format!("unknown parameter `{name}`"))),
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| {
                (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols()))
            });
            let p = store.get_mut(name)?;
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
