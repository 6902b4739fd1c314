use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffengine::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Updates this parameter has received; parameters that join later
    /// get their own bias correction.
    t: u64,
}

/// Adam without weight decay. Moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Optimizer steps taken.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Array, grad: &Array) -> Result<()> {
        self.update_with_lr(name, param, grad, self.config.lr)
    }

    /// [`Adam::update`] with a learning rate of its own for this parameter.
    pub fn update_with_lr(&mut self, name: &str, param: &mut Array, grad: &Array, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "adam",
                format!("{name}: param {:?} grad {:?}", param.shape(), grad.shape()),
            ));
        }
        let c = self.config;
        let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        if mo.m.len() != param.len() {
            return Err(Error::shape("adam", format!("{name}: moment size changed")));
        }
        mo.t += 1;
        let bc1 = 1.0 - c.beta1.powi(mo.t as i32);
        let bc2 = 1.0 - c.beta2.powi(mo.t as i32);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(mo.m.iter_mut())
            .zip(mo.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + c.eps);
        }
        Ok(())
    }
}
