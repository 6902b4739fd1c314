//! Lorenz'96 dynamics and RK4 time stepping.
//!
//! Two evaluation paths share the same arithmetic order: slice-based
//! functions for simulation and ensemble work, and tape-based functions
//! ([`diff`]) for anything that must be differentiated. Their forward values
//! agree bit for bit.

pub mod diff;
mod plain;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffengine::Array;
use crate::error::{Error, Result};
use crate::rng;

pub use plain::{
    rk4_step, rollout, rollout_final, tendency_one_level, tendency_two_level, TwoLevelState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OneLevel,
    TwoLevel,
    Corrected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    /// Coarse dimension.
    pub k: usize,
    /// Fine variables per coarse variable (two-level only).
    pub j: usize,
    pub dt: f64,
    pub forcing: f64,
    /// Coupling strength.
    pub h: f64,
    /// Time-scale ratio.
    pub c: f64,
    /// Amplitude ratio of the fine variables.
    pub b: f64,
    pub mode: Mode,
    /// Half-width of the uniform perturbation of `F·1` used for spin-up.
    pub spinup_noise: f64,
    /// Rollouts abort once any |x| exceeds this.
    pub blowup_threshold: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig::one_level()
    }
}

pub const DEFAULT_BURN_IN: usize = 2000;
pub const DEFAULT_BLOWUP: f64 = 1e6;

impl SimulatorConfig {
    pub fn one_level() -> Self {
        SimulatorConfig {
            k: 40,
            j: 10,
            dt: 0.01,
            forcing: 8.0,
            h: 1.0,
            c: 10.0,
            b: 10.0,
            mode: Mode::OneLevel,
            spinup_noise: 1e-3,
            blowup_threshold: DEFAULT_BLOWUP,
        }
    }

    pub fn two_level() -> Self {
        SimulatorConfig {
            k: 36,
            j: 10,
            dt: 0.01,
            forcing: 10.0,
            h: 1.0,
            c: 10.0,
            b: 10.0,
            mode: Mode::TwoLevel,
            spinup_noise: 1e-3,
            blowup_threshold: DEFAULT_BLOWUP,
        }
    }

    pub fn with_forcing(mut self, forcing: f64) -> Self {
        self.forcing = forcing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 4 {
            return Err(Error::Config(format!("K = {} < 4", self.k)));
        }
        if self.mode == Mode::TwoLevel && (self.j < 1 || self.j * self.k < 4) {
            return Err(Error::Config(format!("J = {} invalid for two-level", self.j)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt = {} must be positive", self.dt)));
        }
        if !self.forcing.is_finite() || !self.h.is_finite() || !self.c.is_finite() || !self.b.is_finite() {
            return Err(Error::Config("non-finite simulator constant".into()));
        }
        if !(self.spinup_noise >= 0.0) || !(self.blowup_threshold > 0.0) {
            return Err(Error::Config("bad spin-up noise or blow-up threshold".into()));
        }
        Ok(())
    }

    /// Length of the full model state (coarse plus fine for two-level).
    pub fn state_dim(&self) -> usize {
        match self.mode {
            Mode::TwoLevel => self.k + self.k * self.j,
            _ => self.k,
        }
    }

    /// The one-level model with the same coarse constants.
    pub fn truncated(&self) -> SimulatorConfig {
        SimulatorConfig {
            mode: Mode::OneLevel,
            ..self.clone()
        }
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Tendency of the full model state.
    pub fn tendency(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self.mode {
            Mode::OneLevel | Mode::Corrected => tendency_one_level(state, self.forcing),
            Mode::TwoLevel => {
                let s = TwoLevelState::from_flat(state, self.k, self.j)?;
                Ok(tendency_two_level(&s, self)?.into_flat())
            }
        }
    }

    /// One RK4 step of the full model state.
    pub fn step(&self, state: &[f64]) -> Result<Vec<f64>> {
        rk4_step(|x| self.tendency(x), state, self.dt)
    }
}

/// Time-indexed sequence of states, `states` is `[T, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Array,
    pub t0: usize,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(states: Array, t0: usize, dt: f64) -> Result<Self> {
        if states.ndim() != 2 {
            return Err(Error::shape("trajectory", format!("{:?}", states.shape())));
        }
        Ok(Trajectory { states, t0, dt })
    }

    pub fn from_rows(rows: &[Vec<f64>], t0: usize, dt: f64) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape("trajectory", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Trajectory::new(Array::new(vec![rows.len(), dim], data)?, t0, dt)
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        self.states.row(i)
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// The first `cols` columns of every state (coarse part of a two-level run).
    pub fn columns(&self, cols: usize) -> Trajectory {
        let data = (0..self.len())
            .flat_map(|i| self.state(i)[..cols].to_vec())
            .collect();
        Trajectory {
            states: Array::new(vec![self.len(), cols], data).expect("consistent"),
            t0: self.t0,
            dt: self.dt,
        }
    }

    /// States `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Trajectory> {
        if start + len > self.len() {
            return Err(Error::shape("trajectory window", format!("{}+{} > {}", start, len, self.len())));
        }
        let dim = self.dim();
        Trajectory::new(
            Array::new(
                vec![len, dim],
                self.states.data()[start * dim..(start + len) * dim].to_vec(),
            )?,
            self.t0 + start,
            self.dt,
        )
    }
}

/// Integrates from a small random perturbation of `F·1` for `burn_in`
/// steps. Two-level states start with fine variables perturbed around zero.
pub fn sample_attractor(cfg: &SimulatorConfig, seed: u64, burn_in: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut r = rng::substream(seed, "spinup");
    let a = cfg.spinup_noise;
    let mut x: Vec<f64> = (0..cfg.state_dim())
        .map(|i| {
            let base = if i < cfg.k { cfg.forcing } else { 0.0 };
            base + if a > 0.0 { r.random_range(-a..=a) } else { 0.0 }
        })
        .collect();
    for step in 0..burn_in {
        x = cfg.step(&x).map_err(|e| match e {
            Error::BlowUp { stage, .. } => Error::BlowUp { step, stage },
            e => e,
        })?;
        if x.iter().any(|v| v.abs() > cfg.blowup_threshold) {
            return Err(Error::BlowUp {
                step,
                stage: "spin-up",
            });
        }
    }
    Ok(x)
}
