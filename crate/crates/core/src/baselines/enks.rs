use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffengine::Array;
use crate::error::{Error, Result};
use crate::l96::{self, SimulatorConfig, Trajectory};
use crate::obs::ObservationSet;
use crate::rng::{derive_seed, substream};

/// Spread below which the ensemble is considered collapsed.
pub const COLLAPSE_SPREAD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnKSConfig {
    pub ensemble_size: usize,
    /// Multiplicative inflation of forecast anomalies.
    pub inflation: f64,
    /// Fixed smoothing lag in steps.
    pub lag: usize,
    /// Observation noise standard deviation assumed by the filter.
    pub obs_sigma: f64,
    pub seed: u64,
}

impl Default for EnKSConfig {
    fn default() -> Self {
        EnKSConfig {
            ensemble_size: 100,
            inflation: 1.02,
            lag: 25,
            obs_sigma: 1.0,
            seed: 0,
        }
    }
}

impl EnKSConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::Config("ensemble needs at least 2 members".into()));
        }
        if !(self.inflation >= 1.0) || !self.inflation.is_finite() {
            return Err(Error::Config(format!("inflation must be >= 1, got {}", self.inflation)));
        }
        if !(self.obs_sigma >= 0.0) {
            return Err(Error::Config("observation sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ensemble mean and spread (root mean variance over variables) per step.
#[derive(Clone, Debug)]
pub struct EnsembleAnalysis {
    pub mean: Trajectory,
    pub spread: Vec<f64>,
}

/// `n` attractor states of `sim` one time unit apart, used as a first-guess
/// ensemble.
pub fn attractor_ensemble(sim: &SimulatorConfig, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut x = l96::sample_attractor(sim, seed, l96::DEFAULT_BURN_IN)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        x = l96::rollout_final(|v| sim.step(v), &x, super::clim::SAMPLE_STRIDE, sim.blowup_threshold)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// EnKS with the coarse one-level model of `sim` and a climatological
/// first guess.
pub fn enks(obs: &ObservationSet, sim: &SimulatorConfig, cfg: &EnKSConfig) -> Result<EnsembleAnalysis> {
    let model = SimulatorConfig {
        k: obs.dim(),
        ..sim.truncated()
    };
    let init = attractor_ensemble(&model, cfg.ensemble_size, derive_seed(cfg.seed, "enks.init"))?;
    enks_with(obs, |x| model.step(x), init, cfg)
}

fn anomalies(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.row_mean();
    let mut a = x.clone();
    for mut r in a.row_iter_mut() {
        r -= &mean;
    }
    a
}

fn spread(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows() as f64;
    let a = anomalies(x);
    (a.iter().map(|v| v * v).sum::<f64>() / ((n - 1.0) * x.ncols() as f64)).sqrt()
}

/// Perturbed-observation ensemble Kalman filter with a fixed-lag smoother
/// in gain form, for any deterministic `step`. `initial` holds one state
/// per member.
pub fn enks_with<S>(obs: &ObservationSet, step: S, initial: Vec<Vec<f64>>, cfg: &EnKSConfig) -> Result<EnsembleAnalysis>
where
    S: Fn(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let n_mem = initial.len();
    if n_mem != cfg.ensemble_size {
        return Err(Error::Config(format!("{} initial members, expected {}", n_mem, cfg.ensemble_size)));
    }
    let n = obs.dim();
    if initial.iter().any(|m| m.len() != n) {
        return Err(Error::shape("enks", format!("members must have dimension {n}")));
    }
    let steps = obs.steps();
    let mut rng = substream(cfg.seed, "enks.noise");
    let mut x = DMatrix::from_fn(n_mem, n, |i, j| initial[i][j]);
    let scale = 1.0 / (n_mem as f64 - 1.0);

    let mut means = vec![0.0; steps * n];
    let mut spreads = vec![0.0; steps];
    let mut window: VecDeque<(usize, DMatrix<f64>)> = VecDeque::with_capacity(cfg.lag + 1);
    let mut finish = |t: usize, e: &DMatrix<f64>| {
        let m = e.row_mean();
        means[t * n..(t + 1) * n].copy_from_slice(m.as_slice());
        spreads[t] = spread(e);
    };

    for t in 0..steps {
        if t > 0 {
            let mut next = DMatrix::zeros(n_mem, n);
            for i in 0..n_mem {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                let y = step(&row)?;
                if y.len() != n {
                    return Err(Error::shape("enks step", format!("{} -> {}", n, y.len())));
                }
                next.row_mut(i).copy_from_slice(&y);
            }
            x = next;
            if cfg.inflation != 1.0 {
                let mean = x.row_mean();
                for mut r in x.row_iter_mut() {
                    let a = (&r - &mean) * cfg.inflation;
                    r.copy_from(&(a + &mean));
                }
            }
        }
        window.push_back((t, x.clone()));

        let idx: Vec<usize> = obs.mask_at(t).iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect();
        if !idx.is_empty() {
            let (_, cur) = window.back().expect("just pushed");
            let a = anomalies(cur);
            let m = idx.len();
            let ha = DMatrix::from_fn(n_mem, m, |i, j| a[(i, idx[j])]);
            let mut s = ha.transpose() * &ha * scale;
            let r = cfg.obs_sigma * cfg.obs_sigma;
            for j in 0..m {
                s[(j, j)] += r;
            }
            let y = obs.values_at(t);
            let d = DMatrix::from_fn(m, n_mem, |j, i| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                y[idx[j]] + cfg.obs_sigma * eps - cur[(i, idx[j])]
            });
            let chol = s.cholesky().ok_or(Error::Singular { time: t })?;
            let g = chol.solve(&d).transpose() * scale;
            for (_, e) in window.iter_mut() {
                let c = ha.transpose() * anomalies(e);
                *e += &g * c;
            }
            x.copy_from(&window.back().expect("just pushed").1);
            let sp = spread(&x);
            if !(sp >= COLLAPSE_SPREAD) {
                return Err(Error::EnsembleCollapse { time: t, spread: sp });
            }
        }
        if window.len() > cfg.lag {
            let (s, e) = window.pop_front().expect("non-empty");
            finish(s, &e);
        }
    }
    for (s, e) in window.drain(..) {
        finish(s, &e);
    }
    Ok(EnsembleAnalysis {
        mean: Trajectory::new(Array::new(vec![steps, n], means)?, 0, obs.dt)?,
        spread: spreads,
    })
}
