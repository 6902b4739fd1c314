//! Twin experiments: a simulated truth, masked noisy observations of it, and
//! their on-disk layout.

pub mod af1;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffengine::Array;
use crate::error::{Error, Result};
use crate::l96::{self, Mode, SimulatorConfig, Trajectory, TwoLevelState};
use crate::rng::{derive_seed, CounterRng};

pub const TRUTH_FILE: &str = "truth.af1";
pub const VALUES_FILE: &str = "obs_values.af1";
pub const MASK_FILE: &str = "obs_mask.af1";
pub const COUPLING_FILE: &str = "coupling.af1";
pub const PROVENANCE_FILE: &str = "provenance.json";

fn check_fraction(miss_fraction: f64) -> Result<()> {
    if (0.0..=1.0).contains(&miss_fraction) {
        Ok(())
    } else {
        Err(Error::Config(format!("miss fraction {miss_fraction} outside [0, 1]")))
    }
}

/// `T·K` flags in row-major order, `true` = observed. Each entry is an
/// independent Bernoulli draw with success probability `1 - miss_fraction`.
pub fn make_mask_schedule(t: usize, k: usize, miss_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    check_fraction(miss_fraction)?;
    let r = CounterRng::new(seed, "mask");
    Ok((0..t * k)
        .map(|i| r.uniform((i / k) as u64, (i % k) as u64) >= miss_fraction)
        .collect())
}

/// One observation time. Unobserved entries hold NaN and must not be read.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFrame {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ObservationFrame {
    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mask
            .iter()
            .zip(&self.values)
            .enumerate()
            .filter(|(_, (m, _))| **m)
            .map(|(k, (_, v))| (k, *v))
    }
}

/// `y = x + N(0, σ²)` on the mask; the noise at `(t, k)` is a pure function of
/// `noise` and the coordinates.
pub fn observe(x: &[f64], mask: &[bool], sigma: f64, noise: &CounterRng, t: u64) -> Result<ObservationFrame> {
    if x.len() != mask.len() {
        return Err(Error::shape("observe", format!("{} values, {} mask", x.len(), mask.len())));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma = {sigma}")));
    }
    let values = x
        .iter()
        .zip(mask)
        .enumerate()
        .map(|(k, (&v, &m))| {
            if !m {
                f64::NAN
            } else if sigma == 0.0 {
                v
            } else {
                v + sigma * noise.normal(t, k as u64)
            }
        })
        .collect();
    Ok(ObservationFrame {
        values,
        mask: mask.to_vec(),
    })
}

/// Everything needed to rebuild a twin experiment bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub steps: usize,
    pub miss_fraction: f64,
    pub sigma: f64,
    pub burn_in: usize,
    pub simulator: SimulatorConfig,
    pub simulator_hash: String,
}

/// Observations over `T` time steps of a `K`-dimensional state.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    /// `[T, K]`, NaN where unobserved.
    pub values: Array,
    pub mask: Vec<bool>,
    pub dt: f64,
    pub provenance: Option<Provenance>,
}

impl ObservationSet {
    pub fn new(values: Array, mask: Vec<bool>, dt: f64) -> Result<Self> {
        if values.ndim() != 2 || values.len() != mask.len() {
            return Err(Error::shape(
                "observation set",
                format!("values {:?}, mask {}", values.shape(), mask.len()),
            ));
        }
        if values.data().iter().zip(&mask).any(|(v, &m)| m && !v.is_finite()) {
            return Err(Error::Format("non-finite value at an observed position".into()));
        }
        Ok(ObservationSet {
            values,
            mask,
            dt,
            provenance: None,
        })
    }

    pub fn from_frames(frames: &[ObservationFrame], dt: f64) -> Result<Self> {
        let k = frames.first().map(|f| f.values.len()).unwrap_or(0);
        let mut values = Vec::with_capacity(frames.len() * k);
        let mut mask = Vec::with_capacity(frames.len() * k);
        for f in frames {
            if f.values.len() != k || f.mask.len() != k {
                return Err(Error::shape("observation set", "ragged frames"));
            }
            values.extend_from_slice(&f.values);
            mask.extend_from_slice(&f.mask);
        }
        ObservationSet::new(Array::new(vec![frames.len(), k], values)?, mask, dt)
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values_at(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn mask_at(&self, t: usize) -> &[bool] {
        let k = self.dim();
        &self.mask[t * k..(t + 1) * k]
    }

    pub fn frame(&self, t: usize) -> ObservationFrame {
        ObservationFrame {
            values: self.values_at(t).to_vec(),
            mask: self.mask_at(t).to_vec(),
        }
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Steps `start..start + len`; provenance is dropped.
    pub fn slice(&self, start: usize, len: usize) -> Result<ObservationSet> {
        if start + len > self.steps() {
            return Err(Error::shape("observation slice", format!("{start}+{len} > {}", self.steps())));
        }
        let k = self.dim();
        ObservationSet::new(
            Array::new(vec![len, k], self.values.data()[start * k..(start + len) * k].to_vec())?,
            self.mask[start * k..(start + len) * k].to_vec(),
            self.dt,
        )
    }

    /// Copy with every unobserved entry set to `fill`.
    pub fn with_unobserved(&self, fill: f64) -> ObservationSet {
        let mut out = self.clone();
        for (v, &m) in out.values.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *v = fill;
            }
        }
        out
    }

    /// RMSE of observations against `truth` over observed entries only.
    pub fn masked_rmse(&self, truth: &Trajectory) -> Result<f64> {
        if truth.states.shape() != self.values.shape() {
            return Err(Error::shape(
                "masked rmse",
                format!("{:?} vs {:?}", truth.states.shape(), self.values.shape()),
            ));
        }
        let (mut s, mut n) = (0.0, 0usize);
        for ((y, x), &m) in self.values.data().iter().zip(truth.states.data()).zip(&self.mask) {
            if m {
                s += (y - x) * (y - x);
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { (s / n as f64).sqrt() })
    }
}

/// Observations of a trajectory with an independent mask and noise draw.
pub fn observe_trajectory(truth: &Trajectory, miss_fraction: f64, sigma: f64, seed: u64) -> Result<ObservationSet> {
    let (t, k) = (truth.len(), truth.dim());
    let mask = make_mask_schedule(t, k, miss_fraction, seed)?;
    let noise = CounterRng::new(seed, "noise");
    let frames = (0..t)
        .map(|i| observe(truth.state(i), &mask[i * k..(i + 1) * k], sigma, &noise, i as u64))
        .collect::<Result<Vec<_>>>()?;
    ObservationSet::from_frames(&frames, truth.dt)
}

/// Truth, observations and (two-level only) the true coupling `-hc·z̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinExperiment {
    /// Coarse variables only.
    pub truth: Trajectory,
    pub obs: ObservationSet,
    pub coupling: Option<Trajectory>,
}

/// Spins up from `seed`, simulates `steps` time points and observes each
/// one. Two-level runs expose only the coarse variables.
pub fn generate_twin_experiment(
    cfg: &SimulatorConfig,
    steps: usize,
    miss_fraction: f64,
    sigma: f64,
    seed: u64,
) -> Result<TwinExperiment> {
    generate_with_burn_in(cfg, steps, miss_fraction, sigma, seed, l96::DEFAULT_BURN_IN)
}

pub fn generate_with_burn_in(
    cfg: &SimulatorConfig,
    steps: usize,
    miss_fraction: f64,
    sigma: f64,
    seed: u64,
    burn_in: usize,
) -> Result<TwinExperiment> {
    cfg.validate()?;
    check_fraction(miss_fraction)?;
    if steps == 0 {
        return Err(Error::Config("twin experiment needs at least one step".into()));
    }
    let x0 = l96::sample_attractor(cfg, derive_seed(seed, "truth"), burn_in)?;
    let full = l96::rollout(|x| cfg.step(x), &x0, steps - 1, cfg.dt, cfg.blowup_threshold)?;
    let truth = full.columns(cfg.k);
    let coupling = match cfg.mode {
        Mode::TwoLevel => {
            let hc = cfg.h * cfg.c;
            let rows = (0..full.len())
                .map(|i| {
                    let s = TwoLevelState::from_flat(full.state(i), cfg.k, cfg.j)?;
                    Ok(s.z_mean().iter().map(|z| -hc * z).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            Some(Trajectory::from_rows(&rows, 0, cfg.dt)?)
        }
        _ => None,
    };
    let mut obs = observe_trajectory(&truth, miss_fraction, sigma, derive_seed(seed, "observe"))?;
    obs.provenance = Some(Provenance {
        seed,
        steps,
        miss_fraction,
        sigma,
        burn_in,
        simulator: cfg.clone(),
        simulator_hash: cfg.hash(),
    });
    Ok(TwinExperiment { truth, obs, coupling })
}

/// Rebuilds the experiment a provenance record describes.
pub fn regenerate(p: &Provenance) -> Result<TwinExperiment> {
    if p.simulator.hash() != p.simulator_hash {
        return Err(Error::Format("provenance simulator hash does not match its config".into()));
    }
    generate_with_burn_in(&p.simulator, p.steps, p.miss_fraction, p.sigma, p.seed, p.burn_in)
}

fn mask_bytes(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&m| m as u8).collect()
}

pub fn write_observations(dir: &Path, obs: &ObservationSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    af1::write_f64(&dir.join(VALUES_FILE), &obs.values, json!({ "dt": obs.dt }))?;
    af1::write_u8(&dir.join(MASK_FILE), obs.values.shape(), &mask_bytes(&obs.mask), json!({}))?;
    if let Some(p) = &obs.provenance {
        let path = dir.join(PROVENANCE_FILE);
        af1::write_bytes(&path, &serde_json::to_vec_pretty(p)?)?;
    }
    Ok(())
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    af1::write_f64(path, &traj.states, json!({ "t0": traj.t0, "dt": traj.dt }))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let (a, meta) = af1::read_f64(path)?;
    let t0 = meta.get("t0").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let dt = meta.get("dt").and_then(|v| v.as_f64()).unwrap_or(0.01);
    Trajectory::new(a, t0, dt)
}

/// Writes the dataset directory: truth, observation values and mask,
/// provenance, and the coupling series when present.
pub fn write_dataset(dir: &Path, exp: &TwinExperiment) -> Result<()> {
    write_observations(dir, &exp.obs)?;
    write_trajectory(&dir.join(TRUTH_FILE), &exp.truth)?;
    if let Some(c) = &exp.coupling {
        write_trajectory(&dir.join(COUPLING_FILE), c)?;
    }
    Ok(())
}

/// Reads only the observation files; the truth is never touched.
pub fn read_observations(dir: &Path) -> Result<ObservationSet> {
    let (values, meta) = af1::read_f64(&dir.join(VALUES_FILE))?;
    let (shape, bytes, _) = af1::read_u8(&dir.join(MASK_FILE))?;
    if shape != values.shape() {
        return Err(Error::Format(format!(
            "mask shape {shape:?} differs from values {:?}",
            values.shape()
        )));
    }
    if values.ndim() != 2 {
        return Err(Error::Format(format!("observation values have shape {:?}", values.shape())));
    }
    let mask = bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Format(format!("mask byte {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let dt = meta.get("dt").and_then(|v| v.as_f64()).unwrap_or(0.01);
    let mut obs = ObservationSet::new(values, mask, dt)?;
    let prov = dir.join(PROVENANCE_FILE);
    if prov.exists() {
        let bytes = fs::read(&prov).map_err(|e| Error::io(&prov, e))?;
        obs.provenance = Some(serde_json::from_slice(&bytes)?);
    }
    Ok(obs)
}

pub fn read_truth(dir: &Path) -> Result<Trajectory> {
    read_trajectory(&dir.join(TRUTH_FILE))
}

pub fn read_coupling(dir: &Path) -> Result<Option<Trajectory>> {
    let p = dir.join(COUPLING_FILE);
    if p.exists() {
        read_trajectory(&p).map(Some)
    } else {
        Ok(None)
    }
}

pub fn read_dataset(dir: &Path) -> Result<TwinExperiment> {
    Ok(TwinExperiment {
        obs: read_observations(dir)?,
        truth: read_truth(dir)?,
        coupling: read_coupling(dir)?,
    })
}
