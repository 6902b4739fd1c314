use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::l96::Trajectory;
use crate::obs::ObservationSet;

/// Static space-time optimal interpolation around a constant background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OIConfig {
    pub background_mean: f64,
    pub variance: f64,
    /// Squared-exponential length-scale along space, in grid points.
    pub length_space: f64,
    /// Squared-exponential length-scale along time, in steps.
    pub length_time: f64,
    pub obs_variance: f64,
    /// Observations within this many steps of the analysis time are used.
    pub time_radius: usize,
}

impl Default for OIConfig {
    /// Climatological mean and variance; length-scales minimize analysis
    /// RMSE on a held-out one-level twin (seed 9999, F = 8, 75% missing,
    /// σ = 1, 2000 steps) for a fixed radius of 2 steps.
    fn default() -> Self {
        OIConfig {
            background_mean: 2.33,
            variance: 13.2,
            length_space: 0.5,
            length_time: 16.0,
            obs_variance: 1.0,
            time_radius: 1,
        }
    }
}

impl OIConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || !(self.length_space > 0.0) || !(self.length_time > 0.0) {
            return Err(Error::Config("OI variance and length-scales must be positive".into()));
        }
        if !(self.obs_variance >= 0.0) || !self.background_mean.is_finite() {
            return Err(Error::Config("OI observation variance must be non-negative".into()));
        }
        Ok(())
    }

    fn cov(&self, dk: usize, k: usize, dt: usize) -> f64 {
        let d = dk.min(k - dk) as f64;
        let t = dt as f64;
        self.variance
            * (-(d * d) / (2.0 * self.length_space * self.length_space)
                - (t * t) / (2.0 * self.length_time * self.length_time))
                .exp()
    }
}

/// Analysis `μ + B Hᵀ (H B Hᵀ + R)⁻¹ (y - μ)` at every step, from the
/// observations within `time_radius` steps. No dynamics are involved.
pub fn optimal_interpolation(obs: &ObservationSet, cfg: &OIConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let (steps, k) = (obs.steps(), obs.dim());
    let mu = cfg.background_mean;
    let mut out = Vec::with_capacity(steps * k);
    for t in 0..steps {
        let lo = t.saturating_sub(cfg.time_radius);
        let hi = (t + cfg.time_radius).min(steps - 1);
        let points: Vec<(usize, usize, f64)> = (lo..=hi)
            .flat_map(|s| {
                let vals = obs.values_at(s);
                obs.mask_at(s)
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(move |(j, _)| (s, j, vals[j]))
            })
            .collect();
        if points.is_empty() {
            out.extend(std::iter::repeat_n(mu, k));
            continue;
        }
        let m = points.len();
        let s = DMatrix::from_fn(m, m, |a, b| {
            let (pa, pb) = (points[a], points[b]);
            let c = cfg.cov(pa.1.abs_diff(pb.1), k, pa.0.abs_diff(pb.0));
            if a == b {
                c + cfg.obs_variance
            } else {
                c
            }
        });
        let chol = s.cholesky().ok_or(Error::Singular { time: t })?;
        let innov = DVector::from_iterator(m, points.iter().map(|p| p.2 - mu));
        let z = chol.solve(&innov);
        for j in 0..k {
            let inc: f64 = points
                .iter()
                .zip(z.iter())
                .map(|(p, zi)| cfg.cov(p.1.abs_diff(j), k, p.0.abs_diff(t)) * zi)
                .sum();
            out.push(mu + inc);
        }
    }
    Trajectory::new(crate::diffengine::Array::new(vec![steps, k], out)?, 0, obs.dt)
}
