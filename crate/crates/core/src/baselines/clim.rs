use rand::Rng;

use crate::error::{Error, Result};
use crate::l96::{self, SimulatorConfig};
use crate::rng::derive_seed;

/// Steps between retained samples of the long run (one time unit at the
/// default step, well past the decorrelation time).
pub const SAMPLE_STRIDE: usize = 100;

/// Attractor statistics of the coarse variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Retained coarse states, used for random draws.
    pub samples: Vec<Vec<f64>>,
}

impl Climatology {
    /// Statistics over `n_samples` states spaced [`SAMPLE_STRIDE`] steps
    /// apart on one long trajectory.
    pub fn estimate(sim: &SimulatorConfig, n_samples: usize, seed: u64) -> Result<Climatology> {
        if n_samples < 100 {
            return Err(Error::Config(format!("climatology needs n >= 100, got {n_samples}")));
        }
        let mut x = l96::sample_attractor(sim, derive_seed(seed, "climatology"), l96::DEFAULT_BURN_IN)?;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            x = l96::rollout_final(|v| sim.step(v), &x, SAMPLE_STRIDE, sim.blowup_threshold)?;
            samples.push(x[..sim.k].to_vec());
        }
        let n = n_samples as f64;
        let mean: Vec<f64> = (0..sim.k).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / n).collect();
        let std = (0..sim.k)
            .map(|k| {
                let v = samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0);
                v.sqrt()
            })
            .collect();
        Ok(Climatology { mean, std, samples })
    }

    /// Mean over variables of the per-variable mean.
    pub fn pooled_mean(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len() as f64
    }

    /// Root of the mean per-variable variance.
    pub fn pooled_std(&self) -> f64 {
        (self.std.iter().map(|s| s * s).sum::<f64>() / self.std.len() as f64).sqrt()
    }

    /// Expected RMSE between two independent attractor states, `√2·std`.
    pub fn random_rmse(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.pooled_std()
    }

    /// A stored attractor state chosen at random.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.samples[rng.random_range(0..self.samples.len())].clone()
    }
}
