//! Classical data-assimilation baselines: climatology, optimal
//! interpolation, an ensemble Kalman smoother and strong/weak-constraint
//! 4DVar.

mod clim;
mod enks;
mod oi;
mod var;

pub use clim::{Climatology, SAMPLE_STRIDE};
pub use enks::{attractor_ensemble, enks, enks_with, EnKSConfig, EnsembleAnalysis, COLLAPSE_SPREAD};
pub use oi::{optimal_interpolation, OIConfig};
pub use var::{hc4dvar, model_error_terms, var_series, wc4dvar, VarConfig, VarMethod, VarResult};

#[cfg(test)]
mod tests;
