//! Joint learning of data assimilation and dynamical-model corrections from
//! sparse, noisy observations of Lorenz'96 systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffengine`]: reverse-mode differentiation over dense arrays.
//! * [`l96`]: one-level, two-level and corrected Lorenz'96 dynamics with RK4.
//! * [`obs`]: twin-experiment generation and the AF1 array file format.
//! * [`baselines`]: optimal interpolation, EnKS, hard/weak-constraint 4DVar.
//! * [`networks`]: the 1.5D Unet assimilation network and the local
//!   correction network.
//! * [`train`]: the joint assimilation/dynamics objective, Adam and the
//!   training tasks.
//! * [`eval`]: truth-based diagnostics.
//! * [`cli`]: the `coda` command-line entry point.

pub mod baselines;
pub mod cli;
pub mod diffengine;
pub mod error;
pub mod eval;
pub mod l96;
pub mod networks;
pub mod obs;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
