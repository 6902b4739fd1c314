//! Finite-difference checks of the training gradients on small problems.

use crate::diffengine::{grad_check_coords, Activation, Array, Tape, Var};
use crate::error::Result;
use crate::l96::diff::{rollout, Corrected, Forcing, OneLevel};
use crate::l96::{self, SimulatorConfig};
use crate::networks::{bind_constant, CorrectionConfig, Unet15Config};
use crate::obs::generate_with_burn_in;
use crate::rng::derive_seed;

use super::{coda_loss, init_state, NetworkConfig, NormMode, Task, TrainingConfig};

/// Central-difference step used by both checks.
pub const FD_STEP: f64 = 1e-5;

/// Max relative error of the gradient of a `w`-step rollout loss
/// `Σ_i ‖M^i(x0) - y_i‖²` over masked random targets, w.r.t. `x0`.
pub fn rollout_grad_check(seed: u64, w: usize) -> Result<f64> {
    let sim = SimulatorConfig::one_level();
    let exp = generate_with_burn_in(&sim, w + 1, 0.5, 1.0, seed, 500)?;
    let x0 = l96::sample_attractor(&sim, derive_seed(seed, "gradcheck"), 500)?;
    let f = |tape: &Tape, x: Var| -> Result<Var> {
        let states = rollout(tape, &OneLevel { forcing: Forcing::Const(sim.forcing) }, x, w, sim.dt, sim.blowup_threshold)?;
        let mut acc = tape.scalar(0.0)?;
        for (i, s) in states.iter().enumerate() {
            acc = tape.add(acc, tape.masked_sq_err(*s, exp.obs.values_at(i), exp.obs.mask_at(i))?)?;
        }
        Ok(acc)
    };
    Ok(grad_check_coords(f, &Array::vector(x0), FD_STEP, None)?.max_rel_error)
}

/// Max relative error of the full objective's gradient w.r.t. every
/// parameter group (DA net, correction net, forcing), `coords` entries per
/// tensor. Small smooth networks keep finite differences meaningful.
pub fn objective_grad_check(seed: u64, w: usize, coords: usize) -> Result<f64> {
    let sim = SimulatorConfig {
        k: 8,
        ..SimulatorConfig::one_level()
    };
    let nets = NetworkConfig {
        danet: Unet15Config {
            levels: 2,
            channels: vec![3, 4],
            activation: Activation::Softplus,
            ..Unet15Config::default()
        },
        correction: CorrectionConfig {
            hidden: vec![4, 4],
            activation: Activation::Tanh,
        },
    };
    let cfg = TrainingConfig {
        rollout_len: w,
        window_len: 4,
        batch_size: 3,
        task: Task::Correct,
        seed,
        ..TrainingConfig::default()
    };
    let exp = generate_with_burn_in(&sim, w + 4 + 8, 0.5, 1.0, seed, 500)?;
    let mut state = init_state(&exp.obs, &nets, &cfg)?;
    let net = state.correction.as_mut().expect("correct task has a correction net");
    for a in net.params.values_mut() {
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            *v = 0.3 * ((i as f64) * 1.7 + seed as f64).sin();
        }
    }
    let anchors = [0usize, 3, 7];
    let mut targets: Vec<(String, Array)> = state.danet.params.iter().map(|(k, v)| (format!("da/{k}"), v.clone())).collect();
    targets.extend(net.params.iter().map(|(k, v)| (format!("corr/{k}"), v.clone())));
    targets.push(("theta".into(), Array::scalar(sim.forcing + 0.3)));
    let mut worst: f64 = 0.0;
    for (name, value) in &targets {
        let f = |tape: &Tape, v: Var| -> Result<Var> {
            let mut da = bind_constant(tape, &state.danet.params)?;
            let net = state.correction.as_ref().expect("present");
            let mut corr = bind_constant(tape, &net.params)?;
            let mut forcing = tape.scalar(sim.forcing + 0.3)?;
            if let Some(n) = name.strip_prefix("da/") {
                da.insert(n.into(), v);
            } else if let Some(n) = name.strip_prefix("corr/") {
                corr.insert(n.into(), v);
            } else {
                forcing = tape.reshape(v, &[])?;
            }
            let dynamics = Corrected {
                forcing: Forcing::Var(forcing),
                correction: |t: &Tape, x: Var| net.forward(t, &corr, x),
            };
            let (terms, _) = coda_loss(tape, &state.danet, &da, &exp.obs, &anchors, &dynamics, &sim, &cfg, NormMode::Train)?;
            Ok(terms.total)
        };
        let picked: Vec<usize> = (0..value.len()).step_by(value.len().div_ceil(coords.max(1))).collect();
        worst = worst.max(grad_check_coords(f, value, FD_STEP, Some(&picked))?.max_rel_error);
    }
    Ok(worst)
}
