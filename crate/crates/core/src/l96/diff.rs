//! Differentiable Lorenz'96 on a [`Tape`]. States are `[K]` or batched
//! `[B, K]`; the periodic axis is always the last one.

use crate::diffengine::{Tape, Var};
use crate::error::{Error, Result};

/// Forcing either fixed or under optimization (a one-element variable).
#[derive(Clone, Copy, Debug)]
pub enum Forcing {
    Const(f64),
    Var(Var),
}

/// Tendency that can be recorded on a tape.
pub trait Dynamics {
    fn tendency(&self, tape: &Tape, x: Var) -> Result<Var>;
}

fn last_axis(tape: &Tape, x: Var) -> Result<usize> {
    let shape = tape.shape(x)?;
    match shape.last() {
        Some(&k) if k >= 4 => Ok(shape.len() - 1),
        _ => Err(Error::Config(format!("L96 state shape {shape:?} needs K >= 4"))),
    }
}

/// One-level tendency as a tape expression.
pub fn tendency_one_level(tape: &Tape, x: Var, forcing: Forcing) -> Result<Var> {
    let axis = last_axis(tape, x)?;
    let xm1 = tape.circular_shift(x, axis, 1)?;
    let xm2 = tape.circular_shift(x, axis, 2)?;
    let xp1 = tape.circular_shift(x, axis, -1)?;
    let adv = tape.neg(tape.mul(xm1, tape.sub(xm2, xp1)?)?)?;
    let r = tape.sub(adv, x)?;
    match forcing {
        Forcing::Const(f) => tape.offset(r, f),
        Forcing::Var(f) => tape.add_scalar(r, f),
    }
}

/// The one-level model.
pub struct OneLevel {
    pub forcing: Forcing,
}

impl Dynamics for OneLevel {
    fn tendency(&self, tape: &Tape, x: Var) -> Result<Var> {
        tendency_one_level(tape, x, self.forcing)
    }
}

/// Per-location correction evaluated on the coarse state.
pub trait Correction {
    fn apply(&self, tape: &Tape, x: Var) -> Result<Var>;
}

impl<F: Fn(&Tape, Var) -> Result<Var>> Correction for F {
    fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// `f(x) + B(x)`: the corrected tendency.
pub struct Corrected<C: Correction> {
    pub forcing: Forcing,
    pub correction: C,
}

impl<C: Correction> Dynamics for Corrected<C> {
    fn tendency(&self, tape: &Tape, x: Var) -> Result<Var> {
        let base = tendency_one_level(tape, x, self.forcing)?;
        let corr = self.correction.apply(tape, x)?;
        if tape.shape(corr)? != tape.shape(x)? {
            return Err(Error::shape(
                "correction",
                format!("output {:?} vs state {:?}", tape.shape(corr)?, tape.shape(x)?),
            ));
        }
        tape.add(base, corr)
    }
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::BlowUp { step: 0, stage },
        e => e,
    }
}

/// Classical RK4 step recorded on the tape.
pub fn rk4_step<D: Dynamics + ?Sized>(tape: &Tape, dynamics: &D, x: Var, dt: f64) -> Result<Var> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt = {dt} must be positive")));
    }
    let half = 0.5 * dt;
    let k1 = dynamics.tendency(tape, x).map_err(stage_err("k1"))?;
    let x2 = tape.add(x, tape.scale(k1, half)?).map_err(stage_err("k1"))?;
    let k2 = dynamics.tendency(tape, x2).map_err(stage_err("k2"))?;
    let x3 = tape.add(x, tape.scale(k2, half)?).map_err(stage_err("k2"))?;
    let k3 = dynamics.tendency(tape, x3).map_err(stage_err("k3"))?;
    let x4 = tape.add(x, tape.scale(k3, dt)?).map_err(stage_err("k3"))?;
    let k4 = dynamics.tendency(tape, x4).map_err(stage_err("k4"))?;
    // same summation order as the slice path: ((k1 + 2k2) + 2k3) + k4
    let s = tape.add(k1, tape.scale(k2, 2.0)?).and_then(|s12| {
        let s123 = tape.add(s12, tape.scale(k3, 2.0)?)?;
        tape.add(s123, k4)
    });
    let s = s.map_err(stage_err("update"))?;
    tape.add(x, tape.scale(s, dt / 6.0)?).map_err(stage_err("update"))
}

/// `steps` RK4 steps from `x0`; returns all `steps + 1` states.
pub fn rollout<D: Dynamics + ?Sized>(
    tape: &Tape,
    dynamics: &D,
    x0: Var,
    steps: usize,
    dt: f64,
    blowup: f64,
) -> Result<Vec<Var>> {
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0);
    let mut x = x0;
    for i in 0..steps {
        x = rk4_step(tape, dynamics, x, dt).map_err(|e| match e {
            Error::BlowUp { stage, .. } => Error::BlowUp { step: i, stage },
            e => e,
        })?;
        if tape.value(x)?.max_abs() > blowup {
            return Err(Error::BlowUp {
                step: i,
                stage: "threshold",
            });
        }
        states.push(x);
    }
    Ok(states)
}
