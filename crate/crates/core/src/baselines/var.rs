use serde::{Deserialize, Serialize};

use crate::diffengine::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::l96::{diff, SimulatorConfig, Trajectory};
use crate::obs::ObservationSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarConfig {
    /// Steps per assimilation window; a window spans `window + 1` times.
    pub window: usize,
    pub max_iters: usize,
    /// Initial Adam step size, in state units.
    pub lr: f64,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
    /// Consecutive rejected steps tolerated before giving up.
    pub max_rejections: usize,
    /// Weight of the model-error terms (weak constraint only).
    pub alpha: f64,
    /// Steps between control states (weak constraint only).
    pub sub_window: usize,
    /// Value used for unobserved components of the very first guess.
    pub background_mean: f64,
}

impl Default for VarConfig {
    fn default() -> Self {
        VarConfig {
            window: 25,
            max_iters: 500,
            lr: 0.1,
            grad_tol: 1e-6,
            max_rejections: 10,
            alpha: 1.0,
            sub_window: 5,
            background_mean: 2.33,
        }
    }
}

impl VarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.sub_window == 0 {
            return Err(Error::Config("4DVar windows must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.alpha >= 0.0) || !(self.grad_tol >= 0.0) {
            return Err(Error::Config("4DVar lr must be positive, alpha and tolerance non-negative".into()));
        }
        Ok(())
    }
}

/// Optimized control states with the history of accepted loss values.
#[derive(Clone, Debug)]
pub struct VarResult {
    pub controls: Vec<Vec<f64>>,
    /// Loss at the first guess followed by every accepted iterate.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl VarResult {
    pub fn loss(&self) -> f64 {
        *self.losses.last().expect("initial loss is always recorded")
    }
}

type Objective<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a;

fn evaluate(f: &Objective<'_>, xs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let vars = xs
        .iter()
        .map(|x| tape.param(Array::vector(x.clone())))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let value = tape.item(loss)?;
    let grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(xs)
        .map(|(v, x)| grads.get(*v).map(|a| a.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "4dvar loss" });
    }
    Ok((value, g))
}

/// Adam with backtracking: a step that raises the loss (or fails
/// numerically) is rejected and the step size halved; accepted steps grow
/// it back towards `cfg.lr`. Accepted losses are therefore non-increasing.
fn minimize(f: &Objective<'_>, mut xs: Vec<Vec<f64>>, cfg: &VarConfig) -> Result<VarResult> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let (mut loss, mut grad) = evaluate(f, &xs)?;
    let mut losses = vec![loss];
    let mut m: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut v = m.clone();
    let mut t = 0i32;
    let mut lr = cfg.lr;
    let mut rejections = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let gnorm = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let (c1, c2) = (1.0 - B1.powi(t + 1), 1.0 - B2.powi(t + 1));
        let mut nm = m.clone();
        let mut nv = v.clone();
        let mut trial = xs.clone();
        for c in 0..xs.len() {
            for i in 0..xs[c].len() {
                let g = grad[c][i];
                nm[c][i] = B1 * m[c][i] + (1.0 - B1) * g;
                nv[c][i] = B2 * v[c][i] + (1.0 - B2) * g * g;
                trial[c][i] -= lr * (nm[c][i] / c1) / ((nv[c][i] / c2).sqrt() + EPS);
            }
        }
        match evaluate(f, &trial) {
            Ok((l, g)) if l <= loss => {
                xs = trial;
                loss = l;
                grad = g;
                m = nm;
                v = nv;
                t += 1;
                losses.push(l);
                rejections = 0;
                lr = (lr * 1.2).min(cfg.lr);
            }
            Ok(_) => rejections += 1,
            Err(e) if e.is_numerical() => rejections += 1,
            Err(e) => return Err(e),
        }
        if rejections > 0 {
            lr *= 0.5;
            if rejections >= cfg.max_rejections {
                if losses.len() == 1 {
                    return Err(Error::Divergence { iterations });
                }
                break;
            }
        }
    }
    Ok(VarResult {
        controls: xs,
        losses,
        iterations,
        converged,
    })
}

fn model(sim: &SimulatorConfig) -> diff::OneLevel {
    diff::OneLevel {
        forcing: diff::Forcing::Const(sim.forcing),
    }
}

fn data_term(tape: &Tape, states: &[Var], obs: &ObservationSet, t0: usize) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (i, s) in states.iter().enumerate() {
        let mask = obs.mask_at(t0 + i);
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let e = tape.masked_sq_err(*s, obs.values_at(t0 + i), mask)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, e)?,
            None => e,
        });
    }
    Ok(acc)
}

fn or_zero(tape: &Tape, v: Option<Var>) -> Result<Var> {
    match v {
        Some(v) => Ok(v),
        None => tape.scalar(0.0),
    }
}

/// Strong-constraint 4DVar: the initial state minimizing
/// `Σ_i ‖y_i - H M^i(x)‖²` over every time of `obs`, under the coarse
/// one-level model of `sim`.
pub fn hc4dvar(obs: &ObservationSet, sim: &SimulatorConfig, cfg: &VarConfig, first_guess: &[f64]) -> Result<VarResult> {
    cfg.validate()?;
    check_guess(obs, first_guess)?;
    let dyn_ = model(sim);
    let steps = obs.steps() - 1;
    let f = |tape: &Tape, xs: &[Var]| -> Result<Var> {
        let states = diff::rollout(tape, &dyn_, xs[0], steps, sim.dt, sim.blowup_threshold)?;
        or_zero(tape, data_term(tape, &states, obs, 0)?)
    };
    minimize(&f, vec![first_guess.to_vec()], cfg)
}

fn check_guess(obs: &ObservationSet, x: &[f64]) -> Result<()> {
    if obs.steps() == 0 {
        return Err(Error::Config("4DVar window has no times".into()));
    }
    if x.len() != obs.dim() {
        return Err(Error::shape("4dvar first guess", format!("{} vs {}", x.len(), obs.dim())));
    }
    Ok(())
}

/// Weak-constraint 4DVar with controls every `cfg.sub_window` steps.
///
/// `obs` must span `J·sub_window + 1` times. Control `j` explains the
/// observations of its own sub-window; the last one explains only the final
/// time. Consecutive controls are tied by `alpha·‖x_{j+1} - M^s(x_j)‖²`.
pub fn wc4dvar(obs: &ObservationSet, sim: &SimulatorConfig, cfg: &VarConfig, first_guess: &[Vec<f64>]) -> Result<VarResult> {
    cfg.validate()?;
    let s = cfg.sub_window;
    let steps = obs.steps().saturating_sub(1);
    if steps == 0 || steps % s != 0 {
        return Err(Error::Config(format!(
            "weak-constraint window of {steps} steps is not a multiple of sub-window {s}"
        )));
    }
    let j = steps / s;
    if first_guess.len() != j + 1 {
        return Err(Error::Config(format!("{} controls given, {} expected", first_guess.len(), j + 1)));
    }
    for g in first_guess {
        check_guess(obs, g)?;
    }
    let dyn_ = model(sim);
    let f = |tape: &Tape, xs: &[Var]| -> Result<Var> {
        let mut terms = Vec::new();
        for c in 0..j {
            let states = diff::rollout(tape, &dyn_, xs[c], s, sim.dt, sim.blowup_threshold)?;
            if let Some(d) = data_term(tape, &states[..s], obs, c * s)? {
                terms.push(d);
            }
            if cfg.alpha > 0.0 {
                terms.push(tape.scale(tape.sq_err(xs[c + 1], states[s])?, cfg.alpha)?);
            }
        }
        if let Some(d) = data_term(tape, &xs[j..], obs, steps)? {
            terms.push(d);
        }
        let mut acc = or_zero(tape, None)?;
        for t in terms {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    };
    minimize(&f, first_guess.to_vec(), cfg)
}

/// Model-error terms `‖x_{j+1} - M^s(x_j)‖²` of a set of controls (no `alpha`).
pub fn model_error_terms(controls: &[Vec<f64>], sim: &SimulatorConfig, sub_window: usize) -> Result<Vec<f64>> {
    let sim = sim.truncated();
    controls
        .windows(2)
        .map(|w| {
            let end = crate::l96::rollout_final(|x| sim.step(x), &w[0], sub_window, sim.blowup_threshold)?;
            Ok(end.iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum())
        })
        .collect()
}

/// Which 4DVar flavour [`var_series`] cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarMethod {
    Strong,
    Weak,
}

/// Trajectory implied by the controls over `steps + 1` times.
fn stitched(controls: &[Vec<f64>], sim: &SimulatorConfig, sub: usize, steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(steps + 1);
    for (c, x) in controls.iter().enumerate() {
        let n = if c + 1 == controls.len() { 0 } else { sub.min(steps - c * sub) };
        let traj = crate::l96::rollout(|v| sim.step(v), x, n, sim.dt, sim.blowup_threshold)?;
        let take = if c + 1 == controls.len() { 1 } else { n };
        out.extend((0..take).map(|i| traj.state(i).to_vec()));
    }
    Ok(out)
}

/// Cycled 4DVar over the whole record. Windows of `cfg.window` steps are
/// chained; each is started from the previous window's final state, and the
/// first from the observations with unobserved entries at
/// `cfg.background_mean`.
pub fn var_series(obs: &ObservationSet, sim: &SimulatorConfig, cfg: &VarConfig, method: VarMethod) -> Result<Trajectory> {
    cfg.validate()?;
    let sim = SimulatorConfig {
        k: obs.dim(),
        ..sim.truncated()
    };
    let total = obs.steps();
    let mut guess: Vec<f64> = obs
        .values_at(0)
        .iter()
        .zip(obs.mask_at(0))
        .map(|(&v, &m)| if m { v } else { cfg.background_mean })
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut t0 = 0;
    while t0 < total {
        let steps = cfg.window.min(total - 1 - t0);
        let win = obs.slice(t0, steps + 1)?;
        let states = match method {
            VarMethod::Weak if steps > 0 => {
                let sub = if steps % cfg.sub_window == 0 { cfg.sub_window } else { steps };
                let free = crate::l96::rollout(|v| sim.step(v), &guess, steps, sim.dt, sim.blowup_threshold)?;
                let init: Vec<Vec<f64>> = (0..=steps / sub).map(|c| free.state(c * sub).to_vec()).collect();
                let res = wc4dvar(&win, &sim, &VarConfig { sub_window: sub, ..cfg.clone() }, &init)?;
                stitched(&res.controls, &sim, sub, steps)?
            }
            _ => {
                let res = hc4dvar(&win, &sim, cfg, &guess)?;
                let traj = crate::l96::rollout(|v| sim.step(v), &res.controls[0], steps, sim.dt, sim.blowup_threshold)?;
                (0..=steps).map(|i| traj.state(i).to_vec()).collect()
            }
        };
        if t0 + steps + 1 >= total {
            rows.extend(states);
            break;
        }
        guess = states[steps].clone();
        rows.extend(states.into_iter().take(steps));
        t0 += steps;
    }
    Trajectory::from_rows(&rows, 0, obs.dt)
}
