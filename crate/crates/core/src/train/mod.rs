//! The joint assimilation/dynamics objective and its training loop.
//!
//! For an anchor `t` the loss is
//!
//! ```text
//! x̂_t     = g(y_{t..t+W-1})
//! data    = Σ_{i=0..w} Σ_k mask·(y_{t+i} - M^i(x̂_t))²
//! model   = α ‖g(y_{t+w..t+w+W-1}) - M^w(x̂_t)‖²
//! ```
//!
//! averaged over a minibatch of anchors.

mod adam;
pub mod check;
mod metrics;

use std::path::Path;

use log::{debug, info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Array, BatchStats, GradientMap, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::l96::diff::{rollout, Corrected, Dynamics, Forcing, OneLevel};
use crate::l96::{SimulatorConfig, Trajectory};
use crate::networks::{bind, save_bundle, Bound, CorrectionConfig, CorrectionNet, DaNet, Unet15Config};
use crate::obs::ObservationSet;
use crate::rng::{derive_seed, substream, CounterRng};

pub use adam::{Adam, AdamConfig};
pub use metrics::{MetricLog, MetricRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Assimilation network only, known dynamics.
    Da,
    /// Assimilation network and the forcing `F` jointly.
    Tune,
    /// Truncated-model phase, then assimilation and correction jointly.
    Correct,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "da" => Ok(Task::Da),
            "tune" => Ok(Task::Tune),
            "correct" => Ok(Task::Correct),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Rollout length `w`.
    pub rollout_len: usize,
    /// Network window `W`.
    pub window_len: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the forcing optimizer (`tune`).
    pub forcing_lr: f64,
    pub total_steps: usize,
    pub task: Task,
    pub stop_grad_target: bool,
    /// Truncated-model steps before the correction network joins (`correct`).
    pub phase1_steps: usize,
    /// Interval the initial forcing is drawn from (`tune`).
    pub forcing_init: [f64; 2],
    /// Analysis RMSE against truth every this many steps (0 = never).
    pub eval_every: usize,
    /// Checkpoint interval (0 = only the final state).
    pub checkpoint_every: usize,
    /// Consecutive skipped steps tolerated before giving up.
    pub max_skipped: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            rollout_len: 25,
            window_len: 25,
            alpha: 1.0,
            batch_size: 32,
            lr: 1e-3,
            forcing_lr: 1e-3,
            total_steps: 20_000,
            task: Task::Da,
            stop_grad_target: false,
            phase1_steps: 10_000,
            forcing_init: [4.0, 12.0],
            eval_every: 500,
            checkpoint_every: 0,
            max_skipped: 100,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollout_len < 1 || self.window_len < 1 || self.batch_size < 1 {
            return Err(Error::Config("w, W and batch size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) || !(self.lr > 0.0) || !(self.forcing_lr > 0.0) {
            return Err(Error::Config(format!("alpha {} / lr {}", self.alpha, self.lr)));
        }
        if self.task == Task::Correct && self.phase1_steps > self.total_steps {
            return Err(Error::Config("phase1_steps exceeds total_steps".into()));
        }
        if !(self.forcing_init[0] <= self.forcing_init[1]) {
            return Err(Error::Config("forcing_init must be an interval".into()));
        }
        Ok(())
    }

    /// Number of valid anchors `0..=T - w - W`.
    pub fn anchor_count(&self, steps: usize) -> Result<usize> {
        let need = self.rollout_len + self.window_len;
        if steps < need {
            return Err(Error::Config(format!(
                "{steps} observation steps, need at least w + W = {need}"
            )));
        }
        Ok(steps - need + 1)
    }
}

/// Minibatch of anchors drawn uniformly from `0..=T - w - W`; the draw for
/// `(seed, step, element)` does not depend on any other draw.
pub fn sample_batch(steps: usize, cfg: &TrainingConfig, step: u64) -> Result<Vec<usize>> {
    let n = cfg.anchor_count(steps)?;
    let r = CounterRng::new(cfg.seed, "batch");
    Ok((0..cfg.batch_size)
        .map(|b| ((r.uniform(step, b as u64) * n as f64) as usize).min(n - 1))
        .collect())
}

/// Loss terms as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub data: Var,
    pub model: Var,
}

/// Batch-averaged objective for `anchors`, with `dynamics` as the forward
/// model. Returns the terms and any train-mode batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn coda_loss(
    tape: &Tape,
    danet: &DaNet,
    p: &Bound,
    obs: &ObservationSet,
    anchors: &[usize],
    dynamics: &dyn Dynamics,
    sim: &SimulatorConfig,
    cfg: &TrainingConfig,
    mode: NormMode,
) -> Result<(LossTerms, Vec<(String, BatchStats)>)> {
    let (w, ww) = (cfg.rollout_len, cfg.window_len);
    if danet.config.window_len != ww || danet.config.k != obs.dim() {
        return Err(Error::Config(format!(
            "network window {} / K {} vs training W {ww} / data K {}",
            danet.config.window_len,
            danet.config.k,
            obs.dim()
        )));
    }
    let b = anchors.len();
    if b == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    for &t in anchors {
        if t + w + ww > obs.steps() {
            return Err(Error::Config(format!(
                "anchor {t}: observations end at {}, need {}",
                obs.steps(),
                t + w + ww
            )));
        }
    }
    let mut all: Vec<usize> = anchors.to_vec();
    let use_model = cfg.alpha > 0.0;
    if use_model {
        all.extend(anchors.iter().map(|t| t + w));
    }
    let input = tape.constant(danet.window_input(obs, &all)?)?;
    let (est, stats) = danet.forward(tape, p, input, mode)?;
    let (x_hat, shifted) = if use_model {
        (tape.slice(est, 0, 0, b)?, Some(tape.slice(est, 0, b, b)?))
    } else {
        (est, None)
    };
    let terms = coda_terms(tape, x_hat, shifted, obs, anchors, dynamics, sim, cfg)?;
    Ok((terms, stats))
}

/// The objective given the estimates: `x_hat` is `[B, K]` at the anchors,
/// `shifted` the estimates `w` steps later (required when `alpha > 0`).
#[allow(clippy::too_many_arguments)]
pub fn coda_terms(
    tape: &Tape,
    x_hat: Var,
    shifted: Option<Var>,
    obs: &ObservationSet,
    anchors: &[usize],
    dynamics: &dyn Dynamics,
    sim: &SimulatorConfig,
    cfg: &TrainingConfig,
) -> Result<LossTerms> {
    let w = cfg.rollout_len;
    let b = anchors.len();
    let k = obs.dim();
    if tape.shape(x_hat)? != [b, k] {
        return Err(Error::shape("coda loss", format!("estimates {:?} for {b} anchors", tape.shape(x_hat)?)));
    }
    let states = rollout(tape, dynamics, x_hat, w, sim.dt, sim.blowup_threshold).map_err(|e| {
        warn!("rollout failed for anchors {anchors:?}: {e}");
        e
    })?;
    let mut data = tape.scalar(0.0)?;
    let mut target = vec![0.0; b * k];
    let mut mask = vec![false; b * k];
    for (i, s) in states.iter().enumerate() {
        for (n, &t) in anchors.iter().enumerate() {
            target[n * k..(n + 1) * k].copy_from_slice(obs.values_at(t + i));
            mask[n * k..(n + 1) * k].copy_from_slice(obs.mask_at(t + i));
        }
        data = tape.add(data, tape.masked_sq_err(*s, &target, &mask)?)?;
    }
    let data = tape.scale(data, 1.0 / b as f64)?;
    if cfg.alpha > 0.0 {
        let mut shifted = shifted.ok_or_else(|| Error::Config("alpha > 0 needs the shifted estimates".into()))?;
        if cfg.stop_grad_target {
            shifted = tape.detach(shifted)?;
        }
        let model = tape.scale(tape.sq_err(shifted, states[w])?, cfg.alpha / b as f64)?;
        Ok(LossTerms {
            total: tape.add(data, model)?,
            data,
            model,
        })
    } else {
        Ok(LossTerms {
            total: data,
            data,
            model: tape.scalar(0.0)?,
        })
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub danet: DaNet,
    pub correction: Option<CorrectionNet>,
    /// Forcing under optimization (`tune`).
    pub forcing: Option<f64>,
    pub adam: Adam,
    pub step: usize,
}

/// Which model the rollouts use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Known or truncated dynamics.
    Fixed,
    /// Forcing as a trainable parameter.
    Tuned,
    /// Truncated dynamics plus the correction network.
    Corrected,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Fixed => "fixed",
            Phase::Tuned => "tuned",
            Phase::Corrected => "corrected",
        }
    }
}

const DA: &str = "da/";
const CORR: &str = "corr/";
const THETA: &str = "theta/forcing";

struct Leaves {
    da: Bound,
    corr: Option<Bound>,
    forcing: Option<Var>,
}

/// One optimizer step on `anchors`. Non-finite losses or gradients leave
/// the state untouched and return a record flagged as skipped.
pub fn train_step(
    state: &mut TrainState,
    obs: &ObservationSet,
    anchors: &[usize],
    sim: &SimulatorConfig,
    cfg: &TrainingConfig,
    phase: Phase,
) -> Result<MetricRecord> {
    let tape = Tape::new();
    let leaves = Leaves {
        da: bind(&tape, &state.danet.params)?,
        corr: match (phase, &state.correction) {
            (Phase::Corrected, Some(c)) => Some(bind(&tape, &c.params)?),
            (Phase::Corrected, None) => return Err(Error::Config("corrected phase without a correction net".into())),
            _ => None,
        },
        forcing: match (phase, state.forcing) {
            (Phase::Tuned, Some(f)) => Some(tape.param(Array::scalar(f))?),
            (Phase::Tuned, None) => return Err(Error::Config("tuned phase without a forcing value".into())),
            _ => None,
        },
    };
    let mut record = MetricRecord {
        step: state.step,
        phase: phase.label().into(),
        forcing: state.forcing,
        ..MetricRecord::default()
    };
    let result = (|| {
        let (terms, stats) = match (&leaves.corr, leaves.forcing) {
            (Some(cp), _) => {
                let net = state.correction.as_ref().expect("checked above");
                let dynamics = Corrected {
                    forcing: Forcing::Const(sim.forcing),
                    correction: |t: &Tape, x: Var| net.forward(t, cp, x),
                };
                coda_loss(&tape, &state.danet, &leaves.da, obs, anchors, &dynamics, sim, cfg, NormMode::Train)?
            }
            (None, Some(f)) => {
                let dynamics = OneLevel {
                    forcing: Forcing::Var(tape.reshape(f, &[])?),
                };
                coda_loss(&tape, &state.danet, &leaves.da, obs, anchors, &dynamics, sim, cfg, NormMode::Train)?
            }
            (None, None) => {
                let dynamics = OneLevel {
                    forcing: Forcing::Const(sim.forcing),
                };
                coda_loss(&tape, &state.danet, &leaves.da, obs, anchors, &dynamics, sim, cfg, NormMode::Train)?
            }
        };
        let values = (tape.item(terms.total)?, tape.item(terms.data)?, tape.item(terms.model)?);
        Ok::<_, Error>((terms, stats, values))
    })();
    let (terms, stats, (total, data, model)) = match result {
        Ok(v) => v,
        Err(e) if e.is_numerical() => {
            warn!("step {} skipped: {e}", state.step);
            record.skipped = true;
            state.step += 1;
            return Ok(record);
        }
        Err(e) => return Err(e),
    };
    record.total = total;
    record.data = data;
    record.model = model;
    let grads = match tape.backward(terms.total) {
        Ok(g) if g.arrays().all(|a| a.is_finite()) => g,
        Ok(_) | Err(Error::NonFinite { .. }) => {
            warn!("step {} skipped: non-finite gradient", state.step);
            record.skipped = true;
            state.step += 1;
            return Ok(record);
        }
        Err(e) => return Err(e),
    };
    apply_update(state, &leaves, &grads, cfg.forcing_lr)?;
    state.danet.update_running(&stats);
    state.step += 1;
    Ok(record)
}

fn apply_update(state: &mut TrainState, leaves: &Leaves, grads: &GradientMap, forcing_lr: f64) -> Result<()> {
    let grad = |v: Var| {
        grads
            .get(v)
            .cloned()
            .ok_or_else(|| Error::Config("missing gradient".into()))
    };
    state.adam.begin_step();
    for (name, v) in &leaves.da {
        let g = grad(*v)?;
        let p = state.danet.params.get_mut(name).expect("bound from params");
        state.adam.update(&format!("{DA}{name}"), p, &g)?;
    }
    if let (Some(cp), Some(net)) = (&leaves.corr, state.correction.as_mut()) {
        for (name, v) in cp {
            let g = grad(*v)?;
            let p = net.params.get_mut(name).expect("bound from params");
            state.adam.update(&format!("{CORR}{name}"), p, &g)?;
        }
    }
    if let (Some(fv), Some(f)) = (leaves.forcing, state.forcing.as_mut()) {
        let g = grad(fv)?;
        let mut a = Array::scalar(*f);
        state.adam.update_with_lr(THETA, &mut a, &g, forcing_lr)?;
        *f = a.item();
    }
    Ok(())
}

/// Analysis states at anchors `0..=T-W` from the current network.
pub fn analysis(danet: &DaNet, obs: &ObservationSet) -> Result<Trajectory> {
    let rows = danet.analysis(obs)?;
    Trajectory::from_rows(&rows, 0, obs.dt)
}

/// RMSE of the analysis against the matching truth rows.
pub fn analysis_rmse_against(danet: &DaNet, obs: &ObservationSet, truth: &Trajectory) -> Result<f64> {
    let a = analysis(danet, obs)?;
    let t = truth.window(0, a.len())?;
    let mut s = 0.0;
    for (x, y) in a.states.data().iter().zip(t.states.data()) {
        s += (x - y) * (x - y);
    }
    Ok((s / a.states.len() as f64).sqrt())
}

/// Network configurations for a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub danet: Unet15Config,
    pub correction: CorrectionConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: MetricLog,
    /// Analysis RMSE at the end of phase 1 (`correct` only, needs truth).
    pub phase1_rmse: Option<f64>,
}

/// Fresh state: networks initialized from `cfg.seed`, value normalization
/// taken from the observations, forcing drawn from `forcing_init` for `tune`.
pub fn init_state(obs: &ObservationSet, nets: &NetworkConfig, cfg: &TrainingConfig) -> Result<TrainState> {
    cfg.validate()?;
    let ucfg = Unet15Config {
        window_len: cfg.window_len,
        k: obs.dim(),
        ..nets.danet.clone()
    }
    .with_value_stats(obs);
    let danet = DaNet::init(ucfg, derive_seed(cfg.seed, "init"))?;
    let correction = match cfg.task {
        Task::Correct => Some(CorrectionNet::init(nets.correction.clone(), derive_seed(cfg.seed, "init"))?),
        _ => None,
    };
    let forcing = match cfg.task {
        Task::Tune => {
            let [lo, hi] = cfg.forcing_init;
            let mut r = substream(cfg.seed, "theta");
            Some(if hi > lo { r.random_range(lo..hi) } else { lo })
        }
        _ => None,
    };
    Ok(TrainState {
        danet,
        correction,
        forcing,
        adam: Adam::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        }),
        step: 0,
    })
}

/// Runs the configured task. `truth` only feeds diagnostics; `out`, when
/// given, receives checkpoints and the metric log.
pub fn train(
    obs: &ObservationSet,
    truth: Option<&Trajectory>,
    sim: &SimulatorConfig,
    nets: &NetworkConfig,
    cfg: &TrainingConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut state = init_state(obs, nets, cfg)?;
    continue_training(&mut state, obs, truth, sim, cfg, out)
}

/// Trains from an existing state until `cfg.total_steps`.
pub fn continue_training(
    state: &mut TrainState,
    obs: &ObservationSet,
    truth: Option<&Trajectory>,
    sim: &SimulatorConfig,
    cfg: &TrainingConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.anchor_count(obs.steps())?;
    let mut log = MetricLog::default();
    let mut skipped_run = 0;
    let mut phase1_rmse = None;
    info!(
        "training task {:?}: {} steps, batch {}, w {}, W {}, alpha {}",
        cfg.task, cfg.total_steps, cfg.batch_size, cfg.rollout_len, cfg.window_len, cfg.alpha
    );
    while state.step < cfg.total_steps {
        let phase = match cfg.task {
            Task::Da => Phase::Fixed,
            Task::Tune => Phase::Tuned,
            Task::Correct if state.step < cfg.phase1_steps => Phase::Fixed,
            Task::Correct => Phase::Corrected,
        };
        if cfg.task == Task::Correct && state.step == cfg.phase1_steps {
            if let Some(t) = truth {
                phase1_rmse = Some(analysis_rmse_against(&state.danet, obs, t)?);
            }
            info!("phase 2 begins at step {}", state.step);
        }
        let anchors = sample_batch(obs.steps(), cfg, state.step as u64)?;
        let mut rec = train_step(state, obs, &anchors, sim, cfg, phase)?;
        if rec.skipped {
            skipped_run += 1;
            if skipped_run > cfg.max_skipped {
                return Err(Error::NonFinite { op: "training (too many skipped steps)" });
            }
        } else {
            skipped_run = 0;
        }
        let done = state.step == cfg.total_steps;
        if let Some(t) = truth {
            if (cfg.eval_every > 0 && state.step % cfg.eval_every == 0) || done {
                rec.rmse = Some(analysis_rmse_against(&state.danet, obs, t)?);
            }
        }
        rec.forcing = state.forcing;
        if rec.step % 100 == 0 || rec.rmse.is_some() {
            debug!(
                "step {} total {:.4} data {:.4} model {:.4} rmse {:?} F {:?}",
                rec.step, rec.total, rec.data, rec.model, rec.rmse, rec.forcing
            );
        }
        log.records.push(rec);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && !done {
                save_checkpoint(&dir.join("checkpoints").join(format!("step_{:06}", state.step)), state)?;
            }
        }
    }
    if cfg.task == Task::Correct && cfg.phase1_steps == cfg.total_steps {
        if let Some(t) = truth {
            phase1_rmse = Some(analysis_rmse_against(&state.danet, obs, t)?);
        }
    }
    if let Some(dir) = out {
        save_checkpoint(dir, state)?;
        log.write_csv(&dir.join("metrics.csv"))?;
    }
    Ok(TrainOutcome {
        state: state.clone(),
        log,
        phase1_rmse,
    })
}

/// Writes `danet/`, `correction/` and `theta.json` under `dir`.
pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    save_bundle(&dir.join("danet"), &state.danet.to_bundle()?)?;
    if let Some(c) = &state.correction {
        save_bundle(&dir.join("correction"), &c.to_bundle()?)?;
    }
    let theta = serde_json::json!({ "forcing": state.forcing, "step": state.step });
    crate::obs::af1::write_bytes(&dir.join("theta.json"), &serde_json::to_vec_pretty(&theta)?)
}

/// Trained networks and forcing as written by [`save_checkpoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub danet: DaNet,
    pub correction: Option<CorrectionNet>,
    pub forcing: Option<f64>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let danet = DaNet::from_bundle(&crate::networks::load_bundle(&dir.join("danet"))?)?;
    let cdir = dir.join("correction");
    let correction = if cdir.exists() {
        Some(CorrectionNet::from_bundle(&crate::networks::load_bundle(&cdir)?)?)
    } else {
        None
    };
    let tpath = dir.join("theta.json");
    let forcing = if tpath.exists() {
        let bytes = std::fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let v: serde_json::Value = serde_json::from_slice(&bytes)?;
        v.get("forcing").and_then(|f| f.as_f64())
    } else {
        None
    };
    Ok(Checkpoint {
        danet,
        correction,
        forcing,
    })
}
