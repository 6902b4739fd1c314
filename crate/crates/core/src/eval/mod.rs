//! Truth-based diagnostics: analysis errors, forecast skill, model rollouts
//! and the learned correction. Nothing here mutates its inputs.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{enks, optimal_interpolation, Climatology, EnKSConfig, OIConfig};
use crate::error::{Error, Result};
use crate::l96::{self, Mode, SimulatorConfig, Trajectory};
use crate::networks::{CorrectionNet, DaNet};
use crate::obs::{generate_twin_experiment, ObservationSet};
use crate::rng::derive_seed;

/// Fraction of the climatological RMSE that marks the end of skill.
pub const HORIZON_FRACTION: f64 = 0.95;

fn check_same(a: &Trajectory, b: &Trajectory, op: &'static str) -> Result<()> {
    if a.states.shape() != b.states.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.states.shape(), b.states.shape())));
    }
    Ok(())
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmseReport {
    pub rmse: f64,
    pub per_time: Vec<f64>,
}

/// RMSE over every variable and time, observed or not.
pub fn analysis_rmse(analysis: &Trajectory, truth: &Trajectory) -> Result<RmseReport> {
    check_same(analysis, truth, "analysis_rmse")?;
    let per_time: Vec<f64> = (0..analysis.len()).map(|t| rmse(analysis.state(t), truth.state(t))).collect();
    let n = analysis.states.len() as f64;
    let ss: f64 = analysis
        .states
        .data()
        .iter()
        .zip(truth.states.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(RmseReport {
        rmse: (ss / n).sqrt(),
        per_time,
    })
}

/// Empirical distribution of absolute errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCdf {
    /// Sorted absolute errors.
    pub errors: Vec<f64>,
}

impl ErrorCdf {
    /// Fraction of errors `<= x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.errors.partition_point(|&e| e <= x) as f64 / self.errors.len() as f64
    }

    /// Smallest error `e` with `cdf(e) >= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.errors.len();
        let i = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
        self.errors[i]
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// `error,cdf` at `points` evenly spaced errors up to the maximum.
    pub fn to_csv(&self, points: usize) -> String {
        let mut s = String::from("error,cdf\n");
        let max = *self.errors.last().unwrap_or(&0.0);
        for i in 0..=points {
            let x = max * i as f64 / points.max(1) as f64;
            let _ = writeln!(s, "{x:.17e},{:.17e}", self.cdf(x));
        }
        s
    }
}

pub fn error_cdf(analysis: &Trajectory, truth: &Trajectory) -> Result<ErrorCdf> {
    check_same(analysis, truth, "error_cdf")?;
    let mut errors: Vec<f64> = analysis
        .states
        .data()
        .iter()
        .zip(truth.states.data())
        .map(|(x, y)| (x - y).abs())
        .collect();
    if errors.is_empty() {
        return Err(Error::shape("error_cdf", "empty trajectories"));
    }
    errors.sort_by(f64::total_cmp);
    Ok(ErrorCdf { errors })
}

/// Forecast RMSE statistics across trials.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillCurve {
    pub lead_times: Vec<f64>,
    pub mean: Vec<f64>,
    /// Population standard deviation across trials.
    pub std: Vec<f64>,
    pub n_trials: usize,
    /// Trials dropped after a blow-up.
    pub failed: usize,
}

impl SkillCurve {
    /// Aggregates per-trial curves sampled at `lead_times`.
    pub fn from_trials(lead_times: Vec<f64>, trials: &[Vec<f64>], failed: usize) -> Result<SkillCurve> {
        if trials.is_empty() {
            return Err(Error::NonFinite { op: "skill curve (every trial failed)" });
        }
        let n = trials.len() as f64;
        let mut mean = vec![0.0; lead_times.len()];
        let mut std = vec![0.0; lead_times.len()];
        for (i, (m, s)) in mean.iter_mut().zip(&mut std).enumerate() {
            *m = trials.iter().map(|c| c[i]).sum::<f64>() / n;
            *s = (trials.iter().map(|c| (c[i] - *m).powi(2)).sum::<f64>() / n).sqrt();
        }
        Ok(SkillCurve {
            lead_times,
            mean,
            std,
            n_trials: trials.len(),
            failed,
        })
    }

    /// First lead time with mean RMSE `>= threshold`, if any.
    pub fn first_crossing(&self, threshold: f64) -> Option<f64> {
        self.mean.iter().position(|&m| m >= threshold).map(|i| self.lead_times[i])
    }

    /// Skill horizon against a climatological RMSE.
    pub fn horizon(&self, climatology_rmse: f64) -> Option<f64> {
        self.first_crossing(HORIZON_FRACTION * climatology_rmse)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lead_time,mean,std,n\n");
        for i in 0..self.lead_times.len() {
            let _ = writeln!(
                s,
                "{:.17e},{:.17e},{:.17e},{}",
                self.lead_times[i], self.mean[i], self.std[i], self.n_trials
            );
        }
        s
    }
}

/// Runs `f` for trials `0..n` on up to `jobs` threads; results keep trial
/// order so the outcome does not depend on `jobs`.
pub fn run_trials<T, F>(n: usize, jobs: usize, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let mut out: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        for (j, slots) in out.chunks_mut(n.div_ceil(jobs)).enumerate() {
            let f = &f;
            let base = j * n.div_ceil(jobs);
            s.spawn(move || {
                for (i, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(base + i));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every trial ran")).collect()
}

/// Splits trial results into successes and a count of numerical failures;
/// any other error is returned.
fn collect_trials<T>(results: Vec<Result<T>>) -> Result<(Vec<T>, usize)> {
    let mut ok = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) if e.is_numerical() => {
                log::warn!("trial dropped: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((ok, failed))
}

/// How forecasts are initialized at the last observation time.
#[derive(Clone, Copy, Debug)]
pub enum InitMethod<'a> {
    Oi(&'a OIConfig),
    Enks(&'a EnKSConfig),
    Coda(&'a DaNet),
    Truth,
    ClimatologyDraw(&'a Climatology),
}

impl InitMethod<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            InitMethod::Oi(_) => "oi",
            InitMethod::Enks(_) => "enks",
            InitMethod::Coda(_) => "coda",
            InitMethod::Truth => "truth",
            InitMethod::ClimatologyDraw(_) => "climatology-draw",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSetup {
    /// Observed time points before the forecast starts.
    pub obs_steps: usize,
    pub miss_fraction: f64,
    pub sigma: f64,
    /// Forecast length in steps.
    pub lead_steps: usize,
    /// RMSE is recorded every `stride` steps.
    pub stride: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for ForecastSetup {
    fn default() -> Self {
        ForecastSetup {
            obs_steps: 200,
            miss_fraction: 0.75,
            sigma: 1.0,
            lead_steps: 800,
            stride: 10,
            n_trials: 100,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Coarse state at the last observation time from a trained DA network:
/// the analysis of the last full window, advanced `W - 1` steps by `step`.
pub fn coda_final_state<S>(danet: &DaNet, obs: &ObservationSet, step: S, blowup: f64) -> Result<Vec<f64>>
where
    S: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let w = danet.config.window_len;
    if obs.steps() < w {
        return Err(Error::shape("coda_final_state", format!("{} steps < window {w}", obs.steps())));
    }
    let input = danet.window_input(obs, &[obs.steps() - w])?;
    let x = danet.predict(&input)?;
    l96::rollout_final(step, x.row(0), w - 1, blowup)
}

/// State estimate at the last observation time from `method`.
pub fn initial_state(method: &InitMethod<'_>, sim: &SimulatorConfig, obs: &ObservationSet, truth_last: &[f64], seed: u64) -> Result<Vec<f64>> {
    let last = obs.steps() - 1;
    Ok(match method {
        InitMethod::Truth => truth_last.to_vec(),
        InitMethod::ClimatologyDraw(c) => c.draw(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "draw"))),
        InitMethod::Oi(cfg) => optimal_interpolation(obs, cfg)?.state(last).to_vec(),
        InitMethod::Enks(cfg) => {
            let cfg = EnKSConfig {
                seed: derive_seed(seed, "enks"),
                ..(*cfg).clone()
            };
            enks(obs, sim, &cfg)?.mean.state(last).to_vec()
        }
        InitMethod::Coda(net) => {
            let model = sim.truncated();
            coda_final_state(net, obs, |x| model.step(x), sim.blowup_threshold)?
        }
    })
}

fn lead_times(lead_steps: usize, stride: usize, dt: f64) -> Vec<f64> {
    (0..=lead_steps / stride).map(|i| (i * stride) as f64 * dt).collect()
}

/// One trial: a fresh twin experiment, assimilation, and a free forecast
/// with the true model compared with the continued truth.
pub fn forecast_trial(method: &InitMethod<'_>, sim: &SimulatorConfig, setup: &ForecastSetup, trial: usize) -> Result<Vec<f64>> {
    let seed = derive_seed(setup.seed, &format!("trial{trial}"));
    let exp = generate_twin_experiment(sim, setup.obs_steps, setup.miss_fraction, setup.sigma, seed)?;
    let truth_last = exp.truth.last().to_vec();
    let x0 = initial_state(method, sim, &exp.obs, &truth_last, seed)?;
    let step = |x: &[f64]| sim.step(x);
    let fc = l96::rollout(step, &x0, setup.lead_steps, sim.dt, sim.blowup_threshold)?;
    let tr = l96::rollout(step, &truth_last, setup.lead_steps, sim.dt, sim.blowup_threshold)?;
    Ok((0..=setup.lead_steps / setup.stride)
        .map(|i| rmse(fc.state(i * setup.stride), tr.state(i * setup.stride)))
        .collect())
}

/// Forecast RMSE against lead time over independent trials.
pub fn forecast_skill(method: &InitMethod<'_>, sim: &SimulatorConfig, setup: &ForecastSetup) -> Result<SkillCurve> {
    if sim.mode != Mode::OneLevel {
        return Err(Error::Config("forecast skill needs a one-level simulator".into()));
    }
    if setup.n_trials == 0 || setup.stride == 0 {
        return Err(Error::Config("forecast skill needs n_trials >= 1 and stride >= 1".into()));
    }
    let results = run_trials(setup.n_trials, setup.jobs, |i| forecast_trial(method, sim, setup, i));
    let (curves, failed) = collect_trials(results)?;
    SkillCurve::from_trials(lead_times(setup.lead_steps, setup.stride, sim.dt), &curves, failed)
}

/// Plain RK4 step of the one-level model in `sim` plus a correction term.
pub fn corrected_step<'a, B>(sim: &'a SimulatorConfig, correction: B) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a
where
    B: Fn(&[f64]) -> Result<Vec<f64>> + 'a,
{
    move |x: &[f64]| {
        l96::rk4_step(
            |v| {
                let mut f = l96::tendency_one_level(v, sim.forcing)?;
                for (fi, bi) in f.iter_mut().zip(correction(v)?) {
                    *fi += bi;
                }
                Ok(f)
            },
            x,
            sim.dt,
        )
    }
}

/// A coarse model step that may look at the trial's two-level truth and the
/// step index (used to replay the true coupling).
pub type CoarseModel<'a> = dyn Fn(&Trajectory, usize, &[f64]) -> Result<Vec<f64>> + Sync + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSetup {
    pub n_trials: usize,
    pub lead_steps: usize,
    pub stride: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RolloutSetup {
    fn default() -> Self {
        RolloutSetup {
            n_trials: 100,
            lead_steps: 800,
            stride: 10,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutComparison {
    pub corrected: SkillCurve,
    pub truncated: SkillCurve,
}

/// Coarse rollouts of `corrected` and of the truncated one-level model
/// against the two-level truth, from shared attractor states.
pub fn rollout_comparison(sim2: &SimulatorConfig, corrected: &CoarseModel<'_>, setup: &RolloutSetup) -> Result<RolloutComparison> {
    if sim2.mode != Mode::TwoLevel {
        return Err(Error::Config("rollout comparison needs a two-level reference".into()));
    }
    if setup.n_trials == 0 || setup.stride == 0 {
        return Err(Error::Config("rollout comparison needs n_trials >= 1 and stride >= 1".into()));
    }
    let trunc = sim2.truncated();
    let k = sim2.k;
    let results = run_trials(setup.n_trials, setup.jobs, |i| {
        let x0 = l96::sample_attractor(sim2, derive_seed(setup.seed, &format!("trial{i}")), l96::DEFAULT_BURN_IN)?;
        let truth = l96::rollout(|v| sim2.step(v), &x0, setup.lead_steps, sim2.dt, sim2.blowup_threshold)?;
        let coarse = truth.columns(k);
        let curve = |traj: &Trajectory| -> Vec<f64> {
            (0..=setup.lead_steps / setup.stride)
                .map(|j| rmse(traj.state(j * setup.stride), coarse.state(j * setup.stride)))
                .collect()
        };
        let t = l96::rollout(|v| trunc.step(v), coarse.state(0), setup.lead_steps, sim2.dt, sim2.blowup_threshold)?;
        let mut rows = vec![coarse.state(0).to_vec()];
        for s in 0..setup.lead_steps {
            let next = corrected(&truth, s, &rows[s])?;
            if next.iter().any(|v| !v.is_finite() || v.abs() > sim2.blowup_threshold) {
                return Err(Error::BlowUp { step: s, stage: "corrected rollout" });
            }
            rows.push(next);
        }
        let c = Trajectory::from_rows(&rows, 0, sim2.dt)?;
        Ok((curve(&c), curve(&t)))
    });
    let (pairs, failed) = collect_trials(results)?;
    let (cs, ts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let leads = lead_times(setup.lead_steps, setup.stride, sim2.dt);
    Ok(RolloutComparison {
        corrected: SkillCurve::from_trials(leads.clone(), &cs, failed)?,
        truncated: SkillCurve::from_trials(leads, &ts, failed)?,
    })
}

/// Minimum samples for a bin to be reported.
pub const MIN_BIN_SAMPLES: usize = 10;

/// Learned correction against the true coupling, all on one grid of bin
/// centres. `None` marks bins with too few samples.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionDiagnostics {
    pub grid: Vec<f64>,
    /// `(x, true coupling)` pairs, thinned.
    pub scatter: Vec<(f64, f64)>,
    pub true_mean: Vec<Option<f64>>,
    pub learned: Vec<f64>,
    /// `E[B(x̃) | x]` with `x̃` the analysis and `x` the truth.
    pub learned_on_analysis: Vec<Option<f64>>,
}

fn binned_mean(pairs: impl Iterator<Item = (f64, f64)>, lo: f64, width: f64, bins: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; bins];
    let mut cnt = vec![0usize; bins];
    for (x, y) in pairs {
        let b = (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        sum[b] += y;
        cnt[b] += 1;
    }
    sum.iter()
        .zip(&cnt)
        .map(|(s, &c)| (c >= MIN_BIN_SAMPLES).then(|| s / c as f64))
        .collect()
}

impl CorrectionDiagnostics {
    /// Pearson correlation of the learned curve with the true conditional
    /// mean over non-empty bins.
    pub fn correlation(&self) -> Option<f64> {
        let pairs: Vec<(f64, f64)> = self
            .true_mean
            .iter()
            .zip(&self.learned)
            .filter_map(|(t, l)| t.map(|t| (t, *l)))
            .collect();
        pearson(&pairs)
    }

    /// RMS of `learned_on_analysis - learned` over non-empty bins, relative
    /// to the RMS of the learned curve.
    pub fn analysis_gap(&self) -> Option<f64> {
        let d: Vec<(f64, f64)> = self
            .learned_on_analysis
            .iter()
            .zip(&self.learned)
            .filter_map(|(a, l)| a.map(|a| (a, *l)))
            .collect();
        if d.is_empty() {
            return None;
        }
        let num = d.iter().map(|(a, l)| (a - l).powi(2)).sum::<f64>();
        let den = d.iter().map(|(_, l)| l * l).sum::<f64>();
        (den > 0.0).then(|| (num / den).sqrt())
    }

    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        let mut s = String::from("x,true_mean,learned,learned_on_analysis\n");
        for i in 0..self.grid.len() {
            let _ = writeln!(
                s,
                "{:.17e},{},{:.17e},{}",
                self.grid[i],
                o(self.true_mean[i]),
                self.learned[i],
                o(self.learned_on_analysis[i])
            );
        }
        s
    }
}

pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let (mx, my) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Diagnostics of `correction` against a coarse reference run `truth` with
/// its true `coupling`. When `analysis` is given (rows aligned with the
/// first rows of `truth`), `E[B(x̃)|x]` is also computed.
pub fn correction_diagnostics(
    correction: &CorrectionNet,
    truth: &Trajectory,
    coupling: &Trajectory,
    analysis: Option<&Trajectory>,
    bins: usize,
) -> Result<CorrectionDiagnostics> {
    check_same(truth, coupling, "correction_diagnostics")?;
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let xs = truth.states.data();
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let grid: Vec<f64> = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    let pairs = || xs.iter().copied().zip(coupling.states.data().iter().copied());
    let true_mean = binned_mean(pairs(), lo, width, bins);
    let mut learned = correction.eval(&grid)?;
    learned.truncate(bins);
    let learned_on_analysis = match analysis {
        Some(a) => {
            let t = truth.window(0, a.len())?;
            check_same(a, &t, "correction_diagnostics analysis")?;
            let mut b = Vec::with_capacity(a.states.len());
            for i in 0..a.len() {
                b.extend(correction.eval(a.state(i))?);
            }
            binned_mean(t.states.data().iter().copied().zip(b), lo, width, bins)
        }
        None => vec![None; bins],
    };
    let thin = (xs.len() / 5000).max(1);
    let scatter = pairs().step_by(thin).collect();
    Ok(CorrectionDiagnostics {
        grid,
        scatter,
        true_mean,
        learned,
        learned_on_analysis,
    })
}
