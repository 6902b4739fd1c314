//! The `coda` command line: subcommands composing the library into
//! reproducible runs. Every run writes its resolved config, artifacts and a
//! manifest of input and output hashes into `--out`.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::baselines::{enks, optimal_interpolation, var_series, Climatology, VarMethod};
use crate::error::Error;
use crate::eval::{self, ForecastSetup, InitMethod, RolloutSetup};
use crate::l96::{Mode, Trajectory};
use crate::obs::{self, af1};
use crate::rng::derive_seed;
use crate::train::{self, check, Task};

pub use config::{resolve, ExperimentConfig, System};
pub use manifest::{read_manifest, BundleManifest, CONFIG_FILE, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Oi,
    Enks,
    Hc4dvar,
    Wc4dvar,
    Coda,
    Truth,
    #[value(name = "climatology-draw")]
    ClimatologyDraw,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Oi => "oi",
            Method::Enks => "enks",
            Method::Hc4dvar => "hc4dvar",
            Method::Wc4dvar => "wc4dvar",
            Method::Coda => "coda",
            Method::Truth => "truth",
            Method::ClimatologyDraw => "climatology-draw",
        }
    }

    fn parse(s: &str) -> anyhow::Result<Method> {
        Method::from_str(s, false).map_err(|e| anyhow!(e))
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `training.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for independent trials or runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand, Clone, Debug)]
pub enum Command {
    /// Generate a twin experiment: truth, observations, provenance.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Observe an existing truth with the configured operator.
    Observe {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding truth.af1.
        #[arg(long)]
        input: PathBuf,
    },
    /// Reconstruct the state trajectory from observations.
    Assimilate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        input: PathBuf,
        /// Trained run directory (coda only).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the DA network (and optionally forcing or a correction).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        /// Rollout length.
        #[arg(long)]
        w: Option<usize>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Forecast skill over fresh twin experiments, or model rollouts against
    /// the two-level system.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score an analysis (or a sweep) against the truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// analysis.af1, a directory holding one, or a sweep directory.
        #[arg(long)]
        analysis: PathBuf,
        /// Trained run with a correction network, for its diagnostics.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train over a grid of alpha, rollout and window lengths.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        w: usize,
    },
}

#[derive(Parser, Clone, Debug)]
#[command(name = "coda", version, about = "Lorenz'96 data assimilation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// A failure with a fixed exit code and no library error behind it.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

/// Exit code for an error: 1 usage, 2 numerical, 3 I/O or format.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return if err.is_numerical() {
                2
            } else if err.is_io() || matches!(err, Error::Format(_) | Error::Unsupported(_) | Error::Json(_)) {
                3
            } else {
                1
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

/// One resolved command, as recorded in a manifest.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub command: String,
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub task: Option<Task>,
    pub w: Option<usize>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
}

impl Invocation {
    fn input(&self, role: &str) -> anyhow::Result<&Path> {
        self.inputs
            .get(role)
            .map(PathBuf::as_path)
            .ok_or_else(|| usage(format!("{} needs --{role}", self.command)))
    }

    fn seed(&self) -> anyhow::Result<u64> {
        self.seed.ok_or_else(|| usage(format!("{} needs --seed", self.command)))
    }

    fn out(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| usage(format!("{} needs --out", self.command)))
    }
}

fn usage(message: String) -> anyhow::Error {
    Failure { code: 1, message }.into()
}

fn split(cmd: Command) -> (Invocation, Common) {
    let mut inv = Invocation::default();
    let mut add = |role: &str, p: Option<PathBuf>| {
        if let Some(p) = p {
            inv.inputs.insert(role.into(), p);
        }
    };
    let (name, common, method, task, w) = match cmd {
        Command::Simulate { common } => ("simulate", common, None, None, None),
        Command::Observe { common, input } => {
            add("input", Some(input));
            ("observe", common, None, None, None)
        }
        Command::Assimilate { common, method, input, model } => {
            add("input", Some(input));
            add("model", model);
            ("assimilate", common, Some(method), None, None)
        }
        Command::Train { common, task, w, input } => {
            add("input", Some(input));
            ("train", common, None, task, w)
        }
        Command::Forecast { common, method, model } => {
            add("model", model);
            ("forecast", common, method, None, None)
        }
        Command::Evaluate { common, input, analysis, model } => {
            add("input", Some(input));
            add("analysis", Some(analysis));
            add("model", model);
            ("evaluate", common, None, None, None)
        }
        Command::Sweep { common, input } => {
            add("input", Some(input));
            ("sweep", common, None, None, None)
        }
        Command::Gradcheck { common, w } => ("gradcheck", common, None, None, Some(w)),
    };
    inv.command = name.into();
    inv.seed = common.seed;
    inv.method = method;
    inv.task = task;
    inv.w = w;
    inv.out = common.out.clone();
    inv.jobs = common.jobs.max(1);
    (inv, common)
}

/// Applies the command-line seed, task and rollout length to the config.
fn finalize(mut cfg: ExperimentConfig, inv: &Invocation) -> ExperimentConfig {
    if let Some(s) = inv.seed {
        cfg.training.seed = s;
        cfg.enks.seed = s;
    }
    if let Some(t) = inv.task {
        cfg.training.task = t;
    }
    if let (Some(w), "train") = (inv.w, inv.command.as_str()) {
        cfg.training.rollout_len = w;
    }
    cfg
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let (inv, common) = split(cli.command);
    let cfg = resolve(common.config.as_deref(), &common.sets)?;
    execute(&inv, finalize(cfg, &inv))
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_entry<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let level = std::env::var("CODA_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            code
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write(path, &bytes)
}

const OBS_FILES: [&str; 3] = [obs::VALUES_FILE, obs::MASK_FILE, obs::PROVENANCE_FILE];

/// Runs a resolved invocation and writes its bundle.
pub fn execute(inv: &Invocation, cfg: ExperimentConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    let mut inputs = BTreeMap::new();
    let out = if inv.command == "gradcheck" {
        inv.out.as_deref()
    } else {
        Some(inv.out()?)
    };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        write_json(&o.join(CONFIG_FILE), &cfg)?;
    }
    info!("{} starting", inv.command);
    match inv.command.as_str() {
        "simulate" => simulate(inv, &cfg)?,
        "observe" => observe(inv, &cfg, &mut inputs)?,
        "assimilate" => assimilate(inv, &cfg, &mut inputs)?,
        "train" => train_cmd(inv, &cfg, &mut inputs)?,
        "forecast" => forecast(inv, &cfg, &mut inputs)?,
        "evaluate" => evaluate(inv, &cfg, &mut inputs)?,
        "sweep" => sweep(inv, &cfg, &mut inputs)?,
        "gradcheck" => gradcheck(inv, &cfg)?,
        other => return Err(usage(format!("unknown command {other}"))),
    }
    if let Some(o) = out {
        let config_bytes = fs::read(o.join(CONFIG_FILE)).map_err(|e| Error::io(o, e))?;
        let m = BundleManifest {
            command: inv.command.clone(),
            seed: inv.seed,
            method: inv.method.map(|m| m.name().to_string()),
            task: inv.task.map(|t| format!("{t:?}").to_lowercase()),
            w: inv.w,
            config_sha256: manifest::sha256_hex(&config_bytes),
            args: inv.inputs.clone(),
            inputs,
            outputs: manifest::hash_outputs(o)?,
            version: env!("CARGO_PKG_VERSION").into(),
        };
        write_json(&o.join(MANIFEST_FILE), &m)?;
    }
    Ok(())
}

/// Reruns the command recorded in `bundle` into `out`, after checking that
/// its inputs are unchanged.
pub fn replay(bundle: &Path, out: &Path) -> anyhow::Result<BundleManifest> {
    let m = read_manifest(bundle)?;
    manifest::verify_inputs(&m)?;
    let cfg = resolve(Some(&bundle.join(CONFIG_FILE)), &[])?;
    let inv = Invocation {
        command: m.command.clone(),
        seed: m.seed,
        method: m.method.as_deref().map(Method::parse).transpose()?,
        task: m.task.as_deref().map(|t| t.parse::<Task>()).transpose()?,
        w: m.w,
        inputs: m.args.clone(),
        out: Some(out.to_path_buf()),
        jobs: 1,
    };
    execute(&inv, cfg)?;
    read_manifest(out).map_err(Into::into)
}

fn simulate(inv: &Invocation, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let d = &cfg.data;
    let exp = obs::generate_with_burn_in(&cfg.simulator, d.steps, d.miss_fraction, d.sigma, inv.seed()?, d.burn_in)?;
    obs::write_dataset(inv.out()?, &exp)?;
    Ok(())
}

fn observe(inv: &Invocation, cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, manifest::InputRecord>) -> anyhow::Result<()> {
    let dir = inv.input("input")?;
    inputs.insert("input".into(), manifest::hash_inputs(dir, &[obs::TRUTH_FILE, obs::COUPLING_FILE])?);
    let truth = obs::read_truth(dir)?;
    let o = obs::observe_trajectory(&truth, cfg.data.miss_fraction, cfg.data.sigma, derive_seed(inv.seed()?, "observe"))?;
    let out = inv.out()?;
    obs::write_observations(out, &o)?;
    obs::write_trajectory(&out.join(obs::TRUTH_FILE), &truth)?;
    if let Some(c) = obs::read_coupling(dir)? {
        obs::write_trajectory(&out.join(obs::COUPLING_FILE), &c)?;
    }
    Ok(())
}

fn assimilate(inv: &Invocation, cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, manifest::InputRecord>) -> anyhow::Result<()> {
    let dir = inv.input("input")?;
    inputs.insert("input".into(), manifest::hash_inputs(dir, &OBS_FILES)?);
    let o = obs::read_observations(dir)?;
    let method = inv.method.ok_or_else(|| usage("assimilate needs --method".into()))?;
    let out = inv.out()?;
    let analysis = match method {
        Method::Oi => optimal_interpolation(&o, &cfg.oi)?,
        Method::Enks => {
            inv.seed()?;
            let a = enks(&o, &cfg.simulator, &cfg.enks)?;
            let mut s = String::from("t,spread\n");
            for (t, v) in a.spread.iter().enumerate() {
                let _ = writeln!(s, "{t},{v:.17e}");
            }
            write(&out.join("spread.csv"), s.as_bytes())?;
            a.mean
        }
        Method::Hc4dvar => var_series(&o, &cfg.simulator, &cfg.var, VarMethod::Strong)?,
        Method::Wc4dvar => var_series(&o, &cfg.simulator, &cfg.var, VarMethod::Weak)?,
        Method::Coda => {
            let mdir = inv.input("model")?;
            inputs.insert("model".into(), manifest::hash_tree(&mdir.join("danet"))?);
            let ck = train::load_checkpoint(mdir)?;
            train::analysis(&ck.danet, &o)?
        }
        m => return Err(usage(format!("assimilate does not support --method {}", m.name()))),
    };
    obs::write_trajectory(&out.join("analysis.af1"), &analysis)?;
    Ok(())
}

fn train_cmd(inv: &Invocation, cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, manifest::InputRecord>) -> anyhow::Result<()> {
    let dir = inv.input("input")?;
    inv.seed()?;
    inputs.insert("input".into(), manifest::hash_inputs(dir, &OBS_FILES)?);
    let o = obs::read_observations(dir)?;
    let out = inv.out()?;
    let outcome = train::train(&o, None, &cfg.simulator, &cfg.networks, &cfg.training, Some(out))?;
    obs::write_trajectory(&out.join("analysis.af1"), &train::analysis(&outcome.state.danet, &o)?)?;
    if let Some(f) = outcome.state.forcing {
        info!("recovered forcing {f:.4}");
    }
    Ok(())
}

fn horizon_json(h: Option<f64>) -> serde_json::Value {
    h.map(serde_json::Value::from).unwrap_or(serde_json::Value::Null)
}

fn forecast(inv: &Invocation, cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, manifest::InputRecord>) -> anyhow::Result<()> {
    let seed = inv.seed()?;
    let out = inv.out()?;
    let e = &cfg.eval;
    let sim = &cfg.simulator;
    let clim = Climatology::estimate(sim, e.climatology_samples, derive_seed(seed, "climatology"))?;
    let clim_rmse = clim.random_rmse();
    let checkpoint = match inv.inputs.get("model") {
        Some(m) => {
            inputs.insert("model".into(), manifest::hash_tree(m)?);
            Some(train::load_checkpoint(m)?)
        }
        None => None,
    };
    if sim.mode == Mode::TwoLevel {
        let ck = checkpoint.ok_or_else(|| usage("two-level forecast needs --model with a correction".into()))?;
        let net = ck
            .correction
            .ok_or_else(|| usage("model has no correction network".into()))?;
        let coarse = crate::l96::SimulatorConfig {
            forcing: ck.forcing.unwrap_or(sim.forcing),
            ..sim.truncated()
        };
        let step = eval::corrected_step(&coarse, |x| net.eval(x));
        let model = |_: &Trajectory, _: usize, x: &[f64]| step(x);
        let setup = RolloutSetup {
            n_trials: e.n_trials,
            lead_steps: e.lead_steps,
            stride: e.stride,
            seed,
            jobs: inv.jobs,
        };
        let cmp = eval::rollout_comparison(sim, &model, &setup)?;
        write(&out.join("corrected.csv"), cmp.corrected.to_csv().as_bytes())?;
        write(&out.join("truncated.csv"), cmp.truncated.to_csv().as_bytes())?;
        write_json(
            &out.join("summary.json"),
            &serde_json::json!({
                "climatology_rmse": clim_rmse,
                "corrected_horizon": horizon_json(cmp.corrected.horizon(clim_rmse)),
                "truncated_horizon": horizon_json(cmp.truncated.horizon(clim_rmse)),
                "n_trials": cmp.corrected.n_trials,
                "failed": cmp.corrected.failed,
            }),
        )?;
        return Ok(());
    }
    let method = inv.method.ok_or_else(|| usage("forecast needs --method".into()))?;
    let danet = checkpoint.map(|c| c.danet);
    let init = match method {
        Method::Oi => InitMethod::Oi(&cfg.oi),
        Method::Enks => InitMethod::Enks(&cfg.enks),
        Method::Coda => InitMethod::Coda(danet.as_ref().ok_or_else(|| usage("coda forecast needs --model".into()))?),
        Method::Truth => InitMethod::Truth,
        Method::ClimatologyDraw => InitMethod::ClimatologyDraw(&clim),
        m => return Err(usage(format!("forecast does not support --method {}", m.name()))),
    };
    let setup = ForecastSetup {
        obs_steps: e.obs_steps,
        miss_fraction: cfg.data.miss_fraction,
        sigma: cfg.data.sigma,
        lead_steps: e.lead_steps,
        stride: e.stride,
        n_trials: e.n_trials,
        seed,
        jobs: inv.jobs,
    };
    let curve = eval::forecast_skill(&init, sim, &setup)?;
    write(&out.join("skill.csv"), curve.to_csv().as_bytes())?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "method": method.name(),
            "climatology_rmse": clim_rmse,
            "horizon": horizon_json(curve.horizon(clim_rmse)),
            "lead0_rmse": curve.mean[0],
            "n_trials": curve.n_trials,
            "failed": curve.failed,
        }),
    )?;
    Ok(())
}

fn analysis_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("analysis.af1")
    } else {
        p.to_path_buf()
    }
}

fn score(analysis: &Trajectory, truth: &Trajectory) -> anyhow::Result<(eval::RmseReport, eval::ErrorCdf)> {
    let t = truth
        .window(0, analysis.len())
        .context("analysis is longer than the truth")?;
    Ok((eval::analysis_rmse(analysis, &t)?, eval::error_cdf(analysis, &t)?))
}

fn evaluate(inv: &Invocation, cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, manifest::InputRecord>) -> anyhow::Result<()> {
    let dir = inv.input("input")?;
    let apath = inv.input("analysis")?;
    let out = inv.out()?;
    inputs.insert("input".into(), manifest::hash_inputs(dir, &[obs::TRUTH_FILE, obs::COUPLING_FILE])?);
    let truth = obs::read_truth(dir)?;
    let sweep_csv = apath.join("sweep.csv");
    if sweep_csv.is_file() {
        inputs.insert("analysis".into(), manifest::hash_tree(apath)?);
        let text = fs::read_to_string(&sweep_csv).map_err(|e| Error::io(&sweep_csv, e))?;
        let mut s = String::from("run,alpha,rollout_len,window_len,rmse\n");
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 4 {
                return Err(Error::Format(format!("sweep.csv line {line:?}")).into());
            }
            let a = obs::read_trajectory(&apath.join(f[0]).join("analysis.af1"))?;
            let (r, _) = score(&a, &truth)?;
            let _ = writeln!(s, "{},{},{},{},{:.17e}", f[0], f[1], f[2], f[3], r.rmse);
        }
        write(&out.join("sweep_rmse.csv"), s.as_bytes())?;
        return Ok(());
    }
    let afile = analysis_file(apath);
    let arec = manifest::hash_inputs(afile.parent().unwrap_or(Path::new(".")), &[&afile.file_name().unwrap_or_default().to_string_lossy()])?;
    inputs.insert("analysis".into(), arec);
    let analysis = obs::read_trajectory(&afile)?;
    let (r, cdf) = score(&analysis, &truth)?;
    let mut per_time = String::from("t,rmse\n");
    for (t, v) in r.per_time.iter().enumerate() {
        let _ = writeln!(per_time, "{t},{v:.17e}");
    }
    write(&out.join("per_time.csv"), per_time.as_bytes())?;
    write(&out.join("cdf.csv"), cdf.to_csv(200).as_bytes())?;
    let mut summary = serde_json::json!({
        "rmse": r.rmse,
        "median_abs_error": cdf.median(),
        "times": analysis.len(),
    });
    if let Some(m) = inv.inputs.get("model") {
        inputs.insert("model".into(), manifest::hash_tree(m)?);
        let ck = train::load_checkpoint(m)?;
        match (ck.correction, obs::read_coupling(dir)?) {
            (Some(net), Some(coupling)) => {
                let d = eval::correction_diagnostics(&net, &truth, &coupling, Some(&analysis), cfg.eval.bins)?;
                write(&out.join("correction.csv"), d.to_csv().as_bytes())?;
                summary["correction_correlation"] = d.correlation().into();
                summary["analysis_gap"] = d.analysis_gap().into();
            }
            _ => warn!("correction diagnostics need a correction network and a two-level dataset"),
        }
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

fn sweep(inv: &Invocation, cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, manifest::InputRecord>) -> anyhow::Result<()> {
    let dir = inv.input("input")?;
    inv.seed()?;
    inputs.insert("input".into(), manifest::hash_inputs(dir, &OBS_FILES)?);
    let o = obs::read_observations(dir)?;
    let out = inv.out()?;
    let s = &cfg.sweep;
    let mut grid = Vec::new();
    for &ww in &s.window_lens {
        for &w in &s.rollout_lens {
            for &a in &s.alphas {
                grid.push((a, w, ww));
            }
        }
    }
    if grid.is_empty() {
        return Err(usage("sweep grid is empty".into()));
    }
    let results = eval::run_trials(grid.len(), inv.jobs, |i| {
        let (alpha, w, ww) = grid[i];
        let tcfg = train::TrainingConfig {
            alpha,
            rollout_len: w,
            window_len: ww,
            ..cfg.training.clone()
        };
        let run = out.join(format!("run_{i:03}"));
        let outcome = train::train(&o, None, &cfg.simulator, &cfg.networks, &tcfg, Some(&run))?;
        obs::write_trajectory(&run.join("analysis.af1"), &train::analysis(&outcome.state.danet, &o)?)?;
        let tail = tcfg.total_steps.saturating_sub(100)..tcfg.total_steps;
        let mean = |f: fn(&train::MetricRecord) -> f64| outcome.log.mean_over(tail.clone(), f).unwrap_or(f64::NAN);
        Ok((mean(|r| r.total), mean(|r| r.data), mean(|r| r.model)))
    });
    let mut csv = String::from("run,alpha,rollout_len,window_len,total,data,model\n");
    for (i, r) in results.into_iter().enumerate() {
        let (alpha, w, ww) = grid[i];
        match r {
            Ok((t, d, m)) => {
                let _ = writeln!(csv, "run_{i:03},{alpha},{w},{ww},{t:.17e},{d:.17e},{m:.17e}");
            }
            Err(e) => return Err(e).with_context(|| format!("sweep run {i} (alpha {alpha}, w {w}, W {ww})")),
        }
    }
    write(&out.join("sweep.csv"), csv.as_bytes())?;
    Ok(())
}

fn gradcheck(inv: &Invocation, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let seed = inv.seed()?;
    let w = inv.w.unwrap_or(5);
    if w == 0 {
        return Err(usage("--w must be positive".into()));
    }
    let rollout = check::rollout_grad_check(seed, w)?;
    let objective = check::objective_grad_check(seed, w, cfg.gradcheck.coords)?;
    let worst = rollout.max(objective);
    println!("rollout max relative error: {rollout:.3e}");
    println!("objective max relative error: {objective:.3e}");
    println!("max relative error: {worst:.3e}");
    if let Some(o) = inv.out.as_deref() {
        write_json(
            &o.join("gradcheck.json"),
            &serde_json::json!({ "w": w, "rollout": rollout, "objective": objective, "max": worst }),
        )?;
    }
    if worst < cfg.gradcheck.tolerance {
        Ok(())
    } else {
        bail!(Failure {
            code: 2,
            message: format!("gradient check failed: {worst:.3e} >= {:.1e}", cfg.gradcheck.tolerance),
        })
    }
}

// keep the AF1 reader reachable for external tooling built on the CLI
pub use af1::read as read_af1;
