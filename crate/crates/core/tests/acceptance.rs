//! End-to-end acceptance criteria at desk-scale budgets. Runs as a plain
//! binary so every criterion prints exactly one PASS/FAIL line; set
//! `ACCEPTANCE_ONLY=4,7` to run a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use coda::baselines::{enks_with, hc4dvar, Climatology, EnKSConfig, OIConfig, VarConfig};
use coda::cli::{self, manifest};
use coda::diffengine::Array;
use coda::eval::{self, ForecastSetup, InitMethod, RolloutSetup};
use coda::l96::{self, SimulatorConfig, Trajectory, TwoLevelState};
use coda::networks::{DaNet, Unet15Config};
use coda::obs::{self, generate_twin_experiment, ObservationSet};
use coda::rng::derive_seed;
use coda::train::{self, check, NetworkConfig, Task, TrainingConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// Desk-scale training budget shared by the one-level criteria.
const DA_STEPS: usize = 6000;
const SWEEP_STEPS: usize = 3000;
const TUNE_STEPS: usize = 8000;
const CORRECT_PHASE1: usize = 1500;
const CORRECT_STEPS: usize = 4000;
const TRAIN_POINTS: usize = 4000;
const HELD_OUT_POINTS: usize = 2000;

fn desk_nets() -> NetworkConfig {
    NetworkConfig {
        danet: Unet15Config {
            levels: 3,
            channels: vec![8, 16, 32],
            ..Unet15Config::default()
        },
        ..NetworkConfig::default()
    }
}

fn desk_training(task: Task, steps: usize, seed: u64) -> TrainingConfig {
    TrainingConfig {
        task,
        total_steps: steps,
        batch_size: 8,
        lr: 3e-3,
        eval_every: 0,
        seed,
        ..TrainingConfig::default()
    }
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn gradients() -> Verdict {
    let mut rollout: f64 = 0.0;
    let mut objective: f64 = 0.0;
    for seed in 0..20 {
        rollout = rollout.max(check::rollout_grad_check(seed, 25).unwrap());
        objective = objective.max(check::objective_grad_check(seed, 25, 5).unwrap());
    }
    verdict(
        rollout < 1e-5 && objective < 1e-5,
        format!("max relative error: 25-step rollout {rollout:.2e}, full objective {objective:.2e} (20 seeds, bound 1e-5)"),
    )
}

fn integrator_order() -> Verdict {
    let base = SimulatorConfig::one_level();
    let x0 = l96::sample_attractor(&base, 5, 1000).unwrap();
    let run = |dt: f64| {
        let sim = SimulatorConfig { dt, ..base.clone() };
        let n = (1.0 / dt).round() as usize;
        l96::rollout_final(|v| sim.step(v), &x0, n, 1e6).unwrap()
    };
    let reference = run(base.dt / 64.0);
    let e1 = rms(&run(base.dt), &reference);
    let e2 = rms(&run(base.dt / 2.0), &reference);
    let ratio = e1 / e2;
    verdict((12.0..=20.0).contains(&ratio), format!("error ratio dt/(dt/2) = {ratio:.2} (errors {e1:.2e}, {e2:.2e})"))
}

fn oracle_one_level(x: &[f64], f: f64) -> Vec<f64> {
    let k = x.len() as isize;
    let at = |i: isize| x[i.rem_euclid(k) as usize];
    (0..k).map(|i| (at(i + 1) - at(i - 2)) * at(i - 1) - at(i) + f).collect()
}

fn oracle_two_level(x: &[f64], z: &[f64], s: &SimulatorConfig) -> (Vec<f64>, Vec<f64>) {
    let (k, j) = (x.len(), z.len() / x.len());
    let n = z.len() as isize;
    let zz = |i: isize| z[i.rem_euclid(n) as usize];
    let mut dx = oracle_one_level(x, s.forcing);
    for kk in 0..k {
        let mut sum = 0.0;
        for jj in 0..j {
            sum += z[kk * j + jj];
        }
        dx[kk] -= s.h * s.c / j as f64 * sum;
    }
    let dz = (0..n)
        .map(|i| s.c * (s.b * zz(i + 1) * (zz(i - 1) - zz(i + 2)) - zz(i)) + s.h * s.c / j as f64 * x[i as usize / j])
        .collect();
    (dx, dz)
}

fn simulator_oracles() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let one = SimulatorConfig::one_level();
    let two = SimulatorConfig::two_level();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..one.k).map(|_| 2.3 + 3.6 * gauss(&mut r)).collect();
        let got = l96::tendency_one_level(&x, one.forcing).unwrap();
        worst = worst.max(got.iter().zip(oracle_one_level(&x, one.forcing)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let x: Vec<f64> = (0..two.k).map(|_| 2.0 + 3.5 * gauss(&mut r)).collect();
        let z: Vec<f64> = (0..two.k * two.j).map(|_| 0.1 + 0.4 * gauss(&mut r)).collect();
        let got = l96::tendency_two_level(&TwoLevelState { x: x.clone(), z: z.clone() }, &two).unwrap();
        let (dx, dz) = oracle_two_level(&x, &z, &two);
        for (a, b) in got.x.iter().chain(&got.z).zip(dx.iter().chain(&dz)) {
            worst = worst.max((a - b).abs());
        }
    }
    // h = 0: the coarse variables follow the one-level system exactly
    let decoupled = SimulatorConfig { h: 0.0, ..two.clone() };
    let single = SimulatorConfig { k: two.k, forcing: two.forcing, ..SimulatorConfig::one_level() };
    let s0 = l96::sample_attractor(&two, 8, 500).unwrap();
    let full = l96::rollout(|v| decoupled.step(v), &s0, 500, two.dt, 1e6).unwrap();
    let coarse = l96::rollout(|v| single.step(v), &s0[..two.k], 500, two.dt, 1e6).unwrap();
    let exact = (0..full.len()).all(|t| full.state(t)[..two.k] == *coarse.state(t));
    verdict(
        worst <= 1e-12 && exact,
        format!("max deviation from scalar oracles {worst:.1e} over 1000 states; h=0 bit-exact: {exact}"),
    )
}

struct DaRun {
    danet: DaNet,
    held_out_rmse: f64,
}

fn held_out(sim: &SimulatorConfig, miss: f64, sigma: f64, seed: u64) -> obs::TwinExperiment {
    generate_twin_experiment(sim, HELD_OUT_POINTS, miss, sigma, seed).unwrap()
}

fn train_da(seed: u64, cfg: TrainingConfig) -> DaRun {
    let sim = SimulatorConfig::one_level();
    let exp = generate_twin_experiment(&sim, TRAIN_POINTS, 0.75, 1.0, seed).unwrap();
    let out = train::train(&exp.obs, None, &sim, &desk_nets(), &cfg, None).unwrap();
    let test = held_out(&sim, 0.75, 1.0, derive_seed(seed, "held-out"));
    let held_out_rmse = train::analysis_rmse_against(&out.state.danet, &test.obs, &test.truth).unwrap();
    DaRun { danet: out.state.danet, held_out_rmse }
}

fn da_accuracy(run: &DaRun) -> Verdict {
    verdict(
        run.held_out_rmse < 1.0,
        format!("held-out analysis RMSE {:.3} < 1.0 after {DA_STEPS} steps (stretch target 0.5)", run.held_out_rmse),
    )
}

fn weak_constraint() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for w in [1usize, 5] {
        let rmse = |alpha: f64| {
            let cfg = TrainingConfig { rollout_len: w, alpha, ..desk_training(Task::Da, SWEEP_STEPS, 21) };
            train_da(21, cfg).held_out_rmse
        };
        let strong = rmse(0.0);
        let weak = [0.5, 1.0].map(rmse);
        let best = weak.iter().cloned().fold(f64::INFINITY, f64::min);
        pass &= best < strong;
        lines.push(format!("w={w}: alpha=0 {strong:.3}, alpha=0.5 {:.3}, alpha=1 {:.3}", weak[0], weak[1]));
    }
    verdict(pass, lines.join("; "))
}

fn robustness(run: &DaRun) -> Verdict {
    let sim = SimulatorConfig::one_level();
    let misses = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
    let sigmas = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    let mut grid = vec![vec![0.0; sigmas.len()]; misses.len()];
    for (i, &m) in misses.iter().enumerate() {
        for (j, &s) in sigmas.iter().enumerate() {
            let exp = held_out(&sim, m, s, derive_seed(31, &format!("{i}/{j}")));
            grid[i][j] = train::analysis_rmse_against(&run.danet, &exp.obs, &exp.truth).unwrap();
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..misses.len() {
        for j in 0..sigmas.len() {
            if i + 1 < misses.len() {
                worst = worst.max(grid[i][j] / grid[i + 1][j]).max(grid[i + 1][j] / grid[i][j]);
            }
            if j + 1 < sigmas.len() {
                worst = worst.max(grid[i][j] / grid[i][j + 1]).max(grid[i][j + 1] / grid[i][j]);
            }
        }
    }
    let corner = |i: usize, j: usize| format!("({}, {}) {:.2}", misses[i], sigmas[j], grid[i][j]);
    verdict(
        worst <= 2.0 && grid.iter().flatten().all(|v| v.is_finite()),
        format!(
            "largest neighbour ratio {worst:.2} <= 2; RMSE {} .. {} .. {}",
            corner(0, 0),
            corner(2, 1),
            corner(5, 5)
        ),
    )
}

fn forecast_ordering(run: &DaRun) -> Verdict {
    let sim = SimulatorConfig::one_level();
    let clim = Climatology::estimate(&sim, 1000, 41).unwrap().random_rmse();
    let setup = ForecastSetup { n_trials: 100, obs_steps: 200, lead_steps: 800, stride: 10, seed: 42, ..ForecastSetup::default() };
    let oi_cfg = OIConfig::default();
    let enks_cfg = EnKSConfig { seed: 43, ..EnKSConfig::default() };
    let curve = |m: &InitMethod| eval::forecast_skill(m, &sim, &setup).unwrap();
    let oi = curve(&InitMethod::Oi(&oi_cfg));
    let enks = curve(&InitMethod::Enks(&enks_cfg));
    let coda = curve(&InitMethod::Coda(&run.danet));
    let h = |c: &eval::SkillCurve| c.horizon(clim).unwrap_or(f64::INFINITY);
    let (ho, he, hc) = (h(&oi), h(&enks), h(&coda));
    let failed = oi.failed + enks.failed + coda.failed;
    let pass = (2.0..=3.5).contains(&oi.mean[0])
        && (ho - 2.0).abs() <= 0.5
        && hc >= 4.0
        && hc > ho
        && he > ho
        && hc >= he - 0.5
        && failed == 0;
    verdict(
        pass,
        format!(
            "horizons CODA {hc:.1}, EnKS {he:.1}, OI {ho:.1}; lead-0 RMSE CODA {:.2}, EnKS {:.2}, OI {:.2}; climatology {clim:.2}; failed trials {failed}",
            coda.mean[0], enks.mean[0], oi.mean[0]
        ),
    )
}

fn tune_run(f: f64, seed: u64) -> f64 {
    let sim = SimulatorConfig { forcing: f, ..SimulatorConfig::one_level() };
    let exp = generate_twin_experiment(&sim, TRAIN_POINTS, 0.75, 1.0, derive_seed(seed, &format!("tune F={f}"))).unwrap();
    let cfg = TrainingConfig { forcing_lr: 2e-2, ..desk_training(Task::Tune, TUNE_STEPS, seed) };
    // the simulator's own forcing is never used by the tuned rollouts
    let blind = SimulatorConfig { forcing: f64::NAN, ..sim };
    train::train(&exp.obs, None, &blind, &desk_nets(), &cfg, None).unwrap().state.forcing.unwrap()
}

fn parameter_tuning() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let mut at8 = Vec::new();
    for f in [4.0, 8.0, 12.0] {
        let seeds: Vec<u64> = if f == 8.0 { (1..=10).collect() } else { (1..=3).collect() };
        let est: Vec<f64> = seeds.iter().map(|&s| tune_run(f, s)).collect();
        worst = worst.max(est[..3].iter().map(|e| (e - f).abs()).fold(0.0, f64::max));
        parts.push(format!("F={f}: {}", est.iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>().join(" ")));
        if f == 8.0 {
            at8 = est;
        }
    }
    let spread = at8.iter().cloned().fold(f64::MIN, f64::max) - at8.iter().cloned().fold(f64::MAX, f64::min);
    verdict(
        worst <= 0.5 && spread < 0.5,
        format!("max |F̂-F| {worst:.2} <= 0.5, F=8 spread over 10 seeds {spread:.2} < 0.5; {}", parts.join("; ")),
    )
}

fn correction_learning() -> Verdict {
    let sim = SimulatorConfig::two_level();
    let exp = generate_twin_experiment(&sim, TRAIN_POINTS, 0.75, 1.0, 51).unwrap();
    let cfg = TrainingConfig { phase1_steps: CORRECT_PHASE1, ..desk_training(Task::Correct, CORRECT_STEPS, 52) };
    let out = train::train(&exp.obs, Some(&exp.truth), &sim, &desk_nets(), &cfg, None).unwrap();
    let phase1 = out.phase1_rmse.unwrap();
    let phase2 = train::analysis_rmse_against(&out.state.danet, &exp.obs, &exp.truth).unwrap();
    let net = out.state.correction.clone().unwrap();
    let analysis = train::analysis(&out.state.danet, &exp.obs).unwrap();
    let diag = eval::correction_diagnostics(&net, &exp.truth, exp.coupling.as_ref().unwrap(), Some(&analysis), 50).unwrap();
    let corr = diag.correlation().unwrap_or(f64::NAN);
    let coarse = sim.truncated();
    let step = eval::corrected_step(&coarse, |x| net.eval(x));
    let model = |_: &Trajectory, _: usize, x: &[f64]| step(x);
    let setup = RolloutSetup { n_trials: 100, lead_steps: 800, stride: 10, seed: 53, jobs: 1 };
    let cmp = eval::rollout_comparison(&sim, &model, &setup).unwrap();
    let clim = Climatology::estimate(&sim, 1000, 54).unwrap().random_rmse();
    let leads = &cmp.corrected.lead_times;
    let below = (1..leads.len()).filter(|&i| leads[i] <= 4.0 + 1e-9).all(|i| cmp.corrected.mean[i] < cmp.truncated.mean[i]);
    let trunc_h = cmp.truncated.horizon(clim).unwrap_or(f64::INFINITY);
    let corr_h = cmp.corrected.horizon(clim).unwrap_or(f64::INFINITY);
    let a = phase2 < phase1;
    let c = trunc_h <= 4.5 && corr_h > 5.0;
    let d = corr > 0.9;
    verdict(
        a && below && c && d && cmp.corrected.failed == 0,
        format!(
            "(a) analysis RMSE phase 1 {phase1:.3} -> phase 2 {phase2:.3}; (b) corrected below truncated to lead 4: {below}; \
             (c) horizons truncated {trunc_h:.1}, corrected {corr_h:.1}; (d) correlation {corr:.3}"
        ),
    )
}

fn linear_smoother(m: &DMatrix<f64>, m0: &DVector<f64>, obs: &ObservationSet, r: f64) -> Vec<DVector<f64>> {
    let n = m0.len();
    let mut info = DMatrix::<f64>::identity(n, n);
    let mut rhs = m0.clone();
    let mut mt = DMatrix::<f64>::identity(n, n);
    for t in 0..obs.steps() {
        for k in 0..n {
            if obs.mask_at(t)[k] {
                let h = mt.row(k).transpose();
                info += &h * h.transpose() / r;
                rhs += &h * obs.values_at(t)[k] / r;
            }
        }
        mt = m * mt;
    }
    let mut x = info.lu().solve(&rhs).unwrap();
    let mut out = Vec::new();
    for _ in 0..obs.steps() {
        out.push(x.clone());
        x = m * x;
    }
    out
}

fn baselines() -> Verdict {
    let n = 4;
    let m = DMatrix::from_fn(n, n, |i, j| match (i + n - j) % n {
        0 => 0.7,
        1 => 0.3,
        _ => 0.0,
    });
    let m0 = DVector::from_vec(vec![0.5, -1.0, 1.5, 0.0]);
    let (steps, sigma) = (15, 0.5);
    let mut r = ChaCha8Rng::seed_from_u64(61);
    let mut x = DVector::from_fn(n, |i, _| m0[i] + gauss(&mut r));
    let (mut vals, mut mask) = (Vec::new(), Vec::new());
    for t in 0..steps {
        for k in 0..n {
            let seen = (t * 3 + k) % 4 != 0;
            let noise = sigma * gauss(&mut r);
            mask.push(seen);
            vals.push(if seen { x[k] + noise } else { f64::NAN });
        }
        x = &m * x;
    }
    let obs = ObservationSet::new(Array::new(vec![steps, n], vals).unwrap(), mask, 1.0).unwrap();
    let exact = linear_smoother(&m, &m0, &obs, sigma * sigma);
    let init: Vec<Vec<f64>> = (0..10_000).map(|_| (0..n).map(|i| m0[i] + gauss(&mut r)).collect()).collect();
    let cfg = EnKSConfig { ensemble_size: 10_000, inflation: 1.0, lag: steps, obs_sigma: sigma, seed: 62 };
    let a = enks_with(&obs, |v| Ok((&m * DVector::from_column_slice(v)).as_slice().to_vec()), init, &cfg).unwrap();
    let enks_err = ((0..steps).map(|t| rms(a.mean.state(t), exact[t].as_slice()).powi(2)).sum::<f64>() / steps as f64).sqrt();

    let sim = SimulatorConfig::one_level();
    let x0 = l96::sample_attractor(&sim, 63, 1000).unwrap();
    let tr = l96::rollout(|v| sim.step(v), &x0, 24, sim.dt, 1e6).unwrap();
    let full = ObservationSet::new(tr.states.clone(), vec![true; tr.states.len()], sim.dt).unwrap();
    let guess: Vec<f64> = x0.iter().map(|v| v + 0.3 * r.random_range(-1.0..1.0)).collect();
    let res = hc4dvar(&full, &sim, &VarConfig::default(), &guess).unwrap();
    let var_err = rms(&res.controls[0], &x0);
    verdict(
        enks_err < 1e-2 && var_err < 1e-6,
        format!("EnKS vs exact smoother RMSE {enks_err:.2e} < 1e-2 (10^4 members); hc4dvar initial-state error {var_err:.1e}"),
    )
}

fn coda_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_coda"))
        .args(args)
        .env("CODA_LOG_LEVEL", "error")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn same_tree(a: &Path, b: &Path, skip_manifest: bool) -> bool {
    let (fa, fb) = (manifest::list_files(a).unwrap(), manifest::list_files(b).unwrap());
    fa == fb
        && fa
            .iter()
            .filter(|f| !(skip_manifest && f.as_str() == cli::MANIFEST_FILE))
            .all(|f| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap())
}

fn provenance() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |n: &str| root.join(n).to_str().unwrap().to_string();
    let tiny = [
        "--set", "networks.danet.channels=[4,8]", "--set", "networks.danet.levels=2", "--set", "training.window_len=5",
        "--set", "training.rollout_len=3", "--set", "training.total_steps=20", "--set", "training.batch_size=4",
        "--set", "training.phase1_steps=10", "--set", "eval.n_trials=4", "--set", "eval.obs_steps=30",
        "--set", "eval.lead_steps=100", "--set", "eval.climatology_samples=100", "--set", "enks.ensemble_size=20",
        "--set", "var.window=20", "--set", "var.max_iters=10", "--set", "sweep.alphas=[0,1]",
        "--set", "sweep.rollout_lens=[1,3]", "--set", "sweep.window_lens=[5]",
    ];
    let data = ["--set", "data.steps=120", "--set", "data.burn_in=500"];
    let two = ["--set", "system=two-level"];
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("data", vec!["simulate".into(), "--seed".into(), "1".into()]),
        ("data2", vec!["simulate".into(), "--seed".into(), "2".into(), two[0].into(), two[1].into()]),
        ("observed", vec!["observe".into(), "--seed".into(), "3".into(), "--input".into(), p("data")]),
        ("oi", vec!["assimilate".into(), "--method".into(), "oi".into(), "--input".into(), p("data")]),
        ("enks", vec!["assimilate".into(), "--method".into(), "enks".into(), "--seed".into(), "4".into(), "--input".into(), p("data")]),
        ("hc", vec!["assimilate".into(), "--method".into(), "hc4dvar".into(), "--input".into(), p("data")]),
        ("wc", vec!["assimilate".into(), "--method".into(), "wc4dvar".into(), "--input".into(), p("data")]),
        ("da", vec!["train".into(), "--task".into(), "da".into(), "--seed".into(), "5".into(), "--input".into(), p("data")]),
        ("tune", vec!["train".into(), "--task".into(), "tune".into(), "--seed".into(), "6".into(), "--input".into(), p("data")]),
        (
            "correct",
            vec!["train".into(), "--task".into(), "correct".into(), "--seed".into(), "7".into(), "--input".into(), p("data2"), two[0].into(), two[1].into()],
        ),
        ("coda", vec!["assimilate".into(), "--method".into(), "coda".into(), "--input".into(), p("data"), "--model".into(), p("da")]),
        ("eval", vec!["evaluate".into(), "--input".into(), p("data"), "--analysis".into(), p("coda")]),
        (
            "eval2",
            vec!["evaluate".into(), "--input".into(), p("data2"), "--analysis".into(), p("correct"), "--model".into(), p("correct"), two[0].into(), two[1].into()],
        ),
        ("fc", vec!["forecast".into(), "--method".into(), "coda".into(), "--model".into(), p("da"), "--seed".into(), "8".into()]),
        ("fc2", vec!["forecast".into(), "--model".into(), p("correct"), "--seed".into(), "9".into(), two[0].into(), two[1].into()]),
        ("sweep", vec!["sweep".into(), "--seed".into(), "10".into(), "--input".into(), p("data")]),
    ];
    let mut bad = Vec::new();
    for (name, args) in &runs {
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = p(name);
        a.extend(["--out", &out]);
        a.extend(tiny);
        if a[0] == "simulate" {
            a.extend(data);
        }
        if !coda_cli(&a) {
            bad.push(format!("{name} failed"));
            continue;
        }
        let again = root.join(format!("{name}.replay"));
        match cli::replay(&root.join(name), &again) {
            Ok(_) if same_tree(&root.join(name), &again, false) => {}
            Ok(_) => bad.push(format!("{name} not bit-identical")),
            Err(e) => bad.push(format!("{name} replay: {e:#}")),
        }
    }
    let regenerated = runs.len() - bad.len();
    // blind copies of the datasets hold observations only
    for (src, blind) in [("data", "blind"), ("data2", "blind2")] {
        fs::create_dir_all(root.join(blind)).unwrap();
        for f in [obs::VALUES_FILE, obs::MASK_FILE, obs::PROVENANCE_FILE] {
            fs::copy(root.join(src).join(f), root.join(blind).join(f)).unwrap();
        }
    }
    let mut audited = 0;
    for (name, args) in &runs {
        if !matches!(args[0].as_str(), "train" | "sweep" | "assimilate") {
            continue;
        }
        let mut a: Vec<String> = args.clone();
        for v in a.iter_mut() {
            if *v == p("data") {
                *v = p("blind");
            } else if *v == p("data2") {
                *v = p("blind2");
            }
        }
        let out = p(&format!("{name}.blind"));
        let mut a: Vec<&str> = a.iter().map(String::as_str).collect();
        a.extend(["--out", &out]);
        a.extend(tiny);
        if !coda_cli(&a) || !same_tree(&root.join(name), Path::new(&out), true) {
            bad.push(format!("{name} depends on truth files"));
        }
        audited += 1;
    }
    verdict(
        bad.is_empty(),
        format!(
            "{regenerated}/{} bundles regenerated bit-identically; {audited} training/assimilation runs identical with truth files removed{}",
            runs.len(),
            if bad.is_empty() { String::new() } else { format!("; problems: {}", bad.join(", ")) }
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let mut da: Option<DaRun> = None;
    let mut failures = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(id) {
            return;
        }
        let t0 = Instant::now();
        let v = f();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status} {name}: {} [{:.0} s]", v.detail, t0.elapsed().as_secs_f64());
        if !v.pass {
            failures += 1;
        }
    };
    report(1, "gradient correctness", &mut gradients);
    report(2, "integrator order", &mut integrator_order);
    report(3, "simulator oracles", &mut simulator_oracles);
    let shared = |slot: &mut Option<DaRun>| -> DaRun {
        slot.take().unwrap_or_else(|| train_da(11, desk_training(Task::Da, DA_STEPS, 11)))
    };
    report(4, "DA accuracy", &mut || {
        let run = shared(&mut da);
        let v = da_accuracy(&run);
        da = Some(run);
        v
    });
    report(5, "weak-constraint benefit", &mut weak_constraint);
    report(6, "observation-operator robustness", &mut || {
        let run = shared(&mut da);
        let v = robustness(&run);
        da = Some(run);
        v
    });
    report(7, "forecast skill ordering", &mut || {
        let run = shared(&mut da);
        let v = forecast_ordering(&run);
        da = Some(run);
        v
    });
    report(8, "parameter tuning", &mut parameter_tuning);
    report(9, "correction learning", &mut correction_learning);
    report(10, "baseline sanity", &mut baselines);
    report(11, "provenance", &mut provenance);
    println!("acceptance: {failures} criteria failed");
    if failures > 0 {
        std::process::exit(1);
    }
}
