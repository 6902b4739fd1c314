use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::diffengine::Array;
use crate::error::Error;
use crate::l96::{self, SimulatorConfig};
use crate::obs::{generate_twin_experiment, ObservationSet};

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn full_obs(rows: &[Vec<f64>], dt: f64) -> ObservationSet {
    let k = rows[0].len();
    let data = rows.concat();
    ObservationSet::new(Array::new(vec![rows.len(), k], data).unwrap(), vec![true; rows.len() * k], dt).unwrap()
}

fn truth_rows(sim: &SimulatorConfig, seed: u64, steps: usize) -> Vec<Vec<f64>> {
    let x0 = l96::sample_attractor(sim, seed, 1000).unwrap();
    let tr = l96::rollout(|v| sim.step(v), &x0, steps, sim.dt, 1e6).unwrap();
    (0..tr.len()).map(|i| tr.state(i).to_vec()).collect()
}

#[test]
fn climatology_matches_known_attractor_statistics() {
    let sim = SimulatorConfig::one_level();
    let c = Climatology::estimate(&sim, 300, 3).unwrap();
    assert!((c.pooled_mean() - 2.33).abs() < 0.25, "mean {}", c.pooled_mean());
    assert!((c.pooled_std() / 3.63 - 1.0).abs() < 0.1, "std {}", c.pooled_std());
    assert!(Climatology::estimate(&sim, 50, 3).is_err());
    assert_eq!(c, Climatology::estimate(&sim, 300, 3).unwrap());
}

#[test]
fn independent_draws_are_sqrt_two_std_apart() {
    let sim = SimulatorConfig::one_level();
    let c = Climatology::estimate(&sim, 400, 5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let n = 2000;
    let ms: f64 = (0..n)
        .map(|_| {
            let (a, b) = (c.draw(&mut r), c.draw(&mut r));
            a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
        })
        .sum::<f64>()
        / n as f64;
    assert!((ms.sqrt() / c.random_rmse() - 1.0).abs() < 0.05, "{} vs {}", ms.sqrt(), c.random_rmse());
}

fn sparse_obs(seed: u64, steps: usize, k: usize) -> ObservationSet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::new();
    let mut mask = Vec::new();
    for _ in 0..steps * k {
        let m = rand::Rng::random_bool(&mut r, 0.3);
        mask.push(m);
        let v: f64 = StandardNormal.sample(&mut r);
        vals.push(if m { 3.0 * v } else { f64::NAN });
    }
    ObservationSet::new(Array::new(vec![steps, k], vals).unwrap(), mask, 0.01).unwrap()
}

#[test]
fn oi_without_observations_is_background() {
    let obs = ObservationSet::new(Array::full(&[6, 8], f64::NAN), vec![false; 48], 0.01).unwrap();
    let a = optimal_interpolation(&obs, &OIConfig::default()).unwrap();
    assert!(a.states.data().iter().all(|&v| v == OIConfig::default().background_mean));
}

#[test]
fn oi_interpolates_noise_free_observation() {
    let mut vals = vec![f64::NAN; 5 * 10];
    let mut mask = vec![false; 50];
    vals[2 * 10 + 7] = -4.5;
    mask[2 * 10 + 7] = true;
    let obs = ObservationSet::new(Array::new(vec![5, 10], vals).unwrap(), mask, 0.01).unwrap();
    let cfg = OIConfig {
        obs_variance: 1e-12,
        ..OIConfig::default()
    };
    let a = optimal_interpolation(&obs, &cfg).unwrap();
    assert!((a.state(2)[7] + 4.5).abs() < 1e-9);
    // influence decays with periodic distance
    assert!((a.state(2)[8] - a.state(2)[6]).abs() < 1e-12);
    assert!((a.state(2)[8] - cfg.background_mean).abs() < (a.state(2)[7] - cfg.background_mean).abs());
}

#[test]
fn oi_rejects_bad_config() {
    let obs = sparse_obs(1, 4, 8);
    let cfg = OIConfig {
        length_space: 0.0,
        ..OIConfig::default()
    };
    assert!(matches!(optimal_interpolation(&obs, &cfg), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn oi_is_affine_in_observations(s1 in 0u64..1000, s2 in 0u64..1000, a in -2.0f64..2.0) {
        let o1 = sparse_obs(7, 6, 10);
        let o2 = sparse_obs(7, 6, 10);
        // same mask, different values
        let mut r = ChaCha8Rng::seed_from_u64(s1 ^ (s2 << 20));
        let mut v2 = o2.values.clone();
        for (x, &m) in v2.data_mut().iter_mut().zip(&o2.mask) {
            if m { *x += gauss(&mut r); }
        }
        let o2 = ObservationSet::new(v2, o2.mask.clone(), 0.01).unwrap();
        let mut vc = o1.values.clone();
        for ((x, y), &m) in vc.data_mut().iter_mut().zip(o2.values.data()).zip(&o1.mask) {
            if m { *x = a * *x + (1.0 - a) * y; }
        }
        let oc = ObservationSet::new(vc, o1.mask.clone(), 0.01).unwrap();
        let cfg = OIConfig::default();
        let (a1, a2, ac) = (
            optimal_interpolation(&o1, &cfg).unwrap(),
            optimal_interpolation(&o2, &cfg).unwrap(),
            optimal_interpolation(&oc, &cfg).unwrap(),
        );
        for i in 0..ac.states.len() {
            let want = a * a1.states.data()[i] + (1.0 - a) * a2.states.data()[i];
            prop_assert!((ac.states.data()[i] - want).abs() < 1e-9);
        }
    }
}

/// Exact posterior mean of a deterministic linear model: every state is
/// `M^t x0`, so the Gaussian posterior of `x0` given all observations fixes
/// the smoother mean at every time.
fn linear_smoother_oracle(m: &DMatrix<f64>, m0: &DVector<f64>, p0: &DMatrix<f64>, obs: &ObservationSet, r: f64) -> Vec<DVector<f64>> {
    let n = m0.len();
    let mut info = p0.clone().try_inverse().unwrap();
    let mut rhs = &info * m0;
    let mut mt = DMatrix::<f64>::identity(n, n);
    for t in 0..obs.steps() {
        for (k, &seen) in obs.mask_at(t).iter().enumerate() {
            if seen {
                let h = mt.row(k).transpose();
                info += &h * h.transpose() / r;
                rhs += &h * obs.values_at(t)[k] / r;
            }
        }
        mt = m * mt;
    }
    let x0 = info.cholesky().unwrap().solve(&rhs);
    let mut out = Vec::new();
    let mut x = x0;
    for _ in 0..obs.steps() {
        out.push(x.clone());
        x = m * x;
    }
    out
}

#[test]
fn enks_matches_linear_gaussian_smoother() {
    let n = 4;
    let c = 0.3;
    let m = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0 - c
        } else if j == (i + n - 1) % n {
            c
        } else {
            0.0
        }
    });
    let m0 = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
    let p0 = DMatrix::<f64>::identity(n, n);
    let (steps, sigma) = (12, 0.5);
    // truth and observations of alternating components
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut x = DVector::from_fn(n, |i, _| m0[i] + gauss(&mut r));
    let mut vals = Vec::new();
    let mut mask = Vec::new();
    for t in 0..steps {
        for k in 0..n {
            let seen = (t + k) % 2 == 0;
            let e: f64 = StandardNormal.sample(&mut r);
            mask.push(seen);
            vals.push(if seen { x[k] + sigma * e } else { f64::NAN });
        }
        x = &m * x;
    }
    let obs = ObservationSet::new(Array::new(vec![steps, n], vals).unwrap(), mask, 1.0).unwrap();
    let oracle = linear_smoother_oracle(&m, &m0, &p0, &obs, sigma * sigma);

    let members = 10_000;
    let init: Vec<Vec<f64>> = (0..members)
        .map(|_| (0..n).map(|i| m0[i] + gauss(&mut r)).collect())
        .collect();
    let cfg = EnKSConfig {
        ensemble_size: members,
        inflation: 1.0,
        lag: steps,
        obs_sigma: sigma,
        seed: 4,
    };
    let step = |v: &[f64]| Ok((&m * DVector::from_column_slice(v)).as_slice().to_vec());
    let out = enks_with(&obs, step, init, &cfg).unwrap();
    let mut se = 0.0;
    for t in 0..steps {
        se += rmse(out.mean.state(t), oracle[t].as_slice()).powi(2);
    }
    let err = (se / steps as f64).sqrt();
    assert!(err < 1e-2, "EnKS vs smoother RMSE {err}");
}

#[test]
fn enks_detects_collapse() {
    let obs = sparse_obs(2, 5, 8);
    let init = vec![vec![1.0; 8]; 10];
    let cfg = EnKSConfig {
        ensemble_size: 10,
        ..EnKSConfig::default()
    };
    let r = enks_with(&obs, |v| Ok(v.to_vec()), init, &cfg);
    assert!(matches!(r, Err(Error::EnsembleCollapse { .. })), "{r:?}");
}

#[test]
fn enks_checks_member_count() {
    let obs = sparse_obs(2, 5, 8);
    let cfg = EnKSConfig::default();
    assert!(matches!(enks_with(&obs, |v| Ok(v.to_vec()), vec![vec![0.0; 8]; 3], &cfg), Err(Error::Config(_))));
}

#[test]
fn enks_tracks_lorenz96() {
    let sim = SimulatorConfig::one_level();
    let exp = generate_twin_experiment(&sim, 400, 0.75, 1.0, 21).unwrap();
    let cfg = EnKSConfig::default();
    let a = enks(&exp.obs, &sim, &cfg).unwrap();
    let err: f64 = (200..400).map(|t| rmse(a.mean.state(t), exp.truth.state(t))).sum::<f64>() / 200.0;
    assert!(err < 1.0, "EnKS RMSE {err}");
    let again = enks(&exp.obs, &sim, &cfg).unwrap();
    assert_eq!(a.mean.states, again.mean.states);
}

#[test]
fn hc4dvar_recovers_state_from_noise_free_observations() {
    let sim = SimulatorConfig::one_level();
    let rows = truth_rows(&sim, 8, 10);
    let obs = full_obs(&rows, sim.dt);
    let guess: Vec<f64> = rows[0].iter().enumerate().map(|(i, v)| v + 0.5 * ((i as f64) * 1.3).sin()).collect();
    let res = hc4dvar(&obs, &sim, &VarConfig::default(), &guess).unwrap();
    let err = rmse(&res.controls[0], &rows[0]);
    assert!(err < 1e-6, "error {err}, iterations {}", res.iterations);
    assert!(res.losses.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn hc4dvar_single_observation_window_is_the_observation() {
    let sim = SimulatorConfig::one_level();
    let rows = truth_rows(&sim, 9, 0);
    let obs = full_obs(&rows, sim.dt);
    let res = hc4dvar(&obs, &sim, &VarConfig::default(), &vec![0.0; 40]).unwrap();
    assert!(rmse(&res.controls[0], &rows[0]) < 1e-6);
}

#[test]
fn hc4dvar_reports_divergence() {
    let sim = SimulatorConfig::one_level();
    let rows = truth_rows(&sim, 9, 20);
    let obs = full_obs(&rows, sim.dt);
    let cfg = VarConfig {
        lr: 1e7,
        ..VarConfig::default()
    };
    let r = hc4dvar(&obs, &sim, &cfg, &rows[3]);
    assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
}

fn noisy_window(seed: u64, steps: usize) -> (Vec<Vec<f64>>, ObservationSet) {
    let sim = SimulatorConfig::one_level();
    let rows = truth_rows(&sim, seed, steps);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().map(|v| v + 0.5 * gauss(&mut r)).collect())
        .collect();
    (rows, full_obs(&noisy, sim.dt))
}

#[test]
fn wc4dvar_without_model_term_decouples() {
    let sim = SimulatorConfig::one_level();
    let (rows, obs) = noisy_window(12, 10);
    let cfg = VarConfig {
        alpha: 0.0,
        sub_window: 5,
        max_iters: 3000,
        ..VarConfig::default()
    };
    let init = vec![rows[0].clone(), rows[5].clone(), rows[10].clone()];
    let wc = wc4dvar(&obs, &sim, &cfg, &init).unwrap();
    for c in 0..2 {
        let sub = obs.slice(c * 5, 5).unwrap();
        let hc = hc4dvar(&sub, &sim, &cfg, &init[c]).unwrap();
        let d = rmse(&wc.controls[c], &hc.controls[0]);
        assert!(d < 1e-5, "sub-window {c}: {d}");
    }
    // the last control only sees the final observation
    assert!(rmse(&wc.controls[2], obs.values_at(10)) < 1e-6);
}

#[test]
fn wc4dvar_with_large_alpha_approaches_strong_constraint() {
    let sim = SimulatorConfig::one_level();
    let (rows, obs) = noisy_window(13, 10);
    let base = VarConfig {
        sub_window: 10,
        max_iters: 3000,
        ..VarConfig::default()
    };
    let hc = hc4dvar(&obs, &sim, &base, &rows[0]).unwrap();
    let gap = |alpha: f64| {
        let cfg = VarConfig { alpha, ..base.clone() };
        let wc = wc4dvar(&obs, &sim, &cfg, &[rows[0].clone(), rows[10].clone()]).unwrap();
        rmse(&wc.controls[0], &hc.controls[0])
    };
    let (g1, g2) = (gap(10.0), gap(1000.0));
    assert!(g2 < g1, "{g1} -> {g2}");
    assert!(g2 < 1e-2, "{g2}");
}

#[test]
fn wc4dvar_perfect_model_twin_has_negligible_model_error() {
    let sim = SimulatorConfig::one_level();
    let rows = truth_rows(&sim, 14, 10);
    let obs = full_obs(&rows, sim.dt);
    let cfg = VarConfig {
        sub_window: 5,
        max_iters: 2000,
        ..VarConfig::default()
    };
    let init: Vec<Vec<f64>> = [0, 5, 10].iter().map(|&t| rows[t].iter().map(|v| v + 0.3).collect()).collect();
    let res = wc4dvar(&obs, &sim, &cfg, &init).unwrap();
    assert!(res.losses.windows(2).all(|w| w[1] <= w[0]));
    for e in model_error_terms(&res.controls, &sim, 5).unwrap() {
        assert!(e < 1e-3, "model error {e}");
    }
    // started from the truth, the optimum is the truth
    let at_truth = wc4dvar(&obs, &sim, &cfg, &[rows[0].clone(), rows[5].clone(), rows[10].clone()]).unwrap();
    assert!(at_truth.loss() < 1e-20 && at_truth.converged);
}

#[test]
fn wc4dvar_checks_window_divisibility() {
    let sim = SimulatorConfig::one_level();
    let rows = truth_rows(&sim, 14, 7);
    let obs = full_obs(&rows, sim.dt);
    let r = wc4dvar(&obs, &sim, &VarConfig::default(), &[rows[0].clone(), rows[5].clone()]);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn cycled_4dvar_beats_observation_noise() {
    let sim = SimulatorConfig::one_level();
    let exp = generate_twin_experiment(&sim, 101, 0.75, 1.0, 31).unwrap();
    for method in [VarMethod::Strong, VarMethod::Weak] {
        let a = var_series(&exp.obs, &sim, &VarConfig::default(), method).unwrap();
        assert_eq!(a.len(), 101);
        let err: f64 = (0..101).map(|t| rmse(a.state(t), exp.truth.state(t)).powi(2)).sum::<f64>() / 101.0;
        assert!(err.sqrt() < 1.0, "{method:?}: {}", err.sqrt());
    }
}
