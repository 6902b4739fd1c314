//! The assimilation network (a 1.5D Unet: 2D convolutions over time and
//! space, 1D decoder over space) and the per-location correction network.

mod bundle;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffengine::{Activation, Array, BatchStats, ConvSpec, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::obs::ObservationSet;
use crate::rng::substream;

pub use bundle::{load_bundle, save_bundle, Bundle, BundleEntry, Manifest};

/// Named parameter arrays.
pub type Params = BTreeMap<String, Array>;
/// Parameters recorded on a tape.
pub type Bound = BTreeMap<String, Var>;

/// Records every parameter as a gradient-requiring leaf.
pub fn bind(tape: &Tape, params: &Params) -> Result<Bound> {
    params
        .iter()
        .map(|(k, v)| Ok((k.clone(), tape.param(v.clone())?)))
        .collect()
}

/// Records parameters as constants (no gradients).
pub fn bind_constant(tape: &Tape, params: &Params) -> Result<Bound> {
    params
        .iter()
        .map(|(k, v)| Ok((k.clone(), tape.constant(v.clone())?)))
        .collect()
}

fn get(p: &Bound, name: &str) -> Result<Var> {
    p.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

fn he_normal(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Array {
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Unet15Config {
    /// Input window length in time steps.
    pub window_len: usize,
    /// Spatial size.
    pub k: usize,
    pub levels: usize,
    pub channels: Vec<usize>,
    /// Encoder kernels are `kernel × kernel`, decoder kernels `kernel`.
    pub kernel: usize,
    pub activation: Activation,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Observed values enter as `(y - value_shift) / value_scale` and the
    /// head output leaves as `value_shift + value_scale * h`.
    pub value_shift: f64,
    pub value_scale: f64,
}

impl Default for Unet15Config {
    fn default() -> Self {
        Unet15Config {
            window_len: 25,
            k: 40,
            levels: 3,
            channels: vec![32, 64, 128],
            kernel: 3,
            activation: Activation::Relu,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            value_shift: 0.0,
            value_scale: 1.0,
        }
    }
}

impl Unet15Config {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 1 || self.levels < 1 || self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "unet: window {} levels {} channels {:?}",
                self.window_len, self.levels, self.channels
            )));
        }
        if self.k % (1 << (self.levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "unet: K = {} not divisible by 2^{}",
                self.k,
                self.levels - 1
            )));
        }
        if self.kernel % 2 == 0 || self.channels.contains(&0) {
            return Err(Error::Config("unet: kernels must be odd and channels positive".into()));
        }
        if !(self.value_scale > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("unet: bad scale or batch-norm constants".into()));
        }
        Ok(())
    }

    /// Sets the value normalization from observed entries only.
    pub fn with_value_stats(mut self, obs: &ObservationSet) -> Self {
        let vals: Vec<f64> = obs
            .values
            .data()
            .iter()
            .zip(&obs.mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect();
        if vals.len() > 1 {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            self.value_shift = mean;
            self.value_scale = var.sqrt().max(1e-3);
        }
        self
    }
}

/// Running batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaNet {
    pub config: Unet15Config,
    pub params: Params,
    pub running: BTreeMap<String, RunningStats>,
}

impl DaNet {
    pub fn init(config: Unet15Config, seed: u64) -> Result<DaNet> {
        config.validate()?;
        let mut rng = substream(seed, "init.danet");
        let mut params = Params::new();
        let mut running = BTreeMap::new();
        let kk = config.kernel;
        let add_bn = |params: &mut Params, running: &mut BTreeMap<String, RunningStats>, name: String, c| {
            params.insert(format!("{name}.gamma"), Array::full(&[c], 1.0));
            params.insert(format!("{name}.beta"), Array::zeros(&[c]));
            running.insert(
                name,
                RunningStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                },
            );
        };
        let mut cin = 2;
        for (l, &c) in config.channels.iter().enumerate() {
            params.insert(format!("enc{l}.w"), he_normal(&mut rng, &[c, cin, kk, kk], cin * kk * kk));
            add_bn(&mut params, &mut running, format!("enc{l}.bn"), c);
            cin = c;
        }
        for l in (0..config.levels - 1).rev() {
            let cin = config.channels[l + 1] + config.channels[l];
            let c = config.channels[l];
            params.insert(format!("dec{l}.w"), he_normal(&mut rng, &[c, cin, kk], cin * kk));
            add_bn(&mut params, &mut running, format!("dec{l}.bn"), c);
        }
        let c0 = config.channels[0];
        params.insert("head.w".into(), he_normal(&mut rng, &[1, c0, 1], c0));
        params.insert("head.b".into(), Array::zeros(&[1]));
        Ok(DaNet {
            config,
            params,
            running,
        })
    }

    fn norm(
        &self,
        tape: &Tape,
        p: &Bound,
        x: Var,
        name: &str,
        mode: NormMode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let rs = self
            .running
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing running stats {name}")))?;
        let (y, s) = tape.batch_norm(
            x,
            get(p, &format!("{name}.gamma"))?,
            get(p, &format!("{name}.beta"))?,
            mode,
            Some((&rs.mean, &rs.var)),
            self.config.bn_eps,
        )?;
        if let Some(s) = s {
            stats.push((name.to_string(), s));
        }
        tape.activation(y, self.config.activation)
    }

    /// Maps `[N, 2, W, K]` inputs (standardized values with zeros at missing
    /// entries, and the mask) to `[N, K]` state estimates at the first time
    /// of each window. Train mode also returns the batch statistics.
    pub fn forward(
        &self,
        tape: &Tape,
        p: &Bound,
        input: Var,
        mode: NormMode,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        let cfg = &self.config;
        let shape = tape.shape(input)?;
        if shape.len() != 4 || shape[1] != 2 || shape[2] != cfg.window_len || shape[3] != cfg.k {
            return Err(Error::shape(
                "danet input",
                format!("{shape:?}, expected [N, 2, {}, {}]", cfg.window_len, cfg.k),
            ));
        }
        let n = shape[0];
        let mut stats = Vec::new();
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = input;
        for l in 0..cfg.levels {
            let s = if l == 0 { 1 } else { 2 };
            let spec = ConvSpec {
                stride_h: s,
                stride_w: s,
            };
            h = tape.conv2d(h, get(p, &format!("enc{l}.w"))?, None, spec)?;
            h = self.norm(tape, p, h, &format!("enc{l}.bn"), mode, &mut stats)?;
            skips.push(tape.max_over_axis(h, 2)?);
        }
        let mut d = skips[cfg.levels - 1];
        for l in (0..cfg.levels - 1).rev() {
            let up = tape.upsample(d, 2, 2)?;
            let cat = tape.concat(&[up, skips[l]], 1)?;
            d = tape.conv1d(cat, get(p, &format!("dec{l}.w"))?, None, 1)?;
            d = self.norm(tape, p, d, &format!("dec{l}.bn"), mode, &mut stats)?;
        }
        let out = tape.conv1d(d, get(p, "head.w")?, Some(get(p, "head.b")?), 1)?;
        let out = tape.reshape(out, &[n, cfg.k])?;
        let out = tape.offset(tape.scale(out, cfg.value_scale)?, cfg.value_shift)?;
        Ok((out, stats))
    }

    /// Eval-mode estimate without recording gradients.
    pub fn predict(&self, input: &Array) -> Result<Array> {
        let tape = Tape::inference();
        let p = bind_constant(&tape, &self.params)?;
        let x = tape.constant(input.clone())?;
        let (y, _) = self.forward(&tape, &p, x, NormMode::Eval)?;
        tape.value_cloned(y)
    }

    /// Exponential moving average of batch statistics.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (name, s) in stats {
            if let Some(r) = self.running.get_mut(name) {
                for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                    *a = (1.0 - m) * *a + m * b;
                }
                for (a, b) in r.var.iter_mut().zip(&s.var) {
                    *a = (1.0 - m) * *a + m * b;
                }
            }
        }
    }

    /// `[N, 2, W, K]` network input for windows starting at `anchors`.
    pub fn window_input(&self, obs: &ObservationSet, anchors: &[usize]) -> Result<Array> {
        window_input(obs, anchors, self.config.window_len, self.config.value_shift, self.config.value_scale)
    }

    /// Analysis at every anchor `0..=T-W`, as rows, evaluated in chunks.
    pub fn analysis(&self, obs: &ObservationSet) -> Result<Vec<Vec<f64>>> {
        let w = self.config.window_len;
        if obs.steps() < w {
            return Err(Error::shape("analysis", format!("{} steps < window {w}", obs.steps())));
        }
        let anchors: Vec<usize> = (0..=obs.steps() - w).collect();
        let mut rows = Vec::with_capacity(anchors.len());
        for chunk in anchors.chunks(64) {
            let out = self.predict(&self.window_input(obs, chunk)?)?;
            rows.extend((0..chunk.len()).map(|i| out.row(i).to_vec()));
        }
        Ok(rows)
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut arrays = self.params.clone();
        for (name, r) in &self.running {
            arrays.insert(format!("{name}.running_mean"), Array::vector(r.mean.clone()));
            arrays.insert(format!("{name}.running_var"), Array::vector(r.var.clone()));
        }
        Bundle::new("danet", serde_json::to_value(&self.config)?, arrays)
    }

    pub fn from_bundle(b: &Bundle) -> Result<DaNet> {
        if b.manifest.kind != "danet" {
            return Err(Error::Format(format!("bundle kind {}", b.manifest.kind)));
        }
        let config: Unet15Config = serde_json::from_value(b.manifest.config.clone())?;
        let template = DaNet::init(config.clone(), 0)?;
        let mut params = Params::new();
        for (name, a) in &template.params {
            params.insert(name.clone(), b.take(name, a.shape())?);
        }
        let mut running = BTreeMap::new();
        for (name, r) in &template.running {
            let c = r.mean.len();
            running.insert(
                name.clone(),
                RunningStats {
                    mean: b.take(&format!("{name}.running_mean"), &[c])?.into_data(),
                    var: b.take(&format!("{name}.running_var"), &[c])?.into_data(),
                },
            );
        }
        Ok(DaNet {
            config,
            params,
            running,
        })
    }
}

/// Builds `[N, 2, W, K]`: channel 0 holds `(y - shift) / scale` where
/// observed and 0 elsewhere, channel 1 the mask.
pub fn window_input(obs: &ObservationSet, anchors: &[usize], w: usize, shift: f64, scale: f64) -> Result<Array> {
    let k = obs.dim();
    let mut data = vec![0.0; anchors.len() * 2 * w * k];
    for (n, &t) in anchors.iter().enumerate() {
        if t + w > obs.steps() {
            return Err(Error::shape("window input", format!("anchor {t} + {w} > {}", obs.steps())));
        }
        for i in 0..w {
            let vals = obs.values_at(t + i);
            let mask = obs.mask_at(t + i);
            let base_v = ((n * 2) * w + i) * k;
            let base_m = ((n * 2 + 1) * w + i) * k;
            for j in 0..k {
                if mask[j] {
                    data[base_v + j] = (vals[j] - shift) / scale;
                    data[base_m + j] = 1.0;
                }
            }
        }
    }
    Array::new(vec![anchors.len(), 2, w, k], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
        }
    }
}

/// Scalar MLP `R -> R` applied independently at every location.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionNet {
    pub config: CorrectionConfig,
    pub params: Params,
}

impl CorrectionNet {
    /// He-scaled hidden layers; the output layer starts at zero so the
    /// corrected model begins as the truncated one.
    pub fn init(config: CorrectionConfig, seed: u64) -> Result<CorrectionNet> {
        if config.hidden.contains(&0) {
            return Err(Error::Config("correction net: empty hidden layer".into()));
        }
        let mut rng = substream(seed, "init.correction");
        let mut params = Params::new();
        let mut cin = 1;
        for (l, &c) in config.hidden.iter().enumerate() {
            params.insert(format!("corr{l}.w"), he_normal(&mut rng, &[c, cin, 1], cin));
            params.insert(format!("corr{l}.b"), Array::zeros(&[c]));
            cin = c;
        }
        let l = config.hidden.len();
        params.insert(format!("corr{l}.w"), Array::zeros(&[1, cin, 1]));
        params.insert(format!("corr{l}.b"), Array::zeros(&[1]));
        Ok(CorrectionNet { config, params })
    }

    /// `x` is `[K]` or `[B, K]`; the output has the same shape.
    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?;
        let (b, k) = match shape[..] {
            [k] => (1, k),
            [b, k] => (b, k),
            _ => return Err(Error::shape("correction", format!("{shape:?}"))),
        };
        let mut h = tape.reshape(x, &[b, 1, k])?;
        let last = self.config.hidden.len();
        for l in 0..=last {
            h = tape.conv1d(h, get(p, &format!("corr{l}.w"))?, Some(get(p, &format!("corr{l}.b"))?), 1)?;
            if l < last {
                h = tape.activation(h, self.config.activation)?;
            }
        }
        tape.reshape(h, &shape)
    }

    /// `B(x)` for a plain state vector.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let p = bind_constant(&tape, &self.params)?;
        let v = tape.constant(Array::vector(x.to_vec()))?;
        let y = self.forward(&tape, &p, v)?;
        Ok(tape.value_cloned(y)?.into_data())
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        Bundle::new("correction", serde_json::to_value(&self.config)?, self.params.clone())
    }

    pub fn from_bundle(b: &Bundle) -> Result<CorrectionNet> {
        if b.manifest.kind != "correction" {
            return Err(Error::Format(format!("bundle kind {}", b.manifest.kind)));
        }
        let config: CorrectionConfig = serde_json::from_value(b.manifest.config.clone())?;
        let template = CorrectionNet::init(config.clone(), 0)?;
        let mut params = Params::new();
        for (name, a) in &template.params {
            params.insert(name.clone(), b.take(name, a.shape())?);
        }
        Ok(CorrectionNet { config, params })
    }
}
