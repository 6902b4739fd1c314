use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baselines::{EnKSConfig, OIConfig, VarConfig};
use crate::error::{Error, Result};
use crate::l96::{SimulatorConfig, DEFAULT_BURN_IN};
use crate::train::{NetworkConfig, TrainingConfig};

/// Which simulator preset the `simulator` section starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    #[default]
    OneLevel,
    TwoLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Time points in a generated dataset.
    pub steps: usize,
    pub miss_fraction: f64,
    pub sigma: f64,
    pub burn_in: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            steps: 4000,
            miss_fraction: 0.75,
            sigma: 1.0,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_trials: usize,
    /// Observed time points before each forecast.
    pub obs_steps: usize,
    pub lead_steps: usize,
    pub stride: usize,
    pub climatology_samples: usize,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_trials: 100,
            obs_steps: 200,
            lead_steps: 800,
            stride: 10,
            climatology_samples: 1000,
            bins: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub rollout_lens: Vec<usize>,
    pub window_lens: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: vec![0.0, 0.5, 1.0],
            rollout_lens: vec![1, 5, 10, 25],
            window_lens: vec![25],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Sampled coordinates per parameter tensor.
    pub coords: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            coords: 5,
            tolerance: 1e-4,
        }
    }
}

/// Every setting of an experiment; the resolved form is echoed to each
/// output bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: System,
    pub simulator: SimulatorConfig,
    pub data: DataConfig,
    pub oi: OIConfig,
    pub enks: EnKSConfig,
    pub var: VarConfig,
    pub networks: NetworkConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(System::OneLevel)
    }
}

impl ExperimentConfig {
    pub fn preset(system: System) -> Self {
        let simulator = match system {
            System::OneLevel => SimulatorConfig::one_level(),
            System::TwoLevel => SimulatorConfig::two_level(),
        };
        let mut cfg = ExperimentConfig {
            system,
            simulator,
            data: DataConfig::default(),
            oi: OIConfig::default(),
            enks: EnKSConfig::default(),
            var: VarConfig::default(),
            networks: NetworkConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            gradcheck: GradcheckConfig::default(),
        };
        if system == System::TwoLevel {
            cfg.networks.danet.k = cfg.simulator.k;
            cfg.training.task = crate::train::Task::Correct;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate()?;
        self.oi.validate()?;
        self.enks.validate()?;
        self.var.validate()?;
        self.training.validate()?;
        if !(0.0..1.0).contains(&self.data.miss_fraction) || !(self.data.sigma >= 0.0) {
            return Err(Error::Config("data.miss_fraction must be in [0, 1) and data.sigma >= 0".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value` to `doc`. The value is parsed as JSON when it can
/// be, otherwise taken as a string.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad --set path {path:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(Error::Config(format!("--set {path}: {} is not a section", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Config file (if any) plus overrides, laid over the preset named by
/// `system`. Unknown keys are rejected.
pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig> {
    let mut raw = match file {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice::<Value>(&bytes)?
        }
        None => Value::Object(Map::new()),
    };
    if !raw.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    for s in sets {
        apply_set(&mut raw, s)?;
    }
    let system: System = match raw.get("system") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("system: {e}")))?,
        None => System::OneLevel,
    };
    let mut doc = serde_json::to_value(ExperimentConfig::preset(system))?;
    merge(&mut doc, raw);
    let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
