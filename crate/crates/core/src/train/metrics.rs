use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// One training step. `rmse` is a truth-based diagnostic and never feeds
/// back into training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: String,
    pub total: f64,
    pub data: f64,
    pub model: f64,
    pub rmse: Option<f64>,
    pub forcing: Option<f64>,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,phase,total,data,model,rmse,forcing,skipped\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:.17e},{:.17e},{:.17e},{},{},{}",
                r.step,
                r.phase,
                r.total,
                r.data,
                r.model,
                opt(r.rmse),
                opt(r.forcing),
                r.skipped as u8
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::obs::af1::write_bytes(path, self.to_csv().as_bytes())
    }

    /// Mean of `f` over the non-skipped records in `range` of steps.
    pub fn mean_over(&self, range: std::ops::Range<usize>, f: impl Fn(&MetricRecord) -> f64) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| range.contains(&r.step) && !r.skipped)
            .map(f)
            .collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn last_rmse(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.rmse)
    }
}
