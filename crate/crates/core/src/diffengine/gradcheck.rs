use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Components smaller than this fraction of the largest finite-difference
/// component are compared on that absolute scale instead of their own.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Outcome of comparing reverse-mode and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Maximum relative error between reverse-mode and central finite
/// differences of `function` at `point`.
///
/// `function` records a scalar on the supplied tape from the input variable.
pub fn grad_check<F>(function: F, point: &Array, step: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    Ok(grad_check_coords(function, point, step, None)?.max_rel_error)
}

/// As [`grad_check`], restricted to the given flat coordinates.
pub fn grad_check_coords<F>(
    function: F,
    point: &Array,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let tape = Tape::new();
    let x = tape.param(point.clone())?;
    let y = function(&tape, x)?;
    let grads = tape.backward(y)?;
    let full = grads.get(x).cloned().unwrap_or_else(|| Array::zeros(point.shape()));

    let eval = |p: Array| -> Result<f64> {
        let t = Tape::inference();
        let v = t.constant(p)?;
        let out = function(&t, v)?;
        t.item(out)
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        analytic.push(full.data()[i]);
        numeric.push(fd);
    }

    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut max_rel_error = 0.0;
    let mut worst_index = coords.first().copied().unwrap_or(0);
    for (j, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = coords[j];
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
