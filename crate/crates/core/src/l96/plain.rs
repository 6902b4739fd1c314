use super::{SimulatorConfig, Trajectory};
use crate::error::{Error, Result};

/// `dx_k/dt = -x_{k-1}(x_{k-2} - x_{k+1}) - x_k + F` with periodic indices.
pub fn tendency_one_level(x: &[f64], forcing: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 4 {
        return Err(Error::Config(format!("K = {n} < 4")));
    }
    let mut out = vec![0.0; n];
    for k in 0..n {
        let xm1 = x[(k + n - 1) % n];
        let xm2 = x[(k + n - 2) % n];
        let xp1 = x[(k + 1) % n];
        out[k] = (-(xm1 * (xm2 - xp1)) - x[k]) + forcing;
    }
    Ok(out)
}

/// Coarse variables `x` (length K) and fine variables `z`, stored as one
/// periodic ring of length J·K ordered `(k, j)`, so `z[k*J + j]` is
/// `z_{j,k}` and `z_{J+1,k} = z_{1,k+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLevelState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl TwoLevelState {
    pub fn from_flat(state: &[f64], k: usize, j: usize) -> Result<Self> {
        if state.len() != k + k * j {
            return Err(Error::shape(
                "two-level state",
                format!("{} != {} + {}", state.len(), k, k * j),
            ));
        }
        Ok(TwoLevelState {
            x: state[..k].to_vec(),
            z: state[k..].to_vec(),
        })
    }

    pub fn into_flat(self) -> Vec<f64> {
        let mut v = self.x;
        v.extend(self.z);
        v
    }

    /// `z̄_k = (1/J) Σ_j z_{j,k}`.
    pub fn z_mean(&self) -> Vec<f64> {
        let k = self.x.len();
        let j = self.z.len() / k;
        (0..k)
            .map(|kk| self.z[kk * j..(kk + 1) * j].iter().sum::<f64>() / j as f64)
            .collect()
    }
}

/// Coupled two-level tendency. The coarse part keeps the one-level
/// arithmetic order, so `h = 0` reproduces it exactly.
pub fn tendency_two_level(s: &TwoLevelState, cfg: &SimulatorConfig) -> Result<TwoLevelState> {
    let k = s.x.len();
    let nz = s.z.len();
    if k < 4 || nz < 4 || nz % k != 0 {
        return Err(Error::Config(format!("two-level sizes K = {k}, JK = {nz}")));
    }
    let j = nz / k;
    let zbar = s.z_mean();
    let hc = cfg.h * cfg.c;
    let mut dx = vec![0.0; k];
    for kk in 0..k {
        let xm1 = s.x[(kk + k - 1) % k];
        let xm2 = s.x[(kk + k - 2) % k];
        let xp1 = s.x[(kk + 1) % k];
        dx[kk] = ((-(xm1 * (xm2 - xp1)) - s.x[kk]) + cfg.forcing) - hc * zbar[kk];
    }
    let hj = cfg.h / j as f64;
    let mut dz = vec![0.0; nz];
    for n in 0..nz {
        let zp1 = s.z[(n + 1) % nz];
        let zp2 = s.z[(n + 2) % nz];
        let zm1 = s.z[(n + nz - 1) % nz];
        let xk = s.x[n / j];
        dz[n] = cfg.c * ((-(cfg.b * zp1 * (zp2 - zm1)) - s.z[n]) + hj * xk);
    }
    Ok(TwoLevelState { x: dx, z: dz })
}

fn stage(x: &[f64], k: &[f64], h: f64) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + b * h).collect()
}

fn check(v: &[f64], stage: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::BlowUp { step: 0, stage })
    }
}

/// Classical RK4: `x + (dt/6)(k1 + 2k2 + 2k3 + k4)`.
pub fn rk4_step<F>(tendency: F, x: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt = {dt} must be positive")));
    }
    let half = 0.5 * dt;
    let k1 = tendency(x)?;
    check(&k1, "k1")?;
    let k2 = tendency(&stage(x, &k1, half))?;
    check(&k2, "k2")?;
    let k3 = tendency(&stage(x, &k2, half))?;
    check(&k3, "k3")?;
    let k4 = tendency(&stage(x, &k3, dt))?;
    check(&k4, "k4")?;
    let sixth = dt / 6.0;
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + (((k1[i] + k2[i] * 2.0) + k3[i] * 2.0) + k4[i]) * sixth)
        .collect();
    check(&out, "update")?;
    Ok(out)
}

/// `steps` applications of `step` starting from `x0`; the result holds
/// `steps + 1` states including `x0`.
pub fn rollout<S>(step: S, x0: &[f64], steps: usize, dt: f64, blowup: f64) -> Result<Trajectory>
where
    S: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut data = Vec::with_capacity((steps + 1) * x0.len());
    data.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for i in 0..steps {
        x = advance(&step, &x, i, blowup)?;
        data.extend_from_slice(&x);
    }
    Trajectory::new(
        crate::diffengine::Array::new(vec![steps + 1, x0.len()], data)?,
        0,
        dt,
    )
}

/// The state after `steps` applications of `step`, without storing the path.
pub fn rollout_final<S>(step: S, x0: &[f64], steps: usize, blowup: f64) -> Result<Vec<f64>>
where
    S: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = x0.to_vec();
    for i in 0..steps {
        x = advance(&step, &x, i, blowup)?;
    }
    Ok(x)
}

fn advance<S>(step: &S, x: &[f64], i: usize, blowup: f64) -> Result<Vec<f64>>
where
    S: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let next = step(x).map_err(|e| match e {
        Error::BlowUp { stage, .. } => Error::BlowUp { step: i, stage },
        e => e,
    })?;
    if next.iter().any(|v| v.abs() > blowup) {
        return Err(Error::BlowUp {
            step: i,
            stage: "threshold",
        });
    }
    Ok(next)
}
