//! Fixed-step integration of [`SystemSpec`] models.
//!
//! Inputs are reconstructed between samples by zero-order hold. Inside
//! [`solve`] the held value is pinned to the grid interval being integrated,
//! so the final Runge–Kutta stage of an interval does not pick up the next
//! sample early; this keeps coarse and fine grids consistent when the input
//! is piecewise constant on the coarse grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{SensingMask, SystemSpec, ThetaVec};

/// States beyond this magnitude are treated as a blow-up.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("solution diverged at t = {t}")]
    Divergence { t: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SolveError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Rk4,
    Euler,
    SemiImplicitEuler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub substeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Rk4,
            substeps: 10,
        }
    }
}

impl SolverConfig {
    pub fn rk4(substeps: usize) -> Self {
        SolverConfig {
            method: Method::Rk4,
            substeps,
        }
    }
}

/// Uniformly sampled input channels (`m × k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSignal {
    pub t0: f64,
    pub dt: f64,
    pub channels: Vec<Vec<f64>>,
}

impl InputSignal {
    pub fn new(t0: f64, dt: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SolveError::Invalid(format!("input sample interval must be positive, got {dt}")));
        }
        if let Some(first) = channels.first() {
            if first.is_empty() || channels.iter().any(|c| c.len() != first.len()) {
                return Err(SolveError::Invalid("input channels must share a nonzero length".into()));
            }
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SolveError::Invalid("non-finite input sample".into()));
        }
        Ok(InputSignal { t0, dt, channels })
    }

    /// An input-free signal for systems with `m = 0`.
    pub fn empty(t0: f64, dt: f64) -> Self {
        InputSignal {
            t0,
            dt,
            channels: Vec::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample index held at time `t`.
    fn index_at(&self, t: f64) -> usize {
        let k = self.len();
        if k == 0 {
            return 0;
        }
        let pos = ((t - self.t0) / self.dt + 1e-9).floor();
        (pos.max(0.0) as usize).min(k - 1)
    }

    fn write_sample(&self, idx: usize, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.channels) {
            *o = c[idx];
        }
    }
}

/// Zero-order-hold value of the input at `t`.
pub fn zoh_value(sig: &InputSignal, t: f64) -> Result<Vec<f64>> {
    if t < sig.t0 {
        return Err(SolveError::Invalid(format!("t = {t} precedes the first input sample at {}", sig.t0)));
    }
    let mut out = vec![0.0; sig.m()];
    sig.write_sample(sig.index_at(t), &mut out);
    Ok(out)
}

fn diverged(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

/// Scratch buffers for one integration.
struct Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// One classical RK4 step with separate inputs for the start, midpoint and end stages.
#[inline]
fn rk4_in_place(spec: &SystemSpec, theta: &[f64], x: &mut [f64], h: f64, u: [&[f64]; 3], ws: &mut Workspace) {
    let n = x.len();
    spec.rhs_into(theta, x, u[0], &mut ws.k1);
    for i in 0..n {
        ws.tmp[i] = x[i] + 0.5 * h * ws.k1[i];
    }
    spec.rhs_into(theta, &ws.tmp, u[1], &mut ws.k2);
    for i in 0..n {
        ws.tmp[i] = x[i] + 0.5 * h * ws.k2[i];
    }
    spec.rhs_into(theta, &ws.tmp, u[1], &mut ws.k3);
    for i in 0..n {
        ws.tmp[i] = x[i] + h * ws.k3[i];
    }
    spec.rhs_into(theta, &ws.tmp, u[2], &mut ws.k4);
    for i in 0..n {
        x[i] += h / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
    }
}

#[inline]
fn euler_in_place(spec: &SystemSpec, theta: &[f64], x: &mut [f64], h: f64, u: &[f64], ws: &mut Workspace) {
    spec.rhs_into(theta, x, u, &mut ws.k1);
    for (xi, ki) in x.iter_mut().zip(&ws.k1) {
        *xi += h * ki;
    }
}

/// Symplectic-style Euler: states are updated in index order and each
/// derivative sees the components already advanced in this step.
#[inline]
fn semi_implicit_in_place(spec: &SystemSpec, theta: &[f64], x: &mut [f64], h: f64, u: &[f64], ws: &mut Workspace) {
    for i in 0..x.len() {
        spec.rhs_into(theta, x, u, &mut ws.k1);
        x[i] += h * ws.k1[i];
    }
}

/// Classical 4-stage Runge–Kutta update with inputs held at `t`, `t + h/2`, `t + h`.
pub fn step_rk4(spec: &SystemSpec, theta: &ThetaVec, x: &[f64], t: f64, h: f64, sig: &InputSignal) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(SolveError::Invalid(format!("step size must be positive, got {h}")));
    }
    check_dims(spec, theta, x, sig)?;
    let u0 = zoh_value(sig, t)?;
    let u1 = zoh_value(sig, t + 0.5 * h)?;
    let u2 = zoh_value(sig, t + h)?;
    let mut out = x.to_vec();
    let mut ws = Workspace::new(spec.n());
    rk4_in_place(spec, theta.values(), &mut out, h, [&u0, &u1, &u2], &mut ws);
    if diverged(&out) {
        return Err(SolveError::Divergence { t });
    }
    Ok(out)
}

fn check_dims(spec: &SystemSpec, theta: &ThetaVec, x: &[f64], sig: &InputSignal) -> Result<()> {
    let check = |what, expected, got| {
        if expected != got {
            Err(SolveError::DimensionMismatch { what, expected, got })
        } else {
            Ok(())
        }
    };
    check("theta", spec.p(), theta.len())?;
    check("state", spec.n(), x.len())?;
    check("input channels", spec.m(), sig.m())
}

/// Sampled solution of an initial-value problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Full state at each grid time (`k × n`).
    pub states: Vec<Vec<f64>>,
    /// Observed components at each grid time (`k × |Y|`).
    pub observed: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Observed channel `c` over time.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.observed.iter().map(|row| row[c]).collect()
    }

    /// Full-state component `i` over time.
    pub fn state(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|row| row[i]).collect()
    }
}

/// Full initial state from observed values, filling hidden components with
/// their declared resting values.
pub fn seed_initial_state(spec: &SystemSpec, theta: &[f64], y0: &[f64], mask: &SensingMask) -> Vec<f64> {
    let mut x0: Vec<f64> = (0..spec.n()).map(|i| spec.rest_value(i, theta)).collect();
    for (&i, &v) in mask.observed().iter().zip(y0) {
        x0[i] = v;
    }
    x0
}

/// Integrates from `x0` at `t_grid[0]` and samples at every grid time.
pub fn solve(
    spec: &SystemSpec,
    theta: &ThetaVec,
    x0: &[f64],
    sig: &InputSignal,
    t_grid: &[f64],
    cfg: &SolverConfig,
    mask: &SensingMask,
) -> Result<Trajectory> {
    check_dims(spec, theta, x0, sig)?;
    if mask.n() != spec.n() {
        return Err(SolveError::DimensionMismatch {
            what: "sensing mask",
            expected: spec.n(),
            got: mask.n(),
        });
    }
    if cfg.substeps == 0 {
        return Err(SolveError::Invalid("substeps must be at least 1".into()));
    }
    if t_grid.is_empty() {
        return Err(SolveError::Invalid("empty time grid".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SolveError::Invalid("time grid must be strictly increasing".into()));
    }
    if spec.m() > 0 && t_grid[0] < sig.t0 {
        return Err(SolveError::Invalid("time grid starts before the input signal".into()));
    }
    let observed_idx = mask.observed();
    let mut traj = Trajectory {
        times: t_grid.to_vec(),
        states: Vec::with_capacity(t_grid.len()),
        observed: Vec::with_capacity(t_grid.len()),
    };
    let mut x = x0.to_vec();
    if diverged(&x) {
        return Err(SolveError::Divergence { t: t_grid[0] });
    }
    let push = |traj: &mut Trajectory, x: &[f64]| {
        traj.states.push(x.to_vec());
        traj.observed.push(observed_idx.iter().map(|&i| x[i]).collect());
    };
    push(&mut traj, &x);
    let th = theta.values();
    let mut ws = Workspace::new(spec.n());
    let mut u = vec![0.0; spec.m()];
    for w in t_grid.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        if spec.m() > 0 {
            sig.write_sample(sig.index_at(ta), &mut u);
        }
        let h = (tb - ta) / cfg.substeps as f64;
        for s in 0..cfg.substeps {
            match cfg.method {
                Method::Rk4 => rk4_in_place(spec, th, &mut x, h, [&u, &u, &u], &mut ws),
                Method::Euler => euler_in_place(spec, th, &mut x, h, &u, &mut ws),
                Method::SemiImplicitEuler => semi_implicit_in_place(spec, th, &mut x, h, &u, &mut ws),
            }
            if diverged(&x) {
                return Err(SolveError::Divergence { t: ta + (s + 1) as f64 * h });
            }
        }
        push(&mut traj, &x);
    }
    Ok(traj)
}

/// Uniform grid `t0, t0 + dt, …` with `k` points.
pub fn uniform_grid(t0: f64, dt: f64, k: usize) -> Vec<f64> {
    (0..k).map(|j| t0 + j as f64 * dt).collect()
}
