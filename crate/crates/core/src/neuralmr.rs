//! Neural model recovery: a recurrent encoder (LTC, CT-RNN or NODE cells)
//! followed by a dense head that emits coefficient estimates and input
//! shifts, trained against an ODE-solver reconstruction loss.

use crate::dynamics::{SensingMask, SignConstraint, SystemFile, SystemSpec, ThetaVec};
use crate::metrics;
use crate::odesolve::{self, InputSignal, SolverConfig};
use crate::signal::{self, BatchSet, SignalError, Trace, Window};
use crate::tape::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use thiserror::Error;

/// Clamped loss assigned to candidates whose solve diverges.
pub const DIVERGED_LOSS: f64 = 1e6;
const RHO_MIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("hidden state became non-finite")]
    Divergence,
    #[error("every batch element diverged in epoch {epoch}")]
    AllDiverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Ltc,
    Ctrnn,
    Node,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Ltc, Arch::Ctrnn, Arch::Node];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Ltc => "ltc",
            Arch::Ctrnn => "ctrnn",
            Arch::Node => "node",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = NeuralError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ltc" => Ok(Arch::Ltc),
            "ctrnn" => Ok(Arch::Ctrnn),
            "node" => Ok(Arch::Node),
            other => Err(NeuralError::Invalid(format!("unknown architecture {other:?} (expected ltc, ctrnn or node)"))),
        }
    }
}

/// How raw head outputs become coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffMode {
    /// ReLU magnitude times the declared sign; free coefficients stay linear.
    #[default]
    ReluSigned,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate at the last epoch as a fraction of `lr` (geometric decay).
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Hidden width `V`.
    pub hidden: usize,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub coeff_mode: CoeffMode,
    /// Cell substeps per sample.
    pub substeps: usize,
    /// Largest shift in samples.
    pub s_max: f64,
    /// Shifts span `[-s_max, s_max]` instead of `[0, s_max]`.
    pub signed_shift: bool,
    /// Learn shifts for the system's event channels.
    pub shift_search: bool,
    pub seed: u64,
    /// Fit every state, which must then be present in the data.
    pub explicit_loss: bool,
    /// Weight each observed channel by its inverse training variance.
    pub normalize_loss: bool,
    pub solver: SolverConfig,
    /// Relative finite-difference step for loss sensitivities.
    pub fd_step: f64,
    /// Leading epochs that fit only the first `horizon_start` samples of each window (0: off).
    pub horizon_warmup: usize,
    pub horizon_start: usize,
    /// Epochs after the warmup over which the horizon and the learning rate
    /// grow linearly to their full values.
    pub ramp: usize,
    /// Learning rate during the horizon warmup; `lr` applies afterwards.
    pub warmup_lr: Option<f64>,
    /// Cell time spanned by one training window; `None` advances the cell
    /// one time unit per sample.
    pub encoder_span: Option<f64>,
    /// Initial ReLU magnitude of every coefficient output, in units of its scale hint.
    pub init_coeff: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            lr_final: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            hidden: 32,
            head_hidden: vec![64],
            dropout: 0.2,
            coeff_mode: CoeffMode::ReluSigned,
            substeps: 6,
            s_max: 25.0,
            signed_shift: false,
            shift_search: true,
            seed: 0,
            explicit_loss: false,
            normalize_loss: true,
            solver: SolverConfig::default(),
            fd_step: 1e-6,
            horizon_warmup: 0,
            horizon_start: 4,
            ramp: 0,
            encoder_span: None,
            warmup_lr: None,
            init_coeff: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NeuralError::Invalid(m.to_string()));
        if !(self.lr > 0.0) || !(self.lr_final > 0.0) || self.warmup_lr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_size == 0 || self.hidden == 0 || self.substeps == 0 || self.solver.substeps == 0 {
            return bad("batch size, hidden width and substeps must be at least 1");
        }
        if self.head_hidden.iter().any(|&w| w == 0) {
            return bad("head layers must be non-empty");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.encoder_span.is_some_and(|s| !(s > 0.0)) {
            return bad("encoder span must be positive");
        }
        if !(self.s_max > 0.0) || !(self.fd_step > 0.0) || !(self.init_coeff > 0.0) {
            return bad("s_max, fd_step and init_coeff must be positive");
        }
        Ok(())
    }
}

/// System, sensing and shiftable channels that define a recovery task.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryProblem {
    pub spec: SystemSpec,
    pub mask: SensingMask,
    /// Input channels whose timing is learned.
    pub shift_channels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    system: SystemFile,
    mask: SensingMask,
    shift_channels: Vec<usize>,
}

impl RecoveryProblem {
    /// Full observation with shifts on the system's event channels.
    pub fn new(spec: SystemSpec, mask: SensingMask) -> Self {
        let shift_channels = spec.event_inputs().to_vec();
        RecoveryProblem {
            spec,
            mask,
            shift_channels,
        }
    }

    /// Default coefficient values from the spec.
    pub fn default_theta(&self) -> Vec<f64> {
        self.spec.coefficients().iter().map(|c| c.value).collect()
    }

    fn to_file(&self) -> ProblemFile {
        ProblemFile {
            system: self.spec.to_file(&ThetaVec::unchecked(self.default_theta())),
            mask: self.mask.clone(),
            shift_channels: self.shift_channels.clone(),
        }
    }

    fn from_file(f: ProblemFile) -> Result<Self> {
        let (spec, _) = SystemSpec::from_file(f.system).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        Ok(RecoveryProblem {
            spec,
            mask: f.mask,
            shift_channels: f.shift_channels,
        })
    }

    /// Rows of the window that are observed (all states in explicit mode).
    fn loss_mask(&self, explicit: bool) -> SensingMask {
        if explicit {
            SensingMask::full(self.spec.n())
        } else {
            self.mask.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Cells

/// Recurrent cell parameters. CT-RNN cells carry no `a`; NODE cells carry
/// neither `a` nor `rho_raw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arch: Arch,
    /// `V × C` input weights over the stacked `(|Y| + m)` channels.
    pub w_in: Tensor,
    /// `V × V` recurrent weights.
    pub w_rec: Tensor,
    pub b: Tensor,
    /// Pre-softplus time constants; `ρ = softplus(rho_raw) + 1e-3`.
    pub rho_raw: Option<Tensor>,
    /// LTC bias targets `A`.
    pub a: Option<Tensor>,
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(rows, cols, data)
}

impl Cell {
    pub fn init(arch: Arch, v: usize, c: usize, rng: &mut ChaCha8Rng) -> Cell {
        let w_in = normal(rng, v, c, 1.0 / (c as f64).sqrt());
        let w_rec = normal(rng, v, v, 0.5 / (v as f64).sqrt());
        let b = Tensor::zeros(v, 1);
        let rho_raw = (arch != Arch::Node).then(|| {
            let data = (0..v).map(|_| inv_softplus(rng.random_range(1.0..20.0) - RHO_MIN)).collect();
            Tensor::vector(data)
        });
        let a = (arch == Arch::Ltc).then(|| normal(rng, v, 1, 1.0));
        Cell {
            arch,
            w_in,
            w_rec,
            b,
            rho_raw,
            a,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_rec.rows
    }

    pub fn inputs(&self) -> usize {
        self.w_in.cols
    }

    /// Time constants `ρ` (positive).
    pub fn rho(&self) -> Option<Vec<f64>> {
        self.rho_raw.as_ref().map(|r| r.data.iter().map(|&x| softplus(x) + RHO_MIN).collect())
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_in, &self.w_rec, &self.b];
        v.extend(self.rho_raw.as_ref());
        v.extend(self.a.as_ref());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w_in, &mut self.w_rec, &mut self.b];
        v.extend(self.rho_raw.as_mut());
        v.extend(self.a.as_mut());
        v
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct CellVars {
    arch: Arch,
    w_in: Var,
    w_rec: Var,
    b: Var,
    inv_rho: Option<Var>,
    a: Option<Var>,
    one: Var,
}

fn record_cell(tape: &mut Tape, cell: &Cell, params: &mut Vec<Var>, leaf: bool) -> CellVars {
    let mut put = |tape: &mut Tape, t: &Tensor| {
        let v = if leaf { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        params.push(v);
        v
    };
    let w_in = put(tape, &cell.w_in);
    let w_rec = put(tape, &cell.w_rec);
    let b = put(tape, &cell.b);
    let rho_raw = cell.rho_raw.as_ref().map(|t| put(tape, t));
    let a = cell.a.as_ref().map(|t| put(tape, t));
    let one = tape.constant(Tensor::scalar(1.0));
    let inv_rho = rho_raw.map(|r| {
        let sp = tape.softplus(r);
        let floor = tape.constant(Tensor::scalar(RHO_MIN));
        let rho = tape.add(sp, floor);
        tape.div(one, rho)
    });
    CellVars {
        arch: cell.arch,
        w_in,
        w_rec,
        b,
        inv_rho,
        a,
        one,
    }
}

/// One substep of length `delta` given the precomputed input drive `W_in·x + b`.
fn record_substep(tape: &mut Tape, cv: &CellVars, h: Var, drive: Var, delta: f64) -> Var {
    let rec = tape.matmul(cv.w_rec, h);
    let pre = tape.add(rec, drive);
    let act = tape.tanh(pre);
    match cv.arch {
        Arch::Ltc => {
            let f = tape.softplus(act);
            let fa = tape.mul(f, cv.a.expect("LTC cell without A"));
            let fa = tape.scale(fa, delta);
            let num = tape.add(h, fa);
            let rate = tape.add(cv.inv_rho.expect("LTC cell without rho"), f);
            let rate = tape.scale(rate, delta);
            let den = tape.add(rate, cv.one);
            tape.div(num, den)
        }
        Arch::Ctrnn => {
            let decay = tape.mul(h, cv.inv_rho.expect("CT-RNN cell without rho"));
            let dh = tape.sub(act, decay);
            let dh = tape.scale(dh, delta);
            tape.add(h, dh)
        }
        Arch::Node => {
            let dh = tape.scale(act, delta);
            tape.add(h, dh)
        }
    }
}

/// Runs the cell over `steps` input columns (each `C × S`) from `h0`.
fn record_unroll(tape: &mut Tape, cv: &CellVars, h0: Var, inputs: &[Tensor], dt: f64, substeps: usize) -> Var {
    let delta = dt / substeps as f64;
    let mut h = h0;
    if delta == 0.0 {
        return h;
    }
    for x in inputs {
        let xv = tape.constant(x.clone());
        let wx = tape.matmul(cv.w_in, xv);
        let drive = tape.add(wx, cv.b);
        for _ in 0..substeps {
            h = record_substep(tape, cv, h, drive, delta);
        }
    }
    h
}

fn single_step(cell: &Cell, h: &[f64], input: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>> {
    if substeps == 0 {
        return Err(NeuralError::Invalid("substeps must be at least 1".into()));
    }
    if h.len() != cell.hidden() || input.len() != cell.inputs() {
        return Err(NeuralError::Invalid(format!(
            "expected hidden {} and input {}, got {} and {}",
            cell.hidden(),
            cell.inputs(),
            h.len(),
            input.len()
        )));
    }
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let cv = record_cell(&mut tape, cell, &mut params, false);
    let h0 = tape.constant(Tensor::vector(h.to_vec()));
    let out = record_unroll(&mut tape, &cv, h0, &[Tensor::vector(input.to_vec())], dt, substeps);
    let v = tape.value(out).data.clone();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NeuralError::Divergence);
    }
    Ok(v)
}

/// Advances `ḣ = −h/ρ + f(A − h)` by `dt` with the fused semi-implicit update
/// `h ← (h + δ f A) / (1 + δ (1/ρ + f))`, `f = softplus(tanh(W_in x + W_rec h + b))`.
pub fn ltc_step(cell: &Cell, h: &[f64], input: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>> {
    if cell.arch != Arch::Ltc {
        return Err(NeuralError::Invalid("ltc_step needs an LTC cell".into()));
    }
    single_step(cell, h, input, dt, substeps)
}

/// Explicit Euler on `ḣ = −h/ρ + tanh(W_in x + W_rec h + b)`.
pub fn ctrnn_step(cell: &Cell, h: &[f64], input: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>> {
    if cell.arch != Arch::Ctrnn {
        return Err(NeuralError::Invalid("ctrnn_step needs a CT-RNN cell".into()));
    }
    single_step(cell, h, input, dt, substeps)
}

/// Explicit Euler on `ḣ = tanh(W_in x + W_rec h + b)`.
pub fn node_step(cell: &Cell, h: &[f64], input: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>> {
    if cell.arch != Arch::Node {
        return Err(NeuralError::Invalid("node_step needs a NODE cell".into()));
    }
    single_step(cell, h, input, dt, substeps)
}

/// LTC derivative in its additive form `−h/ρ + f (A − h)`.
pub fn ltc_derivative(h: f64, f: f64, rho: f64, a: f64) -> f64 {
    -h / rho + f * (a - h)
}

/// The same derivative written with the input-dependent time constant
/// `ρ / (1 + ρ f)`.
pub fn ltc_derivative_time_constant_form(h: f64, f: f64, rho: f64, a: f64) -> f64 {
    -h / (rho / (1.0 + rho * f)) + f * a
}

// ---------------------------------------------------------------------------
// Head

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// MLP mapping the final hidden state to `p` coefficients and `q` shifts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    pub layers: Vec<Dense>,
    pub out: Dense,
    pub dropout: f64,
    pub mode: CoeffMode,
    /// Indices of the spec coefficients produced by the head.
    pub fitted: Vec<usize>,
    /// Scale hint per produced coefficient.
    pub scales: Vec<f64>,
    pub signs: Vec<SignConstraint>,
    pub q: usize,
}

impl DenseHead {
    pub fn init(v: usize, hidden: &[usize], spec: &SystemSpec, q: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> DenseHead {
        let fitted = spec.fitted();
        let p = fitted.len();
        let mut layers = Vec::new();
        let mut width = v;
        for &w in hidden {
            layers.push(Dense {
                w: normal(rng, w, width, (2.0 / width as f64).sqrt()),
                b: Tensor::filled(w, 1, 0.1),
            });
            width = w;
        }
        let coeffs = spec.coefficients();
        let signs: Vec<SignConstraint> = fitted.iter().map(|&i| coeffs[i].sign).collect();
        let mut bias = vec![0.0; p + q];
        for (j, s) in signs.iter().enumerate() {
            bias[j] = if cfg.coeff_mode == CoeffMode::Linear || *s == SignConstraint::Free {
                cfg.init_coeff * s.direction()
            } else {
                cfg.init_coeff
            };
        }
        DenseHead {
            layers,
            out: Dense {
                w: normal(rng, p + q, width, 0.01 / (width as f64).sqrt()),
                b: Tensor::vector(bias),
            },
            dropout: cfg.dropout,
            mode: cfg.coeff_mode,
            scales: fitted.iter().map(|&i| coeffs[i].scale).collect(),
            fitted,
            signs,
            q,
        }
    }

    pub fn p(&self) -> usize {
        self.fitted.len()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.w);
            v.push(&l.b);
        }
        v.push(&self.out.w);
        v.push(&self.out.b);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v.push(&mut self.out.w);
        v.push(&mut self.out.b);
        v
    }

    /// Per-row (ReLU on/off, multiplier) used to turn raw outputs into coefficients.
    fn coeff_transform(&self) -> (Vec<f64>, Vec<f64>) {
        let mut relu = Vec::with_capacity(self.p());
        let mut mult = Vec::with_capacity(self.p());
        for (s, scale) in self.signs.iter().zip(&self.scales) {
            let signed = self.mode == CoeffMode::ReluSigned && *s != SignConstraint::Free;
            relu.push(if signed { 1.0 } else { 0.0 });
            mult.push(if signed { s.direction() * scale } else { *scale });
        }
        (relu, mult)
    }
}

struct HeadOut {
    theta: Var,
    shifts: Option<Var>,
}

fn record_head(tape: &mut Tape, head: &DenseHead, h: Var, params: &mut Vec<Var>, leaf: bool, dropout_rng: Option<&mut ChaCha8Rng>) -> HeadOut {
    let mut put = |tape: &mut Tape, t: &Tensor| {
        let v = if leaf { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        params.push(v);
        v
    };
    let cols = tape.shape(h).1;
    let mut rng = dropout_rng;
    let mut z = h;
    for layer in &head.layers {
        let w = put(tape, &layer.w);
        let b = put(tape, &layer.b);
        let lin = tape.matmul(w, z);
        let pre = tape.add(lin, b);
        z = tape.relu(pre);
        if let Some(r) = rng.as_deref_mut() {
            if head.dropout > 0.0 {
                let keep = 1.0 - head.dropout;
                let (rows, _) = tape.shape(z);
                let mask: Vec<f64> = (0..rows * cols).map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let m = tape.constant(Tensor::new(rows, cols, mask));
                z = tape.mul(z, m);
            }
        }
    }
    let w = put(tape, &head.out.w);
    let b = put(tape, &head.out.b);
    let lin = tape.matmul(w, z);
    let out = tape.add(lin, b);
    let p = head.p();
    let raw = if head.q > 0 { tape.slice(out, 0, p) } else { out };
    let (relu_rows, mult) = head.coeff_transform();
    let theta = if relu_rows.iter().all(|&r| r == 1.0) {
        let r = tape.relu(raw);
        let m = tape.constant(Tensor::vector(mult));
        tape.mul(r, m)
    } else if relu_rows.iter().all(|&r| r == 0.0) {
        let m = tape.constant(Tensor::vector(mult));
        tape.mul(raw, m)
    } else {
        let r = tape.relu(raw);
        let sel = tape.constant(Tensor::vector(relu_rows.clone()));
        let inv = tape.constant(Tensor::vector(relu_rows.iter().map(|r| 1.0 - r).collect()));
        let a = tape.mul(r, sel);
        let bpart = tape.mul(raw, inv);
        let mix = tape.add(a, bpart);
        let m = tape.constant(Tensor::vector(mult));
        tape.mul(mix, m)
    };
    let shifts = (head.q > 0).then(|| {
        let s = tape.slice(out, p, p + head.q);
        tape.sigmoid(s)
    });
    HeadOut { theta, shifts }
}

/// Head outputs for one hidden vector: fitted coefficients and shifts in (0, 1).
pub fn head_forward(head: &DenseHead, h_final: &[f64], training: bool, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::vector(h_final.to_vec()));
    let mut params = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = record_head(&mut tape, head, h, &mut params, false, training.then_some(&mut rng));
    let theta = tape.value(out.theta).data.clone();
    let shifts = out.shifts.map(|s| tape.value(s).data.clone()).unwrap_or_default();
    (theta, shifts)
}

// ---------------------------------------------------------------------------
// ODE loss

/// Settings of the reconstruction loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub solver: SolverConfig,
    pub s_max: f64,
    pub signed_shift: bool,
    pub explicit: bool,
    /// Weight per loss channel (empty: all ones).
    pub weights: Vec<f64>,
    /// Only the first `horizon` samples enter the loss.
    pub horizon: Option<usize>,
    pub fd_step: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            solver: SolverConfig::default(),
            s_max: 25.0,
            signed_shift: false,
            explicit: false,
            weights: Vec::new(),
            horizon: None,
            fd_step: 1e-6,
        }
    }
}

impl LossConfig {
    fn from_train(cfg: &TrainConfig, weights: Vec<f64>) -> Self {
        LossConfig {
            solver: cfg.solver,
            s_max: cfg.s_max,
            signed_shift: cfg.signed_shift,
            explicit: cfg.explicit_loss,
            weights,
            horizon: None,
            fd_step: cfg.fd_step,
        }
    }
}

/// Loss value and its sensitivities.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Gradient over the full coefficient vector (zero for held coefficients).
    pub grad_theta: Vec<f64>,
    pub grad_d: Vec<f64>,
    pub diverged: bool,
}

/// Shift in samples for a head output `d ∈ (0, 1)`.
pub fn shift_samples(d: f64, s_max: f64, signed: bool) -> f64 {
    if signed {
        (2.0 * d - 1.0) * s_max
    } else {
        d * s_max
    }
}

fn shift_row(row: &[f64], s: f64) -> Vec<f64> {
    let limit = (row.len() - 1) as f64;
    let s = s.clamp(-limit, limit);
    if s >= 0.0 {
        signal::fractional_shift(row, s).expect("shift clamped into range")
    } else {
        let rev: Vec<f64> = row.iter().rev().copied().collect();
        let mut out = signal::fractional_shift(&rev, -s).expect("shift clamped into range");
        out.reverse();
        out
    }
}

/// Input channels of `window` with the learned shifts applied.
pub fn shifted_inputs(problem: &RecoveryProblem, window: &Trace, d: &[f64], cfg: &LossConfig) -> Vec<Vec<f64>> {
    let mut u = window.u.clone();
    for (&ch, &di) in problem.shift_channels.iter().zip(d) {
        u[ch] = shift_row(&u[ch], shift_samples(di, cfg.s_max, cfg.signed_shift));
    }
    u
}

/// Reconstructs the loss channels of `window` under `theta` and shifts `d`.
pub fn reconstruct(problem: &RecoveryProblem, theta: &[f64], d: &[f64], window: &Trace, cfg: &LossConfig, horizon: usize) -> Option<Vec<Vec<f64>>> {
    let spec = &problem.spec;
    let mask = problem.loss_mask(cfg.explicit);
    let u = shifted_inputs(problem, window, d, cfg);
    let sig = InputSignal::new(window.t0, window.dt, u).ok()?;
    let y0: Vec<f64> = window.y.iter().map(|c| c[0]).collect();
    let x0 = odesolve::seed_initial_state(spec, theta, &y0, &mask);
    let grid = odesolve::uniform_grid(window.t0, window.dt, horizon);
    let traj = odesolve::solve(spec, &ThetaVec::unchecked(theta.to_vec()), &x0, &sig, &grid, &cfg.solver, &mask).ok()?;
    Some((0..window.y.len()).map(|c| traj.channel(c)).collect())
}

fn loss_value(problem: &RecoveryProblem, theta: &[f64], d: &[f64], window: &Trace, cfg: &LossConfig) -> Option<f64> {
    let k = window.k();
    let horizon = cfg.horizon.map_or(k, |h| h.clamp(2, k));
    let est = reconstruct(problem, theta, d, window, cfg, horizon)?;
    let mut total = 0.0;
    for (c, (e, y)) in est.iter().zip(&window.y).enumerate() {
        let w = cfg.weights.get(c).copied().unwrap_or(1.0);
        let ss: f64 = e[1..].iter().zip(&y[1..horizon]).map(|(a, b)| (a - b) * (a - b)).sum();
        total += w * ss;
    }
    let v = total / ((horizon - 1) * window.y.len()) as f64;
    v.is_finite().then_some(v)
}

/// Mean-square reconstruction error over samples `1..k` and its
/// central-difference sensitivities to the fitted coefficients and shifts.
pub fn ode_loss(problem: &RecoveryProblem, theta: &[f64], d: &[f64], window: &Trace, cfg: &LossConfig) -> LossEval {
    let p = theta.len();
    let q = d.len();
    let Some(value) = loss_value(problem, theta, d, window, cfg) else {
        return LossEval {
            value: DIVERGED_LOSS,
            grad_theta: vec![0.0; p],
            grad_d: vec![0.0; q],
            diverged: true,
        };
    };
    let coeffs = problem.spec.coefficients();
    let mut grad_theta = vec![0.0; p];
    let mut probe = theta.to_vec();
    for i in problem.spec.fitted() {
        let h = cfg.fd_step * theta[i].abs().max(coeffs[i].scale);
        probe[i] = theta[i] + h;
        let plus = loss_value(problem, &probe, d, window, cfg);
        probe[i] = theta[i] - h;
        let minus = loss_value(problem, &probe, d, window, cfg);
        probe[i] = theta[i];
        if let (Some(a), Some(b)) = (plus, minus) {
            grad_theta[i] = (a - b) / (2.0 * h);
        }
    }
    let mut grad_d = vec![0.0; q];
    let mut dprobe = d.to_vec();
    for i in 0..q {
        let h = cfg.fd_step;
        dprobe[i] = d[i] + h;
        let plus = loss_value(problem, theta, &dprobe, window, cfg);
        dprobe[i] = d[i] - h;
        let minus = loss_value(problem, theta, &dprobe, window, cfg);
        dprobe[i] = d[i];
        if let (Some(a), Some(b)) = (plus, minus) {
            grad_d[i] = (a - b) / (2.0 * h);
        }
    }
    LossEval {
        value,
        grad_theta,
        grad_d,
        diverged: false,
    }
}

// ---------------------------------------------------------------------------
// Model and training

/// Encoder, head and the data statistics fixed at initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cell: Cell,
    pub head: DenseHead,
    /// Per-channel standardization of the encoder input.
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    /// Loss weight per loss channel.
    pub loss_weights: Vec<f64>,
    /// Standard deviation per loss channel, used for scale-free signal error.
    pub y_scale: Vec<f64>,
    /// Sample interval the cell treats as one time unit.
    pub time_unit: f64,
}

impl Model {
    pub fn arch(&self) -> Arch {
        self.cell.arch
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.cell.tensors();
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.cell.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn encoder_inputs(&self, windows: &[&Window]) -> Vec<Tensor> {
        let s = windows.len();
        let k = windows[0].k();
        let c = self.in_mean.len();
        (0..k)
            .map(|j| {
                let mut t = Tensor::zeros(c, s);
                for (col, w) in windows.iter().enumerate() {
                    for (ch, row) in w.trace.y.iter().chain(&w.trace.u).enumerate() {
                        t.data[ch * s + col] = (row[j] - self.in_mean[ch]) / self.in_std[ch];
                    }
                }
                t
            })
            .collect()
    }
}

struct Recorded {
    tape: Tape,
    params: Vec<Var>,
    theta: Var,
    shifts: Option<Var>,
}

fn record_forward(model: &Model, windows: &[&Window], substeps: usize, leaf: bool, dropout: Option<&mut ChaCha8Rng>) -> Recorded {
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let cv = record_cell(&mut tape, &model.cell, &mut params, leaf);
    let inputs = model.encoder_inputs(windows);
    let h0 = tape.constant(Tensor::zeros(model.cell.hidden(), windows.len()));
    let dt = windows[0].trace.dt / model.time_unit;
    let h = record_unroll(&mut tape, &cv, h0, &inputs, dt, substeps);
    let out = record_head(&mut tape, &model.head, h, &mut params, leaf, dropout);
    Recorded {
        tape,
        params,
        theta: out.theta,
        shifts: out.shifts,
    }
}

fn full_theta(defaults: &[f64], fitted: &[usize], col: &[f64]) -> Vec<f64> {
    let mut th = defaults.to_vec();
    for (&i, &v) in fitted.iter().zip(col) {
        th[i] = v;
    }
    th
}

/// Per-window head outputs (full coefficient vectors, shift outputs).
pub fn predict(model: &Model, problem: &RecoveryProblem, windows: &[&Window], substeps: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let rec = record_forward(model, windows, substeps, false, None);
    let defaults = problem.default_theta();
    let th = rec.tape.value(rec.theta);
    let thetas = (0..windows.len()).map(|s| full_theta(&defaults, &model.head.fitted, &th.column(s))).collect();
    let shifts = match rec.shifts {
        Some(v) => {
            let t = rec.tape.value(v);
            (0..windows.len()).map(|s| t.column(s)).collect()
        }
        None => vec![Vec::new(); windows.len()],
    };
    (thetas, shifts)
}

/// Mean batch loss and gradients for every model tensor, in `Model::tensors` order.
pub fn batch_loss_and_grad(
    model: &Model,
    problem: &RecoveryProblem,
    windows: &[&Window],
    substeps: usize,
    loss_cfg: &LossConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> (f64, Vec<Tensor>, usize) {
    let mut rec = record_forward(model, windows, substeps, true, dropout);
    let s = windows.len();
    let defaults = problem.default_theta();
    let fitted = model.head.fitted.clone();
    let th = rec.tape.value(rec.theta).clone();
    let dv = rec.shifts.map(|v| rec.tape.value(v).clone());
    let mut evals = Vec::with_capacity(s);
    for (col, w) in windows.iter().enumerate() {
        let theta = full_theta(&defaults, &fitted, &th.column(col));
        let d = dv.as_ref().map(|t| t.column(col)).unwrap_or_default();
        evals.push(ode_loss(problem, &theta, &d, &w.trace, loss_cfg));
    }
    let diverged = evals.iter().filter(|e| e.diverged).count();
    let value = evals.iter().map(|e| e.value).sum::<f64>() / s as f64;
    let p = fitted.len();
    let q = dv.as_ref().map_or(0, |t| t.rows);
    let evals = Rc::new(evals);
    let mut parents = vec![rec.theta];
    parents.extend(rec.shifts);
    let ev = Rc::clone(&evals);
    let loss = rec.tape.custom(
        &parents,
        Tensor::scalar(value),
        Box::new(move |g| {
            let scale = g.item() / s as f64;
            let mut gt = Tensor::zeros(p, s);
            let mut gd = Tensor::zeros(q, s);
            for (col, e) in ev.iter().enumerate() {
                for (r, &i) in fitted.iter().enumerate() {
                    gt.data[r * s + col] = scale * e.grad_theta[i];
                }
                for r in 0..q {
                    gd.data[r * s + col] = scale * e.grad_d[r];
                }
            }
            if q > 0 {
                vec![gt, gd]
            } else {
                vec![gt]
            }
        }),
    );
    let grads = rec.tape.backward(loss);
    let tensors = rec.params.iter().map(|&v| grads.wrt(&rec.tape, v)).collect();
    (value, tensors, diverged)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in model.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Outcome of a recovery run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub arch: Arch,
    pub theta_est: ThetaVec,
    /// Learned shift per shifted channel, in samples.
    pub shifts: Vec<f64>,
    pub shift_channels: Vec<usize>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Signal error on the test split, in units of each channel's training standard deviation.
    pub rmse_y: f64,
    /// Signal error on the test split in data units.
    pub rmse_y_raw: f64,
    /// Coefficient error when the true coefficients are known.
    pub rmse_theta: Option<f64>,
    /// Reconstructed loss channels per evaluated window.
    pub reconstructions: Vec<Vec<Vec<f64>>>,
}

/// Everything needed to resume training bit-identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    problem: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }
}

/// Stateful training loop.
pub struct Trainer {
    pub problem: RecoveryProblem,
    pub cfg: TrainConfig,
    pub model: Model,
    adam: AdamState,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

fn channel_stats(rows: impl Iterator<Item = Vec<f64>>) -> (f64, f64) {
    let mut n = 0.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for r in rows {
        for v in r {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
}

impl Trainer {
    pub fn new(arch: Arch, problem: RecoveryProblem, batches: &BatchSet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train: Vec<&Window> = batches.train_windows().collect();
        let first = train.first().ok_or_else(|| NeuralError::Invalid("no training windows".into()))?;
        let spec = &problem.spec;
        let n_loss = if cfg.explicit_loss { spec.n() } else { problem.mask.observed().len() };
        if first.trace.y.len() != n_loss || first.trace.u.len() != spec.m() {
            return Err(NeuralError::Invalid(format!(
                "windows carry {} observed and {} input channels; the problem needs {} and {}",
                first.trace.y.len(),
                first.trace.u.len(),
                n_loss,
                spec.m()
            )));
        }
        if problem.shift_channels.iter().any(|&c| c >= spec.m()) {
            return Err(NeuralError::Invalid("shift channel beyond the input dimension".into()));
        }
        let n_in = first.trace.y.len() + first.trace.u.len();
        let mut in_mean = Vec::with_capacity(n_in);
        let mut in_std = Vec::with_capacity(n_in);
        for ch in 0..n_in {
            let (m, s) = channel_stats(train.iter().map(|w| w.stacked()[ch].clone()));
            in_mean.push(m);
            in_std.push(s);
        }
        let y_scale: Vec<f64> = in_std[..n_loss].to_vec();
        let loss_weights = if cfg.normalize_loss {
            y_scale.iter().map(|s| 1.0 / (s * s)).collect()
        } else {
            vec![1.0; n_loss]
        };
        let q = if cfg.shift_search { problem.shift_channels.len() } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cell = Cell::init(arch, cfg.hidden, n_in, &mut rng);
        let head = DenseHead::init(cfg.hidden, &cfg.head_hidden, spec, q, &cfg, &mut rng);
        let model = Model {
            cell,
            head,
            in_mean,
            in_std,
            loss_weights,
            y_scale,
            time_unit: match cfg.encoder_span {
                Some(span) => (first.k() - 1) as f64 * first.trace.dt / span,
                None => first.trace.dt,
            },
        };
        let adam = AdamState::new(&model);
        Ok(Trainer {
            problem,
            cfg,
            model,
            adam,
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            problem: serde_json::to_value(self.problem.to_file()).expect("problem serializes"),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let pf: ProblemFile = serde_json::from_value(ck.problem).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        Ok(Trainer {
            problem: RecoveryProblem::from_file(pf)?,
            cfg: ck.config,
            model: ck.model,
            adam: ck.adam,
            epoch: ck.epoch,
            loss_history: ck.loss_history,
        })
    }

    /// Loss settings at full horizon.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig::from_train(&self.cfg, self.model.loss_weights.clone())
    }

    fn horizon(&self, k: usize) -> Option<usize> {
        let w = self.cfg.horizon_warmup;
        let start = self.cfg.horizon_start.clamp(2, k);
        if self.epoch < w {
            return Some(start);
        }
        let into = self.epoch - w;
        (into < self.cfg.ramp).then(|| start + ((k - start) * (into + 1)) / (self.cfg.ramp + 1))
    }

    fn learning_rate(&self) -> f64 {
        let w = self.cfg.horizon_warmup;
        if self.epoch < w {
            return self.cfg.warmup_lr.unwrap_or(self.cfg.lr);
        }
        let into = self.epoch - w;
        if into < self.cfg.ramp {
            let from = self.cfg.warmup_lr.unwrap_or(self.cfg.lr);
            return from + (self.cfg.lr - from) * (into + 1) as f64 / (self.cfg.ramp + 1) as f64;
        }
        let span = self.cfg.epochs.saturating_sub(w + self.cfg.ramp);
        if span <= 1 {
            return self.cfg.lr;
        }
        let frac = (into - self.cfg.ramp) as f64 / (span - 1) as f64;
        self.cfg.lr * self.cfg.lr_final.powf(frac.min(1.0))
    }

    /// One pass over the training batches; returns the mean loss.
    pub fn train_epoch(&mut self, batches: &BatchSet) -> Result<f64> {
        let mut loss_cfg = self.loss_config();
        loss_cfg.horizon = self.horizon(batches.k);
        let lr = self.learning_rate();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut diverged = 0usize;
        for (bi, batch) in batches.train().enumerate() {
            let windows: Vec<&Window> = batch.windows.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(self.cfg.seed, self.epoch, bi));
            let (value, grads, div) = batch_loss_and_grad(&self.model, &self.problem, &windows, self.cfg.substeps, &loss_cfg, Some(&mut rng));
            if grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
                return Err(NeuralError::Divergence);
            }
            self.adam.step(&mut self.model, &grads, lr, &self.cfg);
            total += value * windows.len() as f64;
            count += windows.len();
            diverged += div;
        }
        if count > 0 && diverged == count {
            return Err(NeuralError::AllDiverged { epoch: self.epoch });
        }
        let mean = total / count.max(1) as f64;
        self.loss_history.push(mean);
        self.epoch += 1;
        Ok(mean)
    }

    /// Trains until `cfg.epochs` epochs have run.
    pub fn run(&mut self, batches: &BatchSet) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.train_epoch(batches)?;
        }
        Ok(())
    }

    /// Aggregates test-split estimates and reconstructs the test windows.
    pub fn finish(&self, batches: &BatchSet) -> Result<RecoveryResult> {
        let mut eval: Vec<&Window> = batches.test_windows().collect();
        if eval.is_empty() {
            eval = batches.train_windows().collect();
        }
        let (thetas, shifts) = predict(&self.model, &self.problem, &eval, self.cfg.substeps);
        let p = self.problem.spec.p();
        let mut theta = vec![0.0; p];
        for t in &thetas {
            for (a, b) in theta.iter_mut().zip(t) {
                *a += b / thetas.len() as f64;
            }
        }
        let signs = self.problem.spec.coeff_signs();
        for (v, s) in theta.iter_mut().zip(&signs) {
            *v = match s {
                SignConstraint::Nonneg => v.max(0.0),
                SignConstraint::Nonpos => v.min(0.0),
                SignConstraint::Free => *v,
            };
        }
        let q = shifts.first().map_or(0, Vec::len);
        let d: Vec<f64> = (0..q).map(|i| shifts.iter().map(|s| s[i]).sum::<f64>() / shifts.len() as f64).collect();
        let loss_cfg = self.loss_config();
        let mut recon = Vec::with_capacity(eval.len());
        let mut err = 0.0;
        let mut err_raw = 0.0;
        for w in &eval {
            match reconstruct(&self.problem, &theta, &d, &w.trace, &loss_cfg, w.k()) {
                Some(est) => {
                    let scaled = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
                        rows.iter().zip(&self.model.y_scale).map(|(r, s)| r.iter().map(|v| v / s).collect()).collect()
                    };
                    err += metrics::rmse_y(&scaled(&est), &scaled(&w.trace.y)).unwrap_or(f64::INFINITY);
                    err_raw += metrics::rmse_y(&est, &w.trace.y).unwrap_or(f64::INFINITY);
                    recon.push(est);
                }
                None => {
                    err = f64::INFINITY;
                    err_raw = f64::INFINITY;
                    recon.push(Vec::new());
                }
            }
        }
        let theta_est = ThetaVec::new(&self.problem.spec, theta).map_err(|e| NeuralError::Invalid(e.to_string()))?;
        Ok(RecoveryResult {
            arch: self.model.arch(),
            theta_est,
            shifts: d.iter().map(|&di| shift_samples(di, self.cfg.s_max, self.cfg.signed_shift)).collect(),
            shift_channels: if q > 0 { self.problem.shift_channels.clone() } else { Vec::new() },
            loss_history: self.loss_history.clone(),
            rmse_y: err / eval.len() as f64,
            rmse_y_raw: err_raw / eval.len() as f64,
            rmse_theta: None,
            reconstructions: recon,
        })
    }
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 24) ^ batch as u64
}

/// Trains `arch` on `batches` and returns the aggregated estimate.
pub fn train(arch: Arch, problem: &RecoveryProblem, batches: &BatchSet, cfg: &TrainConfig) -> Result<RecoveryResult> {
    if batches.batches.is_empty() {
        return Err(NeuralError::Invalid("empty batch set".into()));
    }
    let mut trainer = Trainer::new(arch, problem.clone(), batches, cfg.clone())?;
    trainer.run(batches)?;
    trainer.finish(batches)
}

/// Windows `traces`, trains, and scores against `theta_true` when given.
pub fn recover(
    traces: &[Trace],
    problem: &RecoveryProblem,
    arch: Arch,
    cfg: &TrainConfig,
    k_window: usize,
    split_ratio: f64,
    theta_true: Option<&ThetaVec>,
) -> Result<RecoveryResult> {
    let batches = signal::make_batches(traces, cfg.batch_size, k_window, split_ratio, cfg.seed)?;
    let mut result = train(arch, problem, &batches, cfg)?;
    if let Some(t) = theta_true {
        result.rmse_theta = metrics::rmse_theta(result.theta_est.values(), t.values()).ok();
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{builtin_system, parse_system_config};
    use approx::assert_abs_diff_eq;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_cell(arch: Arch, v: usize, c: usize) -> Cell {
        let mut cell = Cell::init(arch, v, c, &mut rng());
        cell.w_in = Tensor::zeros(v, c);
        cell.w_rec = Tensor::zeros(v, v);
        cell
    }

    /// Sets the pre-activation so that f = softplus(tanh(b)) equals `c`.
    fn bias_for(c: f64) -> f64 {
        inv_softplus(c).atanh()
    }

    #[test]
    fn ltc_zero_drive_decays_by_closed_form() {
        let mut cell = zero_cell(Arch::Ltc, 3, 2);
        // f = softplus(tanh(b)) cannot reach 0 exactly; use A = 0 and check the fused formula.
        cell.a = Some(Tensor::zeros(3, 1));
        cell.b = Tensor::filled(3, 1, -50.0);
        let rho = cell.rho().unwrap();
        let f = softplus((-50.0f64).tanh());
        let h = [1.0, -2.0, 0.5];
        let out = ltc_step(&cell, &h, &[0.3, 0.1], 0.4, 1).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(out[i], h[i] / (1.0 + 0.4 * (1.0 / rho[i] + f)), epsilon = 1e-14);
        }
    }

    #[test]
    fn ltc_converges_to_fixed_point() {
        let mut cell = zero_cell(Arch::Ltc, 2, 1);
        let c = 0.7;
        cell.b = Tensor::filled(2, 1, bias_for(c));
        cell.a = Some(Tensor::vector(vec![1.5, -0.5]));
        let rho = cell.rho().unwrap();
        let mut h = vec![0.0, 0.0];
        for _ in 0..200 {
            h = ltc_step(&cell, &h, &[0.0], 1.0, 4).unwrap();
        }
        for i in 0..2 {
            let a = cell.a.as_ref().unwrap().data[i];
            assert_abs_diff_eq!(h[i], c * a / (1.0 / rho[i] + c), epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_dt_leaves_state() {
        for arch in Arch::ALL {
            let cell = Cell::init(arch, 4, 2, &mut rng());
            let h = [0.1, 0.2, -0.3, 0.4];
            assert_eq!(single_step(&cell, &h, &[1.0, 2.0], 0.0, 3).unwrap(), h.to_vec());
        }
    }

    #[test]
    fn node_with_zero_drive_is_constant() {
        let cell = zero_cell(Arch::Node, 3, 1);
        let h = [0.4, -1.0, 2.0];
        assert_eq!(node_step(&cell, &h, &[5.0], 1.0, 6).unwrap(), h.to_vec());
    }

    #[test]
    fn ctrnn_with_zero_drive_decays_geometrically() {
        let cell = zero_cell(Arch::Ctrnn, 2, 1);
        let rho = cell.rho().unwrap();
        let h = [1.0, -3.0];
        let out = ctrnn_step(&cell, &h, &[0.0], 0.6, 3).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(out[i], h[i] * (1.0 - 0.2 / rho[i]).powi(3), epsilon = 1e-14);
        }
    }

    #[test]
    fn step_rejects_wrong_arch() {
        let cell = Cell::init(Arch::Node, 2, 1, &mut rng());
        assert!(ltc_step(&cell, &[0.0, 0.0], &[0.0], 1.0, 1).is_err());
    }

    #[test]
    fn eq_forms_agree() {
        let (h, f, rho, a) = (0.3, 1.7, 2.5, -0.8);
        assert_abs_diff_eq!(ltc_derivative(h, f, rho, a), ltc_derivative_time_constant_form(h, f, rho, a), epsilon = 1e-14);
    }

    fn lv_head(cfg: &TrainConfig, q: usize) -> DenseHead {
        let (spec, _) = builtin_system("lotka_volterra").unwrap();
        DenseHead::init(8, &[16], &spec, q, cfg, &mut rng())
    }

    #[test]
    fn zeroed_head_gives_half_shifts_and_zero_coeffs() {
        let mut head = lv_head(&TrainConfig::default(), 2);
        for t in head.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let (theta, d) = head_forward(&head, &[0.3; 8], false, 0);
        assert_eq!(theta, vec![0.0; 4]);
        assert_eq!(d, vec![0.5, 0.5]);
    }

    #[test]
    fn dropout_zero_is_inert() {
        let cfg = TrainConfig {
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let head = lv_head(&cfg, 1);
        let h = [0.2, -0.1, 0.5, 1.0, 0.0, 0.3, -0.7, 0.9];
        assert_eq!(head_forward(&head, &h, true, 5), head_forward(&head, &h, false, 5));
    }

    #[test]
    fn initial_coefficients_follow_scale_hints() {
        let head = lv_head(&TrainConfig::default(), 0);
        let (theta, d) = head_forward(&head, &[0.0; 8], false, 0);
        assert!(d.is_empty());
        for (t, s) in theta.iter().zip(&head.scales) {
            assert_abs_diff_eq!(*t, s, epsilon = 0.05 * s);
        }
    }

    fn decay_problem() -> RecoveryProblem {
        let (spec, _) = parse_system_config(
            r#"{"name":"decay","n":1,"m":0,"coeffs":[{"name":"a","sign":"nonneg","value":1.0}],
               "f_terms":[{"state":0,"coeff":"a","scale":-1.0,"factors":[{"var":0}]}]}"#,
        )
        .unwrap();
        RecoveryProblem::new(spec, SensingMask::full(1))
    }

    fn decay_window(a: f64) -> Trace {
        let y: Vec<f64> = (0..11).map(|j| (-a * 0.1 * j as f64).exp()).collect();
        Trace::unlabeled(0.0, 0.1, vec![y], vec![]).unwrap()
    }

    #[test]
    fn loss_examples() {
        let problem = decay_problem();
        let cfg = LossConfig {
            solver: SolverConfig::rk4(50),
            ..LossConfig::default()
        };
        let w = decay_window(1.0);
        assert!(ode_loss(&problem, &[1.0], &[], &w, &cfg).value < 1e-8);
        let oracle: f64 = (1..=10).map(|j| {
            let t = 0.1 * j as f64;
            ((-t).exp() - (-2.0 * t).exp()).powi(2)
        }).sum::<f64>() / 10.0;
        let got = ode_loss(&problem, &[2.0], &[], &w, &cfg).value;
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(got, 0.046942, epsilon = 1e-6);
    }

    #[test]
    fn loss_gradient_matches_oracle_slope() {
        let problem = decay_problem();
        let cfg = LossConfig {
            solver: SolverConfig::rk4(50),
            ..LossConfig::default()
        };
        let w = decay_window(1.0);
        let e = ode_loss(&problem, &[1.5], &[], &w, &cfg);
        // d/da mean((e^{-t} - e^{-at})²) = mean(2 (e^{-t} - e^{-at}) t e^{-at})
        let oracle: f64 = (1..=10).map(|j| {
            let t = 0.1 * j as f64;
            2.0 * ((-t).exp() - (-1.5 * t).exp()) * t * (-1.5 * t).exp()
        }).sum::<f64>() / 10.0;
        assert_abs_diff_eq!(e.grad_theta[0], oracle, epsilon = 1e-7);
    }

    #[test]
    fn divergent_candidate_is_clamped() {
        let (spec, _) = parse_system_config(
            r#"{"name":"blowup","n":1,"m":0,"coeffs":[{"name":"a","value":1.0}],
               "f_terms":[{"state":0,"coeff":"a","factors":[{"var":0,"power":2}]}]}"#,
        )
        .unwrap();
        let problem = RecoveryProblem::new(spec, SensingMask::full(1));
        let w = Trace::unlabeled(0.0, 0.5, vec![vec![1.0; 5]], vec![]).unwrap();
        let e = ode_loss(&problem, &[1.0], &[], &w, &LossConfig::default());
        assert!(e.diverged);
        assert_eq!(e.value, DIVERGED_LOSS);
        assert_eq!(e.grad_theta, vec![0.0]);
    }

    #[test]
    fn explicit_mode_matches_full_mask() {
        let (spec, theta) = builtin_system("lotka_volterra").unwrap();
        let problem = RecoveryProblem::new(spec.clone(), SensingMask::full(2));
        let grid = odesolve::uniform_grid(0.0, 0.5, 12);
        let u = vec![vec![1.0; 12]];
        let sig = InputSignal::new(0.0, 0.5, u.clone()).unwrap();
        let traj = odesolve::solve(&spec, &theta, &[90.0, 25.0], &sig, &grid, &SolverConfig::default(), &SensingMask::full(2)).unwrap();
        let w = Trace::unlabeled(0.0, 0.5, vec![traj.state(0), traj.state(1)], u).unwrap();
        let cand = [0.45, 0.03, 0.5, 0.005];
        let a = ode_loss(&problem, &cand, &[0.5], &w, &LossConfig::default());
        let b = ode_loss(&problem, &cand, &[0.5], &w, &LossConfig { explicit: true, ..LossConfig::default() });
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn signed_shift_maps_half_to_zero() {
        assert_eq!(shift_samples(0.5, 10.0, true), 0.0);
        assert_eq!(shift_samples(0.5, 10.0, false), 5.0);
        assert_eq!(shift_row(&[0.0, 0.0, 3.0, 0.0], -1.0), vec![0.0, 3.0, 0.0, 0.0]);
    }
}
