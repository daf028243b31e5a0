//! Control-affine dynamical systems described as term libraries.
//!
//! A system is `ẋ = f(x, θ) + g(x, θ)·u`, where both parts are sums of
//! terms. Each term contributes `scale · θ_c · θ_extra… · Π factors` to one
//! state derivative; input-effect terms are further multiplied by one input
//! channel. Coefficients enter linearly unless a term lists extra
//! coefficients (the Bergman `p₂·i_b` product is the only built-in case).

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while building or evaluating a system.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("coefficient {name} = {value} violates its {sign} constraint")]
    SignViolation {
        name: String,
        value: f64,
        sign: SignConstraint,
    },
    #[error("unknown system {name:?}; built-in systems are {supported}. Other systems (e.g. F8 crusader, pathogenic attack) are loaded with load_system_config")]
    UnknownSystem { name: String, supported: String },
    #[error("invalid system spec at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("failed to read system file: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignConstraint {
    #[default]
    Free,
    Nonneg,
    Nonpos,
}

impl SignConstraint {
    pub fn admits(self, value: f64) -> bool {
        match self {
            SignConstraint::Free => true,
            SignConstraint::Nonneg => value >= 0.0,
            SignConstraint::Nonpos => value <= 0.0,
        }
    }

    /// Multiplier applied to a nonnegative magnitude to land inside the constraint.
    pub fn direction(self) -> f64 {
        match self {
            SignConstraint::Nonpos => -1.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for SignConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SignConstraint::Free => "free",
            SignConstraint::Nonneg => "nonneg",
            SignConstraint::Nonpos => "nonpos",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    #[default]
    Pow,
    Sin,
    Cos,
}

impl FactorKind {
    fn is_pow(&self) -> bool {
        matches!(self, FactorKind::Pow)
    }
}

/// One multiplicative factor of a term: `x_var^power`, `sin(x_var)` or `cos(x_var)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub var: usize,
    #[serde(default = "default_power")]
    pub power: u32,
    #[serde(default, skip_serializing_if = "FactorKind::is_pow")]
    pub kind: FactorKind,
}

fn default_power() -> u32 {
    1
}

fn default_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

fn is_true(b: &bool) -> bool {
    *b
}

impl Factor {
    pub fn pow(var: usize, power: u32) -> Self {
        Factor {
            var,
            power,
            kind: FactorKind::Pow,
        }
    }

    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        let v = x[self.var];
        match self.kind {
            FactorKind::Pow => match self.power {
                0 => 1.0,
                1 => v,
                2 => v * v,
                3 => v * v * v,
                p => v.powi(p as i32),
            },
            FactorKind::Sin => v.sin().powi(self.power as i32),
            FactorKind::Cos => v.cos().powi(self.power as i32),
        }
    }
}

/// A single additive term of the right-hand side.
///
/// `coeff = None` denotes a structural term with no fitted coefficient
/// (e.g. `ẋ₁ = v₁` in a second-order system written in first-order form).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub state: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeff: Option<String>,
    /// Additional coefficients multiplied into the term.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<String>,
    #[serde(default = "default_scale", skip_serializing_if = "is_one")]
    pub scale: f64,
    #[serde(default)]
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn drift(state: usize, coeff: &str, scale: f64, factors: Vec<Factor>) -> Self {
        Term {
            state,
            input: None,
            coeff: Some(coeff.to_string()),
            times: Vec::new(),
            scale,
            factors,
        }
    }

    pub fn fixed(state: usize, scale: f64, factors: Vec<Factor>) -> Self {
        Term {
            state,
            input: None,
            coeff: None,
            times: Vec::new(),
            scale,
            factors,
        }
    }

    pub fn input(state: usize, input: usize, coeff: Option<&str>, scale: f64, factors: Vec<Factor>) -> Self {
        Term {
            state,
            input: Some(input),
            coeff: coeff.map(str::to_string),
            times: Vec::new(),
            scale,
            factors,
        }
    }

    pub fn with_times(mut self, extra: &[&str]) -> Self {
        self.times = extra.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Canonical label of the state/input product, e.g. `x1*x2^2*u1`.
    /// Returns `None` when the term has trigonometric factors.
    pub fn monomial_label(&self) -> Option<String> {
        let mut powers: Vec<(usize, u32)> = Vec::new();
        for f in &self.factors {
            if !f.kind.is_pow() {
                return None;
            }
            if f.power == 0 {
                continue;
            }
            match powers.iter_mut().find(|(v, _)| *v == f.var) {
                Some(entry) => entry.1 += f.power,
                None => powers.push((f.var, f.power)),
            }
        }
        powers.sort_unstable();
        let mut parts: Vec<String> = powers
            .iter()
            .map(|&(v, p)| {
                if p == 1 {
                    format!("x{}", v + 1)
                } else {
                    format!("x{}^{}", v + 1, p)
                }
            })
            .collect();
        if let Some(j) = self.input {
            parts.push(format!("u{}", j + 1));
        }
        if parts.is_empty() {
            Some("1".to_string())
        } else {
            Some(parts.join("*"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    #[serde(default)]
    pub sign: SignConstraint,
    pub value: f64,
    /// Order-of-magnitude hint used to scale network outputs.
    #[serde(default = "default_scale", skip_serializing_if = "is_one")]
    pub scale: f64,
    /// Held at `value` instead of being estimated.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub fit: bool,
}

/// Resting value of a state, used to seed components that are not observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RestValue {
    Value(f64),
    Coeff(String),
}

/// On-disk form of a system; field names follow the system-spec file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub coeffs: Vec<Coefficient>,
    #[serde(default)]
    pub f_terms: Vec<Term>,
    #[serde(default)]
    pub g_terms: Vec<Term>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub state_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rest: Vec<RestValue>,
    /// Input channels that carry sparse external events (meals, boluses…).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub event_inputs: Vec<usize>,
}

#[derive(Clone, Debug)]
struct CompiledTerm {
    state: usize,
    input: Option<usize>,
    coeffs: Vec<usize>,
    scale: f64,
    factors: Vec<Factor>,
}

impl CompiledTerm {
    #[inline]
    fn magnitude(&self, theta: &[f64], x: &[f64]) -> f64 {
        let mut v = self.scale;
        for &c in &self.coeffs {
            v *= theta[c];
        }
        for f in &self.factors {
            v *= f.eval(x);
        }
        v
    }
}

#[derive(Clone, Debug)]
enum CompiledRest {
    Value(f64),
    Coeff(usize),
}

/// Validated control-affine system.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    file: SystemFile,
    drift: Vec<CompiledTerm>,
    input: Vec<CompiledTerm>,
    rest: Vec<CompiledRest>,
}

impl PartialEq for SystemSpec {
    fn eq(&self, other: &Self) -> bool {
        self.file == other.file
    }
}

fn schema(path: impl Into<String>, reason: impl Into<String>) -> DynamicsError {
    DynamicsError::Schema {
        path: path.into(),
        reason: reason.into(),
    }
}

impl SystemSpec {
    /// Validates a parsed file and returns the spec with its default coefficients.
    pub fn from_file(file: SystemFile) -> Result<(SystemSpec, ThetaVec)> {
        let n = file.n;
        let m = file.m;
        if n == 0 {
            return Err(schema("n", "state dimension must be at least 1"));
        }
        let mut names: Vec<&str> = Vec::with_capacity(file.coeffs.len());
        for (i, c) in file.coeffs.iter().enumerate() {
            if names.contains(&c.name.as_str()) {
                return Err(schema(format!("coeffs[{i}].name"), format!("duplicate coefficient {:?}", c.name)));
            }
            if !c.value.is_finite() {
                return Err(schema(format!("coeffs[{i}].value"), "must be finite"));
            }
            if !(c.scale.is_finite() && c.scale > 0.0) {
                return Err(schema(format!("coeffs[{i}].scale"), "must be positive and finite"));
            }
            names.push(&c.name);
        }
        let lookup = |path: &str, name: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| schema(path, format!("unknown coefficient {name:?}")))
        };
        let mut used = vec![false; names.len()];
        let mut compile = |list: &[Term], field: &str, with_input: bool| -> Result<Vec<CompiledTerm>> {
            let mut out = Vec::with_capacity(list.len());
            for (i, t) in list.iter().enumerate() {
                let p = format!("{field}[{i}]");
                if t.state >= n {
                    return Err(schema(format!("{p}.state"), format!("state index {} out of range for n = {n}", t.state)));
                }
                match (with_input, t.input) {
                    (true, None) => return Err(schema(format!("{p}.input"), "input-effect term needs an input channel")),
                    (true, Some(j)) if j >= m => {
                        return Err(schema(format!("{p}.input"), format!("input index {j} out of range for m = {m}")))
                    }
                    (false, Some(_)) => return Err(schema(format!("{p}.input"), "drift term must not reference an input")),
                    _ => {}
                }
                if !t.scale.is_finite() {
                    return Err(schema(format!("{p}.scale"), "must be finite"));
                }
                let mut coeffs = Vec::new();
                if let Some(c) = &t.coeff {
                    coeffs.push(lookup(&format!("{p}.coeff"), c)?);
                }
                for (k, c) in t.times.iter().enumerate() {
                    coeffs.push(lookup(&format!("{p}.times[{k}]"), c)?);
                }
                for (k, f) in t.factors.iter().enumerate() {
                    if f.var >= n {
                        return Err(schema(
                            format!("{p}.factors[{k}].var"),
                            format!("state index {} out of range for n = {n}", f.var),
                        ));
                    }
                    if f.power > 3 && f.kind.is_pow() {
                        return Err(schema(format!("{p}.factors[{k}].power"), "powers above 3 are not supported"));
                    }
                }
                for &c in &coeffs {
                    used[c] = true;
                }
                out.push(CompiledTerm {
                    state: t.state,
                    input: t.input,
                    coeffs,
                    scale: t.scale,
                    factors: t.factors.clone(),
                });
            }
            Ok(out)
        };
        let drift = compile(&file.f_terms, "f_terms", false)?;
        let input = compile(&file.g_terms, "g_terms", true)?;
        for (i, c) in file.coeffs.iter().enumerate() {
            if c.fit && !used[i] {
                return Err(schema(
                    format!("coeffs[{i}]"),
                    format!("coefficient {:?} appears in no term (mark it \"fit\": false to keep it as a placeholder)", c.name),
                ));
            }
        }
        if let Some(rho) = file.rho {
            if !(rho.is_finite() && rho > 0.0) {
                return Err(schema("rho", "time constant must be positive"));
            }
        }
        for (field, names, len) in [("state_names", &file.state_names, n), ("input_names", &file.input_names, m)] {
            if !names.is_empty() && names.len() != len {
                return Err(schema(field, format!("expected {len} names, got {}", names.len())));
            }
        }
        if !file.rest.is_empty() && file.rest.len() != n {
            return Err(schema("rest", format!("expected {n} entries, got {}", file.rest.len())));
        }
        let mut rest = Vec::with_capacity(n);
        for i in 0..n {
            rest.push(match file.rest.get(i) {
                None => CompiledRest::Value(0.0),
                Some(RestValue::Value(v)) if v.is_finite() => CompiledRest::Value(*v),
                Some(RestValue::Value(_)) => return Err(schema(format!("rest[{i}]"), "must be finite")),
                Some(RestValue::Coeff(c)) => CompiledRest::Coeff(lookup(&format!("rest[{i}]"), c)?),
            });
        }
        for (k, &j) in file.event_inputs.iter().enumerate() {
            if j >= m {
                return Err(schema(format!("event_inputs[{k}]"), format!("input index {j} out of range for m = {m}")));
            }
        }
        let values: Vec<f64> = file.coeffs.iter().map(|c| c.value).collect();
        let spec = SystemSpec {
            file,
            drift,
            input,
            rest,
        };
        let theta = ThetaVec::new(&spec, values).map_err(|e| schema("coeffs", e.to_string()))?;
        Ok((spec, theta))
    }

    /// File form carrying `theta` as the coefficient values.
    pub fn to_file(&self, theta: &ThetaVec) -> SystemFile {
        let mut file = self.file.clone();
        for (c, v) in file.coeffs.iter_mut().zip(theta.values()) {
            c.value = *v;
        }
        file
    }

    pub fn name(&self) -> &str {
        &self.file.name
    }
    pub fn n(&self) -> usize {
        self.file.n
    }
    pub fn m(&self) -> usize {
        self.file.m
    }
    pub fn p(&self) -> usize {
        self.file.coeffs.len()
    }
    pub fn rho(&self) -> Option<f64> {
        self.file.rho
    }
    pub fn coefficients(&self) -> &[Coefficient] {
        &self.file.coeffs
    }
    pub fn coeff_names(&self) -> Vec<&str> {
        self.file.coeffs.iter().map(|c| c.name.as_str()).collect()
    }
    pub fn coeff_signs(&self) -> Vec<SignConstraint> {
        self.file.coeffs.iter().map(|c| c.sign).collect()
    }
    pub fn coeff_index(&self, name: &str) -> Option<usize> {
        self.file.coeffs.iter().position(|c| c.name == name)
    }
    /// Indices of the coefficients that are estimated.
    pub fn fitted(&self) -> Vec<usize> {
        (0..self.p()).filter(|&i| self.file.coeffs[i].fit).collect()
    }
    pub fn f_terms(&self) -> &[Term] {
        &self.file.f_terms
    }
    pub fn g_terms(&self) -> &[Term] {
        &self.file.g_terms
    }
    pub fn event_inputs(&self) -> &[usize] {
        &self.file.event_inputs
    }
    pub fn state_labels(&self) -> Vec<String> {
        if self.file.state_names.is_empty() {
            (1..=self.n()).map(|i| format!("x{i}")).collect()
        } else {
            self.file.state_names.clone()
        }
    }
    pub fn input_labels(&self) -> Vec<String> {
        if self.file.input_names.is_empty() {
            (1..=self.m()).map(|i| format!("u{i}")).collect()
        } else {
            self.file.input_names.clone()
        }
    }

    /// True when every term is first degree in the coefficients.
    pub fn is_linear_in_theta(&self) -> bool {
        self.drift.iter().chain(&self.input).all(|t| t.coeffs.len() <= 1)
    }

    /// Resting value of state `i` under `theta`.
    pub fn rest_value(&self, i: usize, theta: &[f64]) -> f64 {
        match self.rest[i] {
            CompiledRest::Value(v) => v,
            CompiledRest::Coeff(c) => theta[c],
        }
    }

    /// Writes `f(x,θ) + g(x,θ)·u` into `out` without validation.
    #[inline]
    pub fn rhs_into(&self, theta: &[f64], x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in &self.drift {
            out[t.state] += t.magnitude(theta, x);
        }
        for t in &self.input {
            let uj = u[t.input.unwrap_or(0)];
            if uj != 0.0 {
                out[t.state] += t.magnitude(theta, x) * uj;
            }
        }
    }

    /// The unperturbed part `f(x,θ)`.
    pub fn drift_into(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in &self.drift {
            out[t.state] += t.magnitude(theta, x);
        }
    }

    /// The input effect `g(x,θ)·u`.
    pub fn input_effect_into(&self, theta: &[f64], x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in &self.input {
            out[t.state] += t.magnitude(theta, x) * u[t.input.unwrap_or(0)];
        }
    }

    /// Column `j` of `g(x,θ)`.
    fn input_column(&self, theta: &[f64], x: &[f64], j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for t in self.input.iter().filter(|t| t.input == Some(j)) {
            out[t.state] += t.magnitude(theta, x);
        }
        out
    }

    fn check_dims(&self, theta: &ThetaVec, x: &[f64], u: &[f64]) -> Result<()> {
        check_len("theta", self.p(), theta.len())?;
        check_len("state", self.n(), x.len())?;
        check_len("input", self.m(), u.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("state"));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("input"));
        }
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DynamicsError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// Coefficient vector of a [`SystemSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThetaVec(Vec<f64>);

impl ThetaVec {
    pub fn new(spec: &SystemSpec, values: Vec<f64>) -> Result<Self> {
        check_len("theta", spec.p(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("theta"));
        }
        for (c, &v) in spec.coefficients().iter().zip(&values) {
            if !c.sign.admits(v) {
                return Err(DynamicsError::SignViolation {
                    name: c.name.clone(),
                    value: v,
                    sign: c.sign,
                });
            }
        }
        Ok(ThetaVec(values))
    }

    /// Wraps values without checking sign constraints (finite-difference probes).
    pub fn unchecked(values: Vec<f64>) -> Self {
        ThetaVec(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Diagonal 0/1 sensing matrix stored as its diagonal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct SensingMask(Vec<bool>);

impl SensingMask {
    pub fn new(diag: Vec<bool>) -> Result<Self> {
        if !diag.iter().any(|&b| b) {
            return Err(schema("mask", "sensing mask must observe at least one state"));
        }
        Ok(SensingMask(diag))
    }

    pub fn full(n: usize) -> Self {
        SensingMask(vec![true; n])
    }

    pub fn diag(&self) -> &[bool] {
        &self.0
    }
    pub fn n(&self) -> usize {
        self.0.len()
    }
    pub fn observed(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i]).collect()
    }
    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&b| b)
    }
}

impl TryFrom<Vec<u8>> for SensingMask {
    type Error = DynamicsError;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        if let Some(bad) = v.iter().find(|&&b| b > 1) {
            return Err(schema("mask", format!("entries must be 0 or 1, got {bad}")));
        }
        SensingMask::new(v.into_iter().map(|b| b == 1).collect())
    }
}

impl From<SensingMask> for Vec<u8> {
    fn from(m: SensingMask) -> Self {
        m.0.into_iter().map(u8::from).collect()
    }
}

/// Bilinear expansion of the input effect around an operating point:
/// `g(x)u ≈ B x + C u + Σ_j u_j D_j x + H`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearForm {
    pub b: Vec<Vec<f64>>,
    pub c_in: Vec<Vec<f64>>,
    pub d: Vec<Vec<Vec<f64>>>,
    pub h: Vec<f64>,
    pub rho: f64,
}

impl BilinearForm {
    /// Evaluates the bilinear approximation of `g(x)·u`.
    pub fn input_effect(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let n = self.h.len();
        (0..n)
            .map(|i| {
                let mut v = self.h[i];
                for k in 0..n {
                    v += self.b[i][k] * x[k];
                }
                for (j, &uj) in u.iter().enumerate() {
                    v += self.c_in[i][j] * uj;
                    for k in 0..n {
                        v += uj * self.d[j][i][k] * x[k];
                    }
                }
                v
            })
            .collect()
    }
}

/// `f(x,θ) + g(x,θ)·u`.
pub fn eval_rhs(spec: &SystemSpec, theta: &ThetaVec, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    spec.check_dims(theta, x, u)?;
    let mut out = vec![0.0; spec.n()];
    spec.rhs_into(theta.values(), x, u, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite("right-hand side"));
    }
    Ok(out)
}

/// Splits `f` into `−x/ρ` and the remainder `f₋ρ(x) = f(x) + x/ρ`.
/// Returns `None` for systems without a declared time constant.
pub fn split_time_constant(spec: &SystemSpec, theta: &ThetaVec, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let rho = spec.rho()?;
    let mut f = vec![0.0; spec.n()];
    spec.drift_into(theta.values(), x, &mut f);
    let decay: Vec<f64> = x.iter().map(|v| -v / rho).collect();
    let remainder = f.iter().zip(x).map(|(fi, xi)| fi + xi / rho).collect();
    Some((decay, remainder))
}

pub fn apply_sensing(mask: &SensingMask, x: &[f64]) -> Result<Vec<f64>> {
    check_len("state", mask.n(), x.len())?;
    Ok(x.iter().zip(mask.diag()).filter(|(_, &on)| on).map(|(v, _)| *v).collect())
}

/// Default finite-difference step for [`bilinearize`].
pub fn default_bilinear_step(x0: &[f64]) -> f64 {
    1e-5 * x0.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()))
}

/// Central-difference bilinearization of `g(x)·u` around `(x0, u0)`.
pub fn bilinearize(spec: &SystemSpec, theta: &ThetaVec, x0: &[f64], u0: &[f64], h: f64) -> Result<BilinearForm> {
    spec.check_dims(theta, x0, u0)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(DynamicsError::Numerical(format!("finite-difference step must be positive, got {h}")));
    }
    let n = spec.n();
    let m = spec.m();
    let th = theta.values();
    let effect = |x: &[f64], u: &[f64]| {
        let mut out = vec![0.0; n];
        spec.input_effect_into(th, x, u, &mut out);
        out
    };
    let mut b = vec![vec![0.0; n]; n];
    let mut d = vec![vec![vec![0.0; n]; n]; m];
    for k in 0..n {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let gp = effect(&xp, u0);
        let gm = effect(&xm, u0);
        for i in 0..n {
            b[i][k] = (gp[i] - gm[i]) / (2.0 * h);
        }
        // g is linear in u, so ∂²(g u)/∂x_k∂u_j is the x-derivative of column j.
        for (j, dj) in d.iter_mut().enumerate() {
            let cp = spec.input_column(th, &xp, j);
            let cm = spec.input_column(th, &xm, j);
            for i in 0..n {
                dj[i][k] = (cp[i] - cm[i]) / (2.0 * h);
            }
        }
    }
    let mut c_in = vec![vec![0.0; m]; n];
    for j in 0..m {
        let mut up = u0.to_vec();
        let mut um = u0.to_vec();
        up[j] += h;
        um[j] -= h;
        let gp = effect(x0, &up);
        let gm = effect(x0, &um);
        for i in 0..n {
            c_in[i][j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let g0 = effect(x0, u0);
    let mut hvec = g0;
    for i in 0..n {
        for k in 0..n {
            hvec[i] -= b[i][k] * x0[k];
        }
        for j in 0..m {
            hvec[i] -= c_in[i][j] * u0[j];
            for k in 0..n {
                hvec[i] -= u0[j] * d[j][i][k] * x0[k];
            }
        }
    }
    let finite = b.iter().flatten().chain(c_in.iter().flatten()).chain(d.iter().flatten().flatten()).chain(&hvec).all(|v| v.is_finite());
    if !finite {
        return Err(DynamicsError::Numerical("non-finite Jacobian entry".into()));
    }
    Ok(BilinearForm {
        b,
        c_in,
        d,
        h: hvec,
        rho: spec.rho().unwrap_or(f64::INFINITY),
    })
}

pub const BUILTIN_SYSTEMS: [&str; 5] = ["lotka_volterra", "lorenz", "bergman_aid", "eeg_dvdp", "scalar_decay"];

pub fn builtin_system(name: &str) -> Result<(SystemSpec, ThetaVec)> {
    let file = match name {
        "lotka_volterra" => lotka_volterra(),
        "lorenz" => lorenz(),
        "bergman_aid" => bergman_aid(),
        "eeg_dvdp" => eeg_dvdp(),
        "scalar_decay" => scalar_decay(),
        _ => {
            return Err(DynamicsError::UnknownSystem {
                name: name.to_string(),
                supported: BUILTIN_SYSTEMS.join(", "),
            })
        }
    };
    SystemSpec::from_file(file)
}

pub fn load_system_config(path: impl AsRef<Path>) -> Result<(SystemSpec, ThetaVec)> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| DynamicsError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_system_config(&text)
}

pub fn parse_system_config(text: &str) -> Result<(SystemSpec, ThetaVec)> {
    let file: SystemFile = serde_json::from_str(text).map_err(|e| schema(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    SystemSpec::from_file(file)
}

pub fn save_system_config(spec: &SystemSpec, theta: &ThetaVec, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&spec.to_file(theta)).map_err(|e| DynamicsError::Io(e.to_string()))?;
    fs::write(path.as_ref(), text).map_err(|e| DynamicsError::Io(format!("{}: {e}", path.as_ref().display())))
}

/// Resolves a built-in name or a path to a system file.
pub fn resolve_system(name_or_path: &str) -> Result<(SystemSpec, ThetaVec)> {
    if BUILTIN_SYSTEMS.contains(&name_or_path) {
        builtin_system(name_or_path)
    } else if Path::new(name_or_path).exists() {
        load_system_config(name_or_path)
    } else {
        builtin_system(name_or_path)
    }
}

fn coeff(name: &str, sign: SignConstraint, value: f64, scale: f64) -> Coefficient {
    Coefficient {
        name: name.to_string(),
        sign,
        value,
        scale,
        fit: true,
    }
}

use Factor as F;
use SignConstraint::{Free, Nonneg};

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn lotka_volterra() -> SystemFile {
    SystemFile {
        name: "lotka_volterra".into(),
        n: 2,
        m: 1,
        coeffs: vec![
            coeff("a", Nonneg, 0.5, 1.0),
            coeff("b", Nonneg, 0.025, 0.01),
            coeff("c", Nonneg, 0.5, 1.0),
            coeff("d", Nonneg, 0.005, 0.01),
        ],
        f_terms: vec![
            Term::drift(0, "a", 1.0, vec![F::pow(0, 1)]),
            Term::drift(0, "b", -1.0, vec![F::pow(0, 1), F::pow(1, 1)]),
            Term::drift(1, "c", -1.0, vec![F::pow(1, 1)]),
            Term::drift(1, "d", 1.0, vec![F::pow(0, 1), F::pow(1, 1)]),
        ],
        g_terms: vec![Term::input(1, 0, None, 1.0, vec![])],
        rho: Some(2.0),
        state_names: names(&["prey", "predator"]),
        input_names: names(&["u"]),
        rest: vec![RestValue::Value(100.0), RestValue::Value(20.0)],
        event_inputs: vec![0],
    }
}

fn lorenz() -> SystemFile {
    SystemFile {
        name: "lorenz".into(),
        n: 3,
        m: 1,
        coeffs: vec![
            coeff("sigma", Nonneg, 10.0, 10.0),
            coeff("rho_l", Nonneg, 28.0, 10.0),
            coeff("beta", Nonneg, 8.0 / 3.0, 1.0),
        ],
        f_terms: vec![
            Term::drift(0, "sigma", 1.0, vec![F::pow(1, 1)]),
            Term::drift(0, "sigma", -1.0, vec![F::pow(0, 1)]),
            Term::drift(1, "rho_l", 1.0, vec![F::pow(0, 1)]),
            Term::fixed(1, -1.0, vec![F::pow(0, 1), F::pow(2, 1)]),
            Term::fixed(1, -1.0, vec![F::pow(1, 1)]),
            Term::fixed(2, 1.0, vec![F::pow(0, 1), F::pow(1, 1)]),
            Term::drift(2, "beta", -1.0, vec![F::pow(2, 1)]),
        ],
        g_terms: vec![Term::input(0, 0, None, 1.0, vec![])],
        rho: Some(1.0),
        state_names: names(&["x1", "x2", "x3"]),
        input_names: names(&["u"]),
        rest: Vec::new(),
        event_inputs: vec![0],
    }
}

/// Bergman minimal model; time in minutes, glucose in mg/dL.
fn bergman_aid() -> SystemFile {
    let mut ctrl = coeff("k_ctrl", Free, 0.0, 1.0);
    ctrl.fit = false;
    SystemFile {
        name: "bergman_aid".into(),
        n: 3,
        m: 2,
        coeffs: vec![
            coeff("p1", Nonneg, 0.03, 0.01),
            coeff("p2", Nonneg, 2.0e-5, 1.0e-5),
            coeff("p3", Nonneg, 0.002, 0.001),
            coeff("p4", Nonneg, 0.5, 1.0),
            coeff("n", Nonneg, 0.1, 0.1),
            coeff("inv_voi", Nonneg, 0.4, 1.0),
            coeff("i_b", Nonneg, 10.0, 10.0),
            coeff("g_b", Nonneg, 120.0, 100.0),
            ctrl,
        ],
        f_terms: vec![
            Term::drift(0, "n", -1.0, vec![F::pow(0, 1)]),
            Term::drift(1, "p1", -1.0, vec![F::pow(1, 1)]),
            Term::drift(1, "p2", 1.0, vec![F::pow(0, 1)]),
            Term::drift(1, "p2", -1.0, vec![]).with_times(&["i_b"]),
            Term::drift(2, "g_b", -1.0, vec![F::pow(1, 1)]),
            Term::drift(2, "p3", -1.0, vec![F::pow(2, 1)]),
        ],
        g_terms: vec![
            Term::input(0, 0, Some("p4"), 1.0, vec![]),
            Term::input(2, 1, Some("inv_voi"), 1.0, vec![]),
        ],
        rho: Some(10.0),
        state_names: names(&["i", "i_s", "G"]),
        input_names: names(&["insulin", "meal"]),
        rest: vec![RestValue::Coeff("i_b".into()), RestValue::Value(0.0), RestValue::Coeff("g_b".into())],
        event_inputs: vec![1],
    }
}

/// Coupled Duffing–van der Pol oscillators as `(x₁, ẋ₁, x₂, ẋ₂)`.
fn eeg_dvdp() -> SystemFile {
    let (x1, v1, x2, v2) = (0, 1, 2, 3);
    let mut f_terms = vec![
        Term::fixed(x1, 1.0, vec![F::pow(v1, 1)]),
        Term::fixed(x2, 1.0, vec![F::pow(v2, 1)]),
        Term::drift(v1, "k1", -1.0, vec![F::pow(x1, 1)]),
        Term::drift(v1, "k2", 1.0, vec![F::pow(x2, 1)]),
        Term::drift(v1, "b1", -1.0, vec![F::pow(x1, 3)]),
        Term::drift(v1, "eps1", 1.0, vec![F::pow(v1, 1)]),
        Term::drift(v1, "eps1", -1.0, vec![F::pow(v1, 1), F::pow(x1, 2)]),
        Term::drift(v2, "k2", 1.0, vec![F::pow(x1, 1)]),
        Term::drift(v2, "k2", -1.0, vec![F::pow(x2, 1)]),
        Term::drift(v2, "eps2", 1.0, vec![F::pow(v2, 1)]),
        Term::drift(v2, "eps2", -1.0, vec![F::pow(v2, 1), F::pow(x2, 2)]),
    ];
    // (x₁ − x₂)³ expanded; it enters ẍ₁ with a minus sign and ẍ₂ with a plus sign.
    let cube: [(f64, Vec<Factor>); 4] = [
        (1.0, vec![F::pow(x1, 3)]),
        (-3.0, vec![F::pow(x1, 2), F::pow(x2, 1)]),
        (3.0, vec![F::pow(x1, 1), F::pow(x2, 2)]),
        (-1.0, vec![F::pow(x2, 3)]),
    ];
    for (s, factors) in &cube {
        f_terms.push(Term::drift(v1, "b2", -s, factors.clone()));
    }
    for (s, factors) in &cube {
        f_terms.push(Term::drift(v2, "b2", *s, factors.clone()));
    }
    SystemFile {
        name: "eeg_dvdp".into(),
        n: 4,
        m: 1,
        coeffs: vec![
            coeff("k1", Nonneg, 6.0, 1.0),
            coeff("k2", Nonneg, 2.0, 1.0),
            coeff("b1", Nonneg, 1.0, 1.0),
            coeff("b2", Nonneg, 0.5, 1.0),
            coeff("eps1", Nonneg, 1.0, 1.0),
            coeff("eps2", Nonneg, 0.8, 1.0),
        ],
        f_terms,
        g_terms: vec![Term::input(v2, 0, None, 1.0, vec![])],
        rho: None,
        state_names: names(&["x1", "x1_dot", "x2", "x2_dot"]),
        input_names: names(&["drive"]),
        rest: Vec::new(),
        event_inputs: vec![0],
    }
}

/// `ẋ = −a x + u`.
fn scalar_decay() -> SystemFile {
    SystemFile {
        name: "scalar_decay".into(),
        n: 1,
        m: 1,
        coeffs: vec![coeff("a", Nonneg, 1.0, 1.0)],
        f_terms: vec![Term::drift(0, "a", -1.0, vec![F::pow(0, 1)])],
        g_terms: vec![Term::input(0, 0, None, 1.0, vec![])],
        rho: Some(1.0),
        state_names: names(&["x"]),
        input_names: names(&["u"]),
        rest: Vec::new(),
        event_inputs: vec![0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0_f64, |a, b| a.max(b.abs()))
    }

    #[test]
    fn lotka_volterra_equilibrium_is_zero() {
        let (spec, theta) = builtin_system("lotka_volterra").unwrap();
        let r = eval_rhs(&spec, &theta, &[100.0, 20.0], &[0.0]).unwrap();
        assert!(max_abs(&r) < 1e-12, "{r:?}");
    }

    #[test]
    fn lorenz_at_unit_point() {
        let (spec, theta) = builtin_system("lorenz").unwrap();
        let r = eval_rhs(&spec, &theta, &[1.0, 1.0, 1.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 26.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[2], -5.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn lorenz_fixed_points_are_equilibria() {
        let (spec, theta) = builtin_system("lorenz").unwrap();
        let beta = 8.0 / 3.0;
        let r = (beta * 27.0_f64).sqrt();
        for x in [[0.0, 0.0, 0.0], [r, r, 27.0], [-r, -r, 27.0]] {
            let d = eval_rhs(&spec, &theta, &x, &[0.0]).unwrap();
            assert!(max_abs(&d) < 1e-12, "{x:?} -> {d:?}");
        }
    }

    #[test]
    fn bergman_insulin_rate_vanishes_without_insulin() {
        let (spec, theta) = builtin_system("bergman_aid").unwrap();
        let r = eval_rhs(&spec, &theta, &[0.0, 0.01, 140.0], &[0.0, 3.0]).unwrap();
        assert_eq!(r[0], 0.0);
    }

    #[test]
    fn bergman_basal_state_is_equilibrium() {
        let (spec, theta) = builtin_system("bergman_aid").unwrap();
        let t = theta.values();
        let (p4, n, ib) = (t[3], t[4], t[6]);
        // i = i_b, i_s = 0, G = 0 with basal insulin n·i_b/p4 and no meals.
        let r = eval_rhs(&spec, &theta, &[ib, 0.0, 0.0], &[n * ib / p4, 0.0]).unwrap();
        assert!(max_abs(&r) < 1e-12, "{r:?}");
    }

    #[test]
    fn builtin_shapes() {
        let (spec, _) = builtin_system("bergman_aid").unwrap();
        assert_eq!((spec.n(), spec.m(), spec.p()), (3, 2, 9));
        assert_eq!(spec.fitted().len(), 8);
        for name in ["p1", "p2", "i_b", "p3", "p4", "n", "inv_voi", "g_b"] {
            assert!(spec.coeff_index(name).is_some(), "{name}");
        }
        let (spec, _) = builtin_system("eeg_dvdp").unwrap();
        assert_eq!((spec.n(), spec.m(), spec.p()), (4, 1, 6));
    }

    #[test]
    fn unknown_builtin_points_to_config_loader() {
        let err = builtin_system("f8_crusader").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("load_system_config"), "{msg}");
        assert!(msg.contains("lotka_volterra"), "{msg}");
    }

    #[test]
    fn minimal_config_parses() {
        let text = r#"{"name":"decay","n":1,"m":0,
            "coeffs":[{"name":"a","sign":"nonneg","value":1.0}],
            "f_terms":[{"state":0,"coeff":"a","scale":-1.0,"factors":[{"var":0,"power":1}]}]}"#;
        let (spec, theta) = parse_system_config(text).unwrap();
        assert_eq!((spec.n(), spec.m(), spec.p()), (1, 0, 1));
        let r = eval_rhs(&spec, &theta, &[2.0], &[]).unwrap();
        assert_eq!(r, vec![-2.0]);
    }

    #[test]
    fn out_of_range_factor_is_a_schema_error_with_path() {
        let text = r#"{"name":"bad","n":3,"m":0,
            "coeffs":[{"name":"a","value":1.0}],
            "f_terms":[{"state":0,"coeff":"a","factors":[{"var":5,"power":1}]}]}"#;
        match parse_system_config(text).unwrap_err() {
            DynamicsError::Schema { path, .. } => assert_eq!(path, "f_terms[0].factors[0].var"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unused_coefficient_rejected() {
        let text = r#"{"name":"bad","n":1,"m":0,
            "coeffs":[{"name":"a","value":1.0},{"name":"b","value":2.0}],
            "f_terms":[{"state":0,"coeff":"a","factors":[{"var":0}]}]}"#;
        assert!(matches!(parse_system_config(text), Err(DynamicsError::Schema { .. })));
    }

    #[test]
    fn lorenz_file_round_trip() {
        let (spec, theta) = builtin_system("lorenz").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lorenz.json");
        save_system_config(&spec, &theta, &path).unwrap();
        let (spec2, theta2) = load_system_config(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(theta, theta2);
    }

    #[test]
    fn dimension_and_finiteness_checks() {
        let (spec, theta) = builtin_system("lorenz").unwrap();
        assert!(matches!(
            eval_rhs(&spec, &theta, &[1.0, 1.0], &[0.0]),
            Err(DynamicsError::DimensionMismatch { what: "state", .. })
        ));
        assert!(matches!(eval_rhs(&spec, &theta, &[1.0, f64::NAN, 1.0], &[0.0]), Err(DynamicsError::NonFinite(_))));
    }

    #[test]
    fn theta_sign_constraints_enforced() {
        let (spec, _) = builtin_system("lotka_volterra").unwrap();
        assert!(matches!(
            ThetaVec::new(&spec, vec![-0.5, 0.025, 0.5, 0.005]),
            Err(DynamicsError::SignViolation { .. })
        ));
    }

    #[test]
    fn sensing_selects_observed_components() {
        let all = SensingMask::new(vec![true, true, true]).unwrap();
        assert_eq!(apply_sensing(&all, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let glucose = SensingMask::new(vec![false, false, true]).unwrap();
        assert_eq!(apply_sensing(&glucose, &[10.0, 0.01, 140.0]).unwrap(), vec![140.0]);
        let first = SensingMask::try_from(vec![1u8, 0]).unwrap();
        assert_eq!(apply_sensing(&first, &[7.0, 9.0]).unwrap(), vec![7.0]);
        assert!(SensingMask::new(vec![false, false]).is_err());
    }

    fn scalar_bilinear_spec() -> (SystemSpec, ThetaVec) {
        let text = r#"{"name":"xu","n":1,"m":1,
            "coeffs":[{"name":"k","value":1.0}],
            "f_terms":[{"state":0,"coeff":"k","scale":-1.0,"factors":[{"var":0}]}],
            "g_terms":[{"state":0,"input":0,"factors":[{"var":0}]}]}"#;
        parse_system_config(text).unwrap()
    }

    #[test]
    fn bilinearize_product_term() {
        let (spec, theta) = scalar_bilinear_spec();
        let form = bilinearize(&spec, &theta, &[2.0], &[3.0], 1e-5).unwrap();
        assert_abs_diff_eq!(form.b[0][0], 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(form.c_in[0][0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(form.d[0][0][0], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn bilinearize_constant_input_gain() {
        let (spec, theta) = builtin_system("scalar_decay").unwrap();
        let form = bilinearize(&spec, &theta, &[0.7], &[1.3], 1e-5).unwrap();
        assert_abs_diff_eq!(form.b[0][0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(form.c_in[0][0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(form.d[0][0][0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bilinearize_bergman_meal_channel() {
        let (spec, theta) = builtin_system("bergman_aid").unwrap();
        let x0 = [12.0, 0.002, 150.0];
        let form = bilinearize(&spec, &theta, &x0, &[1.0, 2.0], default_bilinear_step(&x0)).unwrap();
        let inv_voi = theta.values()[5];
        assert_abs_diff_eq!(form.c_in[2][1], inv_voi, epsilon = 1e-8);
        assert!(form.b[2].iter().all(|v| v.abs() < 1e-12));
        assert!(form.d[1][2].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bilinear_form_exact_at_expansion_point() {
        let (spec, theta) = scalar_bilinear_spec();
        for (x0, u0) in [(2.0, 3.0), (-1.5, 0.25), (10.0, -4.0)] {
            let h = default_bilinear_step(&[x0]);
            let form = bilinearize(&spec, &theta, &[x0], &[u0], h).unwrap();
            let approx = form.input_effect(&[x0], &[u0]);
            let exact = x0 * u0;
            assert!((approx[0] - exact).abs() <= 10.0 * h * h * exact.abs().max(1.0));
        }
    }

    #[test]
    fn time_constant_split_recovers_drift() {
        for name in ["lotka_volterra", "lorenz", "bergman_aid", "scalar_decay"] {
            let (spec, theta) = builtin_system(name).unwrap();
            let x: Vec<f64> = (0..spec.n()).map(|i| 1.5 + i as f64 * 0.7).collect();
            let (decay, rest) = split_time_constant(&spec, &theta, &x).unwrap();
            let mut f = vec![0.0; spec.n()];
            spec.drift_into(theta.values(), &x, &mut f);
            for i in 0..spec.n() {
                assert!((decay[i] + rest[i] - f[i]).abs() <= 1e-12 * f[i].abs().max(1.0), "{name}");
            }
        }
        let (eeg, theta) = builtin_system("eeg_dvdp").unwrap();
        assert!(split_time_constant(&eeg, &theta, &[0.0; 4]).is_none());
    }

    #[test]
    fn monomial_labels() {
        let t = Term::drift(0, "b", -1.0, vec![F::pow(1, 1), F::pow(0, 1)]);
        assert_eq!(t.monomial_label().unwrap(), "x1*x2");
        let t = Term::input(1, 0, None, 1.0, vec![]);
        assert_eq!(t.monomial_label().unwrap(), "u1");
        let t = Term::drift(0, "c", 1.0, vec![F::pow(0, 1), F::pow(0, 2)]);
        assert_eq!(t.monomial_label().unwrap(), "x1^3");
    }
}
