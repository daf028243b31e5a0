//! Sparse identification of nonlinear dynamics with control (SINDYc):
//! candidate library, finite-difference derivatives and sequentially
//! thresholded ridge regression.

use crate::dynamics::SystemSpec;
use crate::signal::Trace;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SindyError {
    #[error("restricted normal equations are singular")]
    Singular,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SindyError>;

/// Candidate functions over states `x1..xn` and inputs `u1..um`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionLibrary {
    pub degree: u32,
    /// Adds `sin(xi)` and `cos(xi)` per state.
    pub trig: bool,
    /// Adds each non-constant state monomial times each input.
    pub cross: bool,
}

impl Default for FunctionLibrary {
    fn default() -> Self {
        FunctionLibrary {
            degree: 2,
            trig: false,
            cross: false,
        }
    }
}

/// Exponent vectors of all monomials in `n` variables with total degree `1..=d`,
/// ordered by degree, then lexicographically descending in the leading variable.
fn monomials(n: usize, d: u32) -> Vec<Vec<u32>> {
    fn rec(n: usize, start: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for v in start..n {
            cur[v] += 1;
            rec(n, v, left - 1, cur, out);
            cur[v] -= 1;
        }
    }
    let mut out = Vec::new();
    for deg in 1..=d {
        rec(n, 0, deg, &mut vec![0; n], &mut out);
    }
    out
}

fn monomial_label(exps: &[u32]) -> String {
    let parts: Vec<String> = exps
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0)
        .map(|(v, &p)| if p == 1 { format!("x{}", v + 1) } else { format!("x{}^{}", v + 1, p) })
        .collect();
    parts.join("*")
}

#[derive(Clone, Debug)]
enum Column {
    Const,
    Mono(Vec<u32>),
    Input(usize),
    Cross(Vec<u32>, usize),
    Sin(usize),
    Cos(usize),
}

impl Column {
    fn label(&self) -> String {
        match self {
            Column::Const => "1".into(),
            Column::Mono(e) => monomial_label(e),
            Column::Input(j) => format!("u{}", j + 1),
            Column::Cross(e, j) => format!("{}*u{}", monomial_label(e), j + 1),
            Column::Sin(i) => format!("sin(x{})", i + 1),
            Column::Cos(i) => format!("cos(x{})", i + 1),
        }
    }

    fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        let mono = |e: &[u32]| e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product::<f64>();
        match self {
            Column::Const => 1.0,
            Column::Mono(e) => mono(e),
            Column::Input(j) => u[*j],
            Column::Cross(e, j) => mono(e) * u[*j],
            Column::Sin(i) => x[*i].sin(),
            Column::Cos(i) => x[*i].cos(),
        }
    }
}

impl FunctionLibrary {
    fn columns(&self, n: usize, m: usize) -> Vec<Column> {
        let monos = monomials(n, self.degree);
        let mut cols = vec![Column::Const];
        cols.extend(monos.iter().cloned().map(Column::Mono));
        cols.extend((0..m).map(Column::Input));
        if self.cross {
            for e in &monos {
                cols.extend((0..m).map(|j| Column::Cross(e.clone(), j)));
            }
        }
        if self.trig {
            cols.extend((0..n).map(Column::Sin));
            cols.extend((0..n).map(Column::Cos));
        }
        cols
    }

    /// Column labels for `n` states and `m` inputs, in design-matrix order.
    pub fn labels(&self, n: usize, m: usize) -> Vec<String> {
        self.columns(n, m).iter().map(Column::label).collect()
    }
}

/// Design matrix with one row per sample. `y_rows` is `n × k`, `u_rows` is `m × k`.
pub fn build_library(lib: &FunctionLibrary, y_rows: &[Vec<f64>], u_rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if lib.degree < 1 {
        return Err(SindyError::Invalid("library degree must be at least 1".into()));
    }
    let k = y_rows.first().map_or(0, Vec::len);
    if y_rows.iter().chain(u_rows).any(|r| r.len() != k) {
        return Err(SindyError::Shape("state and input rows must have equal sample counts".into()));
    }
    let cols = lib.columns(y_rows.len(), u_rows.len());
    let mut x = vec![0.0; y_rows.len()];
    let mut u = vec![0.0; u_rows.len()];
    Ok(DMatrix::from_fn(k, cols.len(), |r, c| {
        for (xi, row) in x.iter_mut().zip(y_rows) {
            *xi = row[r];
        }
        for (ui, row) in u.iter_mut().zip(u_rows) {
            *ui = row[r];
        }
        cols[c].eval(&x, &u)
    }))
}

/// Second-order finite differences: central inside, one-sided at the ends.
pub fn estimate_derivatives(tr: &Trace) -> Result<Vec<Vec<f64>>> {
    let k = tr.k();
    if k < 3 {
        return Err(SindyError::Invalid(format!("need at least 3 samples, got {k}")));
    }
    let h = tr.dt;
    Ok(tr
        .y
        .iter()
        .map(|x| {
            let mut d = vec![0.0; k];
            d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * h);
            for j in 1..k - 1 {
                d[j] = (x[j + 1] - x[j - 1]) / (2.0 * h);
            }
            d[k - 1] = (3.0 * x[k - 1] - 4.0 * x[k - 2] + x[k - 3]) / (2.0 * h);
            d
        })
        .collect())
}

fn ridge_on(a: &DMatrix<f64>, b: &DVector<f64>, keep: &[usize], lambda: f64) -> Result<Vec<f64>> {
    let sub = a.select_columns(keep);
    let mut gram = sub.transpose() * &sub;
    for i in 0..keep.len() {
        gram[(i, i)] += lambda;
    }
    let rhs = sub.transpose() * b;
    let chol = gram.cholesky().ok_or(SindyError::Singular)?;
    let sol = chol.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(SindyError::Singular);
    }
    Ok(sol.iter().copied().collect())
}

/// Outcome of [`stridge_trace`]: the coefficients and the surviving
/// column set after every iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StridgeTrace {
    pub coef: Vec<f64>,
    pub support: Vec<Vec<usize>>,
}

/// Sequentially thresholded ridge regression.
///
/// Columns are scaled to unit norm before solving. A coefficient is pruned
/// when its contribution relative to the target, `|ξ_j|·‖A_j‖/‖b‖`, falls below
/// `threshold`, so thresholds do not depend on the units of `A` or `b`.
pub fn stridge(a: &DMatrix<f64>, b: &[f64], lambda: f64, threshold: f64, iters: usize) -> Result<Vec<f64>> {
    stridge_trace(a, b, lambda, threshold, iters).map(|t| t.coef)
}

pub fn stridge_trace(a: &DMatrix<f64>, b: &[f64], lambda: f64, threshold: f64, iters: usize) -> Result<StridgeTrace> {
    let (rows, cols) = a.shape();
    if cols == 0 || iters == 0 {
        return Err(SindyError::Invalid("need at least one column and one iteration".into()));
    }
    if rows != b.len() {
        return Err(SindyError::Shape(format!("{rows} rows vs {} targets", b.len())));
    }
    if !(lambda >= 0.0) || !(threshold >= 0.0) {
        return Err(SindyError::Invalid("lambda and threshold must be non-negative".into()));
    }
    let norms: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    let mut an = a.clone();
    for (j, &nj) in norms.iter().enumerate() {
        if nj > 0.0 {
            an.column_mut(j).unscale_mut(nj);
        }
    }
    let bv = DVector::from_column_slice(b);
    let b_norm = bv.norm();
    let mut keep: Vec<usize> = (0..cols).filter(|&j| norms[j] > 0.0).collect();
    let mut coef = vec![0.0; cols];
    let mut support = Vec::with_capacity(iters);
    if b_norm == 0.0 || keep.is_empty() {
        support.push(Vec::new());
        return Ok(StridgeTrace { coef, support });
    }
    for _ in 0..iters {
        let sol = ridge_on(&an, &bv, &keep, lambda)?;
        coef.iter_mut().for_each(|c| *c = 0.0);
        for (&j, &s) in keep.iter().zip(&sol) {
            coef[j] = s;
        }
        let next: Vec<usize> = keep.iter().copied().filter(|&j| coef[j].abs() / b_norm >= threshold).collect();
        let done = next.len() == keep.len();
        keep = next;
        support.push(keep.clone());
        if keep.is_empty() {
            coef.iter_mut().for_each(|c| *c = 0.0);
            break;
        }
        if done {
            break;
        }
    }
    // Refit on the final support so every surviving coefficient comes from the same solve.
    if !keep.is_empty() {
        let sol = ridge_on(&an, &bv, &keep, lambda)?;
        coef.iter_mut().for_each(|c| *c = 0.0);
        for (&j, &s) in keep.iter().zip(&sol) {
            coef[j] = s;
        }
    }
    for (c, &nj) in coef.iter_mut().zip(&norms) {
        if nj > 0.0 {
            *c /= nj;
        }
    }
    Ok(StridgeTrace { coef, support })
}

/// Regression settings for [`sindyc_recover`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SindyConfig {
    pub library: FunctionLibrary,
    pub lambda: f64,
    pub threshold: f64,
    pub iters: usize,
}

impl Default for SindyConfig {
    fn default() -> Self {
        SindyConfig {
            library: FunctionLibrary::default(),
            lambda: 1e-6,
            threshold: 0.2,
            iters: 10,
        }
    }
}

/// Identified model: `xi[c][i]` is the weight of column `c` in `ẋ_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseModel {
    pub xi: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub threshold: f64,
    pub library: FunctionLibrary,
}

impl SparseModel {
    pub fn coefficient(&self, state: usize, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|c| self.xi[c][state])
    }

    /// `ẋ` of the identified model.
    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let cols = self.library.columns(x.len(), u.len());
        let mut out = vec![0.0; x.len()];
        for (col, row) in cols.iter().zip(&self.xi) {
            if row.iter().all(|&w| w == 0.0) {
                continue;
            }
            let v = col.eval(x, u);
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        out
    }

    /// Integrates the identified model with RK4 from `x0`, holding each
    /// input sample over its interval. Returns `n × k` states, or `None`
    /// when the solution leaves `|x| ≤ 1e9`.
    pub fn simulate(&self, x0: &[f64], u: &[Vec<f64>], dt: f64, k: usize, substeps: usize) -> Option<Vec<Vec<f64>>> {
        let n = x0.len();
        let h = dt / substeps.max(1) as f64;
        let mut x = x0.to_vec();
        let mut out = vec![Vec::with_capacity(k); n];
        let axpy = |x: &[f64], a: f64, d: &[f64]| -> Vec<f64> { x.iter().zip(d).map(|(x, d)| x + a * d).collect() };
        for j in 0..k {
            for (o, v) in out.iter_mut().zip(&x) {
                o.push(*v);
            }
            if j + 1 == k {
                break;
            }
            let uj: Vec<f64> = u.iter().map(|r| r[j]).collect();
            for _ in 0..substeps.max(1) {
                let k1 = self.rhs(&x, &uj);
                let k2 = self.rhs(&axpy(&x, h / 2.0, &k1), &uj);
                let k3 = self.rhs(&axpy(&x, h / 2.0, &k2), &uj);
                let k4 = self.rhs(&axpy(&x, h, &k3), &uj);
                for i in 0..n {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            if x.iter().any(|v| !v.is_finite() || v.abs() > 1e9) {
                return None;
            }
        }
        Some(out)
    }

    /// Labels of the nonzero columns for `state`.
    pub fn support(&self, state: usize) -> Vec<&str> {
        self.labels
            .iter()
            .zip(&self.xi)
            .filter(|(_, row)| row[state] != 0.0)
            .map(|(l, _)| l.as_str())
            .collect()
    }
}

/// Fits every state of a fully observed trace (stacked over several traces).
pub fn sindyc_recover(traces: &[Trace], cfg: &SindyConfig) -> Result<SparseModel> {
    let first = traces.first().ok_or_else(|| SindyError::Invalid("no traces".into()))?;
    let n = first.y.len();
    let m = first.u.len();
    let mut blocks = Vec::with_capacity(traces.len());
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); n];
    for tr in traces {
        if tr.y.len() != n || tr.u.len() != m {
            return Err(SindyError::Shape("traces disagree on channel counts".into()));
        }
        let d = estimate_derivatives(tr)?;
        blocks.push(build_library(&cfg.library, &tr.y, &tr.u)?);
        for (t, di) in targets.iter_mut().zip(d) {
            t.extend(di);
        }
    }
    let cols = blocks[0].ncols();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut a = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for b in &blocks {
        a.rows_mut(r0, b.nrows()).copy_from(b);
        r0 += b.nrows();
    }
    let mut xi = vec![vec![0.0; n]; cols];
    for (i, t) in targets.iter().enumerate() {
        let c = stridge(&a, t, cfg.lambda, cfg.threshold, cfg.iters)?;
        for (row, v) in xi.iter_mut().zip(c) {
            row[i] = v;
        }
    }
    Ok(SparseModel {
        xi,
        labels: cfg.library.labels(n, m),
        threshold: cfg.threshold,
        library: cfg.library.clone(),
    })
}

/// A model column with no counterpart in the system's terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpuriousTerm {
    pub state: usize,
    pub label: String,
    pub value: f64,
}

/// A [`SparseModel`] read back onto a system's coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaMapping {
    /// Estimate per spec coefficient; `None` when none of its terms is a library column.
    pub theta: Vec<Option<f64>>,
    pub spurious: Vec<SpuriousTerm>,
}

impl ThetaMapping {
    /// Coefficient RMSE with every spurious term counted as an extra coefficient whose true value is zero.
    pub fn rmse_theta(&self, truth: &[f64]) -> Option<f64> {
        let mut ss = 0.0;
        let mut count = 0usize;
        for (e, t) in self.theta.iter().zip(truth) {
            if let Some(e) = e {
                ss += (e - t).powi(2);
                count += 1;
            }
        }
        for s in &self.spurious {
            ss += s.value * s.value;
            count += 1;
        }
        (count > 0).then(|| (ss / count as f64).sqrt())
    }
}

/// Matches library labels against the spec's term labels. A coefficient
/// appearing in several terms is averaged over them.
pub fn map_to_spec(model: &SparseModel, spec: &SystemSpec) -> Result<ThetaMapping> {
    let n = model.xi.first().map_or(0, Vec::len);
    if n != spec.n() {
        return Err(SindyError::Shape(format!("model has {n} states, system has {}", spec.n())));
    }
    let mut sums = vec![(0.0, 0usize); spec.p()];
    let mut claimed = vec![vec![false; n]; model.labels.len()];
    for term in spec.f_terms().iter().chain(spec.g_terms()) {
        let Some(label) = term.monomial_label() else { continue };
        let Some(c) = model.labels.iter().position(|l| *l == label) else { continue };
        claimed[c][term.state] = true;
        let Some(name) = &term.coeff else { continue };
        if !term.times.is_empty() || term.scale == 0.0 {
            continue;
        }
        let idx = spec.coeff_index(name).expect("term coefficients are declared");
        sums[idx].0 += model.xi[c][term.state] / term.scale;
        sums[idx].1 += 1;
    }
    let theta = sums.iter().map(|&(s, k)| (k > 0).then(|| s / k as f64)).collect();
    let mut spurious = Vec::new();
    for (c, row) in model.xi.iter().enumerate() {
        for (state, &v) in row.iter().enumerate() {
            if v != 0.0 && !claimed[c][state] {
                spurious.push(SpuriousTerm {
                    state,
                    label: model.labels[c].clone(),
                    value: v,
                });
            }
        }
    }
    Ok(ThetaMapping { theta, spurious })
}
