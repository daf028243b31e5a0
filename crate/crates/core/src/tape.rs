//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! matrices. Scalars are `1 × 1`, vectors are `n × 1`.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Tensor::new(n, 1, v)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = A·B`, optionally transposing either operand.
fn matmul_into(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut Tensor) {
    let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ka, kb, "inner dimensions differ");
    assert_eq!(out.shape(), (m, n));
    for i in 0..m {
        for p in 0..ka {
            let av = if ta { a.data[p * a.cols + i] } else { a.data[i * a.cols + p] };
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            if tb {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += av * b.data[j * b.cols + p];
                }
            } else {
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps an output cotangent to one cotangent per parent.
pub type Pullback = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Square,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Softplus,
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Custom(Vec<Var>, Pullback),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of primitive operations in creation (topological) order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} cannot be broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows == 1 { 0 } else { r };
    let cc = if t.cols == 1 { 0 } else { c };
    rr * t.cols + cc
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (a parameter or input of interest).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        assert!(value.data.iter().all(|v| v.is_finite()), "non-finite leaf value");
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (rows, cols) = broadcast_shape(va.shape(), vb.shape());
        let mut data = Vec::with_capacity(rows * cols);
        let same = va.shape() == vb.shape();
        for r in 0..rows {
            for c in 0..cols {
                let (x, y) = if same {
                    let i = r * cols + c;
                    (va.data[i], vb.data[i])
                } else {
                    (va.data[bidx(va, r, c)], vb.data[bidx(vb, r, c)])
                };
                data.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(rows, cols, data), Op::Binary(kind, a, b), needs)
    }

    /// Elementwise sum; operands may broadcast along unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Square => |x| x * x,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Exp => f64::exp,
            Unary::Softplus => softplus,
        };
        let value = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(value, Op::Unary(kind, a), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// Rectifier; its derivative at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.cols, vb.rows, "matmul of {:?} by {:?}", va.shape(), vb.shape());
        let mut out = Tensor::zeros(va.rows, vb.cols);
        matmul_into(va, false, vb, false, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), needs)
    }

    /// Matrix–vector product; `v` must be a column.
    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        assert_eq!(self.shape(v).1, 1, "matvec expects a column vector");
        self.matmul(m, v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| c * x);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Stacks operands vertically; all must share a column count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols, cols, "concat column mismatch");
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(rows, cols, data), Op::Concat(parts.to_vec()), needs)
    }

    /// Rows `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(start < end && end <= t.rows, "slice {start}..{end} of {} rows", t.rows);
        let value = Tensor::new(end - start, t.cols, t.data[start * t.cols..end * t.cols].to_vec());
        let needs = self.needs(a);
        self.push(value, Op::Slice(a, start), needs)
    }

    /// Node whose forward value is supplied directly and whose backward pass
    /// is delegated to `pullback`.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, pullback: Pullback) -> Var {
        let needs = parents.iter().any(|&p| self.needs(p));
        self.push(value, Op::Custom(parents.to_vec(), pullback), needs)
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Sums `g` (full output shape) down to the shape of `target`.
    fn reduce_to(g: &Tensor, target: (usize, usize), f: impl Fn(usize, usize, f64) -> f64) -> Tensor {
        let mut out = Tensor::zeros(target.0, target.1);
        for r in 0..g.rows {
            for c in 0..g.cols {
                let i = bidx(&out, r, c);
                out.data[i] += f(r, c, g.data[r * g.cols + c]);
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let fa = |r: usize, c: usize| va.data[bidx(va, r, c)];
                let fb = |r: usize, c: usize| vb.data[bidx(vb, r, c)];
                if self.needs(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => Self::reduce_to(g, va.shape(), |_, _, gv| gv),
                        Binary::Mul => Self::reduce_to(g, va.shape(), |r, c, gv| gv * fb(r, c)),
                        Binary::Div => Self::reduce_to(g, va.shape(), |r, c, gv| gv / fb(r, c)),
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = match kind {
                        Binary::Add => Self::reduce_to(g, vb.shape(), |_, _, gv| gv),
                        Binary::Sub => Self::reduce_to(g, vb.shape(), |_, _, gv| -gv),
                        Binary::Mul => Self::reduce_to(g, vb.shape(), |r, c, gv| gv * fa(r, c)),
                        Binary::Div => Self::reduce_to(g, vb.shape(), |r, c, gv| {
                            let y = fb(r, c);
                            -gv * fa(r, c) / (y * y)
                        }),
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value;
                let y = &node.value;
                let data = g
                    .data
                    .iter()
                    .zip(x.data.iter().zip(&y.data))
                    .map(|(&gv, (&xv, &yv))| {
                        gv * match kind {
                            Unary::Square => 2.0 * xv,
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Tanh => 1.0 - yv * yv,
                            Unary::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => yv,
                            Unary::Softplus => sigmoid(xv),
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.rows, x.cols, data));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    matmul_into(g, false, vb, true, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(vb.rows, vb.cols);
                    matmul_into(va, true, g, false, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| c * v)),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let piece = Tensor::new(r, c, g.data[offset * c..(offset + r) * c].to_vec());
                    self.accumulate(grads, p, piece);
                    offset += r;
                }
            }
            Op::Slice(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                ga.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *a, ga);
            }
            Op::Custom(parents, pullback) => {
                let cots = pullback(g);
                assert_eq!(cots.len(), parents.len(), "custom pullback returned wrong number of cotangents");
                for (&p, cot) in parents.iter().zip(cots) {
                    assert_eq!(cot.shape(), self.shape(p), "custom pullback cotangent shape mismatch");
                    self.accumulate(grads, p, cot);
                }
            }
        }
    }
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v` with zeros for unreachable values.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.shape(v);
            Tensor::zeros(r, c)
        })
    }
}

/// Largest relative discrepancy (with a unit floor on the denominator)
/// between tape gradients and central differences of `f` at `x`.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Var, x: &Tensor, eps: f64) -> f64 {
    assert!(eps > 0.0, "eps must be positive");
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv);
    let analytic = tape.backward(out).wrt(&tape, xv);
    let eval = |p: &Tensor| {
        let mut t = Tape::new();
        let v = t.leaf(p.clone());
        let o = f(&mut t, v);
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = eval(&probe);
        probe.data[i] = orig - eps;
        let minus = eval(&probe);
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn activation_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).item(), 0.5);
        let x = t.constant(Tensor::vector(vec![-3.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data, vec![0.0, 2.0]);
    }

    #[test]
    fn matvec_identity() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(3));
        let v = t.constant(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let w = t.matvec(i, v);
        assert_eq!(t.value(w).data, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let s = t.sigmoid(x);
        let g = t.backward(s);
        assert_eq!(g.wrt(&t, x).item(), 0.25);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.leaf(Tensor::scalar(3.0));
        let z = t.mul(x, y);
        let g = t.backward(z);
        assert_eq!(g.wrt(&t, x).item(), 3.0);
        assert_eq!(g.wrt(&t, y).item(), 2.0);
    }

    #[test]
    fn reused_var_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.7));
        let z = t.mul(x, x);
        let g = t.backward(z);
        assert_abs_diff_eq!(g.wrt(&t, x).item(), 3.4, epsilon = 1e-15);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.leaf(Tensor::scalar(4.0));
        let s = t.sum(x);
        let g = t.backward(s);
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(&t, y).item(), 0.0);
    }

    #[test]
    fn broadcast_column_gradient_sums_over_columns() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.leaf(Tensor::vector(vec![10.0, 20.0]));
        let y = t.mul(m, b);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.wrt(&t, b).data, vec![6.0, 15.0]);
        assert_eq!(g.wrt(&t, m).data, vec![10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn quadratic_form_grad_check() {
        let a = Tensor::new(3, 3, vec![2.0, 0.5, 0.0, 0.5, 3.0, -1.0, 0.0, -1.0, 4.0]);
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let err = grad_check(
            |t, x| {
                let am = t.constant(a.clone());
                let ax = t.matvec(am, x);
                let p = t.mul(x, ax);
                t.sum(p)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-8, "{err}");
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let am = t.constant(a.clone());
        let ax = t.matvec(am, xv);
        let p = t.mul(xv, ax);
        let s = t.sum(p);
        let g = t.backward(s).wrt(&t, xv);
        let oracle: Vec<f64> = (0..3).map(|i| 2.0 * (0..3).map(|j| a.at(i, j) * x.data[j]).sum::<f64>()).collect();
        for (gi, oi) in g.data.iter().zip(&oracle) {
            assert_abs_diff_eq!(gi, oi, epsilon = 1e-12);
        }
    }

    #[test]
    fn relu_away_from_kink_is_exact() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-0.5, 0.75]));
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).wrt(&t, x).data, vec![0.0, 1.0]);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let r = t.relu(x);
        assert_eq!(t.backward(r).wrt(&t, x).item(), 0.0);
    }

    #[test]
    fn sigmoid_chain_grad_check() {
        let x = Tensor::vector(vec![0.1, -0.7, 1.3]);
        let err = grad_check(
            |t, x| {
                let a = t.sigmoid(x);
                let b = t.sigmoid(a);
                let c = t.tanh(b);
                t.sum(c)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn custom_node_pullbacks() {
        for (factor, expect) in [(1.0, 3.0), (2.0, 6.0)] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::scalar(1.5));
            let y = t.scale(x, 3.0);
            let v = t.value(y).clone();
            let c = t.custom(&[y], v, Box::new(move |g| vec![g.map(|v| factor * v)]));
            let g = t.backward(c);
            assert_eq!(g.wrt(&t, x).item(), expect);
        }
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![3.0]));
        let c = t.concat(&[a, b]);
        let s = t.slice(c, 1, 3);
        let q = t.square(s);
        let l = t.sum(q);
        let g = t.backward(l);
        assert_eq!(g.wrt(&t, a).data, vec![0.0, 4.0]);
        assert_eq!(g.wrt(&t, b).data, vec![6.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        t.backward(a);
    }

    #[test]
    fn softplus_is_stable() {
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(800.0), 800.0, epsilon = 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
