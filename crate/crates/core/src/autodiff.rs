//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and how it was produced. [`Graph::backward`] walks the tape once in
//! reverse. Graphs are built per forward pass and thrown away afterwards,
//! so frozen weights enter as constants and trainable weights as
//! [`Graph::param`] leaves whose gradients are gathered by [`ParamId`].

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Relu(Var),
    Min(Var, Var),
    Max(Var, Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter leaf of the graph. Parameters that do
    /// not influence the root get a zero matrix.
    pub fn params(&self, store: &ParamStore) -> Vec<(ParamId, Matrix)> {
        self.params
            .iter()
            .map(|&(id, var)| {
                let g = self.grads[var.0].clone().unwrap_or_else(|| {
                    let (r, c) = store.get(id).shape();
                    Matrix::zeros(r, c)
                });
                (id, g)
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.rows(), "matmul {:?} by {:?}", x.shape(), y.shape());
        let out = gemm(x, false, y, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "matmul_nt {:?} by {:?}", x.shape(), y.shape());
        let out = gemm(x, false, y, true);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows(), y.rows(), "matmul_tn {:?} by {:?}", x.shape(), y.shape());
        let out = gemm(x, true, y, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulTN(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .zip(self.value(b), f)
            .unwrap_or_else(|e| panic!("{op:?}: {e}"));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Min(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::max, Op::Max(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, r) = (self.value(a), self.value(row));
        assert!(
            r.rows() == 1 && r.cols() == x.cols(),
            "row broadcast {:?} with {:?}",
            x.shape(),
            r.shape()
        );
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = f(*o, b);
            }
        }
        out
    }

    /// Adds a `[1 × m]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.row_broadcast(a, row, |x, b| x + b);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` element-wise by a `[1 × m]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.row_broadcast(a, row, |x, b| x * b);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise standardization `(x − mean) / sqrt(var + eps)` without the
    /// affine part; compose with [`Graph::mul_row`] and [`Graph::add_row`].
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut rstds = Vec::with_capacity(x.rows());
        let n = x.cols() as f64;
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, rstds), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).expect("consistent concat");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let data = m.data()[start * m.cols()..(start + len) * m.cols()].to_vec();
        let out = Matrix::from_vec(len, m.cols(), data).expect("slice shape");
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            out.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Sum of all entries as a `[1 × 1]` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, gemm(g, false, val(*b), true));
                }
                if self.rg(*b) {
                    acc(*b, gemm(val(*a), true, g, false));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ
                if self.rg(*a) {
                    acc(*a, gemm(g, false, val(*b), false));
                }
                if self.rg(*b) {
                    acc(*b, gemm(g, true, val(*a), false));
                }
            }
            Op::MatMulTN(a, b) => {
                // out = aᵀ b
                if self.rg(*a) {
                    acc(*a, gemm(val(*b), false, g, true));
                }
                if self.rg(*b) {
                    acc(*b, gemm(val(*a), false, g, false));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip(val(*b), |x, y| x * y).unwrap());
                acc(*b, g.zip(val(*a), |x, y| x * y).unwrap());
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, g.zip(y, |gv, yv| gv / yv).unwrap());
                let mut db = g.clone();
                for ((d, &xv), &yv) in db.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *d = -*d * xv / (yv * yv);
                }
                acc(*b, db);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let r = val(*row);
                let x = val(*a);
                let mut da = g.clone();
                let mut dr = Matrix::zeros(1, r.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        da[(i, j)] = g[(i, j)] * r[(0, j)];
                        dr[(0, j)] += g[(i, j)] * x[(i, j)];
                    }
                }
                acc(*a, da);
                acc(*row, dr);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Gelu(a) => acc(*a, g.zip(val(*a), |gv, x| gv * gelu_grad(x)).unwrap()),
            Op::Sigmoid(a) => {
                acc(*a, g.zip(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap());
            }
            Op::Abs(a) => acc(*a, g.zip(val(*a), |gv, x| gv * sign(x)).unwrap()),
            Op::Relu(a) => acc(
                *a,
                g.zip(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap(),
            ),
            Op::Min(a, b) | Op::Max(a, b) => {
                let pick_a = matches!(node.op, Op::Min(..));
                let (x, y) = (val(*a), val(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                for k in 0..g.len() {
                    let (xv, yv) = (x.data()[k], y.data()[k]);
                    let a_wins = if pick_a { xv <= yv } else { xv >= yv };
                    if a_wins {
                        db.data_mut()[k] = 0.0;
                    } else {
                        da.data_mut()[k] = 0.0;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols() {
                        dx[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm(a, rstds) => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let mean_g = g.row(i).iter().sum::<f64>() / n;
                    let mean_gy =
                        g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..y.cols() {
                        dx[(i, j)] = rstds[i] * (g[(i, j)] - mean_g - y[(i, j)] * mean_gy);
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let data = g.data()[start * c..(start + r) * c].to_vec();
                    acc(p, Matrix::from_vec(r, c, data).unwrap());
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    acc(p, d);
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g[(0, 0)]));
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
