use std::collections::BTreeMap;

use super::{AutodiffError, Tensor};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    GaussianLogPdf { x: Var, mean: Var, std: Var },
    Clip { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    StopGradient,
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceRows { x: Var, start: usize },
    ReplaceRows { base: Var, rows: Var, start: usize },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Define-by-run tape of tensor operations.
///
/// Nodes are append-only, so node order is a topological order and
/// [`Graph::backward`] walks it in reverse exactly once.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires grad.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when nothing reached it.
    pub fn wrt(&self, v: Var, graph: &Graph) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    /// Gradients of named parameter leaves, summed when a name was bound twice.
    pub fn by_param(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, var) in &self.params {
            let g = self.wrt(*var, graph);
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    if t.shape().len() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a` is `n×k`, `b` is `k×m`. Each output entry is accumulated in `k` order.
pub(crate) fn matmul_raw(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

pub(crate) fn softmax_raw(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Elementwise Gaussian log-density.
pub fn gaussian_logpdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -HALF_LN_2PI - std.ln() - 0.5 * z * z
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Minimum(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::MeanRows(a)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::Reshape(a) => self.requires_grad(*a),
            Op::Clip { x, .. } | Op::SliceRows { x, .. } => self.requires_grad(*x),
            Op::GaussianLogPdf { x, mean, std } => {
                self.requires_grad(*x) || self.requires_grad(*mean) || self.requires_grad(*std)
            }
            Op::ConcatCols(vs) | Op::StackRows(vs) => vs.iter().any(|v| self.requires_grad(*v)),
            Op::ReplaceRows { base, rows, .. } => {
                self.requires_grad(*base) || self.requires_grad(*rows)
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// `a` (`n×m`) plus the length-`m` vector `b` added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m) = as_matrix("add_row", ta)?;
        if tb.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for (o, bv) in data[i * m..(i + 1) * m].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::AddRow(a, b), "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|v| v + offset);
        self.push(value, Op::Shift(a), "shift")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = as_matrix("matmul", ta)?;
        let (k2, m) = as_matrix("matmul", tb)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = Tensor::new(vec![n, m], matmul_raw(ta.data(), n, k, tb.data(), m))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let (n, m) = as_matrix("transpose", ta)?;
        let value = Tensor::new(vec![m, n], transpose_raw(ta.data(), n, m))?;
        self.push(value, Op::Transpose(a), "transpose")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a), "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|v| v * v);
        self.push(value, Op::Square(a), "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::Empty { op: "mean" });
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(a), "mean")
    }

    /// Row sums of an `n×m` matrix, giving a length-`n` vector.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let (n, m) = as_matrix("sum_cols", ta)?;
        let data = (0..n).map(|i| ta.data()[i * m..(i + 1) * m].iter().sum()).collect();
        self.push(Tensor::vector(data), Op::SumCols(a), "sum_cols")
    }

    /// Column means of an `n×m` matrix, giving a length-`m` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let (n, m) = as_matrix("mean_rows", ta)?;
        if n == 0 {
            return Err(AutodiffError::Empty { op: "mean_rows" });
        }
        let mut data = vec![0.0; m];
        for i in 0..n {
            for (o, v) in data.iter_mut().zip(&ta.data()[i * m..(i + 1) * m]) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= n as f64;
        }
        self.push(Tensor::vector(data), Op::MeanRows(a), "mean_rows")
    }

    /// Softmax over each row (a vector is treated as a single row).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(AutodiffError::Empty { op: "softmax" });
        }
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(softmax_raw(&ta.data()[i * m..(i + 1) * m]));
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::SoftmaxRows(a), "softmax")
    }

    /// Elementwise log N(x; mean, std²).
    pub fn gaussian_logpdf(&mut self, x: Var, mean: Var, std: Var) -> Result<Var, AutodiffError> {
        let (tx, tm, ts) = (self.value(x), self.value(mean), self.value(std));
        same_shape("gaussian_logpdf", tx, tm)?;
        same_shape("gaussian_logpdf", tx, ts)?;
        if ts.data().iter().any(|&s| s <= 0.0) {
            return Err(AutodiffError::NonFinite {
                op: "gaussian_logpdf",
            });
        }
        let data = tx
            .data()
            .iter()
            .zip(tm.data())
            .zip(ts.data())
            .map(|((&x, &m), &s)| gaussian_logpdf(x, m, s))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::GaussianLogPdf { x, mean, std }, "gaussian_logpdf")
    }

    /// Clamp into `[lo, hi]`; gradient is identity inside the band, zero outside.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, AutodiffError> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clip { x, lo, hi }, "clip")
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("minimum", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x.min(*y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Minimum(a, b), "minimum")
    }

    /// Forward identity that blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != n {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Stacks equally sized vectors (or single-row matrices) into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, AutodiffError> {
        let m = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            let t = self.value(r);
            if t.len() != m {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.value(rows[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows.len(), m], data)?;
        self.push(value, Op::StackRows(rows.to_vec()), "stack_rows")
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let (n, m) = as_matrix("gather_rows", ta)?;
        let mut data = Vec::with_capacity(index.len() * m);
        for &i in index {
            if i >= n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::new(vec![index.len(), m], data)?;
        self.push(value, Op::GatherRows(a, index.to_vec()), "gather_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let (n, m) = as_matrix("slice_rows", tx)?;
        if start + len > n {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: n,
            });
        }
        let data = tx.data()[start * m..(start + len) * m].to_vec();
        let value = Tensor::new(vec![len, m], data)?;
        self.push(value, Op::SliceRows { x, start }, "slice_rows")
    }

    /// Copy of `base` with rows `start..start + rows.len()` overwritten by `rows`.
    pub fn replace_rows(&mut self, base: Var, rows: Var, start: usize) -> Result<Var, AutodiffError> {
        let (tb, tr) = (self.value(base), self.value(rows));
        let (n, m) = as_matrix("replace_rows", tb)?;
        let (k, m2) = as_matrix("replace_rows", tr)?;
        if m != m2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "replace_rows",
                lhs: tb.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        if start + k > n {
            return Err(AutodiffError::IndexOutOfRange {
                op: "replace_rows",
                index: start + k,
                len: n,
            });
        }
        let mut data = tb.data().to_vec();
        data[start * m..(start + k) * m].copy_from_slice(tr.data());
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::ReplaceRows { base, rows, start }, "replace_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !upstream.all_finite() {
                return Err(AutodiffError::NonFiniteGradient);
            }
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| n.param.as_ref().map(|name| (name.clone(), Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(
        &self,
        idx: usize,
        up: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let zip_map = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = up.data().iter().zip(t.data()).map(|(&g, &v)| f(g, v)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(tb, &|g, v| g * v));
                self.accumulate(grads, *b, zip_map(ta, &|g, v| g * v));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, up.clone());
                let m = self.value(*b).len();
                let mut gb = vec![0.0; m];
                for row in up.data().chunks(m) {
                    for (o, g) in gb.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                let shape = self.value(*b).shape().to_vec();
                self.accumulate(grads, *b, Tensor::new(shape, gb)?);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, up.map(|g| g * f)),
            Op::Shift(a) | Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, up.clone().reshape(shape)?);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(tb.data(), k, m);
                    let ga = matmul_raw(up.data(), n, m, &bt, k);
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(ta.data(), n, k);
                    let gb = matmul_raw(&at, k, n, up.data(), m);
                    self.accumulate(grads, *b, Tensor::new(vec![k, m], gb)?);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out.rows(), out.cols());
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, transpose_raw(up.data(), n, m))?);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(out, &|g, y| g * (1.0 - y * y))),
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(out, &|g, y| g * y)),
            Op::Log(a) => self.accumulate(grads, *a, zip_map(self.value(*a), &|g, x| g / x)),
            Op::Square(a) => {
                self.accumulate(grads, *a, zip_map(self.value(*a), &|g, x| 2.0 * g * x))
            }
            Op::Sum(a) => {
                let g = up.data()[0];
                self.accumulate(grads, *a, Tensor::filled(self.value(*a).shape(), g));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let g = up.data()[0] / ta.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(ta.shape(), g));
            }
            Op::SumCols(a) => {
                let ta = self.value(*a);
                let m = ta.cols();
                let data = up.data().iter().flat_map(|&g| std::iter::repeat_n(g, m)).collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let n = ta.rows() as f64;
                let scaled: Vec<f64> = up.data().iter().map(|g| g / n).collect();
                let data = (0..ta.rows()).flat_map(|_| scaled.iter().copied()).collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
            }
            Op::SoftmaxRows(a) => {
                let m = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for (y, g) in out.data().chunks(m).zip(up.data().chunks(m)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    data.extend(y.iter().zip(g).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::GaussianLogPdf { x, mean, std } => {
                let (tx, tm, ts) = (self.value(*x), self.value(*mean), self.value(*std));
                let len = tx.len();
                let mut gx = Vec::with_capacity(len);
                let mut gs = Vec::with_capacity(len);
                for i in 0..len {
                    let (d, s, g) = (tx.data()[i] - tm.data()[i], ts.data()[i], up.data()[i]);
                    gx.push(-g * d / (s * s));
                    gs.push(g * (-1.0 / s + d * d / (s * s * s)));
                }
                let shape = tx.shape().to_vec();
                self.accumulate(grads, *mean, Tensor::new(shape.clone(), gx.iter().map(|v| -v).collect())?);
                self.accumulate(grads, *x, Tensor::new(shape.clone(), gx)?);
                self.accumulate(grads, *std, Tensor::new(shape, gs)?);
            }
            Op::Clip { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let g = zip_map(self.value(*x), &|g, v| if v >= lo && v <= hi { g } else { 0.0 });
                self.accumulate(grads, *x, g);
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Vec::with_capacity(ta.len());
                let mut gb = Vec::with_capacity(ta.len());
                for ((&g, &av), &bv) in up.data().iter().zip(ta.data()).zip(tb.data()) {
                    if av <= bv {
                        ga.push(g);
                        gb.push(0.0);
                    } else {
                        ga.push(0.0);
                        gb.push(g);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
            }
            Op::ConcatCols(parts) => {
                let n = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(n * w);
                        for i in 0..n {
                            data.extend_from_slice(&up.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![n, w], data)?);
                    }
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let m = out.cols();
                for (i, &r) in rows.iter().enumerate() {
                    let shape = self.value(r).shape().to_vec();
                    let data = up.data()[i * m..(i + 1) * m].to_vec();
                    self.accumulate(grads, r, Tensor::new(shape, data)?);
                }
            }
            Op::GatherRows(a, index) => {
                let ta = self.value(*a);
                let m = ta.cols();
                let mut data = vec![0.0; ta.len()];
                for (k, &i) in index.iter().enumerate() {
                    for (o, g) in data[i * m..(i + 1) * m].iter_mut().zip(&up.data()[k * m..(k + 1) * m]) {
                        *o += g;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let m = tx.cols();
                let mut data = vec![0.0; tx.len()];
                data[start * m..start * m + up.len()].copy_from_slice(up.data());
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::ReplaceRows { base, rows, start } => {
                let tr = self.value(*rows);
                let m = tr.cols();
                let (lo, hi) = (start * m, (start + tr.rows()) * m);
                let mut gb = up.data().to_vec();
                gb[lo..hi].iter_mut().for_each(|v| *v = 0.0);
                self.accumulate(grads, *base, Tensor::new(up.shape().to_vec(), gb)?);
                self.accumulate(grads, *rows, Tensor::new(tr.shape().to_vec(), up.data()[lo..hi].to_vec())?);
            }
        }
        Ok(())
    }
}
