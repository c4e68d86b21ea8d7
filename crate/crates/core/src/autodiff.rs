//! Tape-based reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order. Because an operation can only reference nodes that
//! already exist, the tape is a topological order and [`Graph::backward`]
//! is a single reverse sweep over it.
//!
//! ```
//! use otkt::autodiff::Graph;
//! use ndarray::array;
//!
//! let g = Graph::new();
//! let x = g.param(array![[3.0]]);
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x)[[0, 0]], 6.0);
//! ```
//!
//! Nodes created with [`Graph::constant`] never receive gradients, nor does
//! anything computed purely from constants.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};
use thiserror::Error;

/// Dense row-major 2-D array of 64-bit reals.
pub type Array = Array2<f64>;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Array,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Transpose(Var),
    RowSlice { x: Var, start: usize },
    ColSlice { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LogAddExp(Var, Var),
    GatherRows { x: Var, index: Vec<usize> },
    GatherCols { x: Var, index: Vec<usize> },
    ShiftCols { x: Var, by: usize },
    Unfold { x: Var, kernel: usize, stride: usize },
    DepthwiseConv { x: Var, weight: Var },
    RowNormalize { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// Single-threaded by construction; build one graph per thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

fn dims(a: &Array) -> (usize, usize) {
    a.dim()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn softmax_rows(x: &Array) -> Array {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn log_softmax_rows(x: &Array) -> Array {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes.borrow()[v.0].value)
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, x: Var, value: Array, op: Op) -> Var {
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, value: Array, op: Op) -> Var {
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Array>, Rc<Array>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(GraphError::Shape {
                op,
                lhs: va.dim(),
                rhs: vb.dim(),
            });
        }
        Ok((va, vb))
    }

    fn row_vector(&self, op: &'static str, x: &Array, r: &Array) -> Result<()> {
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(GraphError::Shape {
                op,
                lhs: x.dim(),
                rhs: r.dim(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(GraphError::Shape {
                op: "matmul",
                lhs: va.dim(),
                rhs: vb.dim(),
            });
        }
        Ok(self.binary(a, b, va.dot(&*vb), Op::MatMul(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, &*va + &*vb, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, &*va - &*vb, Op::Sub(a, b)))
    }

    /// `x + r` with the 1xC row `r` broadcast over every row of `x`.
    pub fn add_row(&self, x: Var, r: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(r));
        self.row_vector("add_row", &vx, &vr)?;
        Ok(self.binary(x, r, &*vx + &*vr, Op::AddRow(x, r)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, &*va * &*vb, Op::Mul(a, b)))
    }

    /// `x * r` with the 1xC row `r` broadcast over every row of `x`.
    pub fn mul_row(&self, x: Var, r: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(r));
        self.row_vector("mul_row", &vx, &vr)?;
        Ok(self.binary(x, r, &*vx * &*vr, Op::MulRow(x, r)))
    }

    pub fn scale(&self, x: Var, k: f64) -> Var {
        let v = self.value(x).mapv(|e| e * k);
        self.unary(x, v, Op::Scale(x, k))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let v = self.value(x).mapv(|e| e + c);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn softmax(&self, x: Var) -> Var {
        let v = softmax_rows(&self.value(x));
        self.unary(x, v, Op::Softmax(x))
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let v = log_softmax_rows(&self.value(x));
        self.unary(x, v, Op::LogSoftmax(x))
    }

    /// Per-row layer normalization with learned 1xC gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        self.row_vector("layer_norm", &vx, &vg)?;
        self.row_vector("layer_norm", &vx, &vb)?;
        let cols = vx.ncols() as f64;
        let mut normed = (*vx).clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &normed * &*vg + &*vb;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e * sigmoid(e));
        self.unary(x, v, Op::Swish(x))
    }

    pub fn transpose(&self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        self.unary(x, v, Op::Transpose(x))
    }

    pub fn row_slice(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.nrows() || len == 0 {
            return Err(GraphError::Invalid {
                op: "row_slice",
                msg: format!("rows {start}..{} of a {:?} array", start + len, vx.dim()),
            });
        }
        let v = vx.slice(s![start..start + len, ..]).to_owned();
        Ok(self.unary(x, v, Op::RowSlice { x, start }))
    }

    pub fn col_slice(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.ncols() || len == 0 {
            return Err(GraphError::Invalid {
                op: "col_slice",
                msg: format!("cols {start}..{} of a {:?} array", start + len, vx.dim()),
            });
        }
        let v = vx.slice(s![.., start..start + len]).to_owned();
        Ok(self.unary(x, v, Op::ColSlice { x, start }))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(GraphError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let head = self.value(first);
        let values: Vec<Rc<Array>> = parts.iter().map(|&p| self.value(p)).collect();
        for v in &values {
            if v.ncols() != head.ncols() {
                return Err(GraphError::Shape {
                    op: "concat_rows",
                    lhs: head.dim(),
                    rhs: v.dim(),
                });
            }
        }
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.unary(x, Array::from_elem((1, 1), total), Op::Sum(x))
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx.sum() / vx.len() as f64;
        self.unary(x, Array::from_elem((1, 1), m), Op::Mean(x))
    }

    /// Per-row sums, as an Rx1 node.
    pub fn row_sum(&self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(x, v, Op::RowSum(x))
    }

    /// Elementwise `log(exp(a) + exp(b))`.
    pub fn log_add_exp(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("log_add_exp", a, b)?;
        let mut out = (*va).clone();
        Zip::from(&mut out).and(&*vb).for_each(|o, &y| *o = log_add_exp(*o, y));
        Ok(self.binary(a, b, out, Op::LogAddExp(a, b)))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= vx.nrows()) {
            return Err(GraphError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {:?}", vx.dim()),
            });
        }
        let v = vx.select(Axis(0), index);
        Ok(self.unary(
            x,
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Selects columns by index; indices may repeat.
    pub fn gather_cols(&self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= vx.ncols()) {
            return Err(GraphError::Invalid {
                op: "gather_cols",
                msg: format!("column {bad} out of range for {:?}", vx.dim()),
            });
        }
        let v = vx.select(Axis(1), index);
        Ok(self.unary(
            x,
            v,
            Op::GatherCols {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Shifts columns right by `by`, filling the vacated leading columns
    /// with the constant `fill`.
    pub fn shift_cols(&self, x: Var, by: usize, fill: f64) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.dim();
        let mut out = Array::from_elem((rows, cols), fill);
        if by < cols {
            out.slice_mut(s![.., by..])
                .assign(&vx.slice(s![.., ..cols - by]));
        }
        self.unary(x, out, Op::ShiftCols { x, by })
    }

    /// Stacks `kernel` consecutive rows, stepping by `stride`, into one
    /// output row of width `kernel * cols` (no padding).
    pub fn unfold(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.dim();
        if kernel == 0 || stride == 0 || rows < kernel {
            return Err(GraphError::Invalid {
                op: "unfold",
                msg: format!("kernel {kernel} stride {stride} over {rows} rows"),
            });
        }
        let out_rows = (rows - kernel) / stride + 1;
        let mut out = Array::zeros((out_rows, kernel * cols));
        for t in 0..out_rows {
            for k in 0..kernel {
                out.slice_mut(s![t, k * cols..(k + 1) * cols])
                    .assign(&vx.row(t * stride + k));
            }
        }
        Ok(self.unary(
            x,
            out,
            Op::Unfold {
                x,
                kernel,
                stride,
            },
        ))
    }

    /// Per-channel 1-D convolution over rows with zero "same" padding.
    /// `weight` is `kernel x cols` with odd `kernel`.
    pub fn depthwise_conv(&self, x: Var, weight: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let (rows, cols) = vx.dim();
        let kernel = vw.nrows();
        if vw.ncols() != cols || kernel % 2 == 0 {
            return Err(GraphError::Shape {
                op: "depthwise_conv",
                lhs: vx.dim(),
                rhs: vw.dim(),
            });
        }
        let pad = kernel / 2;
        let mut out = Array::zeros((rows, cols));
        for t in 0..rows {
            for k in 0..kernel {
                let src = t + k;
                if src < pad || src - pad >= rows {
                    continue;
                }
                let mut o = out.row_mut(t);
                o.zip_mut_with(&(&vx.row(src - pad) * &vw.row(k)), |a, &b| *a += b);
            }
        }
        Ok(self.binary(x, weight, out, Op::DepthwiseConv { x, weight }))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are rejected.
    pub fn row_normalize(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let norms: Vec<f64> = vx
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        if let Some(row) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(GraphError::Invalid {
                op: "row_normalize",
                msg: format!("row {row} has zero or non-finite norm"),
            });
        }
        let mut out = (*vx).clone();
        for (mut r, &n) in out.rows_mut().into_iter().zip(&norms) {
            r.mapv_inplace(|v| v / n);
        }
        Ok(self.unary(x, out, Op::RowNormalize { x, norms }))
    }

    /// Reverse sweep from a 1x1 `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let (rows, cols) = nodes[root.0].value.dim();
        if (rows, cols) != (1, 1) {
            return Err(GraphError::NonScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        grads[root.0] = Some(Array::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut acc = |v: Var, contrib: Array| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| -> &Array { &nodes[v.0].value };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&val(*b).t()));
                    acc(*b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::AddRow(x, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::MulRow(x, r) => {
                    acc(*r, (&g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, &g * val(*r));
                }
                Op::Scale(x, k) => acc(*x, g.mapv(|e| e * k)),
                Op::AddScalar(x) => acc(*x, g.clone()),
                Op::Softmax(x) => {
                    let y = &*node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*x, y * &(&g - &dot));
                }
                Op::LogSoftmax(x) => {
                    let p = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*x, &g - &(&p * &total));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gain, (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dn = &g * val(*gain);
                    let n = normed.ncols() as f64;
                    let mut gx = Array::zeros(normed.dim());
                    for (t, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let d = dn.row(t);
                        let xh = normed.row(t);
                        let sum_d = d.sum();
                        let sum_dx = d.dot(&xh);
                        let inv = inv_std[t];
                        Zip::from(&mut out)
                            .and(&d)
                            .and(&xh)
                            .for_each(|o, &di, &xi| *o = inv / n * (n * di - sum_d - xi * sum_dx));
                    }
                    acc(*x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(val(*x))
                        .for_each(|o, &v| if v <= 0.0 { *o = 0.0 });
                    acc(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &*node.value;
                    acc(*x, &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Swish(x) => {
                    let d = val(*x).mapv(|v| {
                        let s = sigmoid(v);
                        s + v * s * (1.0 - s)
                    });
                    acc(*x, &g * &d);
                }
                Op::Transpose(x) => acc(*x, g.t().to_owned()),
                Op::RowSlice { x, start } => {
                    let mut gx = Array::zeros(val(*x).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*x, gx);
                }
                Op::ColSlice { x, start } => {
                    let mut gx = Array::zeros(val(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let r = val(*p).nrows();
                        acc(*p, g.slice(s![offset..offset + r, ..]).to_owned());
                        offset += r;
                    }
                }
                Op::Sum(x) => acc(*x, Array::from_elem(val(*x).dim(), g[[0, 0]])),
                Op::Mean(x) => {
                    let vx = val(*x);
                    acc(*x, Array::from_elem(vx.dim(), g[[0, 0]] / vx.len() as f64));
                }
                Op::RowSum(x) => {
                    let vx = val(*x);
                    let gx = g
                        .broadcast(vx.dim())
                        .expect("row sum gradient broadcasts")
                        .to_owned();
                    acc(*x, gx);
                }
                Op::LogAddExp(a, b) => {
                    let out = &*node.value;
                    acc(*a, &g * &(val(*a) - out).mapv(f64::exp));
                    acc(*b, &g * &(val(*b) - out).mapv(f64::exp));
                }
                Op::GatherRows { x, index } => {
                    let mut gx = Array::zeros(val(*x).dim());
                    for (i, &src) in index.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &g.row(i);
                    }
                    acc(*x, gx);
                }
                Op::GatherCols { x, index } => {
                    let mut gx = Array::zeros(val(*x).dim());
                    for (j, &src) in index.iter().enumerate() {
                        let mut col = gx.column_mut(src);
                        col += &g.column(j);
                    }
                    acc(*x, gx);
                }
                Op::ShiftCols { x, by } => {
                    let cols = g.ncols();
                    let mut gx = Array::zeros(g.dim());
                    if *by < cols {
                        gx.slice_mut(s![.., ..cols - by])
                            .assign(&g.slice(s![.., *by..]));
                    }
                    acc(*x, gx);
                }
                Op::Unfold { x, kernel, stride } => {
                    let vx = val(*x);
                    let cols = vx.ncols();
                    let mut gx = Array::zeros(vx.dim());
                    for t in 0..g.nrows() {
                        for k in 0..*kernel {
                            let mut row = gx.row_mut(t * stride + k);
                            row += &g.slice(s![t, k * cols..(k + 1) * cols]);
                        }
                    }
                    acc(*x, gx);
                }
                Op::DepthwiseConv { x, weight } => {
                    let (vx, vw) = (val(*x), val(*weight));
                    let rows = vx.nrows();
                    let kernel = vw.nrows();
                    let pad = kernel / 2;
                    let mut gx = Array::zeros(vx.dim());
                    let mut gw = Array::zeros(vw.dim());
                    for t in 0..rows {
                        for k in 0..kernel {
                            let src = t + k;
                            if src < pad || src - pad >= rows {
                                continue;
                            }
                            let src = src - pad;
                            let mut gxr = gx.row_mut(src);
                            gxr += &(&g.row(t) * &vw.row(k));
                            let mut gwr = gw.row_mut(k);
                            gwr += &(&g.row(t) * &vx.row(src));
                        }
                    }
                    acc(*x, gx);
                    acc(*weight, gw);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &*node.value;
                    let dot = (&g * y).sum_axis(Axis(1));
                    let mut gx = Array::zeros(y.dim());
                    for (t, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let (d, n) = (dot[t], norms[t]);
                        Zip::from(&mut out)
                            .and(g.row(t))
                            .and(y.row(t))
                            .for_each(|o, &gi, &yi| *o = (gi - yi * d) / n);
                    }
                    acc(*x, gx);
                }
            }
            grads[i] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient if `v` lies on a differentiable path to the root.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
        Array::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` (graph rebuilt per evaluation)
    /// against the analytic gradient, over every coordinate of every input.
    fn check_gradients<F>(inputs: &[Array], f: F) -> f64
    where
        F: Fn(&Graph, &[Var]) -> Var,
    {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
        let root = f(&g, &vars);
        let grads = g.backward(root).unwrap();
        let eval = |arrays: &[Array]| {
            let g = Graph::new();
            let vars: Vec<Var> = arrays.iter().map(|a| g.param(a.clone())).collect();
            g.scalar(f(&g, &vars))
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]);
            assert_eq!(analytic.dim(), input.dim());
            for idx in ndarray::indices(input.dim()) {
                let mut plus = inputs.to_vec();
                plus[k][idx] += h;
                let mut minus = inputs.to_vec();
                minus[k][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn matmul_forward() {
        let g = Graph::new();
        let a = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.constant(array![[1.0], [1.0]]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(*g.value(c), array![[3.0], [7.0]]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let g = Graph::new();
        let a = g.constant(Array::zeros((2, 3)));
        let b = g.constant(Array::zeros((2, 3)));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            GraphError::Shape {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let g = Graph::new();
        let x = g.constant(Array::zeros((1, 4)));
        let y = g.softmax(x);
        assert!(g.value(y).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_standardizes_row() {
        let g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0]]);
        let gain = g.constant(Array::ones((1, 3)));
        let bias = g.constant(Array::zeros((1, 3)));
        let y = g.value(g.layer_norm(x, gain, bias).unwrap());
        let mean = y.sum() / 3.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        // eps keeps the variance just below one
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(array![[3.0]]);
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x)[[0, 0]], 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let g = Graph::new();
        let x = g.param(array![[0.3, -1.2, 2.0], [0.0, 0.5, 0.1]]);
        let y = g.sum(g.softmax(x));
        let grad = g.backward(y).unwrap().wrt(x);
        assert!(grad.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let g = Graph::new();
        let x = g.param(Array::zeros((2, 2)));
        assert_eq!(
            g.backward(x).unwrap_err(),
            GraphError::NonScalarRoot { rows: 2, cols: 2 }
        );
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let g = Graph::new();
        let x = g.param(array![[1.0, 2.0]]);
        let unused = g.param(array![[5.0], [6.0]]);
        let y = g.sum(x);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), Array::zeros((2, 1)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(array![[2.0]]);
        let x = g.param(array![[3.0]]);
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x)[[0, 0]], 2.0);
    }

    #[test]
    fn backward_twice_is_identical() {
        let g = Graph::new();
        let x = g.param(array![[0.2, -0.7], [1.1, 0.4]]);
        let w = g.param(array![[0.5, 0.1], [-0.3, 0.9]]);
        let h = g.swish(g.matmul(x, w).unwrap());
        let y = g.mean(g.log_softmax(h));
        let first = g.backward(y).unwrap();
        let second = g.backward(y).unwrap();
        assert_eq!(first.wrt(x), second.wrt(x));
        assert_eq!(first.wrt(w), second.wrt(w));
    }

    #[test]
    fn depthwise_conv_same_padding() {
        let g = Graph::new();
        let x = g.constant(array![[1.0], [2.0], [3.0]]);
        let w = g.constant(array![[1.0], [10.0], [100.0]]);
        let y = g.depthwise_conv(x, w).unwrap();
        // out[t] = w0*x[t-1] + w1*x[t] + w2*x[t+1]
        assert_eq!(*g.value(y), array![[10.0 + 200.0], [1.0 + 20.0 + 300.0], [2.0 + 30.0]]);
    }

    #[test]
    fn unfold_stacks_strided_windows() {
        let g = Graph::new();
        let x = g.constant(array![[0.0], [1.0], [2.0], [3.0], [4.0]]);
        let y = g.unfold(x, 3, 2).unwrap();
        assert_eq!(*g.value(y), array![[0.0, 1.0, 2.0], [2.0, 3.0, 4.0]]);
    }

    #[test]
    fn row_normalize_rejects_zero_row() {
        let g = Graph::new();
        let x = g.constant(array![[1.0, 0.0], [0.0, 0.0]]);
        let err = g.row_normalize(x).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn shift_cols_fills_leading_columns() {
        let g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0]]);
        let y = g.shift_cols(x, 2, -9.0);
        assert_eq!(*g.value(y), array![[-9.0, -9.0, 1.0]]);
    }

    type Case = (&'static str, fn(&mut ChaCha8Rng, usize, usize) -> Vec<Array>, fn(&Graph, &[Var]) -> Var);

    fn weighted(g: &Graph, y: Var, rows: usize, cols: usize) -> Var {
        // Fixed non-uniform weights so that sum-invariant ops still get a
        // non-trivial upstream gradient.
        let w = Array::from_shape_fn((rows, cols), |(i, j)| 0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64);
        let w = g.constant(w);
        g.sum(g.mul(y, w).unwrap())
    }

    fn cases() -> Vec<Case> {
        fn two(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Array> {
            vec![random(rng, r, c), random(rng, r, c)]
        }
        fn one(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Array> {
            vec![random(rng, r, c)]
        }
        fn with_row(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Array> {
            vec![random(rng, r, c), random(rng, 1, c)]
        }
        fn ln_inputs(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Array> {
            vec![random(rng, r, c + 1), random(rng, 1, c + 1), random(rng, 1, c + 1)]
        }
        fn mm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Array> {
            vec![random(rng, r, c), random(rng, c, r + 1)]
        }
        fn conv(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Array> {
            vec![random(rng, r, c), random(rng, 3, c)]
        }
        fn tall(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Array> {
            vec![random(rng, r + 3, c)]
        }
        fn out(g: &Graph, y: Var) -> Var {
            let (r, c) = g.shape(y);
            weighted(g, y, r, c)
        }
        vec![
            ("matmul", mm, |g, v| out(g, g.matmul(v[0], v[1]).unwrap())),
            ("add", two, |g, v| out(g, g.add(v[0], v[1]).unwrap())),
            ("sub", two, |g, v| out(g, g.sub(v[0], v[1]).unwrap())),
            ("mul", two, |g, v| out(g, g.mul(v[0], v[1]).unwrap())),
            ("add_row", with_row, |g, v| out(g, g.add_row(v[0], v[1]).unwrap())),
            ("mul_row", with_row, |g, v| out(g, g.mul_row(v[0], v[1]).unwrap())),
            ("scale", one, |g, v| out(g, g.scale(v[0], -1.7))),
            ("add_scalar", one, |g, v| out(g, g.add_scalar(v[0], 0.4))),
            ("softmax", one, |g, v| out(g, g.softmax(v[0]))),
            ("log_softmax", one, |g, v| out(g, g.log_softmax(v[0]))),
            ("layer_norm", ln_inputs, |g, v| {
                out(g, g.layer_norm(v[0], v[1], v[2]).unwrap())
            }),
            ("relu", one, |g, v| out(g, g.relu(v[0]))),
            ("sigmoid", one, |g, v| out(g, g.sigmoid(v[0]))),
            ("swish", one, |g, v| out(g, g.swish(v[0]))),
            ("transpose", one, |g, v| out(g, g.transpose(v[0]))),
            ("row_slice", tall, |g, v| out(g, g.row_slice(v[0], 1, 2).unwrap())),
            ("col_slice", one, |g, v| {
                let c = g.shape(v[0]).1;
                out(g, g.col_slice(v[0], c / 2, c - c / 2).unwrap())
            }),
            ("concat_rows", two, |g, v| {
                out(g, g.concat_rows(&[v[0], v[1], v[0]]).unwrap())
            }),
            ("sum", one, |g, v| g.sum(g.mul(v[0], v[0]).unwrap())),
            ("mean", one, |g, v| g.mean(g.mul(v[0], v[0]).unwrap())),
            ("row_sum", one, |g, v| out(g, g.row_sum(v[0]))),
            ("log_add_exp", two, |g, v| out(g, g.log_add_exp(v[0], v[1]).unwrap())),
            ("gather_rows", tall, |g, v| {
                out(g, g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap())
            }),
            ("gather_cols", one, |g, v| {
                let c = g.shape(v[0]).1;
                out(g, g.gather_cols(v[0], &[c - 1, 0, c - 1]).unwrap())
            }),
            ("shift_cols", one, |g, v| out(g, g.shift_cols(v[0], 1, -3.0))),
            ("unfold", tall, |g, v| out(g, g.unfold(v[0], 3, 2).unwrap())),
            ("depthwise_conv", conv, |g, v| {
                out(g, g.depthwise_conv(v[0], v[1]).unwrap())
            }),
            ("row_normalize", one, |g, v| {
                out(g, g.row_normalize(v[0]).unwrap())
            }),
        ]
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, make, f) in cases() {
            for trial in 0..20 {
                let rows = rng.random_range(1..=4);
                let cols = rng.random_range(2..=4);
                let inputs = make(&mut rng, rows, cols);
                let worst = check_gradients(&inputs, f);
                assert!(
                    worst < 1e-4,
                    "{name} trial {trial}: relative error {worst:e} on {rows}x{cols}"
                );
            }
        }
    }

    #[test]
    fn gradient_shapes_match_values() {
        let g = Graph::new();
        let x = g.param(Array::from_elem((3, 2), 0.5));
        let w = g.param(Array::from_elem((2, 4), 0.1));
        let b = g.param(Array::from_elem((1, 4), 0.2));
        let h = g.add_row(g.matmul(x, w).unwrap(), b).unwrap();
        let y = g.sum(g.relu(h));
        let grads = g.backward(y).unwrap();
        for v in [x, w, b, h, y] {
            assert_eq!(grads.wrt(v).dim(), g.shape(v));
        }
    }
}
