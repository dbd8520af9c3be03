//! Tape-based reverse-mode differentiation over matrices.
//!
//! Every operation appends a node to the [`Tape`]; node indices are therefore
//! already a topological order and the backward sweep walks them in reverse.
//! Nodes that do not depend on a trainable leaf are marked constant and are
//! skipped by the sweep, which is what keeps the frozen backbone cheap to
//! differentiate through.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, softmax_in_place, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a + broadcast(b)`; `b` is the same shape as `a`, a row, a column or a scalar.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Square(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    /// Masked entries are exactly zero, so the backward pass is the plain softmax one.
    CausalSoftmax(usize),
    LogSoftmaxRows(usize),
    Standardize {
        input: usize,
        rstd: Vec<f64>,
    },
    SumAll(usize),
    MeanAll(usize),
    ColMeans(usize),
    RowSums(usize),
    SliceRows {
        input: usize,
        start: usize,
    },
    SliceCols {
        input: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Clamp {
        input: usize,
        limit: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Owner of a computation graph. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.dims())
    }
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.dims();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn as_matrix(t: Tensor) -> Tensor {
        let (r, c) = t.dims2();
        Tensor::matrix(r, c, t.into_data())
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Self::as_matrix(value), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Self::as_matrix(value), Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn grad_flag(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.value_of(a));
        let rg = self.grad_flag(a);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::scalar(1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sum `g` down to the shape of a broadcast operand.
fn reduce_to(g: &Tensor, rows: usize, cols: usize) -> Tensor {
    let (gr, gc) = g.dims2();
    if gr == rows && gc == cols {
        return g.clone();
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..gr {
        for j in 0..gc {
            let oi = if rows == 1 { 0 } else { i };
            let oj = if cols == 1 { 0 } else { j };
            out[oi * cols + oj] += g.at(i, j);
        }
    }
    Tensor::matrix(rows, cols, out)
}

fn broadcast_index(b_rows: usize, b_cols: usize, i: usize, j: usize) -> usize {
    let bi = if b_rows == 1 { 0 } else { i };
    let bj = if b_cols == 1 { 0 } else { j };
    bi * b_cols + bj
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| &nodes[id].value;
    let wants = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let n = val(*b).cols();
            if wants(*a) {
                let bt = val(*b).transpose();
                let ga = matmul_raw(g.data(), bt.data(), m, n, k);
                accumulate(grads, nodes, *a, Tensor::matrix(m, k, ga));
            }
            if wants(*b) {
                let at = val(*a).transpose();
                let gb = matmul_raw(at.data(), g.data(), k, m, n);
                accumulate(grads, nodes, *b, Tensor::matrix(k, n, gb));
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(*a) {
                accumulate(grads, nodes, *a, g.clone());
            }
            if wants(*b) {
                let (br, bc) = val(*b).dims2();
                let gb = reduce_to(g, br, bc);
                let gb = if sign < 0.0 { gb.scale(-1.0) } else { gb };
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let (r, c) = av.dims2();
            let (br, bc) = bv.dims2();
            if wants(*a) {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g.at(i, j) * bv.data()[broadcast_index(br, bc, i, j)];
                    }
                }
                accumulate(grads, nodes, *a, Tensor::matrix(r, c, ga));
            }
            if wants(*b) {
                let prod = g.zip_map(av, "mul-backward", |x, y| x * y).expect("same shape");
                accumulate(grads, nodes, *b, reduce_to(&prod, br, bc));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Square(a) => {
            let ga = g.zip_map(val(*a), "square-backward", |g, x| 2.0 * x * g).unwrap();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sqrt(a) => {
            let ga = g.zip_map(&node.value, "sqrt-backward", |g, y| g / (2.0 * y)).unwrap();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g
                .zip_map(&node.value, "sigmoid-backward", |g, y| g * y * (1.0 - y))
                .unwrap();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Gelu(a) => {
            let ga = g.zip_map(val(*a), "gelu-backward", |g, x| g * gelu_grad(x)).unwrap();
            accumulate(grads, nodes, *a, ga);
        }
        Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
            let y = &node.value;
            let (r, c) = y.dims2();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    ga[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::matrix(r, c, ga));
        }
        Op::LogSoftmaxRows(a) => {
            let y = &node.value;
            let (r, c) = y.dims2();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let gr = g.row(i);
                let gsum: f64 = gr.iter().sum();
                for j in 0..c {
                    ga[i * c + j] = gr[j] - y.at(i, j).exp() * gsum;
                }
            }
            accumulate(grads, nodes, *a, Tensor::matrix(r, c, ga));
        }
        Op::Standardize { input, rstd } => {
            let xhat = &node.value;
            let (r, c) = xhat.dims2();
            let n = c as f64;
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let gr = g.row(i);
                let xr = xhat.row(i);
                let gsum: f64 = gr.iter().sum();
                let gx: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                for j in 0..c {
                    ga[i * c + j] = rstd[i] / n * (n * gr[j] - gsum - xr[j] * gx);
                }
            }
            accumulate(grads, nodes, *input, Tensor::matrix(r, c, ga));
        }
        Op::SumAll(a) | Op::MeanAll(a) => {
            let (r, c) = val(*a).dims2();
            let mut s = g.data()[0];
            if matches!(node.op, Op::MeanAll(_)) {
                s /= (r * c) as f64;
            }
            accumulate(grads, nodes, *a, Tensor::filled(r, c, s));
        }
        Op::ColMeans(a) => {
            let (r, c) = val(*a).dims2();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g.data()[j] / r as f64;
                }
            }
            accumulate(grads, nodes, *a, Tensor::matrix(r, c, ga));
        }
        Op::RowSums(a) => {
            let (r, c) = val(*a).dims2();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g.data()[i];
                }
            }
            accumulate(grads, nodes, *a, Tensor::matrix(r, c, ga));
        }
        Op::SliceRows { input, start } => {
            let (r, c) = val(*input).dims2();
            let mut ga = vec![0.0; r * c];
            ga[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *input, Tensor::matrix(r, c, ga));
        }
        Op::SliceCols { input, start } => {
            let (r, c) = val(*input).dims2();
            let w = g.cols();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                ga[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
            }
            accumulate(grads, nodes, *input, Tensor::matrix(r, c, ga));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                if wants(p) {
                    accumulate(grads, nodes, p, g.slice_rows(offset, rows));
                }
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let r = g.rows();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if wants(p) {
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    accumulate(grads, nodes, p, Tensor::matrix(r, w, gp));
                }
                offset += w;
            }
        }
        Op::Clamp { input, limit } => {
            let ga = g
                .zip_map(
                    val(*input),
                    "clamp-backward",
                    |g, x| {
                        if x.abs() <= *limit {
                            g
                        } else {
                            0.0
                        }
                    },
                )
                .unwrap();
            accumulate(grads, nodes, *input, ga);
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn check_broadcast(op: &str, a: (usize, usize), b: (usize, usize)) {
    let ok = (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1);
    assert!(ok, "{op}: cannot broadcast {b:?} onto {a:?}");
}

// `add`/`sub`/`mul` record tape nodes; operator traits would hide that.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tape.value_of(self.id).dims2()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'t> {
        self.same_tape(&other);
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            f(&a, &b)
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            a.matmul(b).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    fn broadcast_op(self, other: Var<'t>, name: &'static str, op: Op, f: fn(f64, f64) -> f64) -> Var<'t> {
        self.binary(other, op, |a, b| {
            let (r, c) = a.dims2();
            let (br, bc) = b.dims2();
            check_broadcast(name, (r, c), (br, bc));
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(f(a.at(i, j), b.data()[broadcast_index(br, bc, i, j)]));
                }
            }
            Tensor::matrix(r, c, out)
        })
    }

    /// Elementwise sum; `other` may be a row, column or scalar broadcast over `self`.
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.broadcast_op(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.broadcast_op(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.broadcast_op(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, s), |a| a.scale(s))
    }

    pub fn transpose(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |a| a.map(|v| v * v))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sigmoid(self.id), |a| a.map(|v| 1.0 / (1.0 + (-v).exp())))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Gelu(self.id), |a| a.map(gelu))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SoftmaxRows(self.id), |a| {
            let (r, c) = a.dims2();
            let mut out = a.data().to_vec();
            for i in 0..r {
                softmax_in_place(&mut out[i * c..(i + 1) * c]);
            }
            Tensor::matrix(r, c, out)
        })
    }

    /// Softmax where row `i` attends to columns `0..=i + offset` only.
    pub fn causal_softmax(self, offset: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::CausalSoftmax(self.id), |a| {
            let (r, c) = a.dims2();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let visible = (i + offset + 1).min(c);
                let row = &mut out[i * c..i * c + visible];
                row.copy_from_slice(&a.row(i)[..visible]);
                softmax_in_place(row);
            }
            Tensor::matrix(r, c, out)
        })
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::LogSoftmaxRows(self.id), |a| {
            let (r, c) = a.dims2();
            let mut out = a.data().to_vec();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::matrix(r, c, out)
        })
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn standardize(self, eps: f64) -> Var<'t> {
        let (value, rstd) = {
            let a = self.tape.value_of(self.id);
            let (r, c) = a.dims2();
            let mut out = vec![0.0; r * c];
            let mut rstd = Vec::with_capacity(r);
            for i in 0..r {
                let row = a.row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let s = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mean) * s;
                }
                rstd.push(s);
            }
            (Tensor::matrix(r, c, out), rstd)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::Standardize { input: self.id, rstd }, rg)
    }

    pub fn sum_all(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::SumAll(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean_all(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::MeanAll(self.id), |a| Tensor::scalar(a.mean()))
    }

    /// Column means, `r x c -> 1 x c`.
    pub fn col_means(self) -> Var<'t> {
        self.tape.unary(self.id, Op::ColMeans(self.id), |a| a.col_means())
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn row_sums(self) -> Var<'t> {
        self.tape.unary(self.id, Op::RowSums(self.id), |a| {
            let r = a.rows();
            Tensor::matrix(r, 1, (0..r).map(|i| a.row(i).iter().sum()).collect())
        })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::SliceRows { input: self.id, start }, |a| {
            assert!(start + len <= a.rows(), "slice_rows out of range");
            a.slice_rows(start, len)
        })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::SliceCols { input: self.id, start }, |a| {
            let (r, c) = a.dims2();
            assert!(start + len <= c, "slice_cols out of range");
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&a.row(i)[start..start + len]);
            }
            Tensor::matrix(r, len, out)
        })
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        if parts.len() == 1 {
            return parts[0];
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|v| &**v).collect();
            Tensor::concat_rows(&refs).unwrap_or_else(|e| panic!("{e}"))
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        if parts.len() == 1 {
            return parts[0];
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
            let r = vals[0].rows();
            assert!(vals.iter().all(|v| v.rows() == r), "concat_cols row mismatch");
            let c: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for v in &vals {
                    out.extend_from_slice(v.row(i));
                }
            }
            Tensor::matrix(r, c, out)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg)
    }

    /// Clip entries to `[-limit, limit]`; clipped entries pass no gradient.
    pub fn clamp(self, limit: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Clamp { input: self.id, limit }, |a| {
            a.map(|v| v.clamp(-limit, limit))
        })
    }

    /// Same value, cut off from the graph.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        rng.normal_matrix(r, c, 1.0)
    }

    /// Central-difference check of `f` with respect to each entry of `inputs`.
    fn check<F>(inputs: &[Tensor], f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out).unwrap();
        let eval = |ins: &[Tensor]| {
            let t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
            f(&t, &vs).value().data()[0]
        };
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[k]);
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {k} entry {idx}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn power_rule() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.square();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn matmul_adjoint() {
        let mut rng = Rng::new(1);
        let a = rand(&mut rng, 3, 4);
        let b = rand(&mut rng, 4, 2);
        let tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.param(b.clone());
        let s = av.matmul(bv).sum_all();
        let g = tape.backward(s).unwrap();
        // d/dA sum(AB) = 1 B^T, d/dB = A^T 1
        let ones_out = Tensor::filled(3, 2, 1.0);
        let ga = ones_out.matmul(&b.transpose()).unwrap();
        let gb = a.transpose().matmul(&ones_out).unwrap();
        assert!(g.get(av).unwrap().max_abs_diff(&ga) < 1e-14);
        assert!(g.get(bv).unwrap().max_abs_diff(&gb) < 1e-14);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = x.mul(c).sum_all();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data()[0], 5.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.square().detach().mul(x).sum_all();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data()[0], 4.0);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = Rng::new(7);
        let a = rand(&mut rng, 3, 4);
        let b = rand(&mut rng, 3, 4);
        let row = rand(&mut rng, 1, 4);
        let col = rand(&mut rng, 3, 1);
        check(&[a, b, row, col], |_, v| {
            let x = v[0].add(v[1]).mul(v[2]).sub(v[3]).gelu();
            let y = x.sigmoid().mul(v[0]).scale(1.7);
            y.square().add(v[1].square()).sqrt().sum_all()
        });
    }

    #[test]
    fn attention_ops_match_finite_differences() {
        let mut rng = Rng::new(8);
        let q = rand(&mut rng, 3, 4);
        let k = rand(&mut rng, 5, 4);
        let v = rand(&mut rng, 5, 4);
        let w = rand(&mut rng, 3, 4);
        check(&[q, k, v, w], |_, x| {
            let s = x[0].matmul(x[1].transpose()).scale(0.5);
            let p = s.causal_softmax(2);
            let o = p.matmul(x[2]);
            let h0 = o.slice_cols(0, 2).softmax_rows();
            let h1 = o.slice_cols(2, 2).standardize(1e-5);
            Var::concat_cols(&[h0, h1]).mul(x[3]).sum_all()
        });
    }

    #[test]
    fn reduction_ops_match_finite_differences() {
        let mut rng = Rng::new(9);
        let a = rand(&mut rng, 4, 3);
        let b = rand(&mut rng, 2, 3);
        let p = Tensor::vector(vec![0.2, 0.5, 0.3]);
        check(&[a, b, p], |_, x| {
            let stacked = Var::concat_rows(&[x[0], x[1]]);
            let pooled = stacked.col_means();
            let ls = pooled.log_softmax_rows();
            let kl = x[2].mul(ls).sum_all().scale(-1.0);
            let rows = stacked.slice_rows(1, 3).row_sums().square().mean_all();
            kl.add(rows).add(stacked.clamp(0.8).sum_all())
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::filled(2, 4, 1.0));
        let p = x.causal_softmax(1).value();
        assert_eq!(p.row(0), &[0.5, 0.5, 0.0, 0.0]);
        for v in &p.row(1)[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.at(1, 3), 0.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = x.mul(x).add(x).sum_all();
        let g = tape.backward(y).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 4.0).abs() < 1e-15);
    }
}
