use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{as_matrix, validate_shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multi-head scaled dot-product attention layout.
///
/// Query rows are split into consecutive groups of `query_group` rows and key rows into
/// groups of `key_group` rows; group `i` of the queries attends only to group `i` of the keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub query_group: usize,
    pub key_group: usize,
}

impl AttentionSpec {
    /// Every query row attends to every key row.
    pub fn dense(heads: usize, queries: usize, keys: usize) -> Self {
        Self {
            heads,
            query_group: queries,
            key_group: keys,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LogSigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mask(usize, Vec<f64>),
    L2Distance(usize, usize),
    RowDistances(usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(Vec<usize>, Vec<(usize, usize)>),
    Pick(usize, usize),
    Sum(usize),
    Mean(usize),
    Blend(usize, usize, usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        spec: AttentionSpec,
        weights: Vec<f64>,
    },
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mask(..) => "dropout",
            Op::L2Distance(..) => "l2_distance",
            Op::RowDistances(..) => "row_distances",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Pick(..) => "pick",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Blend(..) => "blend",
            Op::Attention { .. } => "attention",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: HashMap<usize, Vec<f64>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Gradient of an input leaf created with [`Graph::input`].
    pub fn var(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var.0).map(Vec::as_slice)
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    #[cfg(feature = "fault-injection")]
    flipped: Option<&'static str>,
}

fn add_into(grads: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64]) {
    match &mut grads[idx] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` ([m×k]), `b` ([k×n]) and `c` ([m×n]);
    // callers derive them from validated shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Keep the open interval (0, 1) even where the exact value rounds to an endpoint.
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = (*o / total).max(f64::MIN_POSITIVE);
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.inputs_of(&op).iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::L2Distance(a, b)
            | Op::RowDistances(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LogSigmoid(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Mask(a, _)
            | Op::Pick(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(v) | Op::GatherRows(v, _) => v.clone(),
            Op::Blend(g, x, y) => vec![*g, *x, *y],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: tensor.into_data(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported through [`Gradients::var`].
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let v = self.constant(tensor);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf bound to a stored parameter. Frozen parameters become constants.
    /// Repeated calls within one graph return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.frozen {
            self.constant(p.tensor.clone())
        } else {
            self.nodes.push(Node {
                shape: p.tensor.shape().to_vec(),
                value: p.tensor.data().to_vec(),
                op: Op::Param(id),
                requires_grad: true,
            });
            Var(self.nodes.len() - 1)
        };
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows_cols(&self, v: Var) -> (usize, usize) {
        as_matrix(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("graph values are validated on insertion")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities stored by an attention node, laid out as
    /// `[group][head][query row in group][key in group]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], AttentionSpec)> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, spec, .. } => Some((weights, *spec)),
            _ => None,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op)
    }

    /// `[m×k] × [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            (k as isize, 1),
            &self.nodes[b.0].value,
            (n as isize, 1),
            &mut out,
        );
        self.push(vec![m, n], out, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.nodes[row.0].value.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let r = &self.nodes[row.0].value;
        let value = self.nodes[x.0]
            .value
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::AddRow(x.0, row.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), sigmoid_scalar)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    /// `ln σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LogSigmoid(a.0), |x| x.min(0.0) - (-x.abs()).exp().ln_1p())
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(a);
        let mut value = vec![0.0; self.nodes[a.0].value.len()];
        for (row, out) in self.nodes[a.0].value.chunks(cols).zip(value.chunks_mut(cols)) {
            softmax_row(row, out);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Softmax(a.0))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(a);
        let mut value = vec![0.0; self.nodes[a.0].value.len()];
        for (row, out) in self.nodes[a.0].value.chunks(cols).zip(value.chunks_mut(cols)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::LogSoftmax(a.0))
    }

    /// Normalizes each row over the last axis (population variance) then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if cols < 2 {
            return Err(TensorError::InvalidShape {
                shape: self.nodes[x.0].shape.clone(),
                reason: "layer_norm needs at least two features",
            });
        }
        for p in [gain, bias] {
            if self.nodes[p.0].value.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let xs = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout. Identity (no new node) in evaluation or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidParameter {
                op: "dropout",
                reason: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.nodes[x.0].value.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Mask(x.0, mask))
    }

    /// Euclidean distance between two same-shaped tensors, as a one-element tensor.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l2_distance", a, b)?;
        let d = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        self.push(vec![1], vec![d], Op::L2Distance(a.0, b.0))
    }

    /// Distances from a single row `q` (`[d]` or `[1×d]`) to each row of `rows` (`[k×d]`); yields `[k]`.
    pub fn row_distances(&mut self, q: Var, rows: Var) -> Result<Var> {
        let (qr, d) = self.rows_cols(q);
        let (k, rd) = self.rows_cols(rows);
        if qr != 1 || rd != d {
            return Err(TensorError::ShapeMismatch {
                op: "row_distances",
                lhs: self.nodes[q.0].shape.clone(),
                rhs: self.nodes[rows.0].shape.clone(),
            });
        }
        let qv = &self.nodes[q.0].value;
        let value = self.nodes[rows.0]
            .value
            .chunks(d)
            .map(|r| r.iter().zip(qv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .collect();
        self.push(vec![k], value, Op::RowDistances(q.0, rows.0))
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.rows_cols(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        self.push(
            vec![rows, total],
            value,
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
        )
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let cols = self.rows_cols(sources[0]).1;
        for &s in sources {
            if self.rows_cols(s).1 != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: self.nodes[sources[0].0].shape.clone(),
                    rhs: self.nodes[s.0].shape.clone(),
                });
            }
        }
        if picks.is_empty() {
            return Err(TensorError::InvalidParameter {
                op: "gather_rows",
                reason: "no rows selected".into(),
            });
        }
        let mut value = Vec::with_capacity(picks.len() * cols);
        for &(src, row) in picks {
            let Some(&s) = sources.get(src) else {
                return Err(TensorError::InvalidParameter {
                    op: "gather_rows",
                    reason: format!("source {src} out of range"),
                });
            };
            if row >= self.rows_cols(s).0 {
                return Err(TensorError::InvalidParameter {
                    op: "gather_rows",
                    reason: format!("row {row} out of range"),
                });
            }
            value.extend_from_slice(&self.nodes[s.0].value[row * cols..(row + 1) * cols]);
        }
        self.push(
            vec![picks.len(), cols],
            value,
            Op::GatherRows(sources.iter().map(|v| v.0).collect(), picks.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let picks: Vec<_> = (start..start + len).map(|r| (0, r)).collect();
        self.gather_rows(&[x], &picks)
    }

    /// Single element by flat index, as a one-element tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let Some(&v) = self.nodes[x.0].value.get(index) else {
            return Err(TensorError::InvalidParameter {
                op: "pick",
                reason: format!("index {index} out of range"),
            });
        };
        self.push(vec![1], vec![v], Op::Pick(x.0, index))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(x.0))
    }

    /// Elementwise convex combination `(1 − g)·x + g·y`.
    pub fn blend(&mut self, g: Var, x: Var, y: Var) -> Result<Var> {
        self.same_shape("blend", g, x)?;
        self.same_shape("blend", x, y)?;
        let (gv, xv, yv) = (&self.nodes[g.0].value, &self.nodes[x.0].value, &self.nodes[y.0].value);
        // Clamped so rounding never leaves the interval spanned by the inputs.
        let value = (0..gv.len())
            .map(|i| ((1.0 - gv[i]) * xv[i] + gv[i] * yv[i]).clamp(xv[i].min(yv[i]), xv[i].max(yv[i])))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Blend(g.0, x.0, y.0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len = validate_shape(shape)?;
        if len != self.nodes[x.0].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[x.0].value.clone();
        self.push(shape.to_vec(), value, Op::Reshape(x.0))
    }

    /// Multi-head scaled dot-product attention over already-projected queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (n, d) = self.rows_cols(q);
        let (m, dk) = self.rows_cols(k);
        let (mv, dv) = self.rows_cols(v);
        if dk != d || dv != d || mv != m {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.nodes[q.0].shape.clone(),
                rhs: self.nodes[k.0].shape.clone(),
            });
        }
        let AttentionSpec {
            heads,
            query_group: qg,
            key_group: kg,
        } = spec;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidParameter {
                op: "attention",
                reason: format!("model width {d} not divisible by {heads} heads"),
            });
        }
        if qg == 0 || kg == 0 || n % qg != 0 || m % kg != 0 || n / qg != m / kg {
            return Err(TensorError::InvalidParameter {
                op: "attention",
                reason: format!("{n} queries / {m} keys do not split into groups of {qg} / {kg}"),
            });
        }
        let groups = n / qg;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut weights = vec![0.0; groups * heads * qg * kg];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; kg];
        for gi in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for r in 0..qg {
                    let qrow = &qv[(gi * qg + r) * d + off..][..dh];
                    for (c, s) in scores.iter_mut().enumerate() {
                        let krow = &kv[(gi * kg + c) * d + off..][..dh];
                        *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let w = &mut weights[((gi * heads + h) * qg + r) * kg..][..kg];
                    softmax_row(&scores, w);
                    let orow = &mut out[(gi * qg + r) * d + off..][..dh];
                    for (c, &wc) in w.iter().enumerate() {
                        let vrow = &vv[(gi * kg + c) * d + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += wc * x;
                        }
                    }
                }
            }
        }
        self.push(
            vec![n, d],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                spec,
                weights,
            },
        )
    }

    /// Negates the upstream gradient of every node of the named op during backward.
    #[cfg(feature = "fault-injection")]
    pub fn flip_backward_sign(&mut self, op: &'static str) {
        self.flipped = Some(op);
    }

    /// Reverse pass from a single-element output. Every node is visited at most once, in
    /// reverse creation order; every gradient-carrying leaf receives a (possibly zero) gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(TensorError::NonScalarOutput(out_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut up) = grads[i].take() else {
                continue;
            };
            visited.push(i);
            #[cfg(feature = "fault-injection")]
            if self.flipped == Some(node.op.name()) {
                up.iter_mut().for_each(|g| *g = -*g);
            }
            self.backward_node(node, &up, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(std::mem::take(&mut up));
            }
        }

        let mut result = Gradients {
            visited,
            ..Default::default()
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = || {
                grads
                    .get(i)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| vec![0.0; node.value.len()])
            };
            match node.op {
                Op::Param(id) => result.params.push((id, g())),
                Op::Leaf => {
                    result.leaves.insert(i, g());
                }
                _ => {}
            }
        }
        Ok(result)
    }

    fn backward_node(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[i].value.as_slice();
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, up, (n as isize, 1), val(*b), (1, n as isize), &mut da);
                    add_into(grads, *a, &da);
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), (1, k as isize), up, (n as isize, 1), &mut db);
                    add_into(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, up);
                }
                if needs(*b) {
                    add_into(grads, *b, up);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, up);
                }
                if needs(*b) {
                    let neg: Vec<f64> = up.iter().map(|g| -g).collect();
                    add_into(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d: Vec<f64> = up.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    add_into(grads, *a, &d);
                }
                if needs(*b) {
                    let d: Vec<f64> = up.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    add_into(grads, *b, &d);
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    add_into(grads, *x, up);
                }
                if needs(*row) {
                    let cols = val(*row).len();
                    let mut d = vec![0.0; cols];
                    for chunk in up.chunks(cols) {
                        for (acc, g) in d.iter_mut().zip(chunk) {
                            *acc += g;
                        }
                    }
                    add_into(grads, *row, &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = up.iter().map(|g| g * c).collect();
                add_into(grads, *a, &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = up.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect();
                add_into(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = up.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                add_into(grads, *a, &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = up
                    .iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(grads, *a, &d);
            }
            Op::LogSigmoid(a) => {
                let d: Vec<f64> = up.iter().zip(val(*a)).map(|(g, x)| g * sigmoid_scalar(-x)).collect();
                add_into(grads, *a, &d);
            }
            Op::Softmax(a) => {
                let cols = *node.shape.last().unwrap();
                let mut d = vec![0.0; up.len()];
                for ((gr, yr), dr) in up.chunks(cols).zip(node.value.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                add_into(grads, *a, &d);
            }
            Op::LogSoftmax(a) => {
                let cols = *node.shape.last().unwrap();
                let mut d = vec![0.0; up.len()];
                for ((gr, yr), dr) in up.chunks(cols).zip(node.value.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = g - y.exp() * total;
                    }
                }
                add_into(grads, *a, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = *node.shape.last().unwrap();
                let rows = up.len() / cols;
                let g = val(*gain);
                if needs(*x) {
                    let mut dx = vec![0.0; up.len()];
                    for r in 0..rows {
                        let gr = &up[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let dh: Vec<f64> = gr.iter().zip(g).map(|(u, gg)| u * gg).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    add_into(grads, *x, &dx);
                }
                if needs(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (i, (u, h)) in up.iter().zip(xhat).enumerate() {
                        dg[i % cols] += u * h;
                    }
                    add_into(grads, *gain, &dg);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; cols];
                    for (i, u) in up.iter().enumerate() {
                        db[i % cols] += u;
                    }
                    add_into(grads, *bias, &db);
                }
            }
            Op::Mask(a, mask) => {
                let d: Vec<f64> = up.iter().zip(mask).map(|(g, m)| g * m).collect();
                add_into(grads, *a, &d);
            }
            Op::L2Distance(a, b) => {
                let dist = node.value[0];
                if dist > 0.0 {
                    let scale = up[0] / dist;
                    let diff: Vec<f64> = val(*a).iter().zip(val(*b)).map(|(x, y)| (x - y) * scale).collect();
                    if needs(*a) {
                        add_into(grads, *a, &diff);
                    }
                    if needs(*b) {
                        let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                        add_into(grads, *b, &neg);
                    }
                }
            }
            Op::RowDistances(q, rows) => {
                let qv = val(*q);
                let d = qv.len();
                let rv = val(*rows);
                let mut dq = vec![0.0; d];
                let mut drows = vec![0.0; rv.len()];
                for (r, (&dist, &g)) in node.value.iter().zip(up).enumerate() {
                    if dist == 0.0 {
                        continue;
                    }
                    let s = g / dist;
                    for c in 0..d {
                        let diff = (qv[c] - rv[r * d + c]) * s;
                        dq[c] += diff;
                        drows[r * d + c] -= diff;
                    }
                }
                if needs(*q) {
                    add_into(grads, *q, &dq);
                }
                if needs(*rows) {
                    add_into(grads, *rows, &drows);
                }
            }
            Op::ConcatCols(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = up.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.nodes[p].shape.last().unwrap();
                    if needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&up[r * total + offset..r * total + offset + w]);
                        }
                        add_into(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(sources, picks) => {
                let cols = *node.shape.last().unwrap();
                let mut parts: Vec<Option<Vec<f64>>> = sources
                    .iter()
                    .map(|&s| needs(s).then(|| vec![0.0; self.nodes[s].value.len()]))
                    .collect();
                for (i, &(src, row)) in picks.iter().enumerate() {
                    if let Some(buf) = &mut parts[src] {
                        for c in 0..cols {
                            buf[row * cols + c] += up[i * cols + c];
                        }
                    }
                }
                for (&s, part) in sources.iter().zip(parts) {
                    if let Some(d) = part {
                        add_into(grads, s, &d);
                    }
                }
            }
            Op::Pick(a, index) => {
                let mut d = vec![0.0; self.nodes[*a].value.len()];
                d[*index] = up[0];
                add_into(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![up[0]; self.nodes[*a].value.len()];
                add_into(grads, *a, &d);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                let d = vec![up[0] / n as f64; n];
                add_into(grads, *a, &d);
            }
            Op::Blend(g, x, y) => {
                let (gv, xv, yv) = (val(*g), val(*x), val(*y));
                if needs(*g) {
                    let d: Vec<f64> = (0..up.len()).map(|i| up[i] * (yv[i] - xv[i])).collect();
                    add_into(grads, *g, &d);
                }
                if needs(*x) {
                    let d: Vec<f64> = (0..up.len()).map(|i| up[i] * (1.0 - gv[i])).collect();
                    add_into(grads, *x, &d);
                }
                if needs(*y) {
                    let d: Vec<f64> = (0..up.len()).map(|i| up[i] * gv[i]).collect();
                    add_into(grads, *y, &d);
                }
            }
            Op::Attention { q, k, v, spec, weights } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = *node.shape.last().unwrap();
                let AttentionSpec {
                    heads,
                    query_group: qg,
                    key_group: kg,
                } = *spec;
                let groups = node.value.len() / d / qg;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; kg];
                for gi in 0..groups {
                    for h in 0..heads {
                        let off = h * dh;
                        for r in 0..qg {
                            let qi = (gi * qg + r) * d + off;
                            let w = &weights[((gi * heads + h) * qg + r) * kg..][..kg];
                            let dout = &up[qi..qi + dh];
                            for c in 0..kg {
                                let ki = (gi * kg + c) * d + off;
                                let mut acc = 0.0;
                                for j in 0..dh {
                                    dv[ki + j] += w[c] * dout[j];
                                    acc += dout[j] * vv[ki + j];
                                }
                                dp[c] = acc;
                            }
                            let dot: f64 = w.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for c in 0..kg {
                                let ds = w[c] * (dp[c] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ki = (gi * kg + c) * d + off;
                                for j in 0..dh {
                                    dq[qi + j] += ds * kv[ki + j];
                                    dk[ki + j] += ds * qv[qi + j];
                                }
                            }
                        }
                    }
                }
                if needs(*q) {
                    add_into(grads, *q, &dq);
                }
                if needs(*k) {
                    add_into(grads, *k, &dk);
                }
                if needs(*v) {
                    add_into(grads, *v, &dv);
                }
            }
            Op::Reshape(a) => add_into(grads, *a, up),
        }
    }
}
