//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every intermediate value of a forward pass is appended to a [`Tape`] and
//! addressed by a copyable [`ValueId`]. Operations record their parents, so a
//! single [`Tape::backward`] sweep in reverse insertion order accumulates
//! exact gradients for every node, including shared subexpressions.
//!
//! Tensors are dense `f64` buffers with a row-major shape. A scalar is a
//! tensor of shape `[1]`. The op set is deliberately small: it is exactly
//! what the message-passing model and its training loss need, nothing more.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamSlot, AdamState};

use thiserror::Error;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPSILON: f64 = 1e-5;
/// Epsilon added to the norm product in cosine similarity.
pub const COSINE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch, expected {expected} but found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("backward target must be a scalar, found {len} elements")]
    NotScalar { len: usize },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
}

/// Handle to a value on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    AddConst(ValueId),
    ScaleConst(ValueId, f64),
    /// Sum of scalar-weighted tensors: `Σ_k w_k · v_k`.
    WeightedSum(Vec<(ValueId, ValueId)>),
    /// Matrix `[m, n]` times vector `[n]`.
    MatVec(ValueId, ValueId),
    Relu(ValueId),
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    },
    CosineSim(ValueId, ValueId),
    MeanPool(Vec<ValueId>),
    SumScalars(Vec<ValueId>),
    Div(ValueId, ValueId),
    /// One row of a `[rows, cols]` matrix, used for embedding lookup.
    Row { matrix: ValueId, row: usize },
    BceWithLogit { logit: ValueId, label: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Append-only record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Record an input tensor. Gradients accumulate into it during backward.
    pub fn leaf(&mut self, shape: &[usize], data: &[f64]) -> ValueId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(shape.to_vec(), data.to_vec(), Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> ValueId {
        self.push(vec![1], vec![value], Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        let node = &self.nodes[id.0];
        assert_eq!(node.data.len(), 1, "scalar_value on non-scalar");
        node.data[0]
    }

    pub fn grad(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, DiffError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                expected: shape_str(&self.nodes[a.0].shape),
                found: shape_str(&self.nodes[b.0].shape),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Add(a, b)))
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::AddConst(a))
    }

    pub fn scale_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::ScaleConst(a, c))
    }

    /// `Σ_k w_k · v_k` where each `w_k` is a scalar and every `v_k` shares one shape.
    pub fn weighted_sum(&mut self, pairs: &[(ValueId, ValueId)]) -> Result<ValueId, DiffError> {
        if pairs.is_empty() {
            return Err(DiffError::EmptyInput { op: "weighted_sum" });
        }
        let shape = self.nodes[pairs[0].1 .0].shape.clone();
        for &(w, v) in pairs {
            if self.nodes[w.0].data.len() != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "weighted_sum",
                    expected: "[1]".to_string(),
                    found: shape_str(&self.nodes[w.0].shape),
                });
            }
            if self.nodes[v.0].shape != shape {
                return Err(DiffError::ShapeMismatch {
                    op: "weighted_sum",
                    expected: shape_str(&shape),
                    found: shape_str(&self.nodes[v.0].shape),
                });
            }
        }
        let mut data = vec![0.0; shape.iter().product()];
        for &(w, v) in pairs {
            let wv = self.nodes[w.0].data[0];
            for (acc, x) in data.iter_mut().zip(&self.nodes[v.0].data) {
                *acc += wv * x;
            }
        }
        Ok(self.push(shape, data, Op::WeightedSum(pairs.to_vec())))
    }

    pub fn matvec(&mut self, w: ValueId, x: ValueId) -> Result<ValueId, DiffError> {
        let wshape = self.nodes[w.0].shape.clone();
        let xlen = self.nodes[x.0].data.len();
        if wshape.len() != 2 || wshape[1] != xlen {
            return Err(DiffError::ShapeMismatch {
                op: "matvec",
                expected: format!("[m, {xlen}]"),
                found: shape_str(&wshape),
            });
        }
        let (m, n) = (wshape[0], wshape[1]);
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = &self.nodes[w.0].data[i * n..(i + 1) * n];
            data[i] = row
                .iter()
                .zip(&self.nodes[x.0].data)
                .map(|(a, b)| a * b)
                .sum();
        }
        Ok(self.push(vec![m], data, Op::MatVec(w, x)))
    }

    /// Affine map `W·x + b` with `W: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, DiffError> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Relu(a))
    }

    /// Layer normalization over the last (only) axis with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> Result<ValueId, DiffError> {
        let d = self.nodes[x.0].data.len();
        if d < 2 {
            return Err(DiffError::EmptyInput { op: "layer_norm" });
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id.0].data.len() != d {
                return Err(DiffError::ShapeMismatch {
                    op: "layer_norm",
                    expected: format!("[{d}] for {name}"),
                    found: shape_str(&self.nodes[id.0].shape),
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let mean = xd.iter().sum::<f64>() / d as f64;
        let var = xd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_sigma = 1.0 / (var + LAYER_NORM_EPSILON).sqrt();
        let data: Vec<f64> = xd
            .iter()
            .zip(&self.nodes[gamma.0].data)
            .zip(&self.nodes[beta.0].data)
            .map(|((v, g), bt)| (v - mean) * inv_sigma * g + bt)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::LayerNorm { x, gamma, beta }))
    }

    /// Cosine similarity of two equal-length vectors, a scalar in `[-1, 1]`.
    pub fn cosine_sim(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, DiffError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(DiffError::ShapeMismatch {
                op: "cosine_sim",
                expected: shape_str(&self.nodes[a.0].shape),
                found: shape_str(&self.nodes[b.0].shape),
            });
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
        let na = ad.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = bd.iter().map(|x| x * x).sum::<f64>().sqrt();
        let value = dot / (na * nb + COSINE_EPSILON);
        Ok(self.push(vec![1], vec![value], Op::CosineSim(a, b)))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_pool(&mut self, rows: &[ValueId]) -> Result<ValueId, DiffError> {
        if rows.is_empty() {
            return Err(DiffError::EmptyInput { op: "mean_pool" });
        }
        let shape = self.nodes[rows[0].0].shape.clone();
        for &r in rows {
            if self.nodes[r.0].shape != shape {
                return Err(DiffError::ShapeMismatch {
                    op: "mean_pool",
                    expected: shape_str(&shape),
                    found: shape_str(&self.nodes[r.0].shape),
                });
            }
        }
        let inv = 1.0 / rows.len() as f64;
        let mut data = vec![0.0; shape.iter().product()];
        for &r in rows {
            for (acc, x) in data.iter_mut().zip(&self.nodes[r.0].data) {
                *acc += x * inv;
            }
        }
        Ok(self.push(shape, data, Op::MeanPool(rows.to_vec())))
    }

    pub fn sum_scalars(&mut self, xs: &[ValueId]) -> Result<ValueId, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::EmptyInput { op: "sum_scalars" });
        }
        let mut total = 0.0;
        for &x in xs {
            if self.nodes[x.0].data.len() != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "sum_scalars",
                    expected: "[1]".to_string(),
                    found: shape_str(&self.nodes[x.0].shape),
                });
            }
            total += self.nodes[x.0].data[0];
        }
        Ok(self.push(vec![1], vec![total], Op::SumScalars(xs.to_vec())))
    }

    /// Scalar division `num / den`.
    pub fn div(&mut self, num: ValueId, den: ValueId) -> Result<ValueId, DiffError> {
        for id in [num, den] {
            if self.nodes[id.0].data.len() != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "div",
                    expected: "[1]".to_string(),
                    found: shape_str(&self.nodes[id.0].shape),
                });
            }
        }
        let value = self.nodes[num.0].data[0] / self.nodes[den.0].data[0];
        Ok(self.push(vec![1], vec![value], Op::Div(num, den)))
    }

    /// Row `row` of a `[rows, cols]` matrix. Backward scatters into that row only.
    pub fn row(&mut self, matrix: ValueId, row: usize) -> Result<ValueId, DiffError> {
        let shape = self.nodes[matrix.0].shape.clone();
        if shape.len() != 2 || row >= shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "row",
                expected: format!("2-d matrix with more than {row} rows"),
                found: shape_str(&shape),
            });
        }
        let cols = shape[1];
        let data = self.nodes[matrix.0].data[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(vec![cols], data, Op::Row { matrix, row }))
    }

    /// Binary cross-entropy of a logit against a fixed 0/1 label, in the
    /// overflow-safe form `max(l, 0) - l·y + ln(1 + exp(-|l|))`.
    pub fn bce_with_logit(&mut self, logit: ValueId, label: f64) -> Result<ValueId, DiffError> {
        if self.nodes[logit.0].data.len() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "bce_with_logit",
                expected: "[1]".to_string(),
                found: shape_str(&self.nodes[logit.0].shape),
            });
        }
        let l = self.nodes[logit.0].data[0];
        let value = l.max(0.0) - l * label + (-l.abs()).exp().ln_1p();
        Ok(self.push(vec![1], vec![value], Op::BceWithLogit { logit, label }))
    }

    /// Accumulate `d loss / d node` into every node's gradient buffer.
    ///
    /// Gradients are zeroed first, so one tape supports one backward sweep
    /// per loss; build a fresh tape per forward pass.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), DiffError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(DiffError::NotScalar {
                len: self.nodes[loss.0].data.len(),
            });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let (before, after) = self.nodes.split_at_mut(i);
            let child = &after[0];
            if child.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let go = child.grad.clone();
            match &child.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (g, d) in before[a.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                    for (g, d) in before[b.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                Op::AddConst(a) => {
                    for (g, d) in before[a.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                Op::ScaleConst(a, c) => {
                    let c = *c;
                    for (g, d) in before[a.0].grad.iter_mut().zip(&go) {
                        *g += c * d;
                    }
                }
                Op::WeightedSum(pairs) => {
                    let pairs = pairs.clone();
                    for (w, v) in pairs {
                        let dot: f64 = go.iter().zip(&before[v.0].data).map(|(g, x)| g * x).sum();
                        before[w.0].grad[0] += dot;
                        let wv = before[w.0].data[0];
                        for (g, d) in before[v.0].grad.iter_mut().zip(&go) {
                            *g += wv * d;
                        }
                    }
                }
                Op::MatVec(w, x) => {
                    let (w, x) = (*w, *x);
                    let n = before[x.0].data.len();
                    let m = go.len();
                    let xdata = before[x.0].data.clone();
                    {
                        let wnode = &mut before[w.0];
                        for i in 0..m {
                            for j in 0..n {
                                wnode.grad[i * n + j] += go[i] * xdata[j];
                            }
                        }
                    }
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let row = &before[w.0].data[i * n..(i + 1) * n];
                        for (acc, wv) in dx.iter_mut().zip(row) {
                            *acc += go[i] * wv;
                        }
                    }
                    for (g, d) in before[x.0].grad.iter_mut().zip(&dx) {
                        *g += d;
                    }
                }
                Op::Relu(a) => {
                    let node = &mut before[a.0];
                    for j in 0..go.len() {
                        if node.data[j] > 0.0 {
                            node.grad[j] += go[j];
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let d = go.len();
                    let df = d as f64;
                    let xd = before[x.0].data.clone();
                    let mean = xd.iter().sum::<f64>() / df;
                    let var = xd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv_sigma = 1.0 / (var + LAYER_NORM_EPSILON).sqrt();
                    let xhat: Vec<f64> = xd.iter().map(|v| (v - mean) * inv_sigma).collect();
                    {
                        let gnode = &mut before[gamma.0];
                        for j in 0..d {
                            gnode.grad[j] += go[j] * xhat[j];
                        }
                    }
                    {
                        let bnode = &mut before[beta.0];
                        for j in 0..d {
                            bnode.grad[j] += go[j];
                        }
                    }
                    let dxhat: Vec<f64> = (0..d).map(|j| go[j] * before[gamma.0].data[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / df;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                    let xnode = &mut before[x.0];
                    for j in 0..d {
                        xnode.grad[j] +=
                            inv_sigma * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                Op::CosineSim(a, b) => {
                    let (a, b) = (*a, *b);
                    let g = go[0];
                    let ad = before[a.0].data.clone();
                    let bd = before[b.0].data.clone();
                    let dot: f64 = ad.iter().zip(&bd).map(|(x, y)| x * y).sum();
                    let na = ad.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = bd.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let den = na * nb + COSINE_EPSILON;
                    let den2 = den * den;
                    {
                        let anode = &mut before[a.0];
                        for j in 0..ad.len() {
                            let norm_term = if na > 0.0 { nb * ad[j] / na } else { 0.0 };
                            anode.grad[j] += g * (bd[j] * den - dot * norm_term) / den2;
                        }
                    }
                    let bnode = &mut before[b.0];
                    for j in 0..bd.len() {
                        let norm_term = if nb > 0.0 { na * bd[j] / nb } else { 0.0 };
                        bnode.grad[j] += g * (ad[j] * den - dot * norm_term) / den2;
                    }
                }
                Op::MeanPool(rows) => {
                    let rows = rows.clone();
                    let inv = 1.0 / rows.len() as f64;
                    for r in rows {
                        for (g, d) in before[r.0].grad.iter_mut().zip(&go) {
                            *g += inv * d;
                        }
                    }
                }
                Op::SumScalars(xs) => {
                    let xs = xs.clone();
                    for x in xs {
                        before[x.0].grad[0] += go[0];
                    }
                }
                Op::Div(num, den) => {
                    let (num, den) = (*num, *den);
                    let n = before[num.0].data[0];
                    let d = before[den.0].data[0];
                    before[num.0].grad[0] += go[0] / d;
                    before[den.0].grad[0] -= go[0] * n / (d * d);
                }
                Op::Row { matrix, row } => {
                    let (matrix, row) = (*matrix, *row);
                    let cols = go.len();
                    let mnode = &mut before[matrix.0];
                    for j in 0..cols {
                        mnode.grad[row * cols + j] += go[j];
                    }
                }
                Op::BceWithLogit { logit, label } => {
                    let (logit, label) = (*logit, *label);
                    let l = before[logit.0].data[0];
                    let sigma = if l >= 0.0 {
                        1.0 / (1.0 + (-l).exp())
                    } else {
                        let e = l.exp();
                        e / (1.0 + e)
                    };
                    before[logit.0].grad[0] += go[0] * (sigma - label);
                }
            }
        }
        Ok(())
    }
}

/// Central-difference gradient of a scalar function of a flat input,
/// used to verify analytic gradients in tests and the self-test command.
pub fn finite_diff(f: &dyn Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; point.len()];
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let hi = f(&probe);
        probe[i] = point[i] - step;
        let lo = f(&probe);
        probe[i] = point[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}
