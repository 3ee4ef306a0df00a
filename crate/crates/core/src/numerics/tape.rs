//! Tape-based reverse-mode automatic differentiation over whole-tensor ops.
//!
//! A `Tape` is an append-only arena of nodes; every operation records enough
//! to replay its vector-Jacobian product in reverse. Handles (`Var`) are plain
//! indices, so they are `Copy` and stay valid for the life of the tape.
//! Parameters are inserted once per tape (deduplicated by name) and their
//! accumulated gradients are written back to the `ParamStore` after
//! `backward`.

use std::collections::HashMap;

use crate::error::{ChimeError, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{matmul_kernel, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    AffineConst { x: Var, mul: f64 },
    Relu { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Tanh { x: Var },
    Softmax { x: Var, axis: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    MulScalar { scalar: Var, x: Var },
    DivScalar { x: Var, scalar: Var },
    Reshape { x: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    GatherCols { x: Var, indices: Vec<usize> },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recording tape. One tape per training step or inference pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_C * x * x)
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Extracts a node's value as an owned tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node is consistent")
    }

    // Non-finite values are allowed to flow: the training loop turns them
    // into a diagnosed abort at the loss, which a mid-graph panic would
    // preempt.
    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            values,
            shape,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ── inputs ──────────────────────────────────────────────────────

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Var {
        self.push(values, shape, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(vec![0.0; n], shape, Op::Leaf)
    }

    /// Inserts a parameter leaf, reusing the existing node when the same name
    /// was already placed on this tape. Reuse is what makes gradients from
    /// several forward passes accumulate on one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let v = self.push(t.values().to_vec(), t.shape().to_vec(), Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ── shape helpers ───────────────────────────────────────────────

    fn dims2(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        if n.shape.len() == 1 {
            (1, n.shape[0])
        } else {
            (
                n.shape[..n.shape.len() - 1].iter().product(),
                *n.shape.last().unwrap(),
            )
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> ChimeError {
        ChimeError::DimensionMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    // ── arithmetic ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(ChimeError::Contract(format!(
                "transpose expects a matrix, got shape {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        Ok(self.push(out, vec![n, m], Op::Transpose { x }))
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-n bias vector to every row of an m-by-n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.nodes[bias.0].values.len() != n {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let bv = self.value(bias).to_vec();
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::AddBias { x, bias }))
    }

    /// Elementwise `mul * x + add` with compile-time constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::AffineConst { x, mul })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    // ── activations ─────────────────────────────────────────────────

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, gelu_scalar, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    /// `ln(1 + e^x)`, the stable building block of logit cross-entropy.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map_unary(
            x,
            |v| if v > 30.0 { v } else { v.exp().ln_1p() },
            Op::Softplus { x },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh { x })
    }

    /// Numerically stable softmax along `axis` (max-subtraction form).
    /// Valid axes: 0 for vectors, 0 or 1 for matrices.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ok = match s.len() {
            1 => axis == 0,
            2 => axis <= 1,
            _ => false,
        };
        if !ok {
            return Err(ChimeError::Contract(format!(
                "softmax axis {axis} invalid for shape {s:?}"
            )));
        }
        let (rows, cols) = self.dims2(x);
        let mut out = self.value(x).to_vec();
        let row_major = s.len() == 1 || axis == 1;
        if row_major {
            for r in 0..rows {
                softmax_lane(&mut out[r * cols..(r + 1) * cols], 1);
            }
        } else {
            for c in 0..cols {
                softmax_lane(&mut out[c..], cols);
            }
        }
        // Axis index normalized so backward only handles lanes.
        let lane_axis = if row_major { 1 } else { 0 };
        Ok(self.push(out, s, Op::Softmax { x, axis: lane_axis }))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![m], vec![1], Op::MeanAll { x })
    }

    /// Mean of elementwise squared differences; the workhorse loss.
    pub fn mean_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ── scalar broadcasting ─────────────────────────────────────────

    pub fn mul_scalar(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.nodes[scalar.0].values.len() != 1 {
            return Err(ChimeError::Contract(
                "mul_scalar expects a one-element scalar variable".into(),
            ));
        }
        let s = self.scalar_value(scalar);
        let out: Vec<f64> = self.value(x).iter().map(|&v| s * v).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::MulScalar { scalar, x }))
    }

    pub fn div_scalar(&mut self, x: Var, scalar: Var) -> Result<Var> {
        if self.nodes[scalar.0].values.len() != 1 {
            return Err(ChimeError::Contract(
                "div_scalar expects a one-element scalar variable".into(),
            ));
        }
        let s = self.scalar_value(scalar);
        if s == 0.0 {
            return Err(ChimeError::Contract("division by zero scalar".into()));
        }
        let out: Vec<f64> = self.value(x).iter().map(|&v| v / s).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::DivScalar { x, scalar }))
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[x.0].values.len() {
            return Err(ChimeError::DimensionMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let values = self.value(x).to_vec();
        Ok(self.push(values, shape, Op::Reshape { x }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + len > m {
            return Err(ChimeError::Contract(format!(
                "slice_rows {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(out, vec![len, n], Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + len > n {
            return Err(ChimeError::Contract(format!(
                "slice_cols {start}..{} out of bounds for {n} columns",
                start + len
            )));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        Ok(self.push(out, vec![m, len], Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(ChimeError::Contract("concat_rows of zero parts".into()));
        }
        let n = self.dims2(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, pn) = self.dims2(p);
            if pn != n {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(
            out,
            vec![rows, n],
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(ChimeError::Contract("concat_cols of zero parts".into()));
        }
        let m = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        for &p in parts {
            if self.dims2(p).0 != m {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                out.extend_from_slice(&v[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            out,
            vec![m, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Selects columns by index from a matrix (duplicates allowed).
    pub fn gather_cols(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if indices.iter().any(|&i| i >= n) {
            return Err(ChimeError::Contract(format!(
                "gather_cols index out of bounds for {n} columns"
            )));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * indices.len());
        for i in 0..m {
            for &j in indices {
                out.push(v[i * n + j]);
            }
        }
        Ok(self.push(
            out,
            vec![m, indices.len()],
            Op::GatherCols {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.nodes[v.0].values.len();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; len])
    }

    fn add_into(&mut self, v: Var, delta: &[f64]) {
        let buf = self.grad_buf(v);
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate
    /// across calls until zeroed; intermediate node gradients hold only the
    /// most recent pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(ChimeError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Set accumulated parameter grads aside so this pass starts clean.
        let saved: Vec<(Var, Option<Vec<f64>>)> = self
            .params
            .values()
            .map(|&v| (v, self.nodes[v.0].grad.take()))
            .collect();
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.grad_buf(loss)[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let grad = match self.nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Param => {}
                Op::MatMul { a, b } => {
                    let (m, k) = {
                        let s = self.shape(a);
                        (s[0], s[1])
                    };
                    let n = self.shape(b)[1];
                    // dA = G . B^T
                    let bv = self.value(b);
                    let mut bt = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    let mut da = vec![0.0; m * k];
                    matmul_kernel(&grad, &bt, m, n, k, &mut da);
                    // dB = A^T . G
                    let av = self.value(a);
                    let mut at = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            at[p * m + r] = av[r * k + p];
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    matmul_kernel(&at, &grad, k, m, n, &mut db);
                    self.add_into(a, &da);
                    self.add_into(b, &db);
                }
                Op::Transpose { x } => {
                    let (m, n) = {
                        let s = self.shape(x);
                        (s[0], s[1])
                    };
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] = grad[c * m + r];
                        }
                    }
                    self.add_into(x, &dx);
                }
                Op::Add { a, b } => {
                    self.add_into(a, &grad);
                    self.add_into(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.add_into(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.add_into(b, &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = grad.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = grad.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    self.add_into(a, &da);
                    self.add_into(b, &db);
                }
                Op::AddBias { x, bias } => {
                    let n = self.nodes[bias.0].values.len();
                    let mut dbias = vec![0.0; n];
                    for (j, g) in grad.iter().enumerate() {
                        dbias[j % n] += g;
                    }
                    self.add_into(x, &grad);
                    self.add_into(bias, &dbias);
                }
                Op::AffineConst { x, mul } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * mul).collect();
                    self.add_into(x, &dx);
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(x))
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.add_into(x, &dx);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(x))
                        .map(|(g, &v)| g * gelu_grad_scalar(v))
                        .collect();
                    self.add_into(x, &dx);
                }
                Op::Sigmoid { x } => {
                    let out = &self.nodes[i].values;
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(out)
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    self.add_into(x, &dx);
                }
                Op::Softplus { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.value(x))
                        .map(|(g, &v)| g / (1.0 + (-v).exp()))
                        .collect();
                    self.add_into(x, &dx);
                }
                Op::Tanh { x } => {
                    let out = &self.nodes[i].values;
                    let dx: Vec<f64> = grad.iter().zip(out).map(|(g, &t)| g * (1.0 - t * t)).collect();
                    self.add_into(x, &dx);
                }
                Op::Softmax { x, axis } => {
                    // dx_i = y_i * (g_i - sum_j g_j y_j) within each lane.
                    let y = self.nodes[i].values.clone();
                    let (rows, cols) = self.dims2(Var(i));
                    let mut dx = vec![0.0; y.len()];
                    let lanes: Vec<(usize, usize, usize)> = if axis == 1 {
                        (0..rows).map(|r| (r * cols, cols, 1)).collect()
                    } else {
                        (0..cols).map(|c| (c, rows, cols)).collect()
                    };
                    for (base, len, stride) in lanes {
                        let mut dot = 0.0;
                        for t in 0..len {
                            let idx = base + t * stride;
                            dot += grad[idx] * y[idx];
                        }
                        for t in 0..len {
                            let idx = base + t * stride;
                            dx[idx] = y[idx] * (grad[idx] - dot);
                        }
                    }
                    self.add_into(x, &dx);
                }
                Op::SumAll { x } => {
                    let g = grad[0];
                    let dx = vec![g; self.nodes[x.0].values.len()];
                    self.add_into(x, &dx);
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].values.len();
                    let g = grad[0] / n as f64;
                    let dx = vec![g; n];
                    self.add_into(x, &dx);
                }
                Op::MulScalar { scalar, x } => {
                    let s = self.scalar_value(scalar);
                    let dx: Vec<f64> = grad.iter().map(|g| g * s).collect();
                    let ds: f64 = grad.iter().zip(self.value(x)).map(|(g, v)| g * v).sum();
                    self.add_into(x, &dx);
                    self.add_into(scalar, &[ds]);
                }
                Op::DivScalar { x, scalar } => {
                    let s = self.scalar_value(scalar);
                    let dx: Vec<f64> = grad.iter().map(|g| g / s).collect();
                    let ds: f64 = grad
                        .iter()
                        .zip(self.value(x))
                        .map(|(g, v)| -g * v / (s * s))
                        .sum();
                    self.add_into(x, &dx);
                    self.add_into(scalar, &[ds]);
                }
                Op::Reshape { x } => {
                    self.add_into(x, &grad);
                }
                Op::SliceRows { x, start } => {
                    let n = self.dims2(x).1;
                    let len = self.nodes[i].shape[0];
                    let mut dx = vec![0.0; self.nodes[x.0].values.len()];
                    dx[start * n..(start + len) * n].copy_from_slice(&grad);
                    self.add_into(x, &dx);
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.dims2(x);
                    let len = self.nodes[i].shape[1];
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..len {
                            dx[r * n + start + c] = grad[r * len + c];
                        }
                    }
                    self.add_into(x, &dx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].values.len();
                        let slice = grad[offset..offset + len].to_vec();
                        self.add_into(p, &slice);
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let m = self.dims2(parts[0]).0;
                    let total = self.nodes[i].shape[1];
                    let mut col0 = 0;
                    for p in parts {
                        let w = self.dims2(p).1;
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&grad[r * total + col0..r * total + col0 + w]);
                        }
                        self.add_into(p, &dp);
                        col0 += w;
                    }
                }
                Op::GatherCols { x, indices } => {
                    let (m, n) = self.dims2(x);
                    let k = indices.len();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        for (c, &j) in indices.iter().enumerate() {
                            dx[r * n + j] += grad[r * k + c];
                        }
                    }
                    self.add_into(x, &dx);
                }
            }
        }
        // Fold previously accumulated parameter grads back in.
        for (var, prev) in saved {
            if let Some(prev) = prev {
                self.add_into(var, &prev);
            }
        }
        Ok(())
    }

    /// Accumulates the tape's parameter gradients into the store.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, &var) in &self.params {
            if let Some(g) = self.nodes[var.0].grad.as_deref() {
                store.get_mut(name)?.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn softmax_lane(lane: &mut [f64], stride: usize) {
    let len = lane.len().div_ceil(stride);
    let mut max = f64::NEG_INFINITY;
    for t in 0..len {
        max = max.max(lane[t * stride]);
    }
    let mut sum = 0.0;
    for t in 0..len {
        let e = (lane[t * stride] - max).exp();
        lane[t * stride] = e;
        sum += e;
    }
    for t in 0..len {
        lane[t * stride] /= sum;
    }
}
