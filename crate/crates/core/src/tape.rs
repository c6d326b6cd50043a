//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! the inputs it read. Nodes are only ever appended, so the tape is in
//! topological order by construction and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite stand-in for minus infinity on masked attention scores. After the
/// per-row max subtraction in softmax it underflows to an exact zero.
pub const MASK_FILL: f64 = -1e30;

/// Floor added inside the log of the cross-entropy loss.
pub const LOG_FLOOR: f64 = 1e-12;

const GELU_COEF: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskColumns {
        x: Var,
        mask: Vec<bool>,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Multiply {
        x: Var,
        factors: Vec<f64>,
    },
    CrossEntropy {
        probs: Var,
        label: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_row_into(input: &[f64], out: &mut [f64]) {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(input) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
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

    /// Clears all nodes so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// `None` when `v` does not require a gradient. A node that requires one
    /// but was unreachable from the loss reports zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.consumed {
            return None;
        }
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor::new(node.value.shape(), data).expect("gradient matches its value shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: &[usize],
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape(
                "cannot record onto a consumed tape; call reset() first".into(),
            ));
        }
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape_of(a).to_vec(),
            rhs: self.shape_of(b).to_vec(),
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() > 2 {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(t.matrix_dims())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 || k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push_checked("matmul", &[m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push_checked("transpose", &[n, m], out, Op::Transpose(x), &[x])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.shape_err(name, a, b));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape_of(a).to_vec();
        self.push_checked(name, &shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape_of(x).to_vec();
        self.push_checked(name, &shape, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map("scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, gelu, Op::Gelu(x))
    }

    /// Elementwise product with a constant buffer (dropout masks).
    pub fn multiply_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).numel() {
            return Err(Error::Shape {
                op: "multiply_const",
                lhs: self.shape_of(x).to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape_of(x).to_vec();
        self.push_checked("multiply_const", &shape, out, Op::Multiply { x, factors }, &[x])
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix("add_row", x)?;
        if self.shape_of(bias) != [n] {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let shape = self.shape_of(x).to_vec();
        debug_assert_eq!(m * n, self.value(x).numel());
        self.push_checked("add_row", &shape, out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push_checked("sum", &[1], vec![total], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_checked("mean", &[1], vec![mean], Op::Mean(x), &[x])
    }

    /// Row-wise softmax with per-row max subtraction. Rank-1 input is one row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.matrix("softmax_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks(n).zip(out.chunks_mut(n)) {
            softmax_row_into(row_in, row_out);
        }
        let shape = self.shape_of(x).to_vec();
        self.push_checked("softmax_rows", &shape, out, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes each row to zero mean and unit (biased) variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.matrix("layer_norm", x)?;
        if self.shape_of(gain) != [n] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.shape_of(bias) != [n] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / n);
        let mut out = vec![0.0; src.len()];
        for (r, row) in src.chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if !var.is_finite() {
                return Err(Error::NonFinite { op: "layer_norm" });
            }
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..n {
                let xhat = (row[j] - mean) * istd;
                normalized[r * n + j] = xhat;
                out[r * n + j] = xhat * g[j] + b[j];
            }
        }
        let shape = self.shape_of(x).to_vec();
        self.push_checked(
            "layer_norm",
            &shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Replaces every column `j` with `mask[j] == false` by [`MASK_FILL`].
    pub fn mask_columns(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (_, n) = self.matrix("mask_columns", x)?;
        if mask.len() != n {
            return Err(Error::Shape {
                op: "mask_columns",
                lhs: self.shape_of(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| {
                row.iter()
                    .zip(mask)
                    .map(|(&v, &keep)| if keep { v } else { MASK_FILL })
            })
            .collect();
        let shape = self.shape_of(x).to_vec();
        let op = Op::MaskColumns {
            x,
            mask: mask.to_vec(),
        };
        self.push_checked("mask_columns", &shape, out, op, &[x])
    }

    /// Mean of the rows of `x[S×d]` whose mask entry is true; returns `[d]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (s, d) = self.matrix("masked_mean_pool", x)?;
        if mask.len() != s {
            return Err(Error::Shape {
                op: "masked_mean_pool",
                lhs: self.shape_of(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::Degenerate(
                "masked_mean_pool: every position is masked".into(),
            ));
        }
        let mut out = vec![0.0; d];
        for (row, _) in self
            .value(x)
            .data()
            .chunks(d)
            .zip(mask)
            .filter(|(_, &m)| m)
        {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= valid as f64;
        }
        let op = Op::MaskedMeanPool {
            x,
            mask: mask.to_vec(),
        };
        self.push_checked("masked_mean_pool", &[d], out, op, &[x])
    }

    /// Gathers rows of `table[V×d]`; returns `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::Degenerate("embedding: empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let src = self.value(table).data();
        let out = ids
            .iter()
            .flat_map(|&id| src[id * d..(id + 1) * d].iter().copied())
            .collect();
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push_checked("embedding", &[ids.len(), d], out, op, &[table])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape_of(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push_checked("slice_cols", &[m, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat_cols: no inputs".into()))?;
        let (m, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix("concat_cols", p)?;
            if pm != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push_checked(
            "concat_cols",
            &[m, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Stacks inputs vertically; rank-1 inputs count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat_rows: no inputs".into()))?;
        let (_, n) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.matrix("concat_rows", p)?;
            if pn != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += pm;
        }
        let out = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        self.push_checked(
            "concat_rows",
            &[rows, n],
            out,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        self.push_checked("reshape", shape, data, Op::Reshape(x), &[x])
    }

    /// `-ln(max(probs[label], LOG_FLOOR))` for a probability vector.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let (m, c) = self.matrix("cross_entropy", probs)?;
        if m != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape_of(probs).to_vec(),
                rhs: vec![1, c],
            });
        }
        if label >= c {
            return Err(Error::Data(format!(
                "label index {label} out of range for {c} classes"
            )));
        }
        let loss = -self.value(probs).data()[label].max(LOG_FLOOR).ln();
        self.push_checked(
            "cross_entropy",
            &[1],
            vec![loss],
            Op::CrossEntropy { probs, label },
            &[probs],
        )
    }

    /// Populates gradients of the scalar `loss` with respect to every node.
    ///
    /// A tape supports exactly one backward pass; call [`Tape::reset`] before
    /// recording again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape_of(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&self.nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Returns the accumulation buffer for `v`, or `None` when `v` needs no gradient.
fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).matrix_dims();
            let n = val(b).cols();
            if let Some(da) = slot(nodes, grads, a) {
                // dA = dC · Bᵀ
                let bd = val(b).data();
                for i in 0..m {
                    for t in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bd[t * n + j];
                        }
                        da[i * k + t] += acc;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                // dB = Aᵀ · dC
                let ad = val(a).data();
                for i in 0..m {
                    for t in 0..k {
                        let av = ad[i * k + t];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[t * n + j] += av * g[i * n + j];
                        }
                    }
                }
            }
        }
        &Op::Transpose(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let (m, n) = val(x).matrix_dims();
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            for (v, sign) in [(a, 1.0), (b, 1.0)] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                }
            }
        }
        &Op::Sub(a, b) => {
            for (v, sign) in [(a, 1.0), (b, -1.0)] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                }
            }
        }
        &Op::Hadamard(a, b) => {
            for (v, other) in [(a, b), (b, a)] {
                let od = val(other).data();
                if let Some(d) = slot(nodes, grads, v) {
                    for ((d, g), o) in d.iter_mut().zip(g).zip(od) {
                        *d += g * o;
                    }
                }
            }
        }
        &Op::Scale(x, factor) => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
            }
        }
        Op::Multiply { x, factors } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, g), f) in dx.iter_mut().zip(g).zip(factors) {
                    *d += g * f;
                }
            }
        }
        &Op::AddRow(x, bias) => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = slot(nodes, grads, bias) {
                let n = db.len();
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        &Op::Relu(x) => {
            let xd = val(x).data();
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, g), &xv) in dx.iter_mut().zip(g).zip(xd) {
                    if xv > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        &Op::Gelu(x) => {
            let xd = val(x).data();
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, g), &xv) in dx.iter_mut().zip(g).zip(xd) {
                    *d += g * gelu_derivative(xv);
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let share = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += share);
            }
        }
        &Op::SoftmaxRows(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let n = node.value.cols();
                // dx = y ⊙ (dy − ⟨dy, y⟩) per row
                for ((y, dy), d) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[j] += y[j] * (dy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let n = node.value.cols();
            if let Some(db) = slot(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (row, xhat) in g.chunks(n).zip(normalized.chunks(n)) {
                    for j in 0..n {
                        dg[j] += row[j] * xhat[j];
                    }
                }
            }
            let gv = val(*gain).data();
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; n];
                for (r, (dy, xhat)) in g.chunks(n).zip(normalized.chunks(n)).enumerate() {
                    for j in 0..n {
                        dxhat[j] = dy[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
            }
        }
        Op::MaskColumns { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let n = mask.len();
                for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                    for j in 0..n {
                        if mask[j] {
                            drow[j] += grow[j];
                        }
                    }
                }
            }
        }
        Op::MaskedMeanPool { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let d = g.len();
                let valid = mask.iter().filter(|&&m| m).count() as f64;
                for (drow, _) in dx.chunks_mut(d).zip(mask).filter(|(_, &m)| m) {
                    for (dv, gv) in drow.iter_mut().zip(g) {
                        *dv += gv / valid;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dt) = slot(nodes, grads, *table) {
                let d = node.value.cols();
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[pos * d + j];
                    }
                }
            }
        }
        &Op::SliceCols { x, start } => {
            if let Some(dx) = slot(nodes, grads, x) {
                let n = val(x).cols();
                let len = node.value.cols();
                for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(len)) {
                    for j in 0..len {
                        drow[start + j] += grow[j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(dp) = slot(nodes, grads, p) {
                    for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                        for j in 0..w {
                            drow[j] += grow[offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                if let Some(dp) = slot(nodes, grads, p) {
                    dp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, g)| *d += g);
                }
                offset += len;
            }
        }
        &Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        &Op::CrossEntropy { probs, label } => {
            let p = val(probs).data()[label];
            if let Some(dp) = slot(nodes, grads, probs) {
                dp[label] -= g[0] / p.max(LOG_FLOOR);
            }
        }
    }
}
