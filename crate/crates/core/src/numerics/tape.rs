//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value, its inputs and whatever
//! intermediates its backward rule needs. Nodes are only ever appended, so the
//! tape is topologically ordered by construction.

use std::collections::HashMap;

use super::kernels::{self, gemm, MatMut, MatView};
use super::{NumericsError, Result, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Bce { .. } => "bce_with_logits",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to the grad-enabled leaves.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.by_var.get(&var).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &[f64])> {
        self.by_var.iter().map(|(v, g)| (*v, g.as_slice()))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records an input. Its gradient is reported iff `tensor.grad_enabled()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        check_finite("leaf", tensor.values())?;
        let needs_grad = tensor.grad_enabled();
        Ok(self.push(tensor, Op::Leaf, needs_grad))
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        self.leaf(Tensor::new(shape, values)?)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(NumericsError::UnknownVar(var.0))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Result<Var> {
        let name = op.name();
        check_finite(name, &values)?;
        let needs_grad = self.op_needs_grad(&op);
        let value = Tensor::new(shape, values)?;
        Ok(self.push(value, op, needs_grad))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                ng(a) || ng(b)
            }
            Op::Scale(a, _) | Op::Gelu(a) | Op::Softmax(a) | Op::Sum(a) | Op::Mean(a) => ng(a),
            Op::LayerNorm { x, gamma, beta, .. } => ng(x) || ng(gamma) || ng(beta),
            Op::Attention { q, k, v, .. } => ng(q) || ng(k) || ng(v),
            Op::CrossEntropy { logits, .. } | Op::Bce { logits, .. } => ng(logits),
            Op::ConcatRows(parts) => parts.iter().any(ng),
            Op::GatherRows { x, .. } => ng(x),
        }
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        self.try_value(var)
    }

    fn dims(&self, var: Var) -> Result<(usize, usize)> {
        self.check(var)?.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(NumericsError::Incompatible {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatView::dense(self.value(a).values(), m, k),
            MatView::dense(self.value(b).values(), k, n),
            0.0,
            MatMut::dense(&mut out, m, n),
        );
        self.emit(vec![m, n], out, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.check(a)?.shape(), self.check(b)?.shape());
        if sa != sb {
            return Err(NumericsError::Incompatible {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.emit(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let bias_len = self.check(bias)?.numel();
        if bias_len != n {
            return Err(NumericsError::Incompatible {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).values();
        let out: Vec<f64> = self
            .value(a)
            .values()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        debug_assert_eq!(out.len(), m * n);
        let shape = self.value(a).shape().to_vec();
        self.emit(shape, out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.check(a)?.shape().to_vec();
        let out = self.value(a).values().iter().map(|x| x * c).collect();
        self.emit(shape, out, Op::Scale(a, c))
    }

    /// Row-wise layer normalization with affine parameters of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.check(gamma)?.numel() != n || self.check(beta)?.numel() != n {
            return Err(NumericsError::Incompatible {
                op: "layer_norm",
                left: self.value(x).shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument {
                op: "layer_norm",
                reason: "eps must be positive".into(),
            });
        }
        let xv = self.value(x).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.emit(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let shape = self.check(x)?.shape().to_vec();
        let out = self.value(x).values().iter().map(|&v| kernels::gelu(v)).collect();
        self.emit(shape, out, Op::Gelu(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let shape = self.value(x).shape().to_vec();
        self.emit(shape, out, Op::Softmax(x))
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `q`, `k`, `v` are `[rows, d]`. Rows are partitioned into consecutive
    /// independent sequences of lengths `segments`; tokens attend only within
    /// their own sequence. Head `h` uses columns `[h * d / heads, (h + 1) * d / heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = self.dims(q)?;
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::InvalidArgument {
                op: "attention",
                reason: format!("width {d} not divisible into {heads} heads"),
            });
        }
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(NumericsError::InvalidArgument {
                op: "attention",
                reason: format!("segments {segments:?} do not partition {rows} rows"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total_probs: usize = segments.iter().map(|n| heads * n * n).sum();
        let mut probs = vec![0.0; total_probs];
        let mut out = vec![0.0; rows * d];
        let (qv, kv, vv) = (
            self.value(q).values(),
            self.value(k).values(),
            self.value(v).values(),
        );
        let mut row0 = 0;
        let mut p_off = 0;
        for &n in segments {
            for h in 0..heads {
                let p = &mut probs[p_off..p_off + n * n];
                gemm(
                    scale,
                    MatView::block(qv, d, row0, n, h * dh, dh),
                    MatView::block(kv, d, row0, n, h * dh, dh).t(),
                    0.0,
                    MatMut::dense(p, n, n),
                );
                for r in p.chunks_mut(n) {
                    kernels::softmax_in_place(r);
                }
                gemm(
                    1.0,
                    MatView::dense(p, n, n),
                    MatView::block(vv, d, row0, n, h * dh, dh),
                    0.0,
                    MatMut::block(&mut out, d, row0, n, h * dh, dh),
                );
                p_off += n * n;
            }
            row0 += n;
        }
        self.emit(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        )
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(logits)?;
        if targets.len() != m {
            return Err(NumericsError::LengthMismatch {
                what: "cross_entropy targets",
                got: targets.len(),
                expected: m,
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("target {bad} out of range for {c} classes"),
            });
        }
        let mut probs = self.value(logits).values().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let z = &self.nodes[logits.0].value.values()[r * c..(r + 1) * c];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[targets[r]];
            kernels::softmax_in_place(row);
        }
        self.emit(
            vec![1],
            vec![loss / m as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.check(logits)?.numel();
        if targets.len() != n {
            return Err(NumericsError::LengthMismatch {
                what: "bce targets",
                got: targets.len(),
                expected: n,
            });
        }
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(NumericsError::InvalidArgument {
                op: "bce_with_logits",
                reason: "targets must lie in [0, 1]".into(),
            });
        }
        let loss: f64 = self
            .value(logits)
            .values()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + kernels::softplus_neg_abs(z))
            .sum();
        self.emit(
            vec![1],
            vec![loss / n as f64],
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.values().iter().sum();
        self.emit(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let s = t.values().iter().sum::<f64>() / t.numel() as f64;
        self.emit(vec![1], vec![s], Op::Mean(x))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat_rows",
                reason: "no inputs".into(),
            });
        }
        let (_, n) = self.dims(parts[0])?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return Err(NumericsError::Incompatible {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).values());
        }
        self.emit(vec![rows, n], out, Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows by index (repeats allowed); the embedding-lookup primitive.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if index.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "gather_rows",
                reason: "empty index".into(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(NumericsError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {m} rows"),
            });
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        self.emit(
            vec![index.len(), n],
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Backpropagates from a scalar root.
    ///
    /// Returns gradients for every grad-enabled leaf recorded before `root`;
    /// leaves the root does not depend on get zeros. The tape is left intact,
    /// so calling this twice yields identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_t = self.try_value(root)?;
        if !root_t.is_scalar() {
            return Err(NumericsError::NonScalarRoot(root_t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            check_finite(node.op.name(), &g)?;
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut by_var = HashMap::new();
        for (i, node) in self.nodes[..=root.0].iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.grad_enabled() {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                check_finite("backward", &g)?;
                by_var.insert(Var(i), g);
            }
        }
        Ok(Gradients { by_var })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let vals = |v: Var| self.nodes[v.0].value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let (_, n) = self.nodes[b.0].value.dims2()?;
                if self.wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(
                        1.0,
                        MatView::dense(g, m, n),
                        MatView::dense(vals(*b), k, n).t(),
                        1.0,
                        MatMut::dense(ga, m, k),
                    );
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(
                        1.0,
                        MatView::dense(vals(*a), m, k).t(),
                        MatView::dense(g, m, n),
                        1.0,
                        MatMut::dense(gb, k, n),
                    );
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(v) {
                        let s = slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(v) {
                        let s = slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = vals(*b);
                    let s = slot(grads, *a, g.len());
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                }
                if self.wants(*b) {
                    let av = vals(*a);
                    let s = slot(grads, *b, g.len());
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if self.wants(*bias) {
                    let n = numel(*bias);
                    let s = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = numel(*gamma);
                let gv = vals(*gamma);
                if self.wants(*gamma) {
                    let s = slot(grads, *gamma, n);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            s[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let s = slot(grads, *beta, n);
                    for grow in g.chunks(n) {
                        s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                    }
                }
                if self.wants(*x) {
                    let s = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..n {
                            dxhat[c] = grow[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hrow[c];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let inv = inv_std[r];
                        for c in 0..n {
                            s[r * n + c] += inv * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = vals(*x);
                    let s = slot(grads, *x, g.len());
                    for ((s, g), &xv) in s.iter_mut().zip(g).zip(xv) {
                        *s += g * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = node.value.values();
                    let (_, n) = node.value.dims2()?;
                    let s = slot(grads, *x, g.len());
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            srow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let (m, c) = self.nodes[logits.0].value.dims2()?;
                    let scale = g[0] / m as f64;
                    let s = slot(grads, *logits, m * c);
                    for r in 0..m {
                        for j in 0..c {
                            let onehot = if targets[r] == j { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Bce { logits, targets } => {
                if self.wants(*logits) {
                    let n = targets.len();
                    let scale = g[0] / n as f64;
                    let zv = vals(*logits);
                    let s = slot(grads, *logits, n);
                    for i in 0..n {
                        s[i] += scale * (kernels::sigmoid(zv[i]) - targets[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let s = slot(grads, *x, numel(*x));
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = numel(*x);
                    let s = slot(grads, *x, n);
                    s.iter_mut().for_each(|s| *s += g[0] / n as f64);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = numel(p);
                    if self.wants(p) {
                        let s = slot(grads, p, len);
                        s.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(s, g)| *s += g);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let (m, n) = self.nodes[x.0].value.dims2()?;
                    let s = slot(grads, *x, m * n);
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..n {
                            s[i * n + c] += g[r * n + c];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (rows, d) = self.nodes[q.0].value.dims2()?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.nodes[q.0].value.values(),
            self.nodes[k.0].value.values(),
            self.nodes[v.0].value.values(),
        );
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let max_n = segments.iter().copied().max().unwrap_or(0);
        let mut dp = vec![0.0; max_n * max_n];
        let mut row0 = 0;
        let mut p_off = 0;
        for &n in segments {
            for h in 0..heads {
                let p = &probs[p_off..p_off + n * n];
                let dp = &mut dp[..n * n];
                // dP = dO V^T
                gemm(
                    1.0,
                    MatView::block(g, d, row0, n, h * dh, dh),
                    MatView::block(vv, d, row0, n, h * dh, dh).t(),
                    0.0,
                    MatMut::dense(dp, n, n),
                );
                // dV = P^T dO
                gemm(
                    1.0,
                    MatView::dense(p, n, n).t(),
                    MatView::block(g, d, row0, n, h * dh, dh),
                    0.0,
                    MatMut::block(&mut dv, d, row0, n, h * dh, dh),
                );
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for r in 0..n {
                    let prow = &p[r * n..(r + 1) * n];
                    let drow = &mut dp[r * n..(r + 1) * n];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        drow[c] = prow[c] * (drow[c] - dot);
                    }
                }
                gemm(
                    scale,
                    MatView::dense(dp, n, n),
                    MatView::block(kv, d, row0, n, h * dh, dh),
                    0.0,
                    MatMut::block(&mut dq, d, row0, n, h * dh, dh),
                );
                gemm(
                    scale,
                    MatView::dense(dp, n, n).t(),
                    MatView::block(qv, d, row0, n, h * dh, dh),
                    0.0,
                    MatMut::block(&mut dk, d, row0, n, h * dh, dh),
                );
                p_off += n * n;
            }
            row0 += n;
        }
        for (var, contrib) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                match &mut grads[var.0] {
                    Some(s) => s.iter_mut().zip(&contrib).for_each(|(s, c)| *s += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, values: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, values).unwrap().requires_grad())
            .unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_identity() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let loss = tape.cross_entropy(z, &[0]).unwrap();
        let g = tape.backward(loss).unwrap();
        let gz = g.get(z).unwrap();
        assert!((gz[0] + 0.5).abs() < 1e-15);
        assert!((gz[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn unknown_var_rejected() {
        let mut tape = Tape::new();
        let _ = leaf(&mut tape, vec![1], vec![1.0]);
        let other = Var(17);
        assert!(matches!(tape.backward(other), Err(NumericsError::UnknownVar(17))));
    }

    #[test]
    fn forward_overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![1e200]);
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(NumericsError::NonFinite { op: "mul" })));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let unused = leaf(&mut tape, vec![3], vec![0.0; 3]);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0; 3]);
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_rows_scatter_adds_repeats() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(y).values(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn attention_rejects_bad_segments() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3, 4], vec![0.1; 12]);
        assert!(tape.attention(x, x, x, 2, &[2, 2]).is_err());
        assert!(tape.attention(x, x, x, 3, &[3]).is_err());
        assert!(tape.attention(x, x, x, 2, &[1, 2]).is_ok());
    }

    #[test]
    fn segmented_attention_equals_separate_sequences() {
        let vals: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect();
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![5, 4], vec![0.0; 20]);
        let _ = x;
        let all = tape.constant(vec![5, 4], vals.clone()).unwrap();
        let joint = tape.attention(all, all, all, 2, &[2, 3]).unwrap();
        let a = tape.constant(vec![2, 4], vals[..8].to_vec()).unwrap();
        let b = tape.constant(vec![3, 4], vals[8..].to_vec()).unwrap();
        let ya = tape.attention(a, a, a, 2, &[2]).unwrap();
        let yb = tape.attention(b, b, b, 2, &[3]).unwrap();
        let mut sep = tape.value(ya).values().to_vec();
        sep.extend_from_slice(tape.value(yb).values());
        for (x, y) in tape.value(joint).values().iter().zip(&sep) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
