//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations execute eagerly and record themselves on a linear tape; the
//! backward pass replays the tape once in reverse, accumulating gradients
//! into every node that requires them. A node requires a gradient when any
//! of its inputs does and recording is enabled; disabling recording
//! (`set_grad_enabled(false)`) turns a whole subgraph into constants, which
//! is how teacher views are detached from the student's loss.
//!
//! Every op validates shapes up front and checks its output for NaN/Inf.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a @ b, optionally with b supplied transposed. Ranks: (2,2), (3,3)
    /// batched, (3,2) with b shared across the batch.
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    /// a[.., c] + bias[c], bias broadcast over rows.
    AddBias { a: Var, bias: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// a[.., c] * v[c], v broadcast over rows.
    MulRow { a: Var, v: Var },
    /// a viewed as [r, c], row r scaled by s[r].
    ScaleRows { a: Var, s: Var },
    /// s (one-element node) * a, elementwise.
    ScalarMul { s: Var, a: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    /// Softmax over the last axis.
    Softmax { x: Var },
    /// Log-sum-exp over the last axis; drops that axis.
    LogSumExp { x: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    /// Sum over the last axis; drops that axis.
    SumLast { x: Var },
    Scale { a: Var, c: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    /// Row gather from an embedding table.
    Embedding { table: Var, ids: Vec<usize> },
    /// L2 normalization over the last axis; zero rows pass through as zero.
    L2Normalize { x: Var, norms: Vec<f64> },
    Dropout { x: Var, keep: f64, mask: Vec<f64> },
    /// Elementwise max across same-shaped tensors; ties go to the first.
    MaxMany { inputs: Vec<Var>, argmax: Vec<u32> },
    SelectRows { a: Var, rows: Vec<usize> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Gradient tape. One tape per training step or evaluation pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    /// Set when l2_normalize met an all-zero row.
    pub saw_zero_norm: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true, saw_zero_norm: false }
    }

    pub fn set_grad_enabled(&mut self, on: bool) {
        self.grad_enabled = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Run `f` with recording disabled; everything it creates is constant.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = self.grad_enabled;
        self.grad_enabled = false;
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, self.grad_enabled, Op::Leaf)
    }

    /// Register a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, false, Op::Leaf)
    }

    /// Copy a node's value into a fresh constant; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_unchecked(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a node after `backward`, or `None` if nothing flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a node, with zeros for parameters the loss never touched.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, inputs_rg: bool, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name.to_string() });
        }
        let rg = inputs_rg && self.grad_enabled;
        Ok(self.push_unchecked(value, rg, op))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// a @ b^T; `b` is given in [n, k] layout.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op_name: &'static str = if trans_b { "matmul_nt" } else { "matmul" };
        let (batch, m, k) = match sa.len() {
            2 => (1usize, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(self.mismatch(op_name, a, b)),
        };
        let (kb, n, b_batched) = match sb.len() {
            2 => {
                if trans_b {
                    (sb[1], sb[0], false)
                } else {
                    (sb[0], sb[1], false)
                }
            }
            3 => {
                if sb[0] != batch || sa.len() != 3 {
                    return Err(self.mismatch(op_name, a, b));
                }
                if trans_b {
                    (sb[2], sb[1], true)
                } else {
                    (sb[1], sb[2], true)
                }
            }
            _ => return Err(self.mismatch(op_name, a, b)),
        };
        if k != kb {
            return Err(self.mismatch(op_name, a, b));
        }
        let mut out = vec![0.0; batch * m * n];
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        for bi in 0..batch {
            let a_sl = &da[bi * m * k..(bi + 1) * m * k];
            let b_sl = if b_batched { &db[bi * k * n..(bi + 1) * k * n] } else { db };
            let o_sl = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::matmul_nt(a_sl, b_sl, o_sl, m, k, n);
            } else {
                kernels::matmul_nn(a_sl, b_sl, o_sl, m, k, n);
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        self.push(op_name, Tensor::new(shape, out)?, rg, Op::MatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", Tensor::new(shape, data)?, rg, Op::Add { a, b })
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.shape(bias) != [c] {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let bv = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(bias);
        self.push("add_bias", Tensor::new(shape, data)?, rg, Op::AddBias { a, bias })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", Tensor::new(shape, data)?, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", Tensor::new(shape, data)?, rg, Op::Mul { a, b })
    }

    /// a[.., c] * v[c] with v broadcast across rows.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.shape(v) != [c] {
            return Err(self.mismatch("mul_row", a, v));
        }
        let vv = self.value(v).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&vv).map(|(x, y)| x * y).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(v);
        self.push("mul_row", Tensor::new(shape, data)?, rg, Op::MulRow { a, v })
    }

    /// Row r of `a` (viewed as [rows, last]) scaled by s[r].
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let rows = self.value(a).row_count();
        let c = self.value(a).last_dim();
        if self.shape(s) != [rows] {
            return Err(self.mismatch("scale_rows", a, s));
        }
        let sv = self.value(s).data().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for (r, row) in self.value(a).data().chunks(c).enumerate() {
            data.extend(row.iter().map(|x| x * sv[r]));
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(s);
        self.push("scale_rows", Tensor::new(shape, data)?, rg, Op::ScaleRows { a, s })
    }

    /// One-element node s times every element of a.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("scalar_mul", s, a));
        }
        let sv = self.value(s).item();
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(s);
        self.push("scalar_mul", Tensor::new(shape, data)?, rg, Op::ScalarMul { s, a })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("sigmoid", Tensor::new(shape, data)?, rg, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("relu", Tensor::new(shape, data)?, rg, Op::Relu { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("exp", Tensor::new(shape, data)?, rg, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("log", Tensor::new(shape, data)?, rg, Op::Log { x })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if c == 0 {
            return Err(Error::InvalidArg("softmax over an empty axis".into()));
        }
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("softmax", Tensor::new(shape, data)?, rg, Op::Softmax { x })
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if c == 0 {
            return Err(Error::InvalidArg("logsumexp over an empty axis".into()));
        }
        let mut data = Vec::with_capacity(self.value(x).row_count());
        for row in self.value(x).data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            data.push(m + z.ln());
        }
        let shape: Vec<usize> = {
            let s = self.shape(x);
            if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() }
        };
        let rg = self.rg(x);
        self.push("logsumexp", Tensor::new(shape, data)?, rg, Op::LogSumExp { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::InvalidArg("mean of an empty tensor".into()));
        }
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s / n as f64), rg, Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), rg, Op::SumAll { x })
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let data: Vec<f64> = self.value(x).data().chunks(c).map(|row| row.iter().sum()).collect();
        let shape: Vec<usize> = {
            let s = self.shape(x);
            if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() }
        };
        let rg = self.rg(x);
        self.push("sum_last", Tensor::new(shape, data)?, rg, Op::SumLast { x })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("scale", Tensor::new(shape, data)?, rg, Op::Scale { a, c })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArg(format!(
                "concat axis {} out of range for rank {}",
                axis,
                first.len()
            )));
        }
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(self.mismatch("concat", inputs[0], v));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let axis_total: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &v in inputs {
            let d_axis = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let src_start = o * d_axis * inner;
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + d_axis * inner]
                    .copy_from_slice(&src[src_start..src_start + d_axis * inner]);
            }
            offset += d_axis;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push("concat", Tensor::new(shape, data)?, rg, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        let rg = self.rg(a);
        self.push("reshape", t, rg, Op::Reshape { a })
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.shape(beta) != [c] {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let rows = self.value(x).row_count();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for (j, &v) in row.iter().enumerate() {
                data.push(g[j] * (v - mean) * inv_std + bt[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            Tensor::new(shape, data)?,
            rg,
            Op::LayerNorm { x, gamma, beta, mean: means, inv_std: inv_stds },
        )
    }

    /// Gather rows of a [v, d] table by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidArg(format!("embedding table must be rank 2, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArg(format!("embedding id {bad} out of range {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], data)?,
            rg,
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    /// L2-normalize each row (last axis). An all-zero row stays zero and
    /// sets `saw_zero_norm` instead of producing NaN.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if c == 0 {
            return Err(Error::InvalidArg("l2_normalize over an empty axis".into()));
        }
        let mut data = Vec::with_capacity(self.value(x).len());
        let mut norms = Vec::with_capacity(self.value(x).row_count());
        let mut hit_zero = false;
        for row in self.value(x).data().chunks(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm == 0.0 {
                hit_zero = true;
                data.extend(row.iter().cloned());
            } else {
                data.extend(row.iter().map(|v| v / norm));
            }
        }
        if hit_zero {
            self.saw_zero_norm = true;
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("l2_normalize", Tensor::new(shape, data)?, rg, Op::L2Normalize { x, norms })
    }

    /// Inverted dropout. Identity when not training or keep == 1.
    pub fn dropout(&mut self, x: Var, keep: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..=1.0).contains(&keep) || keep == 0.0 {
            return Err(Error::InvalidArg(format!("dropout keep probability {keep} out of (0, 1]")));
        }
        if !training || keep == 1.0 {
            return Ok(x);
        }
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < keep { 1.0 } else { 0.0 })
            .collect();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m / keep)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("dropout", Tensor::new(shape, data)?, rg, Op::Dropout { x, keep, mask })
    }

    /// Elementwise max across any number of same-shaped tensors.
    pub fn max_many(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg("max of zero tensors".into()));
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &v in &inputs[1..] {
            if self.shape(v) != shape {
                return Err(self.mismatch("max_many", inputs[0], v));
            }
        }
        let n = self.value(inputs[0]).len();
        let mut data = self.value(inputs[0]).data().to_vec();
        let mut argmax = vec![0u32; n];
        for (idx, &v) in inputs.iter().enumerate().skip(1) {
            for (e, &cand) in self.value(v).data().iter().enumerate() {
                if cand > data[e] {
                    data[e] = cand;
                    argmax[e] = idx as u32;
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "max_many",
            Tensor::new(shape, data)?,
            rg,
            Op::MaxMany { inputs: inputs.to_vec(), argmax },
        )
    }

    /// Gather the given rows of a rank-2 tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidArg(format!("select_rows wants rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArg(format!("row {bad} out of range {r}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(
            "select_rows",
            Tensor::new(vec![rows.len(), c], data)?,
            rg,
            Op::SelectRows { a, rows: rows.to_vec() },
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each recorded op once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::InvalidArg(
                "loss does not depend on any trainable tensor".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let d = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &d);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => {
                self.nodes[v.0].grad = Some(contribution.to_vec());
            }
        }
    }

    fn backward_op(&mut self, node: usize, op: &Op, d: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, d),
            Op::Add { a, b } => {
                self.accum(*a, d);
                self.accum(*b, d);
            }
            Op::AddBias { a, bias } => {
                self.accum(*a, d);
                let c = self.value(*bias).len();
                let mut db = vec![0.0; c];
                for row in d.chunks(c) {
                    for (g, &v) in db.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                self.accum(*bias, &db);
            }
            Op::Sub { a, b } => {
                self.accum(*a, d);
                let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = d.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = d.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                self.accum(*a, &da);
                self.accum(*b, &db);
            }
            Op::MulRow { a, v } => {
                let c = self.value(*v).len();
                let vv = self.value(*v).data().to_vec();
                let da: Vec<f64> = d
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(&vv).map(|(x, y)| x * y).collect::<Vec<_>>())
                    .collect();
                let mut dv = vec![0.0; c];
                for (d_row, a_row) in d.chunks(c).zip(self.value(*a).data().chunks(c)) {
                    for j in 0..c {
                        dv[j] += d_row[j] * a_row[j];
                    }
                }
                self.accum(*a, &da);
                self.accum(*v, &dv);
            }
            Op::ScaleRows { a, s } => {
                let c = self.value(*a).last_dim();
                let sv = self.value(*s).data().to_vec();
                let mut da = Vec::with_capacity(d.len());
                for (r, row) in d.chunks(c).enumerate() {
                    da.extend(row.iter().map(|x| x * sv[r]));
                }
                let mut ds = vec![0.0; sv.len()];
                for ((r, d_row), a_row) in
                    d.chunks(c).enumerate().zip(self.value(*a).data().chunks(c))
                {
                    ds[r] = d_row.iter().zip(a_row).map(|(x, y)| x * y).sum();
                }
                self.accum(*a, &da);
                self.accum(*s, &ds);
            }
            Op::ScalarMul { s, a } => {
                let sv = self.value(*s).item();
                let da: Vec<f64> = d.iter().map(|x| x * sv).collect();
                let ds = [d.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum::<f64>()];
                self.accum(*a, &da);
                self.accum(*s, &ds);
            }
            Op::Sigmoid { x } => {
                let out = self.nodes[node].value.data();
                let dx: Vec<f64> = d
                    .iter()
                    .zip(out)
                    .map(|(g, &o)| g * o * (1.0 - o))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = d
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Exp { x } => {
                let out = self.nodes[node].value.data();
                let dx: Vec<f64> = d.iter().zip(out).map(|(g, &o)| g * o).collect();
                self.accum(*x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> = d
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| g / v)
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Softmax { x } => {
                let c = self.nodes[node].value.last_dim();
                let out = self.nodes[node].value.data();
                let mut dx = Vec::with_capacity(d.len());
                for (d_row, o_row) in d.chunks(c).zip(out.chunks(c)) {
                    let dot: f64 = d_row.iter().zip(o_row).map(|(g, o)| g * o).sum();
                    dx.extend(d_row.iter().zip(o_row).map(|(g, o)| o * (g - dot)));
                }
                self.accum(*x, &dx);
            }
            Op::LogSumExp { x } => {
                let c = self.value(*x).last_dim();
                let out = self.nodes[node].value.data().to_vec();
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for (r, row) in self.value(*x).data().chunks(c).enumerate() {
                    let g = d[r];
                    dx.extend(row.iter().map(|&v| g * (v - out[r]).exp()));
                }
                self.accum(*x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).len();
                let g = d[0] / n as f64;
                let dx = vec![g; n];
                self.accum(*x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![d[0]; self.value(*x).len()];
                self.accum(*x, &dx);
            }
            Op::SumLast { x } => {
                let c = self.value(*x).last_dim();
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &g in d {
                    dx.extend(std::iter::repeat_n(g, c));
                }
                self.accum(*x, &dx);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = d.iter().map(|x| x * c).collect();
                self.accum(*a, &da);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[node].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let d_axis = self.shape(v)[*axis];
                    let mut dv = vec![0.0; self.value(v).len()];
                    for o in 0..outer {
                        let src_start = o * axis_total * inner + offset * inner;
                        let dst_start = o * d_axis * inner;
                        dv[dst_start..dst_start + d_axis * inner]
                            .copy_from_slice(&d[src_start..src_start + d_axis * inner]);
                    }
                    self.accum(v, &dv);
                    offset += d_axis;
                }
            }
            Op::Reshape { a } => self.accum(*a, d),
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let c = self.value(*x).last_dim();
                let g = self.value(*gamma).data().to_vec();
                let xv = self.value(*x).data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Vec::with_capacity(xv.len());
                for (r, d_row) in d.chunks(c).enumerate() {
                    let x_row = &xv[r * c..(r + 1) * c];
                    let istd = inv_std[r];
                    let mu = mean[r];
                    let xhat: Vec<f64> = x_row.iter().map(|&v| (v - mu) * istd).collect();
                    for j in 0..c {
                        dbeta[j] += d_row[j];
                        dgamma[j] += d_row[j] * xhat[j];
                    }
                    let dxhat: Vec<f64> = d_row.iter().zip(&g).map(|(dv, gv)| dv * gv).collect();
                    let m1: f64 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx.push(istd * (dxhat[j] - m1 - xhat[j] * m2));
                    }
                }
                self.accum(*x, &dx);
                self.accum(*gamma, &dgamma);
                self.accum(*beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                let dsh = self.value(*table).shape().to_vec();
                let dcols = dsh[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dcols {
                        dt[id * dcols + j] += d[r * dcols + j];
                    }
                }
                self.accum(*table, &dt);
            }
            Op::L2Normalize { x, norms } => {
                let c = self.value(*x).last_dim();
                let out = self.nodes[node].value.data().to_vec();
                let mut dx = Vec::with_capacity(out.len());
                for (r, d_row) in d.chunks(c).enumerate() {
                    let norm = norms[r];
                    if norm == 0.0 {
                        dx.extend(std::iter::repeat_n(0.0, c));
                        continue;
                    }
                    let o_row = &out[r * c..(r + 1) * c];
                    let dot: f64 = d_row.iter().zip(o_row).map(|(a, b)| a * b).sum();
                    dx.extend(
                        d_row
                            .iter()
                            .zip(o_row)
                            .map(|(dv, ov)| (dv - ov * dot) / norm),
                    );
                }
                self.accum(*x, &dx);
            }
            Op::Dropout { x, keep, mask } => {
                let dx: Vec<f64> = d
                    .iter()
                    .zip(mask)
                    .map(|(g, m)| g * m / keep)
                    .collect();
                self.accum(*x, &dx);
            }
            Op::MaxMany { inputs, argmax } => {
                for (idx, &v) in inputs.iter().enumerate() {
                    let dv: Vec<f64> = d
                        .iter()
                        .zip(argmax)
                        .map(|(g, &am)| if am as usize == idx { *g } else { 0.0 })
                        .collect();
                    self.accum(v, &dv);
                }
            }
            Op::SelectRows { a, rows } => {
                let c = self.value(*a).last_dim();
                let mut da = vec![0.0; self.value(*a).len()];
                for (r, &src_row) in rows.iter().enumerate() {
                    for j in 0..c {
                        da[src_row * c + j] += d[r * c + j];
                    }
                }
                self.accum(*a, &da);
            }
        }
    }

    fn backward_matmul(&mut self, a: Var, b: Var, trans_b: bool, d: &[f64]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k) = match sa.len() {
            2 => (1usize, sa[0], sa[1]),
            _ => (sa[0], sa[1], sa[2]),
        };
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let b_batched = sb.len() == 3;
        let av = self.value(a).data().to_vec();
        let bv = self.value(b).data().to_vec();

        let mut da = vec![0.0; av.len()];
        let mut db = vec![0.0; bv.len()];
        let mut db_tmp = vec![0.0; k * n];
        for bi in 0..batch {
            let d_sl = &d[bi * m * n..(bi + 1) * m * n];
            let a_sl = &av[bi * m * k..(bi + 1) * m * k];
            let b_off = if b_batched { bi * k * n } else { 0 };
            let b_sl = &bv[b_off..b_off + k * n];
            let da_sl = &mut da[bi * m * k..(bi + 1) * m * k];
            if trans_b {
                // out = a @ b^T (b stored [n, k]): da = d @ b; db = d^T @ a
                kernels::matmul_nn(d_sl, b_sl, da_sl, m, n, k);
                let mut dbt = vec![0.0; n * k];
                kernels::matmul_tn(d_sl, a_sl, &mut dbt, m, n, k);
                let dst = &mut db[b_off..b_off + k * n];
                for (g, v) in dst.iter_mut().zip(&dbt) {
                    *g += v;
                }
            } else {
                // out = a @ b: da = d @ b^T; db = a^T @ d
                // b is stored [k, n]; d @ b^T needs b in [n, k]-transposed
                // access, which matmul_nt provides directly.
                kernels::matmul_nt(d_sl, b_sl, da_sl, m, n, k);
                kernels::matmul_tn(a_sl, d_sl, &mut db_tmp, m, k, n);
                let dst = &mut db[b_off..b_off + k * n];
                for (g, v) in dst.iter_mut().zip(&db_tmp) {
                    *g += v;
                }
            }
        }
        self.accum(a, &da);
        self.accum(b, &db);
    }
}
