//! Reverse-mode autodiff over a linear operation tape.
//!
//! Ops are recorded eagerly whenever any input requires a gradient. The
//! backward pass walks the tape once in reverse, accumulating gradients
//! into every reachable `requires_grad` tensor. A tape can be consumed by
//! `backward` exactly once; a second call is rejected.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;

use super::tensor::Tensor;

enum Op {
    /// A[m,k] @ B[k,n]
    MatMul,
    /// A[m,k] @ B[n,k]^T
    MatMulNt,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    /// matrix [r,c] + row vector [c], broadcast over rows
    AddRow,
    /// tensor * scalar tensor [1]
    ScaleBy,
    Gelu,
    Sigmoid,
    Softplus,
    Tanh,
    Sqrt,
    Sum,
    /// rows of a [vocab, d] table selected by ids
    Gather { ids: Vec<usize> },
    /// row-wise softmax over the last dimension
    RowSoftmax { probs: Vec<f64> },
    LayerNorm { stats: Vec<(f64, f64)> },
    /// multi-head causal self-attention on projected q/k/v, each [batch*seq, d]
    CausalAttention { batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    /// mean NLL over positions with mask set; logits [n, vocab]
    MaskedCrossEntropy { targets: Vec<usize>, mask: Vec<f64>, probs: Vec<f64>, denom: f64 },
    /// elementwise multiply by a constant (dropout mask)
    MulMask { mask: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Ordered record of primitive operations for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn record(&self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let needs_grad = inputs.iter().any(|t| t.requires_grad());
        if needs_grad {
            let out = Tensor::param(shape, values);
            self.nodes.borrow_mut().push(Node { op, inputs, output: out.clone() });
            out
        } else {
            Tensor::new(shape, values)
        }
    }

    // ── shape helpers ────────────────────────────────────────────────

    fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::config(format!("{what}: expected 2-d tensor, got shape {s:?}"))),
        }
    }

    fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    // ── primitive ops ────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = Self::dims2(a, "matmul lhs")?;
        let (kb, n) = Self::dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::config(format!("matmul: inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, ka, n, &a.values(), &b.values(), &mut out, 0.0);
        Ok(self.record(Op::MatMul, vec![a.clone(), b.clone()], vec![m, n], out))
    }

    /// a @ b^T where b is stored row-major as [n, k].
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = Self::dims2(a, "matmul_nt lhs")?;
        let (n, kb) = Self::dims2(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(Error::config(format!("matmul_nt: inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(m, ka, n, &a.values(), &b.values(), &mut out, 0.0);
        Ok(self.record(Op::MatMulNt, vec![a.clone(), b.clone()], vec![m, n], out))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "add")?;
        let out = a.values().iter().zip(b.values().iter()).map(|(x, y)| x + y).collect();
        Ok(self.record(Op::Add, vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "sub")?;
        let out = a.values().iter().zip(b.values().iter()).map(|(x, y)| x - y).collect();
        Ok(self.record(Op::Sub, vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "mul")?;
        let out = a.values().iter().zip(b.values().iter()).map(|(x, y)| x * y).collect();
        Ok(self.record(Op::Mul, vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "div")?;
        let out = a.values().iter().zip(b.values().iter()).map(|(x, y)| x / y).collect();
        Ok(self.record(Op::Div, vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        let out = a.values().iter().map(|x| x * c).collect();
        self.record(Op::Scale(c), vec![a.clone()], a.shape().to_vec(), out)
    }

    /// matrix [r,c] plus a row vector [c] broadcast over every row.
    pub fn add_row(&self, m: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = Self::dims2(m, "add_row matrix")?;
        if v.shape() != [c] {
            return Err(Error::config(format!(
                "add_row: vector shape {:?} incompatible with matrix [{r}, {c}]",
                v.shape()
            )));
        }
        let mv = m.values();
        let vv = v.values();
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            for col in 0..c {
                out.push(mv[row * c + col] + vv[col]);
            }
        }
        Ok(self.record(Op::AddRow, vec![m.clone(), v.clone()], vec![r, c], out))
    }

    /// tensor scaled by a scalar tensor of shape [1].
    pub fn scale_by(&self, t: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::config("scale_by: scale must have a single element".into()));
        }
        let sv = s.values()[0];
        let out = t.values().iter().map(|x| x * sv).collect();
        Ok(self.record(Op::ScaleBy, vec![t.clone(), s.clone()], t.shape().to_vec(), out))
    }

    pub fn gelu(&self, t: &Tensor) -> Tensor {
        let out = t.values().iter().map(|&x| kernels::gelu(x)).collect();
        self.record(Op::Gelu, vec![t.clone()], t.shape().to_vec(), out)
    }

    pub fn sigmoid(&self, t: &Tensor) -> Tensor {
        let out = t.values().iter().map(|&x| kernels::sigmoid(x)).collect();
        self.record(Op::Sigmoid, vec![t.clone()], t.shape().to_vec(), out)
    }

    pub fn softplus(&self, t: &Tensor) -> Tensor {
        let out = t.values().iter().map(|&x| kernels::softplus(x)).collect();
        self.record(Op::Softplus, vec![t.clone()], t.shape().to_vec(), out)
    }

    pub fn tanh(&self, t: &Tensor) -> Tensor {
        let out = t.values().iter().map(|x| x.tanh()).collect();
        self.record(Op::Tanh, vec![t.clone()], t.shape().to_vec(), out)
    }

    pub fn sqrt(&self, t: &Tensor) -> Tensor {
        let out = t.values().iter().map(|x| x.sqrt()).collect();
        self.record(Op::Sqrt, vec![t.clone()], t.shape().to_vec(), out)
    }

    pub fn sum(&self, t: &Tensor) -> Tensor {
        let s: f64 = t.values().iter().sum();
        self.record(Op::Sum, vec![t.clone()], vec![1], vec![s])
    }

    /// Select rows of a [vocab, d] table by token id.
    pub fn gather(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = Self::dims2(table, "gather table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::config(format!("gather: id {bad} out of range {v}")));
        }
        let tv = table.values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.record(
            Op::Gather { ids: ids.to_vec() },
            vec![table.clone()],
            vec![ids.len(), d],
            out,
        ))
    }

    pub fn row_softmax(&self, t: &Tensor) -> Result<Tensor> {
        let (r, c) = Self::dims2(t, "row_softmax")?;
        let mut out = t.to_vec();
        for row in 0..r {
            kernels::softmax_row(&mut out[row * c..(row + 1) * c], c);
        }
        Ok(self.record(
            Op::RowSoftmax { probs: out.clone() },
            vec![t.clone()],
            vec![r, c],
            out,
        ))
    }

    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, d) = Self::dims2(x, "layer_norm input")?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::config("layer_norm: gamma/beta must have shape [d]".into()));
        }
        let xv = x.values();
        let gv = gamma.values();
        let bv = beta.values();
        let mut out = vec![0.0; r * d];
        let mut stats = Vec::with_capacity(r);
        for row in 0..r {
            let (mean, rstd) = kernels::layer_norm_row(
                &xv[row * d..(row + 1) * d],
                &gv,
                &bv,
                eps,
                &mut out[row * d..(row + 1) * d],
            );
            stats.push((mean, rstd));
        }
        Ok(self.record(
            Op::LayerNorm { stats },
            vec![x.clone(), gamma.clone(), beta.clone()],
            vec![r, d],
            out,
        ))
    }

    /// Multi-head causal self-attention over a batch of equal-length
    /// sequences laid out as [batch*seq, d]. Output is the pre-projection
    /// context, same shape.
    pub fn causal_attention(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Tensor> {
        let (n, d) = Self::dims2(q, "attention q")?;
        Self::same_shape(q, k, "attention q/k")?;
        Self::same_shape(q, v, "attention q/v")?;
        if n != batch * seq {
            return Err(Error::config(format!(
                "attention: rows {n} != batch {batch} * seq {seq}"
            )));
        }
        if d % heads != 0 {
            return Err(Error::config(format!("attention: d {d} not divisible by heads {heads}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = q.values();
        let kv = k.values();
        let vv = v.values();
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];

        let mut qh = vec![0.0; seq * dh];
        let mut kh = vec![0.0; seq * dh];
        let mut vh = vec![0.0; seq * dh];
        let mut scores = vec![0.0; seq * seq];
        let mut ctx = vec![0.0; seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                gather_head(&qv, b, h, seq, d, dh, &mut qh);
                gather_head(&kv, b, h, seq, d, dh, &mut kh);
                gather_head(&vv, b, h, seq, d, dh, &mut vh);
                kernels::gemm_nt(seq, dh, seq, &qh, &kh, &mut scores, 0.0);
                for i in 0..seq {
                    let row = &mut scores[i * seq..(i + 1) * seq];
                    for x in row[..=i].iter_mut() {
                        *x *= scale;
                    }
                    kernels::softmax_row(row, i + 1);
                    for x in row[i + 1..].iter_mut() {
                        *x = 0.0;
                    }
                }
                let pbase = (b * heads + h) * seq * seq;
                probs[pbase..pbase + seq * seq].copy_from_slice(&scores);
                kernels::gemm(seq, seq, dh, &scores, &vh, &mut ctx, 0.0);
                scatter_head(&ctx, b, h, seq, d, dh, &mut out);
            }
        }
        Ok(self.record(
            Op::CausalAttention { batch, seq, heads, probs },
            vec![q.clone(), k.clone(), v.clone()],
            vec![n, d],
            out,
        ))
    }

    /// Mean negative log-likelihood over positions whose mask is nonzero.
    /// Rejects an all-zero mask (empty effective loss).
    pub fn masked_cross_entropy(
        &self,
        logits: &Tensor,
        targets: &[usize],
        mask: &[f64],
    ) -> Result<Tensor> {
        let (n, vsz) = Self::dims2(logits, "cross_entropy logits")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::config(format!(
                "cross_entropy: {n} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vsz) {
            return Err(Error::config(format!("cross_entropy: target {bad} out of range {vsz}")));
        }
        let denom: f64 = mask.iter().sum();
        if denom == 0.0 {
            return Err(Error::usage("cross_entropy: mask selects no positions".into()));
        }
        let lv = logits.values();
        let mut probs = vec![0.0; n * vsz];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * vsz..(i + 1) * vsz];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let prow = &mut probs[i * vsz..(i + 1) * vsz];
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                prow[j] = e;
                sum += e;
            }
            let lse = m + sum.ln();
            for p in prow.iter_mut() {
                *p /= sum;
            }
            if mask[i] != 0.0 {
                loss += mask[i] * (lse - row[targets[i]]);
            }
        }
        loss /= denom;
        Ok(self.record(
            Op::MaskedCrossEntropy {
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                denom,
            },
            vec![logits.clone()],
            vec![1],
            vec![loss],
        ))
    }

    /// Elementwise multiply by a constant mask (dropout path). The mask is
    /// not a tape participant and receives no gradient.
    pub fn mul_mask(&self, t: &Tensor, mask: &[f64]) -> Result<Tensor> {
        if mask.len() != t.numel() {
            return Err(Error::config("mul_mask: mask length mismatch".into()));
        }
        let out = t.values().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        Ok(self.record(
            Op::MulMask { mask: mask.to_vec() },
            vec![t.clone()],
            t.shape().to_vec(),
            out,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate grads of every `requires_grad` tensor reachable from `loss`.
    /// Grads accumulate into any grad already present (micro-batch
    /// accumulation); call `zero_grad` between optimizer steps.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::usage("backward: tape already consumed".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);

        for node in nodes.iter().rev() {
            let dy = match grads.get(&node.output.id()) {
                Some(g) => g.clone(),
                None => continue, // not reachable from the loss
            };
            self.backprop_node(node, &dy, &mut grads);
        }

        // Move accumulated grads into tensor grad slots.
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut deposit = |t: &Tensor| {
            if !t.requires_grad() || seen.contains_key(&t.id()) {
                return;
            }
            seen.insert(t.id(), ());
            if let Some(g) = grads.get(&t.id()) {
                match t.grad() {
                    Some(mut existing) => {
                        for (e, n) in existing.iter_mut().zip(g.iter()) {
                            *e += n;
                        }
                        t.set_grad(existing);
                    }
                    None => t.set_grad(g.clone()),
                }
            }
        };
        deposit(loss);
        for node in nodes.iter() {
            for input in &node.inputs {
                deposit(input);
            }
            deposit(&node.output);
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
        let needs: Vec<bool> = node.inputs.iter().map(|t| t.requires_grad()).collect();
        let mut add_grad = |t: &Tensor, g: Vec<f64>| {
            let slot = grads.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]);
            for (s, v) in slot.iter_mut().zip(g.iter()) {
                *s += v;
            }
        };
        match &node.op {
            Op::MatMul => {
                let a = &node.inputs[0];
                let b = &node.inputs[1];
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if needs[0] {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, dy, &b.values(), &mut da, 0.0);
                    add_grad(a, da);
                }
                if needs[1] {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, &a.values(), dy, &mut db, 0.0);
                    add_grad(b, db);
                }
            }
            Op::MatMulNt => {
                // out = A @ B^T with A [m,k], B [n,k]
                let a = &node.inputs[0];
                let b = &node.inputs[1];
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                if needs[0] {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, dy, &b.values(), &mut da, 0.0);
                    add_grad(a, da);
                }
                if needs[1] {
                    let mut db = vec![0.0; n * k];
                    kernels::gemm_tn(n, m, k, dy, &a.values(), &mut db, 0.0);
                    add_grad(b, db);
                }
            }
            Op::Add => {
                if needs[0] {
                    add_grad(&node.inputs[0], dy.to_vec());
                }
                if needs[1] {
                    add_grad(&node.inputs[1], dy.to_vec());
                }
            }
            Op::Sub => {
                if needs[0] {
                    add_grad(&node.inputs[0], dy.to_vec());
                }
                if needs[1] {
                    add_grad(&node.inputs[1], dy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul => {
                if needs[0] {
                    let g = dy.iter().zip(node.inputs[1].values().iter()).map(|(g, b)| g * b).collect();
                    add_grad(&node.inputs[0], g);
                }
                if needs[1] {
                    let g = dy.iter().zip(node.inputs[0].values().iter()).map(|(g, a)| g * a).collect();
                    add_grad(&node.inputs[1], g);
                }
            }
            Op::Div => {
                let av = node.inputs[0].values();
                let bv = node.inputs[1].values();
                if needs[0] {
                    let g = dy.iter().zip(bv.iter()).map(|(g, b)| g / b).collect();
                    add_grad(&node.inputs[0], g);
                }
                if needs[1] {
                    let g = dy
                        .iter()
                        .zip(av.iter().zip(bv.iter()))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    add_grad(&node.inputs[1], g);
                }
            }
            Op::Scale(c) => {
                if needs[0] {
                    add_grad(&node.inputs[0], dy.iter().map(|g| g * c).collect());
                }
            }
            Op::AddRow => {
                let (r, c) = (node.inputs[0].shape()[0], node.inputs[0].shape()[1]);
                if needs[0] {
                    add_grad(&node.inputs[0], dy.to_vec());
                }
                if needs[1] {
                    let mut dv = vec![0.0; c];
                    for row in 0..r {
                        for col in 0..c {
                            dv[col] += dy[row * c + col];
                        }
                    }
                    add_grad(&node.inputs[1], dv);
                }
            }
            Op::ScaleBy => {
                let t = &node.inputs[0];
                let s = &node.inputs[1];
                let sv = s.values()[0];
                if needs[0] {
                    add_grad(t, dy.iter().map(|g| g * sv).collect());
                }
                if needs[1] {
                    let ds: f64 = dy.iter().zip(t.values().iter()).map(|(g, x)| g * x).sum();
                    add_grad(s, vec![ds]);
                }
            }
            Op::Gelu => {
                if needs[0] {
                    let g = dy
                        .iter()
                        .zip(node.inputs[0].values().iter())
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect();
                    add_grad(&node.inputs[0], g);
                }
            }
            Op::Sigmoid => {
                if needs[0] {
                    let g = dy
                        .iter()
                        .zip(node.output.values().iter())
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect();
                    add_grad(&node.inputs[0], g);
                }
            }
            Op::Softplus => {
                if needs[0] {
                    let g = dy
                        .iter()
                        .zip(node.inputs[0].values().iter())
                        .map(|(g, &x)| g * kernels::sigmoid(x))
                        .collect();
                    add_grad(&node.inputs[0], g);
                }
            }
            Op::Tanh => {
                if needs[0] {
                    let g = dy
                        .iter()
                        .zip(node.output.values().iter())
                        .map(|(g, &y)| g * (1.0 - y * y))
                        .collect();
                    add_grad(&node.inputs[0], g);
                }
            }
            Op::Sqrt => {
                if needs[0] {
                    let g = dy
                        .iter()
                        .zip(node.output.values().iter())
                        .map(|(g, &y)| g * 0.5 / y)
                        .collect();
                    add_grad(&node.inputs[0], g);
                }
            }
            Op::Sum => {
                if needs[0] {
                    add_grad(&node.inputs[0], vec![dy[0]; node.inputs[0].numel()]);
                }
            }
            Op::Gather { ids } => {
                if needs[0] {
                    let table = &node.inputs[0];
                    let d = table.shape()[1];
                    let mut dt = vec![0.0; table.numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for col in 0..d {
                            dt[id * d + col] += dy[row * d + col];
                        }
                    }
                    add_grad(table, dt);
                }
            }
            Op::RowSoftmax { probs } => {
                if needs[0] {
                    let (r, c) = (node.output.shape()[0], node.output.shape()[1]);
                    let mut g = vec![0.0; r * c];
                    for row in 0..r {
                        let p = &probs[row * c..(row + 1) * c];
                        let d = &dy[row * c..(row + 1) * c];
                        let dot: f64 = p.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
                        for col in 0..c {
                            g[row * c + col] = p[col] * (d[col] - dot);
                        }
                    }
                    add_grad(&node.inputs[0], g);
                }
            }
            Op::LayerNorm { stats } => {
                let x = &node.inputs[0];
                let gamma = &node.inputs[1];
                let (r, d) = (x.shape()[0], x.shape()[1]);
                let xv = x.values();
                let gv = gamma.values();
                let mut dx = vec![0.0; r * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for row in 0..r {
                    let (mean, rstd) = stats[row];
                    let xr = &xv[row * d..(row + 1) * d];
                    let dyr = &dy[row * d..(row + 1) * d];
                    let mut dxhat_mean = 0.0;
                    let mut dxhat_xhat_mean = 0.0;
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * rstd;
                        let dxhat = dyr[i] * gv[i];
                        dgamma[i] += dyr[i] * xhat;
                        dbeta[i] += dyr[i];
                        dxhat_mean += dxhat;
                        dxhat_xhat_mean += dxhat * xhat;
                    }
                    dxhat_mean /= d as f64;
                    dxhat_xhat_mean /= d as f64;
                    if needs[0] {
                        for i in 0..d {
                            let xhat = (xr[i] - mean) * rstd;
                            let dxhat = dyr[i] * gv[i];
                            dx[row * d + i] = rstd * (dxhat - dxhat_mean - xhat * dxhat_xhat_mean);
                        }
                    }
                }
                if needs[0] {
                    add_grad(x, dx);
                }
                if needs[1] {
                    add_grad(gamma, dgamma);
                }
                if needs[2] {
                    add_grad(&node.inputs[2], dbeta);
                }
            }
            Op::CausalAttention { batch, seq, heads, probs } => {
                let (q, k, v) = (&node.inputs[0], &node.inputs[1], &node.inputs[2]);
                let d = q.shape()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = q.values();
                let kv = k.values();
                let vv = v.values();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];

                let mut qh = vec![0.0; seq * dh];
                let mut kh = vec![0.0; seq * dh];
                let mut vh = vec![0.0; seq * dh];
                let mut doh = vec![0.0; seq * dh];
                let mut dp = vec![0.0; seq * seq];
                let mut ds = vec![0.0; seq * seq];
                let mut tmp = vec![0.0; seq * dh];
                for b in 0..*batch {
                    for h in 0..*heads {
                        gather_head(&qv, b, h, *seq, d, dh, &mut qh);
                        gather_head(&kv, b, h, *seq, d, dh, &mut kh);
                        gather_head(&vv, b, h, *seq, d, dh, &mut vh);
                        gather_head(dy, b, h, *seq, d, dh, &mut doh);
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // dV = P^T dO
                        kernels::gemm_tn(*seq, *seq, dh, p, &doh, &mut tmp, 0.0);
                        scatter_head_add(&tmp, b, h, *seq, d, dh, &mut dv);
                        // dP = dO V^T
                        kernels::gemm_nt(*seq, dh, *seq, &doh, &vh, &mut dp, 0.0);
                        // dS = P o (dP - rowsum(dP o P)), then scale
                        for i in 0..*seq {
                            let prow = &p[i * seq..(i + 1) * seq];
                            let dprow = &dp[i * seq..(i + 1) * seq];
                            let dot: f64 =
                                prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..*seq {
                                ds[i * seq + j] = prow[j] * (dprow[j] - dot) * scale;
                            }
                        }
                        // dQ = dS K, dK = dS^T Q
                        kernels::gemm(*seq, *seq, dh, &ds, &kh, &mut tmp, 0.0);
                        scatter_head_add(&tmp, b, h, *seq, d, dh, &mut dq);
                        kernels::gemm_tn(*seq, *seq, dh, &ds, &qh, &mut tmp, 0.0);
                        scatter_head_add(&tmp, b, h, *seq, d, dh, &mut dk);
                    }
                }
                if needs[0] {
                    add_grad(q, dq);
                }
                if needs[1] {
                    add_grad(k, dk);
                }
                if needs[2] {
                    add_grad(v, dv);
                }
            }
            Op::MaskedCrossEntropy { targets, mask, probs, denom } => {
                if needs[0] {
                    let logits = &node.inputs[0];
                    let (n, vsz) = (logits.shape()[0], logits.shape()[1]);
                    let mut g = vec![0.0; n * vsz];
                    let gy = dy[0];
                    for i in 0..n {
                        if mask[i] == 0.0 {
                            continue;
                        }
                        let w = gy * mask[i] / denom;
                        let p = &probs[i * vsz..(i + 1) * vsz];
                        let gr = &mut g[i * vsz..(i + 1) * vsz];
                        for j in 0..vsz {
                            gr[j] = w * p[j];
                        }
                        gr[targets[i]] -= w;
                    }
                    add_grad(logits, g);
                }
            }
            Op::MulMask { mask } => {
                if needs[0] {
                    let g = dy.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                    add_grad(&node.inputs[0], g);
                }
            }
        }
    }
}

fn gather_head(src: &[f64], b: usize, h: usize, seq: usize, d: usize, dh: usize, dst: &mut [f64]) {
    for t in 0..seq {
        let base = (b * seq + t) * d + h * dh;
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[base..base + dh]);
    }
}

fn scatter_head(src: &[f64], b: usize, h: usize, seq: usize, d: usize, dh: usize, dst: &mut [f64]) {
    for t in 0..seq {
        let base = (b * seq + t) * d + h * dh;
        dst[base..base + dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

fn scatter_head_add(
    src: &[f64],
    b: usize,
    h: usize,
    seq: usize,
    d: usize,
    dh: usize,
    dst: &mut [f64],
) {
    for t in 0..seq {
        let base = (b * seq + t) * d + h * dh;
        for i in 0..dh {
            dst[base + i] += src[t * dh + i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_input() {
        let tape = Tape::new();
        let a = Tensor::param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = tape.matmul(&a, &eye).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn square_gradient_at_three() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1], vec![3.0]);
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn constant_without_requires_grad_gets_no_grad() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1], vec![2.0]);
        let c = Tensor::new(vec![1], vec![5.0]);
        let y = tape.mul(&x, &c).unwrap();
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1], vec![3.0]);
        let loss = tape.mul(&x, &x).unwrap();
        tape.backward(&loss).unwrap();
        let err = tape.backward(&loss).unwrap_err();
        assert!(matches!(err, crate::error::Error::Usage(_)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let y = tape.scale(&x, 2.0);
        assert!(matches!(tape.backward(&y), Err(crate::error::Error::Usage(_))));
    }

    #[test]
    fn row_softmax_equal_logits_uniform() {
        let tape = Tape::new();
        let x = Tensor::new(vec![1, 4], vec![2.0; 4]);
        let p = tape.row_softmax(&x).unwrap();
        for v in p.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_ce_matches_scalar_loop() {
        // Independent scalar-loop oracle over masked positions.
        let n = 6;
        let vsz = 5;
        let logits_data: Vec<f64> =
            (0..n * vsz).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let targets = vec![0usize, 3, 1, 4, 2, 2];
        let mask = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];

        let mut expected = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            if mask[i] == 0.0 {
                continue;
            }
            let row = &logits_data[i * vsz..(i + 1) * vsz];
            let mut denom = 0.0;
            for &x in row {
                denom += x.exp();
            }
            expected += -(row[targets[i]].exp() / denom).ln();
            count += 1.0;
        }
        expected /= count;

        let tape = Tape::new();
        let logits = Tensor::param(vec![n, vsz], logits_data);
        let loss = tape.masked_cross_entropy(&logits, &targets, &mask).unwrap();
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_ce_rejects_empty_mask() {
        let tape = Tape::new();
        let logits = Tensor::param(vec![2, 3], vec![0.0; 6]);
        let err = tape.masked_cross_entropy(&logits, &[0, 1], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, crate::error::Error::Usage(_)));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let tape = Tape::new();
        let a = Tensor::new(vec![2, 3], vec![0.0; 6]);
        let b = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert!(matches!(tape.matmul(&a, &b), Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn grad_accumulates_across_tapes() {
        let x = Tensor::param(vec![1], vec![3.0]);
        for _ in 0..2 {
            let tape = Tape::new();
            let y = tape.mul(&x, &x).unwrap();
            tape.backward(&y).unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }
}
