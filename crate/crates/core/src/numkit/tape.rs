//! Reverse-mode automatic differentiation over coarse tensor ops.
//!
//! Each op records its parents and whatever it needs for the backward pass.
//! Ops are deliberately coarse (fused attention, layer norm, contrastive
//! loss) so the tape for a whole minibatch stays at a few hundred nodes.

use std::sync::Arc;

use super::tensor::softmax_in_place;
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Token layout for [`Tape::attention`].
///
/// Rows are ordered `(sequence, frame, token)`. A query token in frame `t`
/// attends to every unmasked token of frames `t - r ..= t + r` of the same
/// sequence, clipped at the sequence boundaries, where `r = (window - 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub seqs: usize,
    pub frames: usize,
    pub tokens: usize,
    pub window: usize,
    /// Per-row validity for keys; `None` means every token is a valid key.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnLayout {
    pub fn rows(&self) -> usize {
        self.seqs * self.frames * self.tokens
    }

    fn frame_range(&self, t: usize) -> (usize, usize) {
        let r = (self.window - 1) / 2;
        (t.saturating_sub(r), (t + r).min(self.frames - 1))
    }
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, S),
    ScaleBy(Var, Var),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<S>,
    },
    MaskedMean {
        x: Var,
        seqs: usize,
        mask: Option<Arc<Vec<bool>>>,
        counts: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<S>,
    },
    Stack(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ClipLoss {
        v: Var,
        t: Var,
        scale: Var,
        /// `(softmax_rows - I + softmax_cols - I) / (2n)`, the gradient w.r.t.
        /// the scaled logits.
        dlogits: Vec<S>,
        sims: Vec<S>,
    },
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Operation recorder. Confined to one thread; independent runs use
/// independent tapes.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter).
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable leaf (input data, frozen weights).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a · b` where `a` is viewed as `rows × k` and `b` is `k × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
        let mut out = vec![S::ZERO; m * n];
        S::gemm(m, k, n, ta.data(), tb.data(), &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).len() != n {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.val(bias).to_vec();
        let mut out = self.val(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(o, &bb)| *o += bb);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), &[x, bias]))
    }

    /// Adds `tile` (a `p × n` matrix) to `x` (`rows × n`), row `i` receiving
    /// `tile[i % p]`. Used for position embeddings shared across frames.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(tile));
        let n = tx.last_dim();
        if tt.last_dim() != n || tx.rows() % tt.rows() != 0 {
            return Err(shape_err("add_tiled", tx.shape(), tt.shape()));
        }
        let tile_len = tt.len();
        let tile_data = tt.data().to_vec();
        let mut out = tx.data().to_vec();
        for chunk in out.chunks_mut(tile_len) {
            chunk.iter_mut().zip(&tile_data).for_each(|(o, &p)| *o += p);
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddTiled(x, tile), &[x, tile]))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = Tensor::from_parts(self.shape(x).to_vec(), self.val(x).iter().map(|&v| v * c).collect());
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Multiplies `x` by a recorded scalar.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::invalid("scale_by expects a scalar factor"));
        }
        let c = self.value(s).item();
        let out = Tensor::from_parts(self.shape(x).to_vec(), self.val(x).iter().map(|&v| v * c).collect());
        Ok(self.push(out, Op::ScaleBy(x, s), &[x, s]))
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum_f64();
        self.push(Tensor::scalar(S::from_f64(total)), Op::Sum(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same var has same shape")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.val(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let out = self
            .val(x)
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Clamp { x, lo, hi }, &[x])
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).rows();
        let (g, b) = (self.val(gamma).to_vec(), self.val(beta).to_vec());
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for row in self.val(x).chunks(n) {
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(S::from_f64(r));
            for (j, v) in row.iter().enumerate() {
                let h = S::from_f64((v.to_f64() - mean) * r);
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head attention over a fused `rows × 3D` query/key/value matrix.
    /// Returns `rows × D`.
    pub fn attention(&mut self, qkv: Var, heads: usize, layout: Arc<AttnLayout>) -> Result<Var> {
        let t = self.value(qkv);
        let width = t.last_dim();
        if !width.is_multiple_of(3) || !(width / 3).is_multiple_of(heads) {
            return Err(Error::invalid(format!("attention width {width} not divisible into 3x{heads} heads")));
        }
        if layout.window.is_multiple_of(2) {
            return Err(Error::invalid(format!("attention window must be odd, got {}", layout.window)));
        }
        if t.rows() != layout.rows() {
            return Err(Error::invalid(format!(
                "attention layout expects {} rows, input has {}",
                layout.rows(),
                t.rows()
            )));
        }
        if let Some(mask) = &layout.key_mask {
            if mask.len() != layout.rows() {
                return Err(Error::invalid("attention key mask length mismatch"));
            }
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let data = t.data();
        let rows = layout.rows();
        let mut out = vec![S::ZERO; rows * d];
        let mut probs = Vec::new();
        let mut tmp = Vec::new();
        let w3 = width as isize;
        let p = layout.tokens;
        for seq in 0..layout.seqs {
            for frame in 0..layout.frames {
                let q0 = (seq * layout.frames + frame) * p;
                let (lo, hi) = layout.frame_range(frame);
                let k0 = (seq * layout.frames + lo) * p;
                let nk = (hi - lo + 1) * p;
                for h in 0..heads {
                    let start = probs.len();
                    probs.resize(start + p * nk, S::ZERO);
                    let scores = &mut probs[start..];
                    S::gemm_strided(
                        p,
                        dh,
                        nk,
                        &data[q0 * width + h * dh..],
                        (w3, 1),
                        &data[k0 * width + d + h * dh..],
                        (1, w3),
                        scores,
                        false,
                    );
                    for row in scores.chunks_mut(nk) {
                        row.iter_mut().for_each(|s| *s *= scale);
                        if let Some(mask) = &layout.key_mask {
                            for (j, s) in row.iter_mut().enumerate() {
                                if !mask[k0 + j] {
                                    *s = S::from_f64(f64::NEG_INFINITY);
                                }
                            }
                        }
                        softmax_in_place(row);
                    }
                    tmp.clear();
                    tmp.resize(p * dh, S::ZERO);
                    S::gemm_strided(
                        p,
                        nk,
                        dh,
                        &probs[start..],
                        (nk as isize, 1),
                        &data[k0 * width + 2 * d + h * dh..],
                        (w3, 1),
                        &mut tmp,
                        false,
                    );
                    for i in 0..p {
                        let dst = (q0 + i) * d + h * dh;
                        out[dst..dst + dh].copy_from_slice(&tmp[i * dh..(i + 1) * dh]);
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("attention produced a non-finite value (fully masked query?)"));
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Attention { qkv, heads, layout, probs },
            &[qkv],
        ))
    }

    /// Mean over the valid rows of each of `seqs` equal-length row groups.
    /// Returns `seqs × D`.
    pub fn masked_mean(&mut self, x: Var, seqs: usize, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let t = self.value(x);
        let (rows, n) = (t.rows(), t.last_dim());
        if seqs == 0 || rows % seqs != 0 {
            return Err(Error::invalid(format!("cannot split {rows} rows into {seqs} groups")));
        }
        if mask.as_ref().is_some_and(|m| m.len() != rows) {
            return Err(Error::invalid("masked_mean mask length mismatch"));
        }
        let per = rows / seqs;
        let mut out = Vec::with_capacity(seqs * n);
        let mut counts = Vec::with_capacity(seqs);
        let mut acc = vec![0.0f64; n];
        for s in 0..seqs {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut count = 0;
            for r in s * per..(s + 1) * per {
                if mask.as_ref().is_none_or(|m| m[r]) {
                    count += 1;
                    for (a, v) in acc.iter_mut().zip(t.row(r)) {
                        *a += v.to_f64();
                    }
                }
            }
            if count == 0 {
                return Err(Error::invalid(format!("group {s} has no valid rows")));
            }
            out.extend(acc.iter().map(|a| S::from_f64(a / count as f64)));
            counts.push(count);
        }
        Ok(self.push(
            Tensor::from_parts(vec![seqs, n], out),
            Op::MaskedMean { x, seqs, mask, counts },
            &[x],
        ))
    }

    /// Scales every row to unit ℓ2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let norm = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::numeric("cannot normalize a zero or non-finite row"));
            }
            let inv = 1.0 / norm;
            out.extend(row.iter().map(|v| S::from_f64(v.to_f64() * inv)));
            norms.push(S::from_f64(norm));
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norms }, &[x]))
    }

    /// Concatenates rows of several matrices sharing the last dimension.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack_rows of nothing"))?;
        let n = self.value(*first).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.last_dim() != n {
                return Err(shape_err("stack_rows", self.shape(*first), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::Stack(parts.to_vec()), parts))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let n = t.last_dim();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::invalid(format!("gather index {id} out of range {}", t.rows())));
            }
            out.extend_from_slice(t.row(id));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), n], out),
            Op::Gather { table, ids: ids.to_vec() },
            &[table],
        ))
    }

    /// Symmetric contrastive loss over index-aligned rows of `v` and `t`
    /// with logits `scale · v·tᵀ`: the mean of the video→text and
    /// text→video cross-entropies.
    pub fn clip_loss(&mut self, v: Var, t: Var, scale: Var) -> Result<Var> {
        let (tv, tt) = (self.value(v), self.value(t));
        if tv.shape() != tt.shape() || tv.rank() != 2 {
            return Err(shape_err("clip_loss", tv.shape(), tt.shape()));
        }
        if !self.value(scale).is_scalar() {
            return Err(Error::invalid("clip_loss scale must be a scalar"));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let s = self.value(scale).item();
        let mut sims = vec![S::ZERO; n * n];
        S::gemm_strided(n, d, n, tv.data(), (d as isize, 1), tt.data(), (1, d as isize), &mut sims, false);
        let logits: Vec<f64> = sims.iter().map(|x| x.to_f64() * s.to_f64()).collect();
        let mut total = 0.0f64;
        let mut dlogits = vec![0.0f64; n * n];
        let w = 1.0 / (2.0 * n as f64);
        // rows: video -> text
        for i in 0..n {
            let row = &logits[i * n..(i + 1) * n];
            let (lse, probs) = log_softmax_f64(row.iter().copied());
            total += lse - row[i];
            for (j, p) in probs.into_iter().enumerate() {
                dlogits[i * n + j] += w * (p - if i == j { 1.0 } else { 0.0 });
            }
        }
        // columns: text -> video
        for j in 0..n {
            let col = (0..n).map(|i| logits[i * n + j]);
            let (lse, probs) = log_softmax_f64(col);
            total += lse - logits[j * n + j];
            for (i, p) in probs.into_iter().enumerate() {
                dlogits[i * n + j] += w * (p - if i == j { 1.0 } else { 0.0 });
            }
        }
        let loss = total * w;
        if !loss.is_finite() {
            return Err(Error::numeric("contrastive loss is not finite"));
        }
        let dlogits = dlogits.into_iter().map(S::from_f64).collect();
        Ok(self.push(
            Tensor::scalar(S::from_f64(loss)),
            Op::ClipLoss { v, t, scale, dlogits, sims },
            &[v, t, scale],
        ))
    }

    /// Runs the backward pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> &'g mut Vec<S> {
        grads[v.0].get_or_insert_with(|| vec![S::ZERO; self.nodes[v.0].value.len()])
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
                if self.needs(*a) {
                    let ga = self.slot(grads, *a);
                    // ga += g · bᵀ
                    S::gemm_strided(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), ga, true);
                }
                if self.needs(*b) {
                    let gb = self.slot(grads, *b);
                    // gb += aᵀ · g
                    S::gemm_strided(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(self.slot(grads, *v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.needs(*b) {
                    let gb = self.slot(grads, *b);
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).to_vec(), self.val(*b).to_vec());
                if self.needs(*a) {
                    let ga = self.slot(grads, *a);
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(&vb) {
                        *o += x * y;
                    }
                }
                if self.needs(*b) {
                    let gb = self.slot(grads, *b);
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(&va) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.to_f64());
                    }
                    let gb = self.slot(grads, *b);
                    gb.iter_mut().zip(acc).for_each(|(o, a)| *o += S::from_f64(a));
                }
            }
            Op::AddTiled(x, tile) => {
                if self.needs(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.needs(*tile) {
                    let len = self.value(*tile).len();
                    let mut acc = vec![0.0f64; len];
                    for chunk in g.chunks(len) {
                        acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v.to_f64());
                    }
                    let gt = self.slot(grads, *tile);
                    gt.iter_mut().zip(acc).for_each(|(o, a)| *o += S::from_f64(a));
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *c);
                }
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * c);
                }
                if self.needs(*s) {
                    let dot: f64 = g.iter().zip(self.val(*x)).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    self.slot(grads, *s)[0] += S::from_f64(dot);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let vx = self.val(*x).to_vec();
                    let gx = self.slot(grads, *x);
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(&vx) {
                        *o += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let vx = self.val(*x).to_vec();
                    let gx = self.slot(grads, *x);
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(&vx) {
                        if xv >= *lo && xv <= *hi {
                            *o += gv;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).len();
                let gam = self.val(*gamma).to_vec();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0f64; n];
                    let mut db = vec![0.0f64; n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j].to_f64() * hrow[j].to_f64();
                            db[j] += grow[j].to_f64();
                        }
                    }
                    if self.needs(*gamma) {
                        let s = self.slot(grads, *gamma);
                        s.iter_mut().zip(dg).for_each(|(o, v)| *o += S::from_f64(v));
                    }
                    if self.needs(*beta) {
                        let s = self.slot(grads, *beta);
                        s.iter_mut().zip(db).for_each(|(o, v)| *o += S::from_f64(v));
                    }
                }
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    for (r, ((grow, hrow), orow)) in
                        g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate()
                    {
                        let mut mean_d = 0.0f64;
                        let mut mean_dh = 0.0f64;
                        for j in 0..n {
                            let d = grow[j].to_f64() * gam[j].to_f64();
                            mean_d += d;
                            mean_dh += d * hrow[j].to_f64();
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let rs = rstd[r].to_f64();
                        for j in 0..n {
                            let d = grow[j].to_f64() * gam[j].to_f64();
                            orow[j] += S::from_f64(rs * (d - mean_d - hrow[j].to_f64() * mean_dh));
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, layout, probs } => {
                if self.needs(*qkv) {
                    let data = self.val(*qkv).to_vec();
                    let gq = self.slot(grads, *qkv);
                    attention_backward(&data, g, gq, *heads, layout, probs);
                }
            }
            Op::MaskedMean { x, seqs, mask, counts } => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let (rows, n) = (t.rows(), t.last_dim());
                    let per = rows / seqs;
                    let gx = self.slot(grads, *x);
                    for s in 0..*seqs {
                        let inv = S::from_f64(1.0 / counts[s] as f64);
                        for r in s * per..(s + 1) * per {
                            if mask.as_ref().is_none_or(|m| m[r]) {
                                for j in 0..n {
                                    gx[r * n + j] += g[s * n + j] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let gx = self.slot(grads, *x);
                    for (r, ((yrow, grow), orow)) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        let inv = 1.0 / norms[r].to_f64();
                        for j in 0..n {
                            orow[j] += S::from_f64((grow[j].to_f64() - yrow[j].to_f64() * dot) * inv);
                        }
                    }
                }
            }
            Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        add_into(self.slot(grads, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let n = self.value(*table).last_dim();
                    let gt = self.slot(grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            gt[id * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::ClipLoss { v, t, scale, dlogits, sims } => {
                let tv = self.value(*v);
                let (n, d) = (tv.shape()[0], tv.shape()[1]);
                let s = self.value(*scale).item();
                let gl = g[0];
                // dsims = gl · s · dlogits
                let dsims: Vec<S> = dlogits.iter().map(|&x| x * s * gl).collect();
                if self.needs(*v) {
                    let gv = self.slot(grads, *v);
                    S::gemm_strided(n, n, d, &dsims, (n as isize, 1), self.val(*t), (d as isize, 1), gv, true);
                }
                if self.needs(*t) {
                    let gt = self.slot(grads, *t);
                    S::gemm_strided(n, n, d, &dsims, (1, n as isize), self.val(*v), (d as isize, 1), gt, true);
                }
                if self.needs(*scale) {
                    let dot: f64 = dlogits.iter().zip(sims).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    self.slot(grads, *scale)[0] += S::from_f64(dot * gl.to_f64());
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let xf = x.to_f64();
    S::from_f64(0.5 * xf * (1.0 + (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh()))
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let xf = x.to_f64();
    let t = (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh();
    S::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xf * xf))
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}

fn log_softmax_f64(xs: impl Iterator<Item = f64> + Clone) -> (f64, Vec<f64>) {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}

fn attention_backward<S: Scalar>(
    data: &[S],
    g: &[S],
    gq: &mut [S],
    heads: usize,
    layout: &AttnLayout,
    probs: &[S],
) {
    let width = data.len() / layout.rows();
    let d = width / 3;
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let p = layout.tokens;
    let w3 = width as isize;
    let mut offset = 0;
    let mut dp = Vec::new();
    let mut tmp = Vec::new();
    for seq in 0..layout.seqs {
        for frame in 0..layout.frames {
            let q0 = (seq * layout.frames + frame) * p;
            let (lo, hi) = layout.frame_range(frame);
            let k0 = (seq * layout.frames + lo) * p;
            let nk = (hi - lo + 1) * p;
            for h in 0..heads {
                let pr = &probs[offset..offset + p * nk];
                offset += p * nk;
                let go = &g[q0 * d + h * dh..];
                // dP = dO · Vᵀ
                dp.clear();
                dp.resize(p * nk, S::ZERO);
                S::gemm_strided(p, dh, nk, go, (d as isize, 1), &data[k0 * width + 2 * d + h * dh..], (1, w3), &mut dp, false);
                // dV += Pᵀ · dO
                tmp.clear();
                tmp.resize(nk * dh, S::ZERO);
                S::gemm_strided(nk, p, dh, pr, (1, nk as isize), go, (d as isize, 1), &mut tmp, false);
                for j in 0..nk {
                    let dst = (k0 + j) * width + 2 * d + h * dh;
                    add_into(&mut gq[dst..dst + dh], &tmp[j * dh..(j + 1) * dh]);
                }
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√dh scale
                for (prow, drow) in pr.chunks(nk).zip(dp.chunks_mut(nk)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    let dot = S::from_f64(dot);
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                // dQ = dS · K
                tmp.clear();
                tmp.resize(p * dh, S::ZERO);
                S::gemm_strided(p, nk, dh, &dp, (nk as isize, 1), &data[k0 * width + d + h * dh..], (w3, 1), &mut tmp, false);
                for i in 0..p {
                    let dst = (q0 + i) * width + h * dh;
                    add_into(&mut gq[dst..dst + dh], &tmp[i * dh..(i + 1) * dh]);
                }
                // dK += dSᵀ · Q
                tmp.clear();
                tmp.resize(nk * dh, S::ZERO);
                S::gemm_strided(nk, p, dh, &dp, (1, nk as isize), &data[q0 * width + h * dh..], (w3, 1), &mut tmp, false);
                for j in 0..nk {
                    let dst = (k0 + j) * width + d + h * dh;
                    add_into(&mut gq[dst..dst + dh], &tmp[j * dh..(j + 1) * dh]);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`]: one gradient per recorded value.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not influence it.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<S> {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
