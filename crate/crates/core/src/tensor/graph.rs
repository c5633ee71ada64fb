//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape from the loss towards the leaves in reverse insertion order, which is
//! a valid reverse topological order because inputs always precede outputs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BoolMatrix, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A block of consecutive rows that attend among themselves under `allowed`.
#[derive(Debug, Clone)]
pub struct AttentionSegment {
    pub offset: usize,
    pub allowed: Arc<BoolMatrix>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    MaskedSoftmax {
        x: Var,
        allowed: Arc<BoolMatrix>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttentionSegment>,
        probs: Vec<Vec<T>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    HardestNegativeBce {
        sim: Var,
        tau: T,
        hardest: Vec<usize>,
    },
}

/// Recorded computation. Confined to one thread; build a fresh graph per step.
pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
    recording: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// Graph that never records backward state; `backward` on it fails.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad && self.recording);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let requires = self.recording && inputs.iter().any(|v| self.requires[v.0]);
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(if requires { op } else { Op::Leaf });
        Ok(Var(self.values.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.values[v.0];
        if t.shape().len() != 2 {
            return Err(Error::dim(
                op,
                format!("expected rank 2, got {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.values[a.0].data(),
            (k as isize, 1),
            self.values[b.0].data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            &[a, b],
        )
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.values[a.0].data(),
            (k as isize, 1),
            self.values[b.0].data(),
            (1, k as isize),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            "matmul_nt",
            value,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        let n = tx.cols();
        if tb.len() != n {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow { x, bias }, &[x, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.values[x.0].map(|v| v * factor);
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.values[x.0].data() {
            acc += v;
        }
        self.push("sum", Tensor::scalar(acc), Op::Sum { x }, &[x])
    }

    /// Tanh-approximated GeLU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.values[x.0].map(gelu_scalar);
        self.push("gelu", value, Op::Gelu { x }, &[x])
    }

    /// Normalizes over the last axis with epsilon 1e-6, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let h = tx.cols();
        if self.values[gain.0].len() != h || self.values[bias.0].len() != h {
            return Err(Error::dim(
                "layer_norm",
                format!("last extent {h} vs affine params"),
            ));
        }
        let g = self.values[gain.0].data();
        let b = self.values[bias.0].data();
        let eps = T::lit(LAYER_NORM_EPS);
        let hn = T::from_usize(h).unwrap();
        let rows = tx.len() / h.max(1);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * h..(r + 1) * h];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= hn;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= hn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.matrix_dims("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::IdOutOfRange(format!("embedding id {bad} >= {v}")));
        }
        let t = self.values[table.0].data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            out.extend_from_slice(&t[id * h..(id + 1) * h]);
        }
        let value = Tensor::new(vec![ids.len(), h], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, h) = self.matrix_dims("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IdOutOfRange(format!("row {bad} >= {n}")));
        }
        let t = self.values[x.0].data();
        let mut out = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            out.extend_from_slice(&t[r * h..(r + 1) * h]);
        }
        let value = Tensor::new(vec![rows.len(), h], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Mean of the listed rows of `x`, one output row per group.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (n, h) = self.matrix_dims("group_mean", x)?;
        let t = self.values[x.0].data();
        let mut out = vec![T::zero(); groups.len() * h];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::Invalid(format!("group {g} is empty")));
            }
            let acc = &mut out[g * h..(g + 1) * h];
            for &r in rows {
                if r >= n {
                    return Err(Error::IdOutOfRange(format!("row {r} >= {n}")));
                }
                for (o, &v) in acc.iter_mut().zip(&t[r * h..(r + 1) * h]) {
                    *o += v;
                }
            }
            let cnt = T::from_usize(rows.len()).unwrap();
            acc.iter_mut().for_each(|o| *o /= cnt);
        }
        let value = Tensor::new(vec![groups.len(), h], out)?;
        self.push(
            "group_mean",
            value,
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
            },
            &[x],
        )
    }

    /// Row-wise softmax restricted to `allowed`; disallowed entries are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, allowed: Arc<BoolMatrix>) -> Result<Var> {
        let (r, c) = self.matrix_dims("masked_softmax", x)?;
        if r != allowed.size() || c != allowed.size() {
            return Err(Error::dim(
                "masked_softmax",
                format!("scores [{r},{c}] vs mask {}", allowed.size()),
            ));
        }
        let t = self.values[x.0].data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(
                &t[i * c..(i + 1) * c],
                allowed.row(i),
                &mut out[i * c..(i + 1) * c],
            )
            .map_err(|_| Error::DegenerateRow { row: i })?;
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(
            "masked_softmax",
            value,
            Op::MaskedSoftmax { x, allowed },
            &[x],
        )
    }

    /// Multi-head scaled dot-product attention over packed rows.
    ///
    /// `q`, `k`, `v` are `[N, H]`; each segment covers rows
    /// `offset..offset + allowed.size()` and only attends within itself.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttentionSegment>,
    ) -> Result<Var> {
        let (n, h) = self.matrix_dims("attention", q)?;
        if self.values[k.0].shape() != [n, h] || self.values[v.0].shape() != [n, h] {
            return Err(Error::dim("attention", "q/k/v shapes differ"));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("hidden {h} not divisible by {heads} heads"),
            ));
        }
        let d = h / heads;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.values[q.0].data(),
            self.values[k.0].data(),
            self.values[v.0].data(),
        );
        let mut out = vec![T::zero(); n * h];
        let mut probs = Vec::with_capacity(segments.len());
        let mut scores = Vec::new();
        for seg in &segments {
            let len = seg.allowed.size();
            if seg.offset + len > n {
                return Err(Error::dim("attention", "segment exceeds rows"));
            }
            if let Some(row) = seg.allowed.first_empty_row() {
                return Err(Error::DegenerateRow { row });
            }
            let mut p = vec![T::zero(); heads * len * len];
            scores.resize(len, T::zero());
            for hd in 0..heads {
                let cols = hd * d..(hd + 1) * d;
                for i in 0..len {
                    let qi = &qd[(seg.offset + i) * h..][cols.clone()];
                    let mask = seg.allowed.row(i);
                    for j in 0..len {
                        if mask[j] {
                            let kj = &kd[(seg.offset + j) * h..][cols.clone()];
                            scores[j] = dot(qi, kj) * scale;
                        }
                    }
                    let prow = &mut p[(hd * len + i) * len..(hd * len + i + 1) * len];
                    softmax_row(&scores, mask, prow)
                        .map_err(|_| Error::DegenerateRow { row: i })?;
                    let orow = &mut out[(seg.offset + i) * h..][cols.clone()];
                    for j in 0..len {
                        if mask[j] {
                            let pj = prow[j];
                            let vj = &vd[(seg.offset + j) * h..][cols.clone()];
                            for (o, &vv) in orow.iter_mut().zip(vj) {
                                *o += pj * vv;
                            }
                        }
                    }
                }
            }
            probs.push(p);
        }
        let value = Tensor::new(vec![n, h], out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, vsz) = self.matrix_dims("cross_entropy", logits)?;
        if n != labels.len() || n == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{n} logit rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= vsz) {
            return Err(Error::Label {
                label: bad,
                vocab: vsz,
            });
        }
        let t = self.values[logits.0].data();
        let mut probs = vec![T::zero(); n * vsz];
        let mut total = T::zero();
        for i in 0..n {
            let row = &t[i * vsz..(i + 1) * vsz];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            let prow = &mut probs[i * vsz..(i + 1) * vsz];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - m).exp();
                s += *p;
            }
            prow.iter_mut().for_each(|p| *p /= s);
            total += m + s.ln() - row[labels[i]];
        }
        let loss = total / T::from_usize(n).unwrap();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Inverted dropout; the identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Invalid(format!("dropout rate {rate} must be < 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - rate));
        let tx = &self.values[x.0];
        let mask: Vec<T> = (0..tx.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, h) = self.matrix_dims("l2_normalize_rows", x)?;
        let t = self.values[x.0].data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![T::zero(); n * h];
        for i in 0..n {
            let row = &t[i * h..(i + 1) * h];
            let nrm = dot(row, row).sqrt();
            if nrm <= T::zero() {
                return Err(Error::ZeroNorm { index: i });
            }
            norms.push(nrm);
            for (o, &v) in out[i * h..(i + 1) * h].iter_mut().zip(row) {
                *o = v / nrm;
            }
        }
        let value = Tensor::new(vec![n, h], out)?;
        self.push(
            "l2_normalize_rows",
            value,
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Hardest-negative binary cross-entropy over a square similarity matrix.
    ///
    /// Row `i` contributes `BCE(σ(s_ii/τ), 1) + BCE(σ(s_ij*/τ), 0)` with `j*`
    /// the most similar off-diagonal column (lowest index on ties). Averaged
    /// over rows.
    pub fn hardest_negative_bce(&mut self, sim: Var, tau: T) -> Result<Var> {
        let (n, c) = self.matrix_dims("hardest_negative_bce", sim)?;
        if n != c || n < 2 {
            return Err(Error::dim(
                "hardest_negative_bce",
                format!("need square n>=2, got [{n},{c}]"),
            ));
        }
        let t = self.values[sim.0].data();
        let mut hardest = Vec::with_capacity(n);
        let mut total = T::zero();
        for i in 0..n {
            let row = &t[i * n..(i + 1) * n];
            let mut best = if i == 0 { 1 } else { 0 };
            for j in 0..n {
                if j != i && row[j] > row[best] {
                    best = j;
                }
            }
            hardest.push(best);
            total += softplus(-row[i] / tau) + softplus(row[best] / tau);
        }
        let loss = total / T::from_usize(n).unwrap();
        self.push(
            "hardest_negative_bce",
            Tensor::scalar(loss),
            Op::HardestNegativeBce { sim, tau, hardest },
            &[sim],
        )
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already populated; call zero_grad first".into(),
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        if !self.requires[loss.0] {
            return Err(Error::Backward(
                "loss is detached from every tracked leaf".into(),
            ));
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backprop(i, &op, &grad);
            self.ops[i] = op;
            self.grads[i] = Some(grad);
        }
        self.backward_done = true;
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&mut self, v: Var, contrib: &[T]) {
        if let Some(buf) = self.grad_buf(v) {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
    }

    fn backprop(&mut self, node: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.values[a.0].shape()[0], self.values[a.0].shape()[1]);
                let n = self.values[node].shape()[1];
                let (ki, ni) = (k as isize, n as isize);
                if self.requires[a.0] {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC · Bᵀ (or dC · B when B was transposed)
                    let bs = if *trans_b { (ki, 1) } else { (1, ni) };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (ni, 1),
                        self.values[b.0].data(),
                        bs,
                        T::zero(),
                        &mut da,
                        (ki, 1),
                    );
                    self.accumulate(*a, &da);
                }
                if self.requires[b.0] {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            g,
                            (1, ni),
                            self.values[a.0].data(),
                            (ki, 1),
                            T::zero(),
                            &mut db,
                            (ki, 1),
                        );
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            self.values[a.0].data(),
                            (1, ki),
                            g,
                            (ni, 1),
                            T::zero(),
                            &mut db,
                            (ni, 1),
                        );
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddRow { x, bias } => {
                self.accumulate(*x, g);
                let n = self.values[bias.0].len();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.values[b.0].data())
                    .map(|(&gi, &bi)| gi * bi)
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gi, &ai)| gi * ai)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { x, factor } => {
                let dx: Vec<T> = g.iter().map(|&gi| gi * *factor).collect();
                self.accumulate(*x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.values[x.0].len()];
                self.accumulate(*x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(&gi, &xi)| gi * gelu_grad(xi))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let h = self.values[gain.0].len();
                let gd = self.values[gain.0].data().to_vec();
                let hn = T::from_usize(h).unwrap();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgain = vec![T::zero(); h];
                let mut dbias = vec![T::zero(); h];
                let mut dxh = vec![T::zero(); h];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * h..(r + 1) * h];
                    let xr = &xhat[r * h..(r + 1) * h];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..h {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        dxh[j] = gr[j] * gd[j];
                        mean_d += dxh[j];
                        mean_dx += dxh[j] * xr[j];
                    }
                    mean_d /= hn;
                    mean_dx /= hn;
                    for j in 0..h {
                        dx[r * h + j] = rs * (dxh[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::Embedding { table, ids } => {
                let h = self.values[table.0].cols();
                if let Some(buf) = self.grad_buf(*table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for (b, &v) in buf[id * h..(id + 1) * h]
                            .iter_mut()
                            .zip(&g[i * h..(i + 1) * h])
                        {
                            *b += v;
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let h = self.values[x.0].cols();
                if let Some(buf) = self.grad_buf(*x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (b, &v) in buf[r * h..(r + 1) * h]
                            .iter_mut()
                            .zip(&g[i * h..(i + 1) * h])
                        {
                            *b += v;
                        }
                    }
                }
            }
            Op::GroupMean { x, groups } => {
                let h = self.values[x.0].cols();
                if let Some(buf) = self.grad_buf(*x) {
                    for (gi, rows) in groups.iter().enumerate() {
                        let cnt = T::from_usize(rows.len()).unwrap();
                        for &r in rows {
                            for (b, &v) in buf[r * h..(r + 1) * h]
                                .iter_mut()
                                .zip(&g[gi * h..(gi + 1) * h])
                            {
                                *b += v / cnt;
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, allowed } => {
                let n = allowed.size();
                let y = self.values[node].data();
                let mut dx = vec![T::zero(); n * n];
                for i in 0..n {
                    softmax_row_backward(
                        &y[i * n..(i + 1) * n],
                        &g[i * n..(i + 1) * n],
                        allowed.row(i),
                        &mut dx[i * n..(i + 1) * n],
                    );
                }
                self.accumulate(*x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, segments, probs, g);
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dk);
                self.accumulate(*v, &dv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let vsz = self.values[logits.0].cols();
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * vsz + l] -= scale;
                }
                self.accumulate(*logits, &dx);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<T> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                self.accumulate(*x, &dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let h = self.values[x.0].cols();
                let y = self.values[node].data();
                let mut dx = vec![T::zero(); y.len()];
                for (i, &nrm) in norms.iter().enumerate() {
                    let yr = &y[i * h..(i + 1) * h];
                    let gr = &g[i * h..(i + 1) * h];
                    let proj = dot(yr, gr);
                    for j in 0..h {
                        dx[i * h + j] = (gr[j] - yr[j] * proj) / nrm;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::HardestNegativeBce { sim, tau, hardest } => {
                let n = hardest.len();
                let s = self.values[sim.0].data();
                let scale = g[0] / T::from_usize(n).unwrap() / *tau;
                let mut dx = vec![T::zero(); n * n];
                for (i, &j) in hardest.iter().enumerate() {
                    dx[i * n + i] -= sigmoid(-s[i * n + i] / *tau) * scale;
                    dx[i * n + j] += sigmoid(s[i * n + j] / *tau) * scale;
                }
                self.accumulate(*sim, &dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttentionSegment],
        probs: &[Vec<T>],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let h = self.values[q.0].cols();
        let d = h / heads;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.values[q.0].data(),
            self.values[k.0].data(),
            self.values[v.0].data(),
        );
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = Vec::new();
        for (seg, p) in segments.iter().zip(probs) {
            let len = seg.allowed.size();
            let o = seg.offset;
            dp.resize(len, T::zero());
            for hd in 0..heads {
                let c0 = hd * d;
                for i in 0..len {
                    let mask = seg.allowed.row(i);
                    let prow = &p[(hd * len + i) * len..(hd * len + i + 1) * len];
                    let gi = &g[(o + i) * h + c0..(o + i) * h + c0 + d];
                    let mut inner = T::zero();
                    for j in 0..len {
                        if mask[j] {
                            let vj = &vd[(o + j) * h + c0..(o + j) * h + c0 + d];
                            dp[j] = dot(gi, vj);
                            inner += prow[j] * dp[j];
                            let dvj = &mut dv[(o + j) * h + c0..(o + j) * h + c0 + d];
                            for (a, &b) in dvj.iter_mut().zip(gi) {
                                *a += prow[j] * b;
                            }
                        }
                    }
                    for j in 0..len {
                        if mask[j] {
                            let ds = prow[j] * (dp[j] - inner) * scale;
                            let kj = &kd[(o + j) * h + c0..(o + j) * h + c0 + d];
                            let dqi = &mut dq[(o + i) * h + c0..(o + i) * h + c0 + d];
                            for (a, &b) in dqi.iter_mut().zip(kj) {
                                *a += ds * b;
                            }
                            let qi = &qd[(o + i) * h + c0..(o + i) * h + c0 + d];
                            let dkj = &mut dk[(o + j) * h + c0..(o + j) * h + c0 + d];
                            for (a, &b) in dkj.iter_mut().zip(qi) {
                                *a += ds * b;
                            }
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let u = c * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let a = T::lit(GELU_C);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Softmax over the allowed entries of one row. Errs when nothing is allowed.
pub(crate) fn softmax_row<T: Scalar>(
    scores: &[T],
    allowed: &[bool],
    out: &mut [T],
) -> std::result::Result<(), ()> {
    let mut m = T::neg_infinity();
    for (&s, &a) in scores.iter().zip(allowed) {
        if a && s > m {
            m = s;
        }
    }
    if m == T::neg_infinity() {
        return Err(());
    }
    let mut sum = T::zero();
    for ((o, &s), &a) in out.iter_mut().zip(scores).zip(allowed) {
        if a {
            *o = (s - m).exp();
            sum += *o;
        } else {
            *o = T::zero();
        }
    }
    for (o, &a) in out.iter_mut().zip(allowed) {
        if a {
            *o /= sum;
        }
    }
    Ok(())
}

fn softmax_row_backward<T: Scalar>(y: &[T], g: &[T], allowed: &[bool], dx: &mut [T]) {
    let mut inner = T::zero();
    for j in 0..y.len() {
        if allowed[j] {
            inner += y[j] * g[j];
        }
    }
    for j in 0..y.len() {
        if allowed[j] {
            dx[j] = y[j] * (g[j] - inner);
        }
    }
}
