//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Only the
//! operations the three transformer stacks need are provided; the heavier ones
//! (attention, RMS norm, rotary embedding, cross-entropy) are fused with
//! hand-derived gradients.

use std::collections::BTreeMap;

use super::{AttentionMask, ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Param(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        mask: AttentionMask,
        probs: Vec<f64>,
        offsets: Vec<usize>,
    },
    SelectRows {
        sources: Vec<Var>,
        picks: Vec<Option<(usize, usize)>>,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        classes: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    leaves: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    /// Gradient of a leaf created with [`Graph::input`]. Zero-filled when the
    /// leaf was not reachable from the loss.
    pub fn input(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `c = a·b (+ beta·c)` with optional logical transposes of row-major inputs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Leaf tensor; gradients are reported for it when `requires_grad`.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Borrowed parameter leaf.
    pub fn param(&mut self, store: &'p ParameterStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let bt = self.value(b);
        if bt.shape().len() != 2 || bt.shape()[0] != k {
            return Err(Error::Dimension(format!(
                "matmul [{m}x{k}] by {:?}",
                bt.shape()
            )));
        }
        let n = bt.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            bt.data(),
            false,
            &mut out,
            0.0,
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| x * c).collect(),
        };
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| x * sigmoid(x)).collect(),
        };
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(
            Tensor {
                shape: vec![1],
                data: vec![s],
            },
            Op::Sum(a),
            &[a],
        )
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (rows, d) = dims2(self.value(x));
        if d == 0 || self.value(w).numel() != d {
            return Err(Error::Dimension(format!(
                "rms_norm weight {:?} for last dim {d}",
                self.value(w).shape()
            )));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = row[j] * inv * ws[j];
            }
            inv_rms.push(inv);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, w, inv_rms }, &[x, w]))
    }

    /// Rotary position embedding over interleaved pairs inside each head.
    pub fn rope(&mut self, x: Var, n_heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let (rows, d) = dims2(self.value(x));
        if positions.len() != rows || n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0
        {
            return Err(Error::Dimension(format!(
                "rope over [{rows}x{d}] with {n_heads} heads and {} positions",
                positions.len()
            )));
        }
        let hd = d / n_heads;
        let half = hd / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let xs = self.value(x).data();
        let mut out = xs.to_vec();
        for r in 0..rows {
            for h in 0..n_heads {
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let j = r * d + h * hd + 2 * i;
                    let (x0, x1) = (xs[j], xs[j + 1]);
                    out[j] = x0 * c - x1 * s;
                    out[j + 1] = x0 * s + x1 * c;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Rope {
                x,
                n_heads,
                cos,
                sin,
            },
            &[x],
        ))
    }

    /// Multi-head scaled dot-product attention, `softmax(q kᵀ/√d_head) v`,
    /// restricted per query to the mask's key range.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (tq, d) = dims2(self.value(q));
        let (tk, dk) = dims2(self.value(k));
        if dk != d || self.value(v).shape() != self.value(k).shape() {
            return Err(Error::Dimension("attention q/k/v width mismatch".into()));
        }
        if mask.len() != tq || (tk > 0 && mask.max_key() >= tk) || tk == 0 {
            return Err(Error::Dimension(format!(
                "mask with {} queries up to key {} for [{tq}] queries and [{tk}] keys",
                mask.len(),
                mask.max_key()
            )));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Dimension(format!("{d} not divisible into {n_heads} heads")));
        }
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; tq * d];
        let mut offsets = Vec::with_capacity(tq + 1);
        let mut probs = Vec::new();
        for i in 0..tq {
            offsets.push(probs.len());
            let (lo, hi) = mask.range(i);
            let n = hi - lo + 1;
            for h in 0..n_heads {
                let qrow = &qs[i * d + h * hd..i * d + (h + 1) * hd];
                let start = probs.len();
                let mut max = f64::NEG_INFINITY;
                for j in lo..=hi {
                    let krow = &ks[j * d + h * hd..j * d + (h + 1) * hd];
                    let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(s);
                    probs.push(s);
                }
                let mut z = 0.0;
                for p in &mut probs[start..] {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let orow = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
                for (jj, p) in probs[start..start + n].iter_mut().enumerate() {
                    *p /= z;
                    let j = lo + jj;
                    let vrow = &vs[j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += *p * vv;
                    }
                }
            }
        }
        offsets.push(probs.len());
        let t = Tensor::matrix(tq, d, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                mask: mask.clone(),
                probs,
                offsets,
            },
            &[q, k, v],
        ))
    }

    /// Builds a matrix whose rows are picked from `sources` (all with the same
    /// width); `None` yields a zero row.
    pub fn select_rows(
        &mut self,
        sources: &[Var],
        picks: &[Option<(usize, usize)>],
    ) -> Result<Var> {
        let d = match sources.first() {
            Some(&s) => self.value(s).cols(),
            None => return Err(Error::Argument("select_rows without sources".into())),
        };
        if sources.iter().any(|&s| self.value(s).cols() != d) {
            return Err(Error::Dimension("select_rows sources differ in width".into()));
        }
        if picks.is_empty() {
            return Err(Error::Dimension("select_rows with no rows".into()));
        }
        let mut out = vec![0.0; picks.len() * d];
        for (r, pick) in picks.iter().enumerate() {
            if let Some((s, row)) = *pick {
                let src = self
                    .value(*sources.get(s).ok_or_else(|| {
                        Error::Argument(format!("select_rows source {s} out of range"))
                    })?);
                if row >= src.rows() {
                    return Err(Error::Argument(format!(
                        "select_rows row {row} of source with {} rows",
                        src.rows()
                    )));
                }
                out[r * d..(r + 1) * d].copy_from_slice(src.row(row));
            }
        }
        let t = Tensor::matrix(picks.len(), d, out)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
            sources,
        ))
    }

    /// Embedding lookup: rows `indices` of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let picks: Vec<_> = indices.iter().map(|&i| Some((0, i))).collect();
        self.select_rows(&[table], &picks)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::Argument("concat_cols without parts".into())),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Dimension("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean cross-entropy of `logits` rows against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let c = self.value(logits).cols();
        self.cross_entropy_over(logits, targets, c)
    }

    /// Cross-entropy restricted to the first `c` columns; the rest take no
    /// part in the softmax and get no gradient.
    pub fn cross_entropy_over(&mut self, logits: Var, targets: &[usize], c: usize) -> Result<Var> {
        let (n, width) = dims2(self.value(logits));
        if c == 0 || c > width {
            return Err(Error::Dimension(format!("{c} classes of {width} logits")));
        }
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Argument(format!("target class {t} >= {c}")));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &ls[r * width..r * width + c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= z;
            }
            loss += -(row[targets[r]] - max - z.ln());
        }
        let t = Tensor::new(vec![1], vec![loss / n as f64])?;
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                classes: c,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    out.leaves.insert(idx, vec![0.0; node.value.get().numel()]);
                }
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            match node.op {
                Op::Param(id) => match out.params.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.params.insert(id, g);
                    }
                },
                Op::Leaf => {
                    out.leaves.insert(idx, g);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.get().numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                if let Some(da) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g, false, self.value(*b).data(), true, da, 1.0);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    gemm(k, m, n, self.value(*a).data(), true, g, false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(dv) = self.grad_buf(grads, *v) {
                        dv.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    let bv = self.value(*b).data();
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    let av = self.value(*a).data();
                    for ((d, x), y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x * c);
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((d, x), &z) in da.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(z);
                        *d += x * s * (1.0 + z * (1.0 - s));
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (rows, d) = dims2(self.value(*x));
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let xr = &xs[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = (0..d).map(|j| gr[j] * ws[j] * xr[j]).sum();
                        let c = inv * inv * inv * dot / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv * gr[j] * ws[j] - xr[j] * c;
                        }
                    }
                }
                if let Some(dw) = self.grad_buf(grads, *w) {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        for j in 0..d {
                            dw[j] += g[r * d + j] * xs[r * d + j] * inv;
                        }
                    }
                }
            }
            Op::Rope {
                x,
                n_heads,
                cos,
                sin,
            } => {
                let (rows, d) = dims2(self.value(*x));
                let hd = d / n_heads;
                let half = hd / 2;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        for h in 0..*n_heads {
                            for i in 0..half {
                                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                                let j = r * d + h * hd + 2 * i;
                                let (g0, g1) = (g[j], g[j + 1]);
                                dx[j] += g0 * c + g1 * s;
                                dx[j + 1] += -g0 * s + g1 * c;
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                mask,
                probs,
                offsets,
            } => self.attention_backward(*q, *k, *v, *n_heads, mask, probs, offsets, g, grads),
            Op::SelectRows { sources, picks } => {
                let d = self.value(sources[0]).cols();
                for (s_idx, &src) in sources.iter().enumerate() {
                    if let Some(ds) = self.grad_buf(grads, src) {
                        for (r, pick) in picks.iter().enumerate() {
                            if let Some((s, row)) = *pick {
                                if s == s_idx {
                                    let dst = &mut ds[row * d..(row + 1) * d];
                                    dst.iter_mut()
                                        .zip(&g[r * d..(r + 1) * d])
                                        .for_each(|(a, b)| *a += b);
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.grad_buf(grads, p) {
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + col..r * total + col + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    col += w;
                }
            }
            Op::CrossEntropy {
                logits,
                classes,
                targets,
                probs,
            } => {
                let (n, width) = dims2(self.value(*logits));
                let c = *classes;
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    let s = g[0] / n as f64;
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            dl[r * width + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        mask: &AttentionMask,
        probs: &[f64],
        offsets: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, d) = dims2(self.value(q));
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut dp = Vec::new();
        for i in 0..tq {
            let (lo, hi) = mask.range(i);
            let n = hi - lo + 1;
            for h in 0..n_heads {
                let p = &probs[offsets[i] + h * n..offsets[i] + (h + 1) * n];
                let go = &g[i * d + h * hd..i * d + (h + 1) * hd];
                dp.clear();
                let mut dot = 0.0;
                for (jj, &pj) in p.iter().enumerate() {
                    let j = lo + jj;
                    let vrow = &vs[j * d + h * hd..j * d + (h + 1) * hd];
                    let dpj: f64 = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    dot += pj * dpj;
                    dp.push(dpj);
                    let dvrow = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                    dvrow.iter_mut().zip(go).for_each(|(a, b)| *a += pj * b);
                }
                let qrow = &qs[i * d + h * hd..i * d + (h + 1) * hd];
                for (jj, &pj) in p.iter().enumerate() {
                    let j = lo + jj;
                    let ds = pj * (dp[jj] - dot) * scale;
                    let krow = &ks[j * d + h * hd..j * d + (h + 1) * hd];
                    let dqrow = &mut dq[i * d + h * hd..i * d + (h + 1) * hd];
                    dqrow.iter_mut().zip(krow).for_each(|(a, b)| *a += ds * b);
                    let dkrow = &mut dk[j * d + h * hd..j * d + (h + 1) * hd];
                    dkrow.iter_mut().zip(qrow).for_each(|(a, b)| *a += ds * b);
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = self.grad_buf(grads, var) {
                buf.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(m(1, 2, &[1.0, 2.0]));
        let b = g.constant(m(2, 1, &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 3, &[0.0; 6]));
        let b = g.constant(m(2, 2, &[0.0; 4]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.input(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.input(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(m(1, 2, &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = g.input(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.input(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn rms_norm_unit_and_zero() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 4, &[1.0; 4]));
        let w = g.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let y = g.rms_norm(x, w, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 4]);

        let x = g.constant(m(1, 2, &[0.0, 0.0]));
        let w = g.constant(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let y = g.rms_norm(x, w, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_position_attention_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(m(1, 4, &[0.3, -1.0, 2.0, 0.1]));
        let k = g.constant(m(1, 4, &[1.0, 1.0, -1.0, 0.0]));
        let v = g.constant(m(1, 4, &[5.0, 6.0, 7.0, 8.0]));
        let o = g
            .attention(q, k, v, 2, &AttentionMask::causal(1))
            .unwrap();
        assert_eq!(g.value(o).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut g = Graph::new();
        let l = g.constant(m(2, 8, &[0.0; 16]));
        let ce = g.cross_entropy(l, &[3, 7]).unwrap();
        assert!((g.value(ce).data()[0] - (8f64).ln()).abs() < 1e-12);
    }
}
