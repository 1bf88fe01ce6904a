//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every kernel executed during a forward pass together with whatever
//! it needs for its backward rule. [`Tape::backward`] walks the record once in reverse.
//! Handles into the tape are plain indices ([`Var`]); a tape is meant to live for exactly
//! one forward/backward pair.

use crate::error::{Error, Result};

use super::kernels;
use super::real::{real, Real};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows forming one causal sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
    },
    GateSelect {
        g: Var,
        selections: Vec<Vec<usize>>,
        renormalize: bool,
    },
    ScaleRows {
        x: Var,
        w: Var,
        col: usize,
    },
    MaskedNll {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    AbsSum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    checked: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf that was created with `requires_grad`. Leaves the loss does not
    /// depend on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => kernels::add_assign(g, &contrib),
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Real> Tape<T> {
    /// A tape in checked mode: every kernel output is scanned for NaN/Inf.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
            consumed: false,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| op_name(&n.op)).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Gradients are produced for it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        let value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("tensor invariant");
        self.nodes.push(Node {
            value,
            needs_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: tensor.with_requires_grad(false),
            needs_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite {
                op: op_name(&op).to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], c)?, &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let c = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], c)?, &[a, b], Op::MatMulNT(a, b))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_tn")?;
        let (m2, n) = self.dims2(b, "matmul_tn")?;
        if m != m2 {
            return Err(Error::Shape {
                op: "matmul_tn",
                lhs: vec![m, k],
                rhs: vec![m2, n],
            });
        }
        let c = kernels::matmul_tn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![k, n], c)?, &[a, b], Op::MatMulTN(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let t = kernels::transpose(self.value(x).data(), r, c);
        self.push(Tensor::new(vec![c, r], t)?, &[x], Op::Transpose(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).data().to_vec();
        kernels::add_assign(&mut out, self.value(b).data());
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f: T = real(factor);
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * f).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, &[x], Op::Scale(x, f))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| kernels::silu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, &[x], Op::Silu(x))
    }

    /// Softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if n == 0 || t.rank() == 0 {
            return Err(Error::Rank {
                op: "softmax_lastdim",
                expected: 1,
                shape: t.shape().to_vec(),
            });
        }
        let out = kernels::softmax_rows(t.data(), n);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, &[x], Op::Softmax(x))
    }

    /// Row-wise RMS normalization followed by a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x, "rms_norm")?;
        let g = self.value(gain);
        if g.numel() != d {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: vec![m, d],
                rhs: g.shape().to_vec(),
            });
        }
        let eps: T = real(eps);
        let dn: T = real(d as f64);
        let xs = self.value(x).data();
        let gs = g.data();
        let mut out = vec![T::zero(); m * d];
        let mut inv_rms = Vec::with_capacity(m);
        for (row, orow) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut ms = T::zero();
            for &v in row {
                ms += v * v;
            }
            let inv = T::one() / (ms / dn + eps).sqrt();
            for ((o, &v), &gv) in orow.iter_mut().zip(row).zip(gs) {
                *o = v * inv * gv;
            }
            inv_rms.push(inv);
        }
        self.push(
            Tensor::new(vec![m, d], out)?,
            &[x, gain],
            Op::RmsNorm { x, gain, inv_rms },
        )
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "gather_rows")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary {
                    id: id as u32,
                    vocab: rows,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Causal multi-head attention over packed sequences. `q`, `k`, `v` are `M×d` with the
    /// rows of each [`Segment`] forming one sequence; scores are scaled by `1/sqrt(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (m, d) = self.dims2(q, "attention")?;
        for other in [k, v] {
            self.same_shape("attention", q, other)?;
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != m || segments.iter().any(|s| s.start + s.len > m) {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![m, d],
                rhs: vec![covered],
            });
        }
        let dh = d / heads;
        let scale: T = real(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); m * d];
        let total: usize = segments.iter().map(|s| s.len * s.len * heads).sum();
        let mut probs = vec![T::zero(); total];
        let mut base = 0;
        let mut scores = Vec::new();
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let off = h * dh;
                for t in 0..l {
                    let qt = &qs[(seg.start + t) * d + off..][..dh];
                    scores.clear();
                    for s in 0..=t {
                        let ks_row = &ks[(seg.start + s) * d + off..][..dh];
                        let mut dot = T::zero();
                        for (&a, &b) in qt.iter().zip(ks_row) {
                            dot += a * b;
                        }
                        scores.push(dot * scale);
                    }
                    kernels::softmax_in_place(&mut scores);
                    let prow = &mut probs[base + (h * l + t) * l..][..l];
                    prow[..=t].copy_from_slice(&scores);
                    let orow = &mut out[(seg.start + t) * d + off..][..dh];
                    for (s, &p) in scores.iter().enumerate() {
                        let vrow = &vs[(seg.start + s) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
            base += l * l * heads;
        }
        self.push(
            Tensor::new(vec![m, d], out)?,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Keeps the gate entries listed in `selections[row]` and zeroes the rest; optionally
    /// renormalizes the kept entries of each row to sum to one.
    pub fn gate_select(
        &mut self,
        g: Var,
        selections: &[Vec<usize>],
        renormalize: bool,
    ) -> Result<Var> {
        let (m, e) = self.dims2(g, "gate_select")?;
        if selections.len() != m || selections.iter().flatten().any(|&i| i >= e) {
            return Err(Error::Shape {
                op: "gate_select",
                lhs: vec![m, e],
                rhs: vec![selections.len()],
            });
        }
        let src = self.value(g).data();
        let mut out = vec![T::zero(); m * e];
        for (row, sel) in selections.iter().enumerate() {
            let z = if renormalize {
                sel.iter().map(|&i| src[row * e + i]).sum::<T>()
            } else {
                T::one()
            };
            for &i in sel {
                out[row * e + i] = src[row * e + i] / z;
            }
        }
        self.push(
            Tensor::new(vec![m, e], out)?,
            &[g],
            Op::GateSelect {
                g,
                selections: selections.to_vec(),
                renormalize,
            },
        )
    }

    /// `out[t, :] = w[t, col] · x[t, :]`.
    pub fn scale_rows(&mut self, x: Var, w: Var, col: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "scale_rows")?;
        let (mw, e) = self.dims2(w, "scale_rows")?;
        if m != mw || col >= e {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: vec![m, n],
                rhs: vec![mw, e],
            });
        }
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        let mut out = Vec::with_capacity(m * n);
        for (t, row) in xs.chunks_exact(n.max(1)).enumerate().take(m) {
            let s = ws[t * e + col];
            out.extend(row.iter().map(|&v| s * v));
        }
        self.push(Tensor::new(vec![m, n], out)?, &[x, w], Op::ScaleRows { x, w, col })
    }

    /// Mean over masked rows of `−log softmax(logits[row])[targets[row]]`.
    pub fn masked_nll(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, vocab) = self.dims2(logits, "masked_nll")?;
        if targets.len() != m || mask.len() != m {
            return Err(Error::Shape {
                op: "masked_nll",
                lhs: vec![m, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::EmptyTarget);
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(count * vocab);
        let mut total = T::zero();
        for (row, (&t, &on)) in targets.iter().zip(mask).enumerate() {
            if !on {
                continue;
            }
            if t >= vocab {
                return Err(Error::Vocabulary {
                    id: t as u32,
                    vocab,
                });
            }
            let r = &src[row * vocab..(row + 1) * vocab];
            let lse = kernels::log_sum_exp(r);
            total += lse - r[t];
            probs.extend(r.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / real(count as f64);
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::MaskedNll {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// `Σ |x|`; the subgradient at exactly zero is taken as zero.
    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum::<T>();
        self.push(Tensor::scalar(s), &[x], Op::AbsSum(x))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::state(
                "backward already ran on this tape; record a new forward pass first",
            ));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: lv.shape().to_vec(),
            });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads, &mut leaf_grads, i)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut [Option<Tensor<T>>],
        index: usize,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {
                leaf_grads[index] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2("matmul")?;
                let n = self.value(b).cols();
                if self.wants(a) {
                    let da = kernels::matmul_nt(&g, self.value(b).data(), m, n, k);
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = kernels::matmul_tn(self.value(a).data(), &g, m, k, n);
                    accumulate(grads, b, db);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = self.value(a).dims2("matmul_nt")?;
                let n = self.value(b).rows();
                if self.wants(a) {
                    let da = kernels::matmul(&g, self.value(b).data(), m, n, k);
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = kernels::matmul_tn(&g, self.value(a).data(), m, n, k);
                    accumulate(grads, b, db);
                }
            }
            &Op::MatMulTN(a, b) => {
                let (m, k) = self.value(a).dims2("matmul_tn")?;
                let n = self.value(b).cols();
                if self.wants(a) {
                    let da = kernels::matmul_nt(self.value(b).data(), &g, m, n, k);
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = kernels::matmul(self.value(a).data(), &g, m, k, n);
                    accumulate(grads, b, db);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2("transpose")?;
                accumulate(grads, x, kernels::transpose(&g, c, r));
            }
            &Op::Add(a, b) => {
                if self.wants(a) && self.wants(b) {
                    accumulate(grads, a, g.clone());
                    accumulate(grads, b, g);
                } else if self.wants(a) {
                    accumulate(grads, a, g);
                } else {
                    accumulate(grads, b, g);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let da = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    accumulate(grads, b, db);
                }
            }
            &Op::Scale(x, f) => {
                accumulate(grads, x, g.iter().map(|&gv| gv * f).collect());
            }
            &Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &xv)| gv * kernels::silu_grad(xv))
                    .collect();
                accumulate(grads, x, dx);
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let (m, d) = self.value(x).dims2("rms_norm")?;
                let xs = self.value(x).data();
                let gs = self.value(gain).data();
                let dn: T = real(d as f64);
                if self.wants(x) {
                    let mut dx = vec![T::zero(); m * d];
                    for row in 0..m {
                        let inv = inv_rms[row];
                        let xr = &xs[row * d..(row + 1) * d];
                        let gr = &g[row * d..(row + 1) * d];
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += gr[j] * gs[j] * xr[j];
                        }
                        let coef = inv * inv * inv * dot / dn;
                        for j in 0..d {
                            dx[row * d + j] = inv * gr[j] * gs[j] - xr[j] * coef;
                        }
                    }
                    accumulate(grads, x, dx);
                }
                if self.wants(gain) {
                    let mut dg = vec![T::zero(); d];
                    for row in 0..m {
                        let inv = inv_rms[row];
                        for j in 0..d {
                            dg[j] += g[row * d + j] * xs[row * d + j] * inv;
                        }
                    }
                    accumulate(grads, gain, dg);
                }
            }
            Op::Gather { table, ids } => {
                let (rows, d) = self.value(*table).dims2("gather_rows")?;
                let mut dt = vec![T::zero(); rows * d];
                for (i, &id) in ids.iter().enumerate() {
                    kernels::add_assign(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                }
                accumulate(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (m, d) = self.value(q).dims2("attention")?;
                let dh = d / heads;
                let scale: T = real(1.0 / (dh as f64).sqrt());
                let (qs, ks, vs) = (
                    self.value(q).data(),
                    self.value(k).data(),
                    self.value(v).data(),
                );
                let mut dq = vec![T::zero(); m * d];
                let mut dk = vec![T::zero(); m * d];
                let mut dv = vec![T::zero(); m * d];
                let mut dp = Vec::new();
                let mut base = 0;
                for seg in segments {
                    let l = seg.len;
                    for h in 0..heads {
                        let off = h * dh;
                        for t in 0..l {
                            let prow = &probs[base + (h * l + t) * l..][..=t];
                            let gt = &g[(seg.start + t) * d + off..][..dh];
                            dp.clear();
                            for (s, &p) in prow.iter().enumerate() {
                                let vrow = &vs[(seg.start + s) * d + off..][..dh];
                                let mut dot = T::zero();
                                for (&a, &b) in gt.iter().zip(vrow) {
                                    dot += a * b;
                                }
                                dp.push(dot);
                                let dvrow = &mut dv[(seg.start + s) * d + off..][..dh];
                                for (o, &gv) in dvrow.iter_mut().zip(gt) {
                                    *o += p * gv;
                                }
                            }
                            let mut mix = T::zero();
                            for (&p, &dpv) in prow.iter().zip(&dp) {
                                mix += p * dpv;
                            }
                            let qt = &qs[(seg.start + t) * d + off..][..dh];
                            for (s, (&p, &dpv)) in prow.iter().zip(&dp).enumerate() {
                                let ds = p * (dpv - mix) * scale;
                                let krow = &ks[(seg.start + s) * d + off..][..dh];
                                let dqrow = &mut dq[(seg.start + t) * d + off..][..dh];
                                for (o, &kv) in dqrow.iter_mut().zip(krow) {
                                    *o += ds * kv;
                                }
                                let dkrow = &mut dk[(seg.start + s) * d + off..][..dh];
                                for (o, &qv) in dkrow.iter_mut().zip(qt) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                    base += l * l * heads;
                }
                if self.wants(q) {
                    accumulate(grads, q, dq);
                }
                if self.wants(k) {
                    accumulate(grads, k, dk);
                }
                if self.wants(v) {
                    accumulate(grads, v, dv);
                }
            }
            Op::GateSelect {
                g: gv,
                selections,
                renormalize,
            } => {
                let (m, e) = self.value(*gv).dims2("gate_select")?;
                let src = self.value(*gv).data();
                let mut dg = vec![T::zero(); m * e];
                for (row, sel) in selections.iter().enumerate() {
                    if *renormalize {
                        let z: T = sel.iter().map(|&i| src[row * e + i]).sum();
                        let weighted: T = sel
                            .iter()
                            .map(|&i| g[row * e + i] * src[row * e + i])
                            .sum();
                        for &f in sel {
                            dg[row * e + f] = g[row * e + f] / z - weighted / (z * z);
                        }
                    } else {
                        for &i in sel {
                            dg[row * e + i] = g[row * e + i];
                        }
                    }
                }
                accumulate(grads, *gv, dg);
            }
            &Op::ScaleRows { x, w, col } => {
                let (m, n) = self.value(x).dims2("scale_rows")?;
                let e = self.value(w).cols();
                let (xs, ws) = (self.value(x).data(), self.value(w).data());
                if self.wants(x) {
                    let mut dx = Vec::with_capacity(m * n);
                    for t in 0..m {
                        let s = ws[t * e + col];
                        dx.extend(g[t * n..(t + 1) * n].iter().map(|&gv| s * gv));
                    }
                    accumulate(grads, x, dx);
                }
                if self.wants(w) {
                    let mut dw = vec![T::zero(); m * e];
                    for t in 0..m {
                        let mut dot = T::zero();
                        for (&gv, &xv) in g[t * n..(t + 1) * n].iter().zip(&xs[t * n..(t + 1) * n])
                        {
                            dot += gv * xv;
                        }
                        dw[t * e + col] = dot;
                    }
                    accumulate(grads, w, dw);
                }
            }
            Op::MaskedNll {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let (m, vocab) = self.value(*logits).dims2("masked_nll")?;
                let coef = g[0] / real(*count as f64);
                let mut dl = vec![T::zero(); m * vocab];
                let mut k = 0;
                for row in 0..m {
                    if !mask[row] {
                        continue;
                    }
                    let p = &probs[k * vocab..(k + 1) * vocab];
                    let dr = &mut dl[row * vocab..(row + 1) * vocab];
                    for (d, &pv) in dr.iter_mut().zip(p) {
                        *d = pv * coef;
                    }
                    dr[targets[row]] -= coef;
                    k += 1;
                }
                accumulate(grads, *logits, dl);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::AbsSum(x) => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .map(|&v| {
                        if v > T::zero() {
                            g[0]
                        } else if v < T::zero() {
                            -g[0]
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, x, dx);
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::MatMulTN(..) => "matmul_tn",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Silu(..) => "silu",
        Op::Softmax(..) => "softmax_lastdim",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Gather { .. } => "gather_rows",
        Op::Attention { .. } => "causal_attention",
        Op::GateSelect { .. } => "gate_select",
        Op::ScaleRows { .. } => "scale_rows",
        Op::MaskedNll { .. } => "masked_nll",
        Op::Sum(..) => "sum",
        Op::AbsSum(..) => "abs_sum",
    }
}
