//! Dynamic gradient tape.
//!
//! Every op appends a node holding its forward value. Nodes are only ever
//! appended, so index order is a topological order and `backward` walks it
//! in reverse, visiting each recorded op once.

use super::kernels::{self, Layout};
use super::tensor::Tensor;
use crate::error::{LabError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Softmax {
        a: Var,
        axis: usize,
        causal: bool,
    },
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        base: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
        dims: [usize; 5],
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Operation record for one forward pass; dropped after `backward`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by the last `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- ops

    /// `a·b` where `a: [.., m, k]` and `b` is either a shared `[k, n]`
    /// matrix or carries the same leading batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` with `b: [.., n, k]`; the transpose is read through strides.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(LabError::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (kb, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(LabError::shape("matmul", &sa, &sb));
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(LabError::shape("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let lb = if transpose_b {
            Layout::transposed(k)
        } else {
            Layout::row_major(n)
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        if batched {
            let batches = av.len() / (m * k).max(1);
            for i in 0..batches {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    Layout::row_major(k),
                    &bv[i * k * n..],
                    lb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        } else {
            let rows = av.len() / k.max(1);
            kernels::gemm(rows, k, n, av, Layout::row_major(k), bv, lb, 0.0, &mut out);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::MatMul {
                a,
                b,
                batched,
                transpose_b,
            },
        ))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and is
    /// then repeated over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(LabError::shape("add", sa, sb));
        }
        let bv = self.value(b).data();
        let block = bv.len().max(1);
        let mut data = Vec::with_capacity(self.value(a).numel());
        for chunk in self.value(a).data().chunks(block) {
            data.extend(chunk.iter().zip(bv).map(|(x, y)| x + y));
        }
        let shape = sa.to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(LabError::shape("mul", self.shape(a), self.shape(b)));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul { a, b }))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a);
        let data = value.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Scale { a, factor })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    /// Softmax over the last axis of `[.., seq, seq]` scores where entry
    /// `(i, j)` with `j > i` is excluded (its probability is exactly zero).
    pub fn softmax_causal(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape.len();
        if n < 2 || shape[n - 1] != shape[n - 2] {
            return Err(LabError::shape("softmax_causal", shape, &[]));
        }
        self.softmax_impl(a, n - 1, true)
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, causal: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(LabError::IndexOutOfRange {
                what: "softmax axis",
                index: axis,
                size: shape.len(),
            });
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let mut out = vec![0.0; self.value(a).numel()];
        let x = self.value(a).data();
        if inner == 1 {
            for (r, (xr, yr)) in x.chunks(len).zip(out.chunks_mut(len)).enumerate() {
                let valid = if causal { r % len + 1 } else { len };
                kernels::softmax_row(&xr[..valid], &mut yr[..valid]);
            }
        } else {
            kernels::softmax_axis(x, &mut out, outer, len, inner);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Softmax { a, axis, causal },
        ))
    }

    /// `x / sqrt(mean(x²) + eps) * weight` over the last axis.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight);
        let d = *sx.last().unwrap_or(&0);
        if sw.len() != 1 || sw[0] != d || d == 0 {
            return Err(LabError::shape("rms_norm", &sx, sw));
        }
        let w = self.value(weight).data();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        for row in xv.chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(w).map(|(v, wi)| v * r * wi));
        }
        let rg = self.any_grad(&[x, weight]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            rg,
            Op::RmsNorm { x, weight, inv_rms },
        ))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(LabError::shape("embedding", &st, &[ids.len()]));
        }
        let (vocab, d) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(LabError::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary position rotation of `[.., seq, d_head]`; position is the
    /// index along the second-to-last axis.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || !shape[shape.len() - 1].is_multiple_of(2) {
            return Err(LabError::shape("rope", &shape, &[]));
        }
        let (seq, dh) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (cos, sin) = kernels::rope_table(seq, dh, base);
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::rope_apply(self.value(x).data(), &mut out, seq, dh, &cos, &sin, false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Rope { x, base }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() || targets.is_empty() {
            return Err(LabError::shape("cross_entropy", &sl, &[targets.len()]));
        }
        let v = sl[1];
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(LabError::IndexOutOfRange {
                    what: "target",
                    index: t,
                    size: v,
                });
            }
            let row = &lv[i * v..(i + 1) * v];
            let pr = &mut probs[i * v..(i + 1) * v];
            loss += kernels::softmax_row(row, pr) - row[t];
        }
        loss /= targets.len() as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, rg, Op::Reshape { a }))
    }

    /// Swaps two axes (materialized copy).
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (lo, hi) = (d0.min(d1), d0.max(d1));
        if hi >= shape.len() {
            return Err(LabError::IndexOutOfRange {
                what: "transpose axis",
                index: hi,
                size: shape.len(),
            });
        }
        let dims = [
            shape[..lo].iter().product(),
            shape[lo],
            shape[lo + 1..hi].iter().product(),
            shape[hi],
            shape[hi + 1..].iter().product(),
        ];
        let mut out = vec![0.0; self.value(a).numel()];
        if lo == hi {
            out.copy_from_slice(self.value(a).data());
        } else {
            kernels::swap_axes(self.value(a).data(), &mut out, dims);
        }
        let mut out_shape = shape;
        out_shape.swap(lo, hi);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Transpose { a, dims }))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(LabError::IndexOutOfRange {
                what: "slice bound",
                index: end,
                size: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let width = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Slice { a, axis, start },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LabError::InvalidArgument("concat of nothing".into()))?;
        let mut out_shape = self.shape(*first).to_vec();
        if axis >= out_shape.len() {
            return Err(LabError::IndexOutOfRange {
                what: "concat axis",
                index: axis,
                size: out_shape.len(),
            });
        }
        out_shape[axis] = 0;
        let template = out_shape.clone();
        for p in parts {
            let s = self.shape(*p);
            let mut probe = s.to_vec();
            if probe.len() != template.len() {
                return Err(LabError::shape("concat", &template, s));
            }
            probe[axis] = 0;
            if probe != template {
                return Err(LabError::shape("concat", &template, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Sum-reduction along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(LabError::IndexOutOfRange {
                what: "sum axis",
                index: axis,
                size: shape.len(),
            });
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::SumAxis { a, axis }))
    }

    /// Sum of all entries as a scalar, composed as `reshape · ones`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let row = self.reshape(a, &[1, n])?;
        let ones = self.constant(Tensor::ones(&[n, 1]));
        let s = self.matmul(row, ones)?;
        self.reshape(s, &[])
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`; leaves with `requires_grad`
    /// receive `d loss / d leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(LabError::NotScalar(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            for (input, contrib) in self.vjp(idx, &gy) {
                self.accumulate(input, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `gy`.
    fn vjp(&self, idx: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batched,
                transpose_b,
            } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let k = sa[sa.len() - 1];
                let m = sa[sa.len() - 2];
                let n = *node.value.shape().last().unwrap();
                let (batches, rows) = if *batched {
                    (av.len() / (m * k).max(1), m)
                } else {
                    (1, av.len() / k.max(1))
                };
                let b_block = sb[sb.len() - 2] * sb[sb.len() - 1];
                if want(a) {
                    let mut da = vec![0.0; av.len()];
                    for i in 0..batches {
                        let lb = if *transpose_b {
                            Layout::row_major(k)
                        } else {
                            Layout::transposed(n)
                        };
                        kernels::gemm(
                            rows,
                            n,
                            k,
                            &gy[i * rows * n..],
                            Layout::row_major(n),
                            &bv[i * b_block..],
                            lb,
                            0.0,
                            &mut da[i * rows * k..(i + 1) * rows * k],
                        );
                    }
                    out.push((*a, da));
                }
                if want(b) {
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..batches {
                        let off = if *batched { i * b_block } else { 0 };
                        let dst = &mut db[off..off + b_block];
                        let beta = if *batched { 0.0 } else { 1.0 };
                        if *transpose_b {
                            // dB[n,k] = dCᵀ · A
                            kernels::gemm(
                                n,
                                rows,
                                k,
                                &gy[i * rows * n..],
                                Layout::transposed(n),
                                &av[i * rows * k..],
                                Layout::row_major(k),
                                beta,
                                dst,
                            );
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            kernels::gemm(
                                k,
                                rows,
                                n,
                                &av[i * rows * k..],
                                Layout::transposed(k),
                                &gy[i * rows * n..],
                                Layout::row_major(n),
                                beta,
                                dst,
                            );
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if want(a) {
                    out.push((*a, gy.to_vec()));
                }
                if want(b) {
                    let block = self.value(*b).numel().max(1);
                    let mut db = vec![0.0; block];
                    for chunk in gy.chunks(block) {
                        db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                    out.push((*b, db));
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if want(a) {
                    out.push((*a, gy.iter().zip(bv).map(|(g, y)| g * y).collect()));
                }
                if want(b) {
                    out.push((*b, gy.iter().zip(av).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale { a, factor } => {
                out.push((*a, gy.iter().map(|g| g * factor).collect()));
            }
            Op::Softmax { a, axis, causal } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                if inner == 1 {
                    for (r, ((yr, gr), dr)) in y
                        .chunks(len)
                        .zip(gy.chunks(len))
                        .zip(dx.chunks_mut(len))
                        .enumerate()
                    {
                        let valid = if *causal { r % len + 1 } else { len };
                        let dot: f64 = yr[..valid].iter().zip(&gr[..valid]).map(|(a, b)| a * b).sum();
                        for j in 0..valid {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                } else {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| gy[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                dx[idx(j)] = y[idx(j)] * (gy[idx(j)] - dot);
                            }
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::RmsNorm {
                x,
                weight,
                inv_rms,
            } => {
                let xv = self.value(*x).data();
                let w = self.value(*weight).data();
                let d = w.len();
                if want(x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (r, ((xr, gr), dr)) in xv
                        .chunks(d)
                        .zip(gy.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let ir = inv_rms[r];
                        let s: f64 = (0..d).map(|j| gr[j] * w[j] * xr[j]).sum();
                        let coef = ir * ir * ir * s / d as f64;
                        for j in 0..d {
                            dr[j] = ir * w[j] * gr[j] - coef * xr[j];
                        }
                    }
                    out.push((*x, dx));
                }
                if want(weight) {
                    let mut dw = vec![0.0; d];
                    for (r, (xr, gr)) in xv.chunks(d).zip(gy.chunks(d)).enumerate() {
                        for j in 0..d {
                            dw[j] += gr[j] * xr[j] * inv_rms[r];
                        }
                    }
                    out.push((*weight, dw));
                }
            }
            Op::Embedding { table, ids } => {
                let st = self.shape(*table);
                let d = st[1];
                let mut dt = vec![0.0; st[0] * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gy[row * d + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::Rope { x, base } => {
                let shape = node.value.shape();
                let (seq, dh) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let (cos, sin) = kernels::rope_table(seq, dh, *base);
                let mut dx = vec![0.0; gy.len()];
                kernels::rope_apply(gy, &mut dx, seq, dh, &cos, &sin, true);
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let g = gy[0] / targets.len() as f64;
                let v = probs.len() / targets.len();
                let mut dl: Vec<f64> = probs.iter().map(|p| p * g).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * v + t] -= g;
                }
                out.push((*logits, dl));
            }
            Op::Reshape { a } => out.push((*a, gy.to_vec())),
            Op::Transpose { a, dims } => {
                let [pa, x, m, y, z] = *dims;
                let mut dx = vec![0.0; gy.len()];
                kernels::swap_axes(gy, &mut dx, [pa, y, m, x, z]);
                out.push((*a, dx));
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a);
                let (outer, len, inner) = kernels::split_axis(sa, *axis);
                let width = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*a).numel()];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    dx[base..base + width * inner]
                        .copy_from_slice(&gy[o * width * inner..(o + 1) * width * inner]);
                }
                out.push((*a, dx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if want(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gy[base..base + len * inner]);
                        }
                        out.push((*p, dp));
                    }
                    offset += len;
                }
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*a), *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        dx[base..base + inner].copy_from_slice(&gy[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*a, dx));
            }
        }
        out
    }
}
