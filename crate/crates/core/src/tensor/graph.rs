//! Eager reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. [`Graph::backward`]
//! walks the record in exact reverse, accumulating gradients into every node
//! that (transitively) depends on a parameter. A graph serves one forward
//! pass and is dropped afterwards.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, sigmoid, softplus, Activation, LayerNormCache};
use crate::tensor::scalar::{c, Scalar};
use crate::tensor::tensor::{Mask, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<F>,
    },
    Conv2d(Var, Var, Arc<Mask>),
    Conv1d(Var, Var, Arc<Mask>),
    MaskCells(Var, Arc<Mask>),
    Scale(Var, Vec<F>),
    MaxPool(Var, Vec<usize>),
    Gather {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    RowSlice {
        x: Var,
        start: usize,
    },
    StackPadded(Vec<Var>),
    PairSum {
        start: Var,
        end: Var,
        table: Var,
        lens: Vec<usize>,
        max_offset: usize,
    },
    Bilinear {
        hs: Var,
        he: Var,
        u: Var,
        lens: Vec<usize>,
        proj: Vec<F>,
    },
    SigmoidBce {
        logits: Var,
        targets: Tensor<F>,
        mask: Arc<Mask>,
        count: usize,
    },
    WeightedSum(Var, Tensor<F>),
}

pub struct Graph<F: Scalar> {
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Vec<F>>>,
    ops: Vec<Op<F>>,
    needs_grad: Vec<bool>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// Learnable leaf; receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the node; zeros if nothing flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor<F> {
        let shape = self.values[v.0].shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = kernels::transpose2d(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `[c]` vector to every trailing-axis row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let cdim = va.last_dim();
        if vb.shape() != [cdim] {
            return Err(Error::dim("add_row", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(cdim) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x = *x + b;
            }
        }
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.needs(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = kernels::activation(self.value(x), kind);
        let ng = self.needs(&[x]);
        self.push(out, Op::Act(x, kind), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, cache }, ng))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, mask: Arc<Mask>) -> Result<Var> {
        let out = kernels::conv2d_zero_pad(self.value(x), self.value(kernel), &mask)?;
        let ng = self.needs(&[x, kernel]);
        Ok(self.push(out, Op::Conv2d(x, kernel, mask), ng))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, mask: Arc<Mask>) -> Result<Var> {
        let out = kernels::conv1d_zero_pad(self.value(x), self.value(kernel), &mask)?;
        let ng = self.needs(&[x, kernel]);
        Ok(self.push(out, Op::Conv1d(x, kernel, mask), ng))
    }

    /// Forces every masked-out cell to exact zero.
    pub fn mask_cells(&mut self, x: Var, mask: Arc<Mask>) -> Result<Var> {
        let vx = self.value(x);
        mask.check_covers("mask_cells", vx)?;
        let cdim = vx.last_dim();
        let mut data = vx.data().to_vec();
        for (row, &ok) in data.chunks_exact_mut(cdim).zip(mask.valid()) {
            if !ok {
                row.fill(F::zero());
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::MaskCells(x, mask), ng))
    }

    /// Elementwise product with constant factors (e.g. a dropout keep mask).
    pub fn scale(&mut self, x: Var, factors: Vec<F>) -> Result<Var> {
        let vx = self.value(x);
        if factors.len() != vx.numel() {
            return Err(Error::dim("scale", vx.shape(), &[factors.len()]));
        }
        let data = vx.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Scale(x, factors), ng))
    }

    pub fn piecewise_max_pool(&mut self, pieces: Var, groups: &[Range<usize>]) -> Result<Var> {
        let (out, src) = kernels::max_pool_forward(self.value(pieces), groups)?;
        let ng = self.needs(&[pieces]);
        Ok(self.push(out, Op::MaxPool(pieces, src), ng))
    }

    /// Looks up rows of a `[V, d]` table. `None` ids yield zero rows.
    /// The output has shape `lead ++ [d]`, with `lead` multiplying to
    /// `ids.len()`.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<Option<usize>>, lead: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("gather_rows", vt.shape(), lead));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = vec![F::zero(); ids.len() * d];
        for (slot, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= rows {
                    return Err(Error::Validation(format!("row id {id} out of range for table of {rows} rows")));
                }
                data[slot * d..(slot + 1) * d].copy_from_slice(&vt.data()[id * d..(id + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(&[table]);
        Ok(self.push(out, Op::Gather { table, ids }, ng))
    }

    /// Rows `range` of a 2-D tensor.
    pub fn row_slice(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || range.end > vx.shape()[0] || range.start > range.end {
            return Err(Error::dim("row_slice", vx.shape(), &[range.start, range.end]));
        }
        let cols = vx.shape()[1];
        let data = vx.data()[range.start * cols..range.end * cols].to_vec();
        let out = Tensor::new(&[range.len(), cols], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::RowSlice { x, start: range.start }, ng))
    }

    /// Stacks `[n_b, d]` matrices into a zero-padded `[B, n, d]` batch.
    pub fn stack_padded(&mut self, parts: Vec<Var>, n: usize) -> Result<Var> {
        let d = parts.first().map(|&p| self.value(p).last_dim()).unwrap_or(0);
        let mut data = vec![F::zero(); parts.len() * n * d];
        for (b, &p) in parts.iter().enumerate() {
            let vp = self.value(p);
            if vp.rank() != 2 || vp.shape()[1] != d || vp.shape()[0] > n {
                return Err(Error::dim("stack_padded", vp.shape(), &[n, d]));
            }
            data[b * n * d..b * n * d + vp.numel()].copy_from_slice(vp.data());
        }
        let out = Tensor::new(&[parts.len(), n, d], data)?;
        let ng = self.needs(&parts);
        Ok(self.push(out, Op::StackPadded(parts), ng))
    }

    /// Span grid from start/end projections and a signed-offset table:
    /// `out[b,i,j] = start[b,i] + end[b,j] + table[clamp(i-j, -L, L) + L]`
    /// for `i, j < lens[b]`; all other cells are zero.
    pub fn pair_sum(&mut self, start: Var, end: Var, table: Var, lens: &[usize], max_offset: usize) -> Result<Var> {
        let (vs, ve, vt) = (self.value(start), self.value(end), self.value(table));
        let s = vs.shape();
        if s.len() != 3 || ve.shape() != s || s[0] != lens.len() {
            return Err(Error::dim("pair_sum", s, ve.shape()));
        }
        let (bsz, n, r) = (s[0], s[1], s[2]);
        if vt.shape() != [2 * max_offset + 1, r] {
            return Err(Error::dim("pair_sum table", vt.shape(), &[2 * max_offset + 1, r]));
        }
        let mut data = vec![F::zero(); bsz * n * n * r];
        for (b, &len) in lens.iter().enumerate() {
            for i in 0..len {
                let srow = &vs.data()[(b * n + i) * r..(b * n + i + 1) * r];
                for j in 0..len {
                    let erow = &ve.data()[(b * n + j) * r..(b * n + j + 1) * r];
                    let off = offset_index(i, j, max_offset);
                    let trow = &vt.data()[off * r..(off + 1) * r];
                    let o = ((b * n + i) * n + j) * r;
                    for t in 0..r {
                        data[o + t] = srow[t] + erow[t] + trow[t];
                    }
                }
            }
        }
        let out = Tensor::new(&[bsz, n, n, r], data)?;
        let ng = self.needs(&[start, end, table]);
        Ok(self.push(
            out,
            Op::PairSum {
                start,
                end,
                table,
                lens: lens.to_vec(),
                max_offset,
            },
            ng,
        ))
    }

    /// Per-head bilinear span features. `hs`, `he` are `[B, n, h]`, `u` is
    /// `[K, h_k, r_k, h_k]`; head `k` reads slice `k` of the hidden axis and
    /// writes slice `k` (width `r_k`) of the feature axis:
    /// `out[b,i,j,k*r_k+q] = Σ_{a,c} hs[b,i,k,a] · u[k,a,q,c] · he[b,j,k,c]`.
    pub fn bilinear_heads(&mut self, hs: Var, he: Var, u: Var, lens: &[usize]) -> Result<Var> {
        let (vs, ve, vu) = (self.value(hs), self.value(he), self.value(u));
        let s = vs.shape();
        let us = vu.shape();
        if s.len() != 3 || ve.shape() != s || s[0] != lens.len() || us.len() != 4 || us[1] != us[3] || us[0] * us[1] != s[2]
        {
            return Err(Error::dim("bilinear_heads", s, us));
        }
        let (bsz, n, h) = (s[0], s[1], s[2]);
        let (heads, hk, rk) = (us[0], us[1], us[2]);
        let r = heads * rk;
        let ud = vu.data();
        // proj[b,i,k,q,:] = Σ_a hs[b,i,k,a] · u[k,a,q,:]
        let mut proj = vec![F::zero(); bsz * n * heads * rk * hk];
        let mut data = vec![F::zero(); bsz * n * n * r];
        for (b, &len) in lens.iter().enumerate() {
            for i in 0..len {
                let hrow = &vs.data()[(b * n + i) * h..(b * n + i + 1) * h];
                for k in 0..heads {
                    let pbase = ((b * n + i) * heads + k) * rk * hk;
                    let pk = &mut proj[pbase..pbase + rk * hk];
                    for a in 0..hk {
                        let v = hrow[k * hk + a];
                        let ubase = (k * hk + a) * rk * hk;
                        for (p, &w) in pk.iter_mut().zip(&ud[ubase..ubase + rk * hk]) {
                            *p = *p + v * w;
                        }
                    }
                }
            }
            for i in 0..len {
                for j in 0..len {
                    let erow = &ve.data()[(b * n + j) * h..(b * n + j + 1) * h];
                    let o = ((b * n + i) * n + j) * r;
                    for k in 0..heads {
                        let ek = &erow[k * hk..(k + 1) * hk];
                        let pbase = ((b * n + i) * heads + k) * rk * hk;
                        for q in 0..rk {
                            let pq = &proj[pbase + q * hk..pbase + (q + 1) * hk];
                            data[o + k * rk + q] = pq.iter().zip(ek).fold(F::zero(), |acc, (&x, &y)| acc + x * y);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[bsz, n, n, r], data)?;
        let ng = self.needs(&[hs, he, u]);
        Ok(self.push(
            out,
            Op::Bilinear {
                hs,
                he,
                u,
                lens: lens.to_vec(),
                proj,
            },
            ng,
        ))
    }

    /// Mean binary cross entropy of `sigmoid(logits)` against `targets`
    /// over every valid `(cell, type)` entry; computed from the logits so it
    /// never takes the log of a saturated probability.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Tensor<F>, mask: Arc<Mask>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape() != targets.shape() {
            return Err(Error::dim("sigmoid_bce", vl.shape(), targets.shape()));
        }
        mask.check_covers("sigmoid_bce mask", vl)?;
        let t = vl.last_dim();
        let count = mask.count() * t;
        let mut total = F::zero();
        for ((zrow, yrow), &ok) in vl.data().chunks_exact(t).zip(targets.data().chunks_exact(t)).zip(mask.valid()) {
            if !ok {
                continue;
            }
            for (&z, &y) in zrow.iter().zip(yrow) {
                total = total + softplus(z) - y * z;
            }
        }
        let loss = if count == 0 { F::zero() } else { total / c(count as f64) };
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                targets,
                mask,
                count,
            },
            ng,
        ))
    }

    /// `Σ x · w` for constant weights `w`; handy for probing gradients.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<F>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(Error::dim("weighted_sum", vx.shape(), weights.shape()));
        }
        let s = vx.data().iter().zip(weights.data()).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), ng))
    }

    fn take_buf(&mut self, v: Var) -> Option<Vec<F>> {
        if !self.needs_grad[v.0] {
            return None;
        }
        let n = self.values[v.0].numel();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![F::zero(); n]))
    }

    fn put_buf(&mut self, v: Var, buf: Option<Vec<F>>) {
        let Some(buf) = buf else { return };
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, b) in existing.iter_mut().zip(buf) {
                    *e = *e + b;
                }
            }
            slot @ None => *slot = Some(buf),
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into the grads of
    /// every node that depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] || matches!(self.ops[idx], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            let op = std::mem::replace(&mut self.ops[idx], Op::Leaf);
            self.backward_op(idx, &op, &g);
            self.ops[idx] = op;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op<F>, g: &[F]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (mut ga, mut gb) = (self.take_buf(*a), self.take_buf(*b));
                kernels::matmul_backward(
                    &self.values[a.0],
                    &self.values[b.0],
                    g,
                    ga.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.put_buf(*a, ga);
                self.put_buf(*b, gb);
            }
            Op::Transpose(a) => {
                if let Some(mut ga) = self.take_buf(*a) {
                    let s = self.values[a.0].shape();
                    let (m, n) = (s[0], s[1]);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                    self.put_buf(*a, Some(ga));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(mut gv) = self.take_buf(v) {
                        for (x, &y) in gv.iter_mut().zip(g) {
                            *x = *x + y;
                        }
                        self.put_buf(v, Some(gv));
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(mut ga) = self.take_buf(*a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                    self.put_buf(*a, Some(ga));
                }
                if let Some(mut gb) = self.take_buf(*bias) {
                    let cdim = gb.len();
                    for row in g.chunks_exact(cdim) {
                        for (x, &y) in gb.iter_mut().zip(row) {
                            *x = *x + y;
                        }
                    }
                    self.put_buf(*bias, Some(gb));
                }
            }
            Op::Act(x, kind) => {
                if let Some(mut gx) = self.take_buf(*x) {
                    let xs = self.values[x.0].data();
                    let ys = self.values[idx].data();
                    for t in 0..gx.len() {
                        gx[t] = gx[t] + g[t] * kind.derivative(xs[t], ys[t]);
                    }
                    self.put_buf(*x, Some(gx));
                }
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (mut gx, mut gg, mut gb) = (self.take_buf(*x), self.take_buf(*gamma), self.take_buf(*beta));
                kernels::layer_norm_backward(
                    cache,
                    &self.values[gamma.0],
                    g,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.put_buf(*x, gx);
                self.put_buf(*gamma, gg);
                self.put_buf(*beta, gb);
            }
            Op::Conv2d(x, k, mask) => {
                let (mut gx, mut gk) = (self.take_buf(*x), self.take_buf(*k));
                kernels::conv2d_backward(&self.values[x.0], &self.values[k.0], mask, g, gx.as_deref_mut(), gk.as_deref_mut());
                self.put_buf(*x, gx);
                self.put_buf(*k, gk);
            }
            Op::Conv1d(x, k, mask) => {
                let (mut gx, mut gk) = (self.take_buf(*x), self.take_buf(*k));
                kernels::conv1d_backward(&self.values[x.0], &self.values[k.0], mask, g, gx.as_deref_mut(), gk.as_deref_mut());
                self.put_buf(*x, gx);
                self.put_buf(*k, gk);
            }
            Op::MaskCells(x, mask) => {
                if let Some(mut gx) = self.take_buf(*x) {
                    let cdim = self.values[x.0].last_dim();
                    for ((grow, orow), &ok) in gx.chunks_exact_mut(cdim).zip(g.chunks_exact(cdim)).zip(mask.valid()) {
                        if ok {
                            for (a, &b) in grow.iter_mut().zip(orow) {
                                *a = *a + b;
                            }
                        }
                    }
                    self.put_buf(*x, Some(gx));
                }
            }
            Op::Scale(x, factors) => {
                if let Some(mut gx) = self.take_buf(*x) {
                    for t in 0..gx.len() {
                        gx[t] = gx[t] + g[t] * factors[t];
                    }
                    self.put_buf(*x, Some(gx));
                }
            }
            Op::MaxPool(x, src) => {
                if let Some(mut gx) = self.take_buf(*x) {
                    for (&s, &gv) in src.iter().zip(g) {
                        gx[s] = gx[s] + gv;
                    }
                    self.put_buf(*x, Some(gx));
                }
            }
            Op::Gather { table, ids } => {
                if let Some(mut gt) = self.take_buf(*table) {
                    let d = self.values[table.0].shape()[1];
                    for (slot, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            for t in 0..d {
                                gt[id * d + t] = gt[id * d + t] + g[slot * d + t];
                            }
                        }
                    }
                    self.put_buf(*table, Some(gt));
                }
            }
            Op::RowSlice { x, start } => {
                if let Some(mut gx) = self.take_buf(*x) {
                    let cols = self.values[x.0].shape()[1];
                    let off = start * cols;
                    for (t, &gv) in g.iter().enumerate() {
                        gx[off + t] = gx[off + t] + gv;
                    }
                    self.put_buf(*x, Some(gx));
                }
            }
            Op::StackPadded(parts) => {
                let s = self.values[idx].shape();
                let (n, d) = (s[1], s[2]);
                for (b, &p) in parts.iter().enumerate() {
                    if let Some(mut gp) = self.take_buf(p) {
                        for (t, gv) in gp.iter_mut().enumerate() {
                            *gv = *gv + g[b * n * d + t];
                        }
                        self.put_buf(p, Some(gp));
                    }
                }
            }
            Op::PairSum {
                start,
                end,
                table,
                lens,
                max_offset,
            } => {
                let s = self.values[start.0].shape();
                let (n, r) = (s[1], s[2]);
                let (mut gs, mut ge, mut gt) = (self.take_buf(*start), self.take_buf(*end), self.take_buf(*table));
                for (b, &len) in lens.iter().enumerate() {
                    for i in 0..len {
                        for j in 0..len {
                            let o = ((b * n + i) * n + j) * r;
                            let grow = &g[o..o + r];
                            if let Some(gs) = gs.as_deref_mut() {
                                add_into(&mut gs[(b * n + i) * r..(b * n + i + 1) * r], grow);
                            }
                            if let Some(ge) = ge.as_deref_mut() {
                                add_into(&mut ge[(b * n + j) * r..(b * n + j + 1) * r], grow);
                            }
                            if let Some(gt) = gt.as_deref_mut() {
                                let off = offset_index(i, j, *max_offset);
                                add_into(&mut gt[off * r..(off + 1) * r], grow);
                            }
                        }
                    }
                }
                self.put_buf(*start, gs);
                self.put_buf(*end, ge);
                self.put_buf(*table, gt);
            }
            Op::Bilinear { hs, he, u, lens, proj } => {
                let s = self.values[hs.0].shape();
                let (n, h) = (s[1], s[2]);
                let us = self.values[u.0].shape();
                let (heads, hk, rk) = (us[0], us[1], us[2]);
                let r = heads * rk;
                let (mut ghs, mut ghe, mut gu) = (self.take_buf(*hs), self.take_buf(*he), self.take_buf(*u));
                let hsd = self.values[hs.0].data();
                let hed = self.values[he.0].data();
                let ud = self.values[u.0].data();
                let mut dproj = vec![F::zero(); rk * hk];
                for (b, &len) in lens.iter().enumerate() {
                    for i in 0..len {
                        for k in 0..heads {
                            let pbase = ((b * n + i) * heads + k) * rk * hk;
                            let pk = &proj[pbase..pbase + rk * hk];
                            dproj.fill(F::zero());
                            for j in 0..len {
                                let o = ((b * n + i) * n + j) * r + k * rk;
                                let gq = &g[o..o + rk];
                                let erow = &hed[(b * n + j) * h + k * hk..(b * n + j) * h + (k + 1) * hk];
                                for q in 0..rk {
                                    let dq = &mut dproj[q * hk..(q + 1) * hk];
                                    for (dv, &ev) in dq.iter_mut().zip(erow) {
                                        *dv = *dv + gq[q] * ev;
                                    }
                                }
                                if let Some(ghe) = ghe.as_deref_mut() {
                                    let gerow = &mut ghe[(b * n + j) * h + k * hk..(b * n + j) * h + (k + 1) * hk];
                                    for q in 0..rk {
                                        for (gv, &pv) in gerow.iter_mut().zip(&pk[q * hk..(q + 1) * hk]) {
                                            *gv = *gv + gq[q] * pv;
                                        }
                                    }
                                }
                            }
                            for a in 0..hk {
                                let ubase = (k * hk + a) * rk * hk;
                                if let Some(ghs) = ghs.as_deref_mut() {
                                    let acc = ud[ubase..ubase + rk * hk]
                                        .iter()
                                        .zip(&dproj)
                                        .fold(F::zero(), |s, (&w, &dv)| s + w * dv);
                                    let slot = (b * n + i) * h + k * hk + a;
                                    ghs[slot] = ghs[slot] + acc;
                                }
                                if let Some(gu) = gu.as_deref_mut() {
                                    let v = hsd[(b * n + i) * h + k * hk + a];
                                    for (gw, &dv) in gu[ubase..ubase + rk * hk].iter_mut().zip(&dproj) {
                                        *gw = *gw + v * dv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.put_buf(*hs, ghs);
                self.put_buf(*he, ghe);
                self.put_buf(*u, gu);
            }
            Op::SigmoidBce {
                logits,
                targets,
                mask,
                count,
            } => {
                if let Some(mut gl) = self.take_buf(*logits) {
                    if *count > 0 {
                        let t = self.values[logits.0].last_dim();
                        let scale = g[0] / c(*count as f64);
                        let zs = self.values[logits.0].data();
                        for (cell, &ok) in mask.valid().iter().enumerate() {
                            if !ok {
                                continue;
                            }
                            for e in cell * t..(cell + 1) * t {
                                gl[e] = gl[e] + (sigmoid(zs[e]) - targets.data()[e]) * scale;
                            }
                        }
                    }
                    self.put_buf(*logits, Some(gl));
                }
            }
            Op::WeightedSum(x, w) => {
                if let Some(mut gx) = self.take_buf(*x) {
                    for (gv, &wv) in gx.iter_mut().zip(w.data()) {
                        *gv = *gv + g[0] * wv;
                    }
                    self.put_buf(*x, Some(gx));
                }
            }
        }
    }
}

#[inline]
fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Row of the signed-offset table for cell `(i, j)`: `clamp(i - j, -L, L) + L`.
#[inline]
pub fn offset_index(i: usize, j: usize, max_offset: usize) -> usize {
    let l = max_offset as isize;
    let d = (i as isize - j as isize).clamp(-l, l);
    (d + l) as usize
}
