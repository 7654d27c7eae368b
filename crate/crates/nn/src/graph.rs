//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] evaluates eagerly and records every operation. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; gradients flow back to
//! them through [`Graph::backward`] and are applied with [`Grads::accumulate_into`].

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::attention::{self, AttentionMask, Block};
use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

// `tanh` through one `exp`; libm's tanh is several times slower.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        return u - u * u * u / 3.0;
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<Block>,
        probs: Vec<Vec<f64>>,
    },
    StackRows(Vec<(Var, usize, usize)>),
    RowCombine { a: Var, rows: Vec<Vec<(usize, f64)>> },
    ConcatCols(Vec<Var>),
    MaskRows { a: Var, keep: Vec<bool> },
    Embed { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mse(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Borrows parameter values from a store for `'a`.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<'a> Default for Graph<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn with_store(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let p = store.get(id);
        let v = self.push(Cow::Borrowed(&p.value), Op::Param(id), p.requires_grad);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b), ta, tb)?;
        Ok(self.push_owned(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_owned(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_owned(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_owned(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_owned(out, Op::Scale(a, s), &[a])
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).numel() != c {
            return shape_err("add_row", format!("bias {:?} for width {c}", self.value(bias).shape()));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push_owned(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push_owned(out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("layer_norm", "affine parameters do not match width");
        }
        let n = xt.rows();
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(&[n, c]);
        for r in 0..n {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            let o = out.row_mut(r);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let out = out.reshape(self.value(x).shape())?;
        Ok(self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head attention over independent blocks stacked along rows, one mask per block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, masks: &[AttentionMask]) -> Result<Var> {
        attention::check_shapes(self.value(q), self.value(k), self.value(v), heads, masks)?;
        let blocks = attention::blocks_for(masks);
        let (out, probs) = attention::forward(self.value(q), self.value(k), self.value(v), heads, &blocks);
        Ok(self.push_owned(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Concatenates row ranges `(var, start, len)` of equal-width tensors.
    pub fn stack_rows(&mut self, parts: Vec<(Var, usize, usize)>) -> Result<Var> {
        let Some(&(first, _, _)) = parts.first() else {
            return shape_err("stack_rows", "no parts");
        };
        let c = self.value(first).cols();
        let total: usize = parts.iter().map(|p| p.2).sum();
        let mut data = Vec::with_capacity(total * c);
        for &(v, start, len) in &parts {
            let t = self.value(v);
            if t.cols() != c || start + len > t.rows() {
                return shape_err("stack_rows", format!("part {:?} rows {start}+{len}", t.shape()));
            }
            data.extend_from_slice(&t.data()[start * c..(start + len) * c]);
        }
        let out = Tensor::new(vec![total, c], data)?;
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        Ok(self.push_owned(out, Op::StackRows(parts), &inputs))
    }

    /// Output row `r` is `sum_w w * a[i]` over `rows[r]`.
    pub fn row_combine(&mut self, a: Var, rows: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Tensor::zeros(&[rows.len(), c]);
        for (r, terms) in rows.iter().enumerate() {
            for &(i, w) in terms {
                if i >= t.rows() {
                    return shape_err("row_combine", format!("row {i} of {}", t.rows()));
                }
                for (o, x) in out.row_mut(r).iter_mut().zip(t.row(i)) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push_owned(out, Op::RowCombine { a, rows }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no parts");
        };
        let n = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return shape_err("concat_cols", "row counts differ");
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        for r in 0..n {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.row_mut(r)[off..off + w].copy_from_slice(self.value(p).row(r));
                off += w;
            }
        }
        Ok(self.push_owned(out, Op::ConcatCols(parts.clone()), &parts))
    }

    /// Rows with `keep[i] == false` become exact zeros and pass no gradient.
    pub fn mask_rows(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        let t = self.value(a);
        if keep.len() != t.rows() {
            return shape_err("mask_rows", format!("{} flags for {} rows", keep.len(), t.rows()));
        }
        let mut out = t.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(r).fill(0.0);
            }
        }
        Ok(self.push_owned(out, Op::MaskRows { a, keep }, &[a]))
    }

    /// Gathers rows of an embedding table.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in &ids {
            if i >= t.rows() {
                return shape_err("embed", format!("id {i} >= vocab {}", t.rows()));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push_owned(out, Op::Embed { table, ids }, &[table]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_owned(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_owned(out, Op::Sum(a), &[a])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push_owned(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NnError::NonScalarLoss(lt.shape().to_vec()));
        }
        lt.check_finite("forward")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &g, &mut grads)?;
        }

        let mut out = Grads {
            leaves: BTreeMap::new(),
            params: BTreeMap::new(),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    if let Some(g) = grads[i].take() {
                        g.check_finite("backward")?;
                        out.leaves.insert(i, g);
                    }
                }
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        g.check_finite("backward")?;
                        out.params.insert(id, g);
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(g.reshape(&shape)?);
            }
        }
        Ok(())
    }

    fn backprop(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let da = if *ta {
                        bv.matmul_t(g, *tb, true)?
                    } else {
                        g.matmul_t(bv, false, !*tb)?
                    };
                    self.acc(grads, *a, da)?;
                }
                if self.needs_grad(*b) {
                    let db = if *tb {
                        g.matmul_t(av, true, *ta)?
                    } else {
                        av.matmul_t(g, !*ta, false)?
                    };
                    self.acc(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s))?;
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.clone())?;
                if self.needs_grad(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.acc(grads, *bias, Tensor::new(shape, db)?)?;
                }
            }
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(*a), |gy, x| gy * gelu_grad(x))?;
                self.acc(grads, *a, da)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let n = g.rows();
                let gm = self.value(*gamma).data();
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += g.row(r)[j] * xhat[r * c + j];
                            dbeta[j] += g.row(r)[j];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    self.acc(grads, *gamma, Tensor::new(gs, dg)?)?;
                    self.acc(grads, *beta, Tensor::new(bs, dbeta)?)?;
                }
                if self.needs_grad(*x) {
                    let mut dx = Tensor::zeros(&[n, c]);
                    for r in 0..n {
                        let gr = g.row(r);
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let o = dx.row_mut(r);
                        for j in 0..c {
                            let dxh = gr[j] * gm[j];
                            o[j] = inv_std[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    self.acc(grads, *x, dx)?;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let ag = attention::backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    blocks,
                    probs,
                    g,
                );
                self.acc(grads, *q, ag.dq)?;
                self.acc(grads, *k, ag.dk)?;
                self.acc(grads, *v, ag.dv)?;
            }
            Op::StackRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &(v, start, len) in parts {
                    if self.needs_grad(v) {
                        let t = self.value(v);
                        let mut d = Tensor::zeros(&[t.rows(), c]);
                        d.data_mut()[start * c..(start + len) * c]
                            .copy_from_slice(&g.data()[off * c..(off + len) * c]);
                        self.acc(grads, v, d)?;
                    }
                    off += len;
                }
            }
            Op::RowCombine { a, rows } => {
                if self.needs_grad(*a) {
                    let t = self.value(*a);
                    let mut d = Tensor::zeros(&[t.rows(), t.cols()]);
                    for (r, terms) in rows.iter().enumerate() {
                        for &(i, w) in terms {
                            for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += w * x;
                            }
                        }
                    }
                    self.acc(grads, *a, d)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs_grad(p) {
                        let mut d = Tensor::zeros(&[g.rows(), w]);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.acc(grads, p, d)?;
                    }
                    off += w;
                }
            }
            Op::MaskRows { a, keep } => {
                let mut d = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        d.row_mut(r).fill(0.0);
                    }
                }
                self.acc(grads, *a, d)?;
            }
            Op::Embed { table, ids } => {
                if self.needs_grad(*table) {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(&[t.rows(), t.cols()]);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *table, d)?;
                }
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, g.clone())?;
            }
            Op::Sum(a) => {
                let s = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, Tensor::full(&shape, s))?;
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f64;
                let s = g.item() * 2.0 / n;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| s * (x - y))?;
                if self.needs_grad(*b) {
                    self.acc(grads, *b, diff.map(|x| -x))?;
                }
                self.acc(grads, *a, diff)?;
            }
        }
        Ok(())
    }
}

/// Gradients of leaves reachable from a loss.
#[derive(Debug, Default)]
pub struct Grads {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    /// Gradient with respect to an input leaf created by [`Graph::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Adds every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            if p.requires_grad {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}
