//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the list in reverse
//! and accumulates gradients additively, so a value used twice receives the
//! sum of both contributions.

use super::{gemm, Float, NnError, NnResult, ParamId, ParamStore, Tensor};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn out_positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output size of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

enum Op<T> {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<T> },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    SelectStep { x: Var, t: usize, steps: usize },
    Pool { x: Var, mean: bool },
    Tile(Var),
    Film { x: Var, gamma: Var, beta: Var },
    Blend { new: Var, old: Var, mask: Vec<T> },
    Softmax(Var),
    Attend { p: Var, v: Var },
    PairConcat { x: Var, q: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SumAll(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> NnResult<T> {
    Err(NnError::Shape(msg))
}

/// `(rows, last)` view of a shape.
fn rows_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let total: usize = shape.iter().product();
    (if last == 0 { 0 } else { total / last }, last)
}

/// `(batch, positions, channels)` view of a `[N, ..., C]` shape.
fn npc(shape: &[usize]) -> NnResult<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("expected [N, ..., C], got {shape:?}"));
    }
    let n = shape[0];
    let c = shape[shape.len() - 1];
    let p = shape[1..shape.len() - 1].iter().product();
    Ok((n, p, c))
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.param(id).value.clone(), Op::Param, true);
        self.params.push((id, v));
        v
    }

    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    /// Adds the gradients of every parameter used on this tape into the
    /// store's accumulators.
    pub fn accumulate(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = grads.of(v) {
                store.param_mut(id).grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    // ----- forward operations -------------------------------------------

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> NnResult<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, inp) = rows_last(&xs);
        if ws.len() != 2 || ws[0] != inp {
            return shape_err(format!("linear: input {xs:?} vs weight {ws:?}"));
        }
        let out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return shape_err(format!("linear: bias {:?} vs {out}", self.shape(b)));
            }
        }
        let mut y = vec![T::zero(); rows * out];
        gemm(rows, inp, out, self.data(x), false, self.data(w), false, &mut y, false);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y), Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of `[N, H, W, C]` input with `[Kh, Kw, C, F]`
    /// kernels, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> NnResult<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] || stride == 0 {
            return shape_err(format!("conv2d: input {xs:?} vs kernel {ks:?}"));
        }
        let (Some(ho), Some(wo)) = (
            conv_out_len(xs[1], ks[0], stride, pad),
            conv_out_len(xs[2], ks[1], stride, pad),
        ) else {
            return shape_err(format!("conv2d: kernel {ks:?} larger than padded input {xs:?}"));
        };
        let g = ConvGeom {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            c: xs[3],
            kh: ks[0],
            kw: ks[1],
            f: ks[3],
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.data(x), &g);
        let rows = g.n * g.out_positions();
        let mut y = vec![T::zero(); rows * g.f];
        gemm(rows, g.patch(), g.f, &cols, false, self.data(k), false, &mut y, false);
        let rg = self.rg(x) || self.rg(k);
        // Only the kernel gradient needs the patch matrix.
        let cols = if self.rg(k) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![g.n, ho, wo, g.f], y),
            Op::Conv2d { x, k, geom: g, cols },
            rg,
        ))
    }

    /// Adds a `[C]` vector to every row of `[..., C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> NnResult<Var> {
        let c = self.value(x).last_dim();
        if self.shape(b) != [c] {
            return shape_err(format!("add_bias: {:?} vs {:?}", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b).to_vec();
        let mut y = self.data(x).to_vec();
        for row in y.chunks_mut(c) {
            row.iter_mut().zip(&bd).for_each(|(v, &bb)| *v += bb);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y), Op::AddBias { x, b }, rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> NnResult<(Tensor<T>, bool)> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let y: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| f(p, q)).collect();
        Ok((Tensor::new(self.shape(a).to_vec(), y), self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> NnResult<Var> {
        let (t, rg) = self.zip_with(a, b, "add", |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> NnResult<Var> {
        let (t, rg) = self.zip_with(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> NnResult<Var> {
        let (t, rg) = self.zip_with(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape.clone(), v.data.iter().map(|&a| f(a)).collect())
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.map(x, |a| a * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let t = self.map(x, |a| a + c);
        let rg = self.rg(x);
        self.push(t, Op::AddConst(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |a| if a > T::zero() { a } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, |a| T::one() / (T::one() + (-a).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, |a| a.tanh());
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    /// Per-channel normalization over every axis but the last, using the
    /// batch's own statistics. Returns the output with the batch mean and
    /// biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: T,
    ) -> NnResult<(Var, Vec<T>, Vec<T>)> {
        let (m, c) = rows_last(self.shape(x));
        if m < 2 {
            return Err(NnError::BatchTooSmall);
        }
        let xd = self.data(x);
        let mut mean = vec![T::zero(); c];
        for row in xd.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
        }
        let inv_m = T::one() / T::of(m as f64);
        mean.iter_mut().for_each(|s| *s *= inv_m);
        let mut var = vec![T::zero(); c];
        for row in xd.chunks(c) {
            for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((y, mean, var))
    }

    /// Per-channel normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> NnResult<Var> {
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> NnResult<Var> {
        let shape = self.shape(x).to_vec();
        let (_, c) = rows_last(&shape);
        if mean.len() != c || inv_std.len() != c {
            return shape_err(format!("batch_norm: statistics for {} channels, input has {c}", mean.len()));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return shape_err(format!("batch_norm: affine {:?} vs {c}", self.shape(p)));
            }
        }
        let mut xhat = self.data(x).to_vec();
        for row in xhat.chunks_mut(c) {
            for ((v, &mu), &is) in row.iter_mut().zip(mean).zip(&inv_std) {
                *v = (*v - mu) * is;
            }
        }
        let mut y = xhat.clone();
        if let Some(g) = gamma {
            let gd = self.data(g);
            for row in y.chunks_mut(c) {
                row.iter_mut().zip(gd).for_each(|(v, &gg)| *v *= gg);
            }
        }
        if let Some(b) = beta {
            let bd = self.data(b);
            for row in y.chunks_mut(c) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v += bb);
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(shape, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Looks up rows of a `[V, E]` table; output shape is `prefix ++ [E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> NnResult<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return shape_err(format!("embedding: table {ts:?}, {} ids for {prefix:?}", ids.len()));
        }
        let e = ts[1];
        let td = self.data(table);
        let mut y = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            if i >= ts[0] {
                return shape_err(format!("embedding: id {i} out of range {}", ts[0]));
            }
            y.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        let mut shape = prefix.to_vec();
        shape.push(e);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, y),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> NnResult<Var> {
        let first = self.shape(parts[0]).to_vec();
        let (rows, _) = rows_last(&first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..s.len() - 1] != first[..first.len() - 1] {
                return shape_err(format!("concat: {first:?} vs {s:?}"));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, y), Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> NnResult<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, c) = rows_last(&shape);
        if start + len > c {
            return shape_err(format!("slice: {start}+{len} > {c}"));
        }
        let xd = self.data(x);
        let mut y = Vec::with_capacity(rows * len);
        for r in 0..rows {
            y.extend_from_slice(&xd[r * c + start..r * c + start + len]);
        }
        let mut out = shape;
        *out.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out, y), Op::Slice { x, start }, rg))
    }

    /// Step `t` of a `[N, T, G]` sequence, as `[N, G]`.
    pub fn select_step(&mut self, x: Var, t: usize) -> NnResult<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || t >= s[1] {
            return shape_err(format!("select_step: {t} of {s:?}"));
        }
        let (n, steps, g) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut y = Vec::with_capacity(n * g);
        for i in 0..n {
            let at = (i * steps + t) * g;
            y.extend_from_slice(&xd[at..at + g]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, g], y), Op::SelectStep { x, t, steps }, rg))
    }

    fn pool(&mut self, x: Var, mean: bool) -> NnResult<Var> {
        let (n, p, c) = npc(self.shape(x))?;
        let xd = self.data(x);
        let mut y = vec![T::zero(); n * c];
        for i in 0..n {
            let acc = &mut y[i * c..(i + 1) * c];
            for row in xd[i * p * c..(i + 1) * p * c].chunks(c) {
                acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            if mean && p > 0 {
                let s = T::one() / T::of(p as f64);
                acc.iter_mut().for_each(|a| *a *= s);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], y), Op::Pool { x, mean }, rg))
    }

    /// Mean over all positions of `[N, ..., C]`, giving `[N, C]`.
    pub fn mean_pool(&mut self, x: Var) -> NnResult<Var> {
        self.pool(x, true)
    }

    /// Sum over all positions of `[N, ..., C]`, giving `[N, C]`.
    pub fn sum_pool(&mut self, x: Var) -> NnResult<Var> {
        self.pool(x, false)
    }

    /// Repeats `[N, S]` over `p` positions: `[N, p, S]`.
    pub fn tile(&mut self, x: Var, p: usize) -> NnResult<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("tile: expected [N, S], got {s:?}"));
        }
        let (n, w) = (s[0], s[1]);
        let xd = self.data(x);
        let mut y = Vec::with_capacity(n * p * w);
        for i in 0..n {
            for _ in 0..p {
                y.extend_from_slice(&xd[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, p, w], y), Op::Tile(x), rg))
    }

    /// Feature-wise affine modulation: `x * gamma + beta` with `[N, C]`
    /// coefficients broadcast over the positions of `[N, ..., C]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> NnResult<Var> {
        let shape = self.shape(x).to_vec();
        let (n, p, c) = npc(&shape)?;
        if self.shape(gamma) != [n, c] || self.shape(beta) != [n, c] {
            return shape_err(format!(
                "film: {shape:?} with {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut y = Vec::with_capacity(xd.len());
        for i in 0..n {
            let (g, b) = (&gd[i * c..(i + 1) * c], &bd[i * c..(i + 1) * c]);
            for row in xd[i * p * c..(i + 1) * p * c].chunks(c) {
                y.extend(row.iter().zip(g).zip(b).map(|((&v, &gg), &bb)| v * gg + bb));
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(shape, y), Op::Film { x, gamma, beta }, rg))
    }

    /// Row-wise select: `mask[i] * new + (1 - mask[i]) * old` for `[N, G]`.
    pub fn blend(&mut self, new: Var, old: Var, mask: &[T]) -> NnResult<Var> {
        let shape = self.shape(new).to_vec();
        if shape != self.shape(old) || shape.len() != 2 || shape[0] != mask.len() {
            return shape_err(format!("blend: {shape:?} vs {:?}", self.shape(old)));
        }
        let g = shape[1];
        let (nd, od) = (self.data(new), self.data(old));
        let mut y = Vec::with_capacity(nd.len());
        for (i, &m) in mask.iter().enumerate() {
            let r = i * g..(i + 1) * g;
            y.extend(nd[r.clone()].iter().zip(&od[r]).map(|(&a, &b)| m * a + (T::one() - m) * b));
        }
        let rg = self.rg(new) || self.rg(old);
        Ok(self.push(
            Tensor::new(shape, y),
            Op::Blend {
                new,
                old,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (_, c) = rows_last(&shape);
        let mut y = self.data(x).to_vec();
        for row in y.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y), Op::Softmax(x), rg)
    }

    /// Attention read-out: `Σ_p w[n, p] · v[n, p, :]` for weights `[N, P]`
    /// and values `[N, P, D]`.
    pub fn attend(&mut self, w: Var, v: Var) -> NnResult<Var> {
        let (n, p, d) = npc(self.shape(v))?;
        if self.shape(w) != [n, p] {
            return shape_err(format!("attend: weights {:?} vs values {:?}", self.shape(w), self.shape(v)));
        }
        let (wd, vd) = (self.data(w), self.data(v));
        let mut y = vec![T::zero(); n * d];
        for i in 0..n {
            let acc = &mut y[i * d..(i + 1) * d];
            for j in 0..p {
                let a = wd[i * p + j];
                let row = &vd[(i * p + j) * d..(i * p + j + 1) * d];
                acc.iter_mut().zip(row).for_each(|(s, &val)| *s += a * val);
            }
        }
        let rg = self.rg(w) || self.rg(v);
        Ok(self.push(Tensor::new(vec![n, d], y), Op::Attend { p: w, v }, rg))
    }

    /// All ordered position pairs of `[N, ..., D]` joined with a per-example
    /// question vector `[N, S]`: `[N, P·P, 2D + S]`, pair `(i, j)` at row
    /// `i·P + j` holding `[x_i, x_j, q]`.
    pub fn pair_concat(&mut self, x: Var, q: Var) -> NnResult<Var> {
        let (n, p, d) = npc(self.shape(x))?;
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || qs[0] != n {
            return shape_err(format!("pair_concat: {:?} with question {qs:?}", self.shape(x)));
        }
        let s = qs[1];
        let w = 2 * d + s;
        let (xd, qd) = (self.data(x), self.data(q));
        let mut y = Vec::with_capacity(n * p * p * w);
        for b in 0..n {
            let q_row = &qd[b * s..(b + 1) * s];
            for i in 0..p {
                let xi = &xd[(b * p + i) * d..(b * p + i + 1) * d];
                for j in 0..p {
                    let xj = &xd[(b * p + j) * d..(b * p + j + 1) * d];
                    y.extend_from_slice(xi);
                    y.extend_from_slice(xj);
                    y.extend_from_slice(q_row);
                }
            }
        }
        let rg = self.rg(x) || self.rg(q);
        Ok(self.push(Tensor::new(vec![n, p * p, w], y), Op::PairConcat { x, q }, rg))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> NnResult<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return shape_err(format!("cross_entropy: logits {s:?}, {} labels", labels.len()));
        }
        let k = s[1];
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[l];
            softmax_in_place(row);
        }
        loss = loss / T::of(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![1], vec![s]), Op::SumAll(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> NnResult<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return shape_err(format!("reshape: {:?} to {shape:?}", self.shape(x)));
        }
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec());
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ----- backward -----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.acc(grads, v) {
            buf.iter_mut().enumerate().for_each(|(j, b)| *b += f(j));
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value.data;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (rows, inp) = rows_last(self.shape(*x));
                let outw = self.shape(*w)[1];
                if let Some(dx) = self.acc(grads, *x) {
                    gemm(rows, outw, inp, g, false, self.data(*w), true, dx, true);
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm(inp, rows, outw, self.data(*x), true, g, false, dw, true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks(outw) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let rows = geom.n * geom.out_positions();
                if let Some(dk) = self.acc(grads, *k) {
                    gemm(geom.patch(), rows, geom.f, cols, true, g, false, dk, true);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); rows * geom.patch()];
                    gemm(rows, geom.f, geom.patch(), g, false, self.data(*k), true, &mut dcols, false);
                    let dx = self.acc(grads, *x).expect("checked");
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::AddBias { x, b } => {
                self.add_into(grads, *x, |j| g[j]);
                let c = self.shape(*b)[0];
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, |j| g[j]);
                self.add_into(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, |j| g[j]);
                self.add_into(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.add_into(grads, *a, |j| g[j] * bd[j]);
                self.add_into(grads, *b, |j| g[j] * ad[j]);
            }
            Op::Scale(x, s) => self.add_into(grads, *x, |j| g[j] * *s),
            Op::AddConst(x) | Op::Reshape(x) => self.add_into(grads, *x, |j| g[j]),
            Op::Relu(x) => self.add_into(grads, *x, |j| if out[j] > T::zero() { g[j] } else { T::zero() }),
            Op::Sigmoid(x) => self.add_into(grads, *x, |j| g[j] * out[j] * (T::one() - out[j])),
            Op::Tanh(x) => self.add_into(grads, *x, |j| g[j] * (T::one() - out[j] * out[j])),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = g.len() / c;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (row, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += row[j];
                        sum_gx[j] += row[j] * xr[j];
                    }
                }
                if let Some(b) = beta {
                    self.add_into(grads, *b, |j| sum_g[j]);
                }
                let gamma_vals: Vec<T> = match gamma {
                    Some(gv) => {
                        self.add_into(grads, *gv, |j| sum_gx[j]);
                        self.data(*gv).to_vec()
                    }
                    None => vec![T::one(); c],
                };
                if let Some(dx) = self.acc(grads, *x) {
                    if *batch_stats {
                        let inv_m = T::one() / T::of(m as f64);
                        for ((d, row), xr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let mean_g = sum_g[j] * inv_m;
                                let mean_gx = sum_gx[j] * inv_m;
                                d[j] += gamma_vals[j] * inv_std[j] * (row[j] - mean_g - xr[j] * mean_gx);
                            }
                        }
                    } else {
                        for (d, row) in dx.chunks_mut(c).zip(g.chunks(c)) {
                            for j in 0..c {
                                d[j] += row[j] * gamma_vals[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let e = self.shape(*table)[1];
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * e..(id + 1) * e]
                            .iter_mut()
                            .zip(&g[r * e..(r + 1) * e])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.add_into(grads, p, |j| g[(j / w) * total + offset + j % w]);
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let c = self.value(*x).last_dim();
                let len = node.value.last_dim();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, row) in g.chunks(len).enumerate() {
                        dx[r * c + start..r * c + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::SelectStep { x, t, steps } => {
                let gw = node.value.last_dim();
                if let Some(dx) = self.acc(grads, *x) {
                    for (n, row) in g.chunks(gw).enumerate() {
                        let at = (n * steps + t) * gw;
                        dx[at..at + gw].iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Pool { x, mean } => {
                let (_, p, c) = npc(self.shape(*x)).expect("validated in forward");
                let s = if *mean { T::one() / T::of(p as f64) } else { T::one() };
                self.add_into(grads, *x, |j| g[(j / (p * c)) * c + j % c] * s);
            }
            Op::Tile(x) => {
                let s = self.shape(*x)[1];
                let p = node.value.shape[1];
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, row) in g.chunks(s).enumerate() {
                        let n = r / p;
                        dx[n * s..(n + 1) * s].iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Film { x, gamma, beta } => {
                let (n, p, c) = npc(self.shape(*x)).expect("validated in forward");
                let (xd, gd) = (self.data(*x), self.data(*gamma));
                self.add_into(grads, *x, |j| g[j] * gd[(j / (p * c)) * c + j % c]);
                let mut dgam = vec![T::zero(); n * c];
                let mut dbet = vec![T::zero(); n * c];
                for (r, (row, xr)) in g.chunks(c).zip(xd.chunks(c)).enumerate() {
                    let b = r / p;
                    for j in 0..c {
                        dgam[b * c + j] += row[j] * xr[j];
                        dbet[b * c + j] += row[j];
                    }
                }
                self.add_into(grads, *gamma, |j| dgam[j]);
                self.add_into(grads, *beta, |j| dbet[j]);
            }
            Op::Blend { new, old, mask } => {
                let w = node.value.last_dim();
                self.add_into(grads, *new, |j| g[j] * mask[j / w]);
                self.add_into(grads, *old, |j| g[j] * (T::one() - mask[j / w]));
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            d[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attend { p: w, v } => {
                let (n, p, d) = npc(self.shape(*v)).expect("validated in forward");
                let (wd, vd) = (self.data(*w), self.data(*v));
                if let Some(dw) = self.acc(grads, *w) {
                    for b in 0..n {
                        let gr = &g[b * d..(b + 1) * d];
                        for j in 0..p {
                            let row = &vd[(b * p + j) * d..(b * p + j + 1) * d];
                            dw[b * p + j] += gr.iter().zip(row).map(|(&a, &c)| a * c).sum::<T>();
                        }
                    }
                }
                self.add_into(grads, *v, |j| wd[j / d] * g[(j / (p * d)) * d + j % d]);
            }
            Op::PairConcat { x, q } => {
                let (n, p, d) = npc(self.shape(*x)).expect("validated in forward");
                let s = self.shape(*q)[1];
                let w = 2 * d + s;
                if let Some(dx) = self.acc(grads, *x) {
                    for b in 0..n {
                        for i in 0..p {
                            for j in 0..p {
                                let row = &g[((b * p + i) * p + j) * w..((b * p + i) * p + j + 1) * w];
                                let (gi, gj) = (&row[..d], &row[d..2 * d]);
                                let xi = (b * p + i) * d;
                                let xj = (b * p + j) * d;
                                for k in 0..d {
                                    dx[xi + k] += gi[k];
                                    dx[xj + k] += gj[k];
                                }
                            }
                        }
                    }
                }
                if let Some(dq) = self.acc(grads, *q) {
                    for (r, row) in g.chunks(w).enumerate() {
                        let b = r / (p * p);
                        dq[b * s..(b + 1) * s]
                            .iter_mut()
                            .zip(&row[2 * d..])
                            .for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                self.add_into(grads, *logits, |j| {
                    let hit = if labels[j / k] == j % k { T::one() } else { T::zero() };
                    (probs[j] - hit) * scale
                });
            }
            Op::SumAll(x) => self.add_into(grads, *x, |_| g[0]),
        }
    }
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

/// Patch matrix `[N·Ho·Wo, Kh·Kw·C]`, patch entries ordered `(ky, kx, c)`.
fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let per_image = g.out_positions() * g.patch();
    let mut cols = vec![T::zero(); g.n * per_image];
    par::for_each_chunk_mut(&mut cols, per_image.max(1), |n, chunk| {
        let img = &x[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut chunk[(oy * g.wo + ox) * g.patch()..(oy * g.wo + ox + 1) * g.patch()];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * g.w + ix as usize) * g.c;
                        let dst = (ky * g.kw + kx) * g.c;
                        row[dst..dst + g.c].copy_from_slice(&img[src..src + g.c]);
                    }
                }
            }
        }
    });
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the input gradient.
fn col2im_add<T: Float>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let per_image = g.out_positions() * g.patch();
    par::for_each_chunk_mut(dx, (g.h * g.w * g.c).max(1), |n, img| {
        let chunk = &dcols[n * per_image..(n + 1) * per_image];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &chunk[(oy * g.wo + ox) * g.patch()..(oy * g.wo + ox + 1) * g.patch()];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((iy as usize) * g.w + ix as usize) * g.c;
                        let src = (ky * g.kw + kx) * g.c;
                        img[dst..dst + g.c]
                            .iter_mut()
                            .zip(&row[src..src + g.c])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    });
}
