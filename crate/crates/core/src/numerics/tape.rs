//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward sweep. Parameters are copied onto the tape when
//! first referenced; gradients flow back into a [`ParamSet`].

use std::collections::HashMap;

use rand::Rng;

use super::grid::{matmul_at_into, matmul_bt_into, matmul_into, Grid};
use crate::error::{contract, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Grid<S>,
    pub grad: Grid<S>,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Grid<S>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return contract(format!("duplicate parameter name {name}"));
        }
        let grad = Grid::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.values_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Adds a list of per-parameter gradients (as returned by [`Tape::gradients`]).
    pub fn accumulate(&mut self, grads: &[(ParamId, Grid<S>)]) -> Result<()> {
        for (id, g) in grads {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: S) {
        for p in &mut self.params {
            p.grad.values_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> S {
        self.params
            .iter()
            .flat_map(|p| p.grad.values())
            .map(|&g| g * g)
            .sum::<S>()
            .sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

enum Op<S> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Shift(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogClamp(Var, S),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SliceLast(Var, usize, usize),
    ConcatLast(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    AvgPool(Var),
    MulMaps(Var, Var),
    Sum(Var),
    MulConst(Var, Grid<S>),
    Custom(Var, Grid<S>),
}

struct Node<S> {
    value: Grid<S>,
    op: Op<S>,
}

/// A single forward pass recorded for differentiation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return contract(format!("{what}: shape mismatch {a:?} vs {b:?}"));
    }
    Ok(())
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Grid<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Grid<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input that receives no gradient.
    pub fn input(&mut self, value: Grid<S>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, set: &ParamSet<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(set.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// Matrix product of 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.value(bias).len() != n {
            return contract(format!(
                "bias of {} values for last dim {}",
                self.value(bias).len(),
                n
            ));
        }
        let bv = self.value(bias).values().to_vec();
        let mut value = self.value(a).clone();
        for (i, v) in value.values_mut().iter_mut().enumerate() {
            *v += bv[i % n];
        }
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    /// `input · weight + bias` over the last axis of a 2-D input.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = self.matmul(input, weight)?;
        match bias {
            Some(b) => self.add_bias(out, b),
            None => Ok(out),
        }
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::Shift(a))
    }

    /// Multiplies every element of `a` by the one-element `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let f = self.value(s).item()?;
        let value = self.value(a).map(|x| x * f);
        Ok(self.push(value, Op::ScaleBy(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| S::one() / (S::one() + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamp(&mut self, a: Var, floor: S) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push(value, Op::LogClamp(a, floor))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = super::grid::softmax(x, x.ndim() - 1)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Softmax over the last axis where `allowed[row * n + col] == false`
    /// entries get exactly zero probability. Each row needs one allowed entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if allowed.len() != x.len() {
            return contract("mask size differs from input");
        }
        let n = last_dim(x.shape());
        let mut out = vec![S::zero(); x.len()];
        for (r, row) in x.values().chunks(n).enumerate() {
            let mask = &allowed[r * n..(r + 1) * n];
            let mx = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(S::neg_infinity(), S::max);
            if mx == S::neg_infinity() {
                return contract(format!("masked softmax row {r} has no allowed entry"));
            }
            let mut total = S::zero();
            for c in 0..n {
                if mask[c] {
                    let e = (row[c] - mx).exp();
                    out[r * n + c] = e;
                    total += e;
                }
            }
            for c in 0..n {
                out[r * n + c] /= total;
            }
        }
        let value = Grid::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Per-position standardisation over the last axis with learnable gain/offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let n = last_dim(xv.shape());
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return contract("layer_norm gain/bias size differs from last dim");
        }
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let nn = S::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.len() / n.max(1));
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.values().chunks(n) {
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let value = Grid::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        Ok(self.push(value, Op::Permute(a, perm.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let n = last_dim(x.shape());
        if start >= end || end > n {
            return contract(format!("slice {start}..{end} of last dim {n}"));
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let values = x
            .values()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let value = Grid::new(shape, values)?;
        Ok(self.push(value, Op::SliceLast(a, start, end)))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract("concat of nothing");
        }
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return contract("concat leading dims differ");
            }
            width += last_dim(s);
        }
        let mut values = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let x = self.value(p);
                let n = last_dim(x.shape());
                values.extend_from_slice(&x.values()[r * n..(r + 1) * n]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Grid::new(shape, values)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec())))
    }

    /// 2-D convolution: `x [N, Cin, H, W]`, `w [Cout, Cin, k, k]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return contract(format!("conv2d shapes x {xs:?} w {ws:?}"));
        }
        if self.value(b).len() != ws[0] || geom.stride == 0 {
            return contract("conv2d bias size or stride");
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * geom.pad < k || wd + 2 * geom.pad < k {
            return contract("conv2d kernel larger than padded input");
        }
        let ho = (h + 2 * geom.pad - k) / geom.stride + 1;
        let wo = (wd + 2 * geom.pad - k) / geom.stride + 1;
        let ckk = cin * k * k;
        let hw = ho * wo;
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let bv = self.value(b).values();
        let mut cols = vec![S::zero(); n * ckk * hw];
        let mut out = vec![S::zero(); n * cout * hw];
        for img in 0..n {
            let col = &mut cols[img * ckk * hw..(img + 1) * ckk * hw];
            im2col(
                &xv[img * cin * h * wd..(img + 1) * cin * h * wd],
                col,
                (cin, h, wd),
                k,
                geom,
                (ho, wo),
            );
            let o = &mut out[img * cout * hw..(img + 1) * cout * hw];
            for (c, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[c]);
            }
            matmul_into(wv, col, o, cout, ckk, hw);
        }
        let value = Grid::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Adaptive average pooling of `[N, C, H, W]` down to `[N, C, oh, ow]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 || oh > xs[2] || ow > xs[3] {
            return contract(format!("adaptive pool {xs:?} -> {oh}x{ow}"));
        }
        let (h, w) = (xs[2], xs[3]);
        let rb = pool_bins(h, oh);
        let cb = pool_bins(w, ow);
        let xv = self.value(x).values();
        let planes = xs[0] * xs[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for &(r0, r1) in &rb {
                for &(c0, c1) in &cb {
                    let mut acc = S::zero();
                    for r in r0..r1 {
                        for c in c0..c1 {
                            acc += plane[r * w + c];
                        }
                    }
                    out.push(acc / S::from_usize((r1 - r0) * (c1 - c0)).unwrap());
                }
            }
        }
        let value = Grid::new(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool(x)))
    }

    /// `feats [N, D, H, W] ⊙ maps [N, H, W]`, broadcast over channels.
    pub fn mul_maps(&mut self, feats: Var, maps: Var) -> Result<Var> {
        let fs = self.shape(feats).to_vec();
        let ms = self.shape(maps).to_vec();
        if fs.len() != 4 || ms.len() != 3 || fs[0] != ms[0] || fs[2..] != ms[1..] {
            return contract(format!("mul_maps shapes {fs:?} and {ms:?}"));
        }
        let hw = fs[2] * fs[3];
        let fv = self.value(feats).values();
        let mv = self.value(maps).values();
        let mut out = Vec::with_capacity(fv.len());
        for n in 0..fs[0] {
            let m = &mv[n * hw..(n + 1) * hw];
            for d in 0..fs[1] {
                let base = (n * fs[1] + d) * hw;
                out.extend(fv[base..base + hw].iter().zip(m).map(|(&a, &b)| a * b));
            }
        }
        let value = Grid::new(fs, out)?;
        Ok(self.push(value, Op::MulMaps(feats, maps)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Grid::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, S::one() / n)
    }

    /// Elementwise product with a constant grid (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Grid<S>) -> Result<Var> {
        let value = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(value, Op::MulConst(a, c)))
    }

    /// Elementwise sum with a constant grid (positional encodings).
    pub fn add_const(&mut self, a: Var, c: &Grid<S>) -> Result<Var> {
        let value = self.value(a).zip_map(c, |x, y| x + y)?;
        Ok(self.push(value, Op::Shift(a)))
    }

    /// Inverted dropout with keep-probability `1 - p`; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: S, rng: &mut impl Rng) -> Result<Var> {
        if p <= S::zero() {
            return Ok(a);
        }
        if p >= S::one() {
            return contract("dropout probability must be < 1");
        }
        let keep = S::one() - p;
        let pf = p.as_f64();
        let shape = self.shape(a).to_vec();
        let mask = Grid::from_fn(&shape, |_| {
            if rng.random::<f64>() < pf {
                S::zero()
            } else {
                S::one() / keep
            }
        });
        self.mul_const(a, mask)
    }

    /// A node whose value and input-gradient were computed outside the tape:
    /// `value` must be a scalar and `grad` its derivative with respect to `input`.
    pub fn custom_scalar(&mut self, input: Var, value: S, grad: Grid<S>) -> Result<Var> {
        check_same(self.shape(input), grad.shape(), "custom_scalar")?;
        Ok(self.push(Grid::scalar(value), Op::Custom(input, grad)))
    }

    /// Gradients of the scalar `loss` with respect to every parameter it reaches,
    /// in ascending parameter order.
    pub fn gradients(&self, loss: Var) -> Result<Vec<(ParamId, Grid<S>)>> {
        if self.value(loss).len() != 1 {
            return contract(format!(
                "backward on non-scalar of shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Grid<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Grid::filled(self.shape(loss), S::one()));
        let mut out = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out)?;
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    /// Accumulates `d loss / d param` into every reachable parameter's `grad`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<S>) -> Result<()> {
        let grads = self.gradients(loss)?;
        params.accumulate(&grads)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Grid<S>,
        grads: &mut [Option<Grid<S>>],
        out: &mut Vec<(ParamId, Grid<S>)>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Grid<S>>], v: Var, delta: Grid<S>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.push((*id, g.clone())),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                let mut da = vec![S::zero(); m * k];
                matmul_bt_into(g.values(), bv.values(), &mut da, m, n, k);
                let mut db = vec![S::zero(); k * n];
                matmul_at_into(av.values(), g.values(), &mut db, m, k, n);
                acc(grads, *a, Grid::new(vec![m, k], da)?)?;
                acc(grads, *b, Grid::new(vec![k, n], db)?)?;
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::AddBias(a, b) => {
                let n = self.value(*b).len();
                let mut db = vec![S::zero(); n];
                for (j, &v) in g.values().iter().enumerate() {
                    db[j % n] += v;
                }
                acc(grads, *a, g.clone())?;
                acc(grads, *b, Grid::new(self.shape(*b).to_vec(), db)?)?;
            }
            Op::Scale(a, f) => acc(grads, *a, g.map(|x| x * *f))?,
            Op::Shift(a) => acc(grads, *a, g.clone())?,
            Op::ScaleBy(a, s) => {
                let f = self.value(*s).item()?;
                let ds = g
                    .values()
                    .iter()
                    .zip(self.value(*a).values())
                    .map(|(&x, &y)| x * y)
                    .sum();
                acc(grads, *a, g.map(|x| x * f))?;
                acc(grads, *s, Grid::new(self.shape(*s).to_vec(), vec![ds])?)?;
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |x, y| if y > S::zero() { x } else { S::zero() })?;
                acc(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |x, y| x * y * (S::one() - y))?;
                acc(grads, *a, d)?;
            }
            Op::LogClamp(a, floor) => {
                let d = g.zip_map(self.value(*a), |x, y| if y > *floor { x / y } else { S::zero() })?;
                acc(grads, *a, d)?;
            }
            Op::Softmax(a) => {
                let y = node.value.values();
                let n = last_dim(node.value.shape());
                let mut d = vec![S::zero(); y.len()];
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g.values()[r * n..(r + 1) * n];
                    let dot: S = ys.iter().zip(gs).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        d[r * n + c] = ys[c] * (gs[c] - dot);
                    }
                }
                acc(grads, *a, Grid::new(node.value.shape().to_vec(), d)?)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = last_dim(node.value.shape());
                let nn = S::from_usize(n).unwrap();
                let gv = self.value(*gain).values();
                let mut dx = vec![S::zero(); xhat.len()];
                let mut dg = vec![S::zero(); n];
                let mut db = vec![S::zero(); n];
                for r in 0..xhat.len() / n {
                    let gs = &g.values()[r * n..(r + 1) * n];
                    let hs = &xhat[r * n..(r + 1) * n];
                    let mut sum_d = S::zero();
                    let mut sum_dh = S::zero();
                    for c in 0..n {
                        dg[c] += gs[c] * hs[c];
                        db[c] += gs[c];
                        let dh = gs[c] * gv[c];
                        sum_d += dh;
                        sum_dh += dh * hs[c];
                    }
                    for c in 0..n {
                        let dh = gs[c] * gv[c];
                        dx[r * n + c] = inv_std[r] / nn * (nn * dh - sum_d - hs[c] * sum_dh);
                    }
                }
                acc(grads, *x, Grid::new(node.value.shape().to_vec(), dx)?)?;
                acc(grads, *gain, Grid::new(self.shape(*gain).to_vec(), dg)?)?;
                acc(grads, *bias, Grid::new(self.shape(*bias).to_vec(), db)?)?;
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(grads, *a, g.permute(&inv)?)?;
            }
            Op::Reshape(a) => {
                acc(grads, *a, g.clone().reshape(self.shape(*a))?)?;
            }
            Op::SliceLast(a, start, end) => {
                let src = self.shape(*a).to_vec();
                let n = last_dim(&src);
                let w = end - start;
                let mut d = vec![S::zero(); self.value(*a).len()];
                for (r, row) in g.values().chunks(w).enumerate() {
                    d[r * n + start..r * n + end].copy_from_slice(row);
                }
                acc(grads, *a, Grid::new(src, d)?)?;
            }
            Op::ConcatLast(parts) => {
                let width = last_dim(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let n = last_dim(&shape);
                    let d: Vec<S> = g
                        .values()
                        .chunks(width)
                        .flat_map(|row| row[offset..offset + n].iter().copied())
                        .collect();
                    acc(grads, p, Grid::new(shape, d)?)?;
                    offset += n;
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let os = node.value.shape();
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                let (ho, wo) = (os[2], os[3]);
                let ckk = cin * k * k;
                let hw = ho * wo;
                let wv = self.value(*w).values();
                let mut dw = vec![S::zero(); cout * ckk];
                let mut db = vec![S::zero(); cout];
                let mut dx = vec![S::zero(); n * cin * h * wd];
                let mut dcol = vec![S::zero(); ckk * hw];
                for img in 0..n {
                    let go = &g.values()[img * cout * hw..(img + 1) * cout * hw];
                    let col = &cols[img * ckk * hw..(img + 1) * ckk * hw];
                    for (c, chunk) in go.chunks(hw).enumerate() {
                        db[c] += chunk.iter().copied().sum();
                    }
                    matmul_bt_into(go, col, &mut dw, cout, hw, ckk);
                    dcol.iter_mut().for_each(|v| *v = S::zero());
                    matmul_at_into(wv, go, &mut dcol, cout, ckk, hw);
                    col2im(
                        &dcol,
                        &mut dx[img * cin * h * wd..(img + 1) * cin * h * wd],
                        (cin, h, wd),
                        k,
                        *geom,
                        (ho, wo),
                    );
                }
                acc(grads, *x, Grid::new(xs, dx)?)?;
                acc(grads, *w, Grid::new(ws, dw)?)?;
                acc(grads, *b, Grid::new(self.shape(*b).to_vec(), db)?)?;
            }
            Op::AvgPool(x) => {
                let xs = self.shape(*x).to_vec();
                let os = node.value.shape();
                let (h, w, oh, ow) = (xs[2], xs[3], os[2], os[3]);
                let rb = pool_bins(h, oh);
                let cb = pool_bins(w, ow);
                let mut d = vec![S::zero(); self.value(*x).len()];
                for p in 0..xs[0] * xs[1] {
                    for (i, &(r0, r1)) in rb.iter().enumerate() {
                        for (j, &(c0, c1)) in cb.iter().enumerate() {
                            let share = g.values()[(p * oh + i) * ow + j]
                                / S::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    d[p * h * w + r * w + c] += share;
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Grid::new(xs, d)?)?;
            }
            Op::MulMaps(f, m) => {
                let fs = self.shape(*f).to_vec();
                let ms = self.shape(*m).to_vec();
                let hw = fs[2] * fs[3];
                let fv = self.value(*f).values();
                let mv = self.value(*m).values();
                let mut df = vec![S::zero(); fv.len()];
                let mut dm = vec![S::zero(); mv.len()];
                for n in 0..fs[0] {
                    for d in 0..fs[1] {
                        let base = (n * fs[1] + d) * hw;
                        for c in 0..hw {
                            let gv = g.values()[base + c];
                            df[base + c] = gv * mv[n * hw + c];
                            dm[n * hw + c] += gv * fv[base + c];
                        }
                    }
                }
                acc(grads, *f, Grid::new(fs, df)?)?;
                acc(grads, *m, Grid::new(ms, dm)?)?;
            }
            Op::Sum(a) => {
                let v = g.item()?;
                acc(grads, *a, Grid::filled(self.shape(*a), v))?;
            }
            Op::MulConst(a, c) => acc(grads, *a, g.zip_map(c, |x, y| x * y)?)?,
            Op::Custom(a, local) => {
                let v = g.item()?;
                acc(grads, *a, local.map(|x| x * v))?;
            }
        }
        Ok(())
    }
}

/// Adaptive pooling bins: `[floor(i*n/m), ceil((i+1)*n/m))` for `i < m`.
pub fn pool_bins(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .map(|i| ((i * n) / m, ((i + 1) * n).div_ceil(m)))
        .collect()
}

fn im2col<S: Real>(
    x: &[S],
    col: &mut [S],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    geom: ConvGeom,
    (ho, wo): (usize, usize),
) {
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oi in 0..ho {
                    let r = (oi * geom.stride + ki) as isize - geom.pad as isize;
                    for oj in 0..wo {
                        let cc = (oj * geom.stride + kj) as isize - geom.pad as isize;
                        dst[oi * wo + oj] = if r >= 0 && (r as usize) < h && cc >= 0 && (cc as usize) < w {
                            x[(c * h + r as usize) * w + cc as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Real>(
    col: &[S],
    dx: &mut [S],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    geom: ConvGeom,
    (ho, wo): (usize, usize),
) {
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for oi in 0..ho {
                    let r = (oi * geom.stride + ki) as isize - geom.pad as isize;
                    if r < 0 || r as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let cc = (oj * geom.stride + kj) as isize - geom.pad as isize;
                        if cc >= 0 && (cc as usize) < w {
                            dx[(c * h + r as usize) * w + cc as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}
