use crate::error::{contract, Result};
use crate::scalar::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<S> {
    shape: Vec<usize>,
    values: Vec<S>,
}

impl<S: Real> Grid<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return contract(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                values.len()
            ));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(f).collect(),
        }
    }

    /// Builds a 2-D grid from equal-length rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return contract("ragged rows");
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return contract(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a one-element grid.
    pub fn item(&self) -> Result<S> {
        if self.values.len() != 1 {
            return contract(format!("item() on grid of shape {:?}", self.shape));
        }
        Ok(self.values[0])
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.values[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: S) {
        let o = self.offset(index);
        self.values[o] = v;
    }

    /// Row `i` of a grid viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[S] {
        let w = self.values.len() / self.shape[0];
        &self.values[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return contract(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return contract(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.values.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    /// Matrix product of two 2-D grids.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return contract(format!(
                "matmul shapes {:?} x {:?}",
                self.shape, other.shape
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(&self.values, &other.values, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return contract(format!("transpose2 on shape {:?}", self.shape));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.values[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Generic axis permutation.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return contract(format!("invalid permutation {:?} for {:?}", perm, self.shape));
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.values[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < new_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::new(new_shape, out)
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`, accumulating in ascending `k`.
pub(crate) fn matmul_into<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_bt_into<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_at_into<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
pub fn softmax<S: Real>(logits: &Grid<S>, axis: usize) -> Result<Grid<S>> {
    if axis >= logits.ndim() {
        return contract(format!(
            "softmax axis {} out of range for shape {:?}",
            axis,
            logits.shape()
        ));
    }
    let shape = logits.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let src = logits.values();
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mx = (0..n).map(|k| src[at(k)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for k in 0..n {
                let e = (src[at(k)] - mx).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Grid::new(shape.to_vec(), out)
}

/// `ln(sum(exp(v)))` over log-domain values; negative infinity is the log-domain zero.
pub fn log_sum_exp<S: Real>(values: &[S]) -> Result<S> {
    if values.is_empty() {
        return contract("log_sum_exp of an empty list");
    }
    Ok(log_sum_exp_unchecked(values))
}

pub(crate) fn log_sum_exp_unchecked<S: Real>(values: &[S]) -> S {
    let mx = values.iter().copied().fold(S::neg_infinity(), S::max);
    if mx == S::neg_infinity() {
        return mx;
    }
    let total: S = values.iter().map(|&v| (v - mx).exp()).sum();
    mx + total.ln()
}

/// Two-term `ln(exp(a) + exp(b))`.
pub fn log_add<S: Real>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
