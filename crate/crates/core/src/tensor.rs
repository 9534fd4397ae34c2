//! Dense row-major arrays and the value-level kernels shared with the tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, shape_err, Error, Result};
use crate::scalar::{Field, Real};

/// Dense N-D array. `grad` is only populated for parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Field> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(contract(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Row-major 2-D constructor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(contract("ragged rows"));
        }
        Self::new(vec![m, n], rows.iter().flatten().cloned().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(shape_err("accumulate_grad", &self.shape, &[delta.len()]));
        }
        match &mut self.grad {
            Some(g) => g
                .iter_mut()
                .zip(delta)
                .for_each(|(a, b)| *a = a.clone() + b.clone()),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(&T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(&T, &T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(a, b))
                .collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a.clone() + b.clone())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a.clone() - b.clone())
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a.clone() * b.clone())
    }

    pub fn scale(&self, c: &T) -> Self {
        self.map(|a| a.clone() * c.clone())
    }

    pub fn sum(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, x| acc + x.clone())
    }

    /// 2-D product; see [`matmul_into`] for the kernel.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2(&self.shape, "matmul")?;
        let (k2, n) = dims2(&other.shape, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }
}

impl<T: Real> Tensor<T> {
    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(shape_err("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(|&x| sigmoid(x))
    }

    pub fn gelu(&self) -> Self {
        self.map(|&x| gelu(x))
    }

    pub fn square(&self) -> Self {
        self.map(|&x| x * x)
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(bad) = self.data.iter().find(|x| **x <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(|&x| x.ln()))
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        let (m, n) = dims2(&self.shape, "softmax_rows")?;
        let mut out = self.data.clone();
        softmax_rows_inplace(&mut out, m, n);
        Self::new(vec![m, n], out)
    }

    /// Normalizes over the last axis then applies `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let d = *self.shape.last().ok_or_else(|| contract("layer_norm of scalar"))?;
        if gain.shape != [d] || bias.shape != [d] {
            return Err(shape_err("layer_norm", &self.shape, &gain.shape));
        }
        let mut out = vec![T::zero(); self.data.len()];
        for (row, dst) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let (_, rstd) = row_stats(row, eps);
            let mean = row_mean(row);
            for j in 0..d {
                dst[j] = (row[j] - mean) * rstd * gain.data[j] + bias.data[j];
            }
        }
        Self::new(self.shape.clone(), out)
    }
}

pub(crate) fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `out += a[m×k] · b[k×n]`, accumulating each output row independently so
/// a row's result does not depend on which other rows are present.
pub(crate) fn matmul_into<T: Field>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p].clone();
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = o.clone() + aip.clone() * bv.clone();
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a[r×m]ᵀ · b[r×n]`.
pub(crate) fn matmul_at_into<T: Real>(a: &[T], b: &[T], out: &mut [T], r: usize, m: usize, n: usize) {
    for p in 0..r {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_rows_inplace<T: Real>(data: &mut [T], m: usize, n: usize) {
    for row in data.chunks_mut(n).take(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
}

pub(crate) fn row_mean<T: Real>(row: &[T]) -> T {
    row.iter().copied().sum::<T>() / T::lit(row.len() as f64)
}

/// Returns (population variance, 1/sqrt(var + eps)).
pub(crate) fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let mean = row_mean(row);
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / T::lit(row.len() as f64);
    (var, T::one() / (var + eps).sqrt())
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow in either tail.
#[inline]
pub fn log_sigmoid<T: Real>(x: T) -> T {
    let neg = -x;
    -(neg.max(T::zero()) + (-(neg.abs())).exp().ln_1p())
}

/// Exact (erf-based) GELU: `x·Φ(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    x * std_normal_cdf(x)
}

#[inline]
pub(crate) fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    std_normal_cdf(x) + x * pdf
}
