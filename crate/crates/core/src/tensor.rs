//! Dense tensors and the linear operators that every layer is built from.
//!
//! Storage is row-major everywhere: a `(c, h, w)` image stores channel
//! planes back to back, and a dense `(out, in)` matrix stores rows back to
//! back. Checkpoint blobs rely on this layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Largest input dimension [`LinearOperator::materialize`] accepts.
pub const ORACLE_MAX_DIM: usize = 4096;

/// Scalar type used by tensors: `f32` for training, `f64` for oracles and flows.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static {
    /// Converts a literal; every `f64` is representable up to rounding.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::LengthMismatch { shape, len: data.len() });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    /// 1-D tensor; panics on non-finite input (use [`Tensor::new`] for untrusted data).
    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(data.iter().all(|v| v.is_finite()), "non-finite value in from_vec");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// Standard-normal entries from a seeded generator.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::of(v)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Unit-norm vector drawn from a seeded standard normal.
    pub fn random_unit(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut t = Self::randn(shape, &mut rng);
            let n = t.norm();
            if n > T::zero() {
                t.scale(T::one() / n);
                return t;
            }
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, a: T) {
        self.data.iter_mut().for_each(|v| *v = *v * a);
    }

    pub fn scaled(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: T, x: &Self) {
        debug_assert_eq!(self.len(), x.len());
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s = *s + a * v;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Dense `(out, in)` matrix acting on inputs of an arbitrary shape whose
/// total size is `in`; outputs are 1-D.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOp<T> {
    weight: Tensor<T>,
    in_shape: Vec<usize>,
}

/// Zero-padded 2-D convolution with unit dilation and stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dOp<T> {
    kernel: Tensor<T>,
    stride: usize,
    padding: usize,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearOperator<T> {
    Dense(DenseOp<T>),
    Conv2d(Conv2dOp<T>),
}

impl<T: Real> LinearOperator<T> {
    /// Dense operator over 1-D inputs of the matrix's column count.
    pub fn dense(weight: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dense weight must be 2-D, got shape {:?}",
                weight.shape()
            )));
        }
        let cols = weight.shape()[1];
        Self::dense_on(weight, vec![cols])
    }

    /// Dense operator whose input keeps `in_shape` (flattened row-major).
    pub fn dense_on(weight: Tensor<T>, in_shape: Vec<usize>) -> Result<Self> {
        if weight.shape().len() != 2 || weight.shape()[1] != in_shape.iter().product::<usize>() {
            return Err(Error::shape("dense operator", &in_shape, weight.shape()));
        }
        Ok(LinearOperator::Dense(DenseOp { weight, in_shape }))
    }

    pub fn conv2d(kernel: Tensor<T>, in_shape: [usize; 3], stride: usize, padding: usize) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must be (c_out, c_in, k_h, k_w), got {ks:?}"
            )));
        }
        if ks[1] != in_shape[0] {
            return Err(Error::shape("conv2d input channels", &[ks[1]], &[in_shape[0]]));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!(
                "conv stride must be 1 or 2, got {stride}"
            )));
        }
        let (kh, kw) = (ks[2], ks[3]);
        let (h, w) = (in_shape[1] + 2 * padding, in_shape[2] + 2 * padding);
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}x{kw} does not fit padded input {h}x{w}"
            )));
        }
        let out_shape = [ks[0], (h - kh) / stride + 1, (w - kw) / stride + 1];
        Ok(LinearOperator::Conv2d(Conv2dOp {
            kernel,
            stride,
            padding,
            in_shape,
            out_shape,
        }))
    }

    pub fn in_shape(&self) -> &[usize] {
        match self {
            LinearOperator::Dense(d) => &d.in_shape,
            LinearOperator::Conv2d(c) => &c.in_shape,
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        match self {
            LinearOperator::Dense(d) => vec![d.weight.shape()[0]],
            LinearOperator::Conv2d(c) => c.out_shape.to_vec(),
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_shape().iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape().iter().product()
    }

    /// The trainable tensor: the dense matrix or the convolution kernel.
    pub fn weight(&self) -> &Tensor<T> {
        match self {
            LinearOperator::Dense(d) => &d.weight,
            LinearOperator::Conv2d(c) => &c.kernel,
        }
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        match self {
            LinearOperator::Dense(d) => &mut d.weight,
            LinearOperator::Conv2d(c) => &mut c.kernel,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight().data().iter().all(|v| *v == T::zero())
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.in_shape() {
            return Err(Error::shape("linear operator input", self.in_shape(), x.shape()));
        }
        Ok(match self {
            LinearOperator::Dense(d) => d.matvec(x.data()),
            LinearOperator::Conv2d(c) => c.forward(x.data()),
        })
    }

    pub fn apply_adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.out_shape();
        if y.shape() != out.as_slice() {
            return Err(Error::shape("linear operator adjoint input", &out, y.shape()));
        }
        Ok(match self {
            LinearOperator::Dense(d) => d.matvec_t(y.data()),
            LinearOperator::Conv2d(c) => c.transpose(y.data()),
        })
    }

    /// Adds `scale * d<out_grad, W input>/dW` into `grad` (same shape as the weight).
    pub fn accumulate_weight_grad(&self, out_grad: &Tensor<T>, input: &Tensor<T>, scale: T, grad: &mut Tensor<T>) {
        debug_assert_eq!(grad.shape(), self.weight().shape());
        match self {
            LinearOperator::Dense(d) => {
                let cols = d.weight.shape()[1];
                let x = input.data();
                for (row, &g) in grad.data_mut().chunks_mut(cols).zip(out_grad.data()) {
                    let a = g * scale;
                    if a == T::zero() {
                        continue;
                    }
                    for (r, &xv) in row.iter_mut().zip(x) {
                        *r = *r + a * xv;
                    }
                }
            }
            LinearOperator::Conv2d(c) => c.kernel_grad(out_grad.data(), input.data(), scale, grad.data_mut()),
        }
    }

    /// Explicit matrix: column `j` is `apply(e_j)`.
    pub fn materialize(&self) -> Result<Tensor<T>> {
        let n = self.in_len();
        if n > ORACLE_MAX_DIM {
            return Err(Error::OracleScale {
                dim: n,
                limit: ORACLE_MAX_DIM,
            });
        }
        if let LinearOperator::Dense(d) = self {
            return Ok(d.weight.clone());
        }
        let m = self.out_len();
        let mut mat = vec![T::zero(); m * n];
        let mut basis = Tensor::zeros(self.in_shape());
        for j in 0..n {
            basis.data_mut()[j] = T::one();
            let col = self.apply(&basis)?;
            for (i, v) in col.data().iter().enumerate() {
                mat[i * n + j] = *v;
            }
            basis.data_mut()[j] = T::zero();
        }
        Ok(Tensor::from_parts(vec![m, n], mat))
    }
}

impl<T: Real> DenseOp<T> {
    fn matvec(&self, x: &[T]) -> Tensor<T> {
        let cols = self.weight.shape()[1];
        let out = self
            .weight
            .data()
            .chunks(cols)
            .map(|row| row.iter().zip(x).fold(T::zero(), |acc, (&w, &v)| acc + w * v))
            .collect::<Vec<_>>();
        Tensor::from_parts(vec![out.len()], out)
    }

    fn matvec_t(&self, y: &[T]) -> Tensor<T> {
        let cols = self.weight.shape()[1];
        let mut out = vec![T::zero(); cols];
        for (row, &yv) in self.weight.data().chunks(cols).zip(y) {
            if yv == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + w * yv;
            }
        }
        Tensor::from_parts(self.in_shape.clone(), out)
    }
}

impl<T: Real> Conv2dOp<T> {
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    /// Visits every (output position, input position, kernel tap) triple that
    /// lands inside the unpadded input. Arguments: `(out_idx, in_idx, kernel_idx)`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [co, oh, ow] = self.out_shape;
        let [ci, ih, iw] = self.in_shape;
        let (kh, kw) = (self.kernel.shape()[2], self.kernel.shape()[3]);
        let (s, p) = (self.stride as isize, self.padding as isize);
        for o in 0..co {
            for c in 0..ci {
                for a in 0..kh {
                    for b in 0..kw {
                        let k_idx = ((o * ci + c) * kh + a) * kw + b;
                        for i in 0..oh {
                            let r = i as isize * s + a as isize - p;
                            if r < 0 || r >= ih as isize {
                                continue;
                            }
                            let out_row = (o * oh + i) * ow;
                            let in_row = (c * ih + r as usize) * iw;
                            for j in 0..ow {
                                let q = j as isize * s + b as isize - p;
                                if q < 0 || q >= iw as isize {
                                    continue;
                                }
                                f(out_row + j, in_row + q as usize, k_idx);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[T]) -> Tensor<T> {
        let mut out = vec![T::zero(); self.out_shape.iter().product()];
        let k = self.kernel.data();
        self.for_each_tap(|oi, ii, ki| out[oi] = out[oi] + k[ki] * x[ii]);
        Tensor::from_parts(self.out_shape.to_vec(), out)
    }

    fn transpose(&self, y: &[T]) -> Tensor<T> {
        let mut out = vec![T::zero(); self.in_shape.iter().product()];
        let k = self.kernel.data();
        self.for_each_tap(|oi, ii, ki| out[ii] = out[ii] + k[ki] * y[oi]);
        Tensor::from_parts(self.in_shape.to_vec(), out)
    }

    fn kernel_grad(&self, g: &[T], x: &[T], scale: T, grad: &mut [T]) {
        self.for_each_tap(|oi, ii, ki| grad[ki] = grad[ki] + scale * g[oi] * x[ii]);
    }
}
