//! Orthogonal layers driven by the skew part of a free operator `M`.
//!
//! With `S = (M - M^T) / 4` (half of the skew part `A = (M - M^T) / 2`):
//! - Cayley: `y = (I - S)^{-1} (I + S) x`, the midpoint step of `du/ds = A u`
//! - exponential: `y = sum_{k<=n} S^k x / k!`, a truncated `exp(A/2) x`
//!
//! The exponential scheme only needs `M` and `M^T` products, so it runs on
//! convolutions without materializing them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LinearOperator, Real, Tensor};

pub const DEFAULT_TAYLOR_TERMS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SkewScheme {
    Cayley,
    Exponential { terms: usize },
}

#[derive(Debug, Clone)]
pub enum SkewCache<T> {
    Cayley { y: Tensor<T> },
    Exponential { terms: Vec<Tensor<T>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkewLayer<T> {
    pub(crate) op: LinearOperator<T>,
    pub scheme: SkewScheme,
}

impl<T: Real> SkewLayer<T> {
    pub fn new(op: LinearOperator<T>, scheme: SkewScheme) -> Result<Self> {
        let square = match &op {
            // a dense operator may act on a flattened (c, h, w) input
            LinearOperator::Dense(_) => op.in_len() == op.out_len(),
            LinearOperator::Conv2d(_) => op.in_shape() == op.out_shape().as_slice(),
        };
        if !square {
            return Err(Error::shape(
                "skew layer (square operator)",
                op.in_shape(),
                &op.out_shape(),
            ));
        }
        if let SkewScheme::Exponential { terms } = scheme {
            if terms == 0 {
                return Err(Error::InvalidArgument("taylor_terms must be at least 1".into()));
            }
        }
        Ok(SkewLayer { op, scheme })
    }

    pub fn op(&self) -> &LinearOperator<T> {
        &self.op
    }

    pub fn shape(&self) -> &[usize] {
        self.op.in_shape()
    }

    /// `S x` with `S = (M - M^T) / 4`.
    pub fn half_skew_apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        let out_shape = self.op.out_shape();
        let flat = Tensor::from_parts(out_shape, x.data().to_vec());
        let mut out = Tensor::from_parts(shape, self.op.apply(x)?.into_data());
        out.axpy(-T::one(), &self.op.apply_adjoint(&flat)?);
        out.scale(T::of(0.25));
        Ok(out)
    }

    /// Dense `S` in 64-bit.
    pub fn half_skew_matrix(&self) -> Result<DMatrix<f64>> {
        let m = self.op.materialize()?;
        let n = m.shape()[0];
        let d = m.data();
        Ok(DMatrix::from_fn(n, n, |i, j| {
            0.25 * (d[i * n + j].as_f64() - d[j * n + i].as_f64())
        }))
    }

    /// Adds `scale * d<a, S b>/dM` into `grad`.
    fn skew_bilinear_grad(&self, a: &Tensor<T>, b: &Tensor<T>, scale: T, grad: &mut Tensor<T>) {
        let q = T::of(0.25) * scale;
        self.op.accumulate_weight_grad(a, b, q, grad);
        self.op.accumulate_weight_grad(b, a, -q, grad);
    }

    fn cayley_solve(&self, x: &Tensor<T>, transpose: bool) -> Result<Tensor<T>> {
        // Solves (I - S) y = (I + S) x, or its transpose (I + S) w = x.
        let s = self.half_skew_matrix()?;
        let n = s.nrows();
        let eye = DMatrix::<f64>::identity(n, n);
        let xv = DVector::from_iterator(n, x.data().iter().map(|v| v.as_f64()));
        let (lhs, rhs) = if transpose {
            (&eye + &s, xv)
        } else {
            (&eye - &s, (&eye + &s) * &xv)
        };
        let y = lhs
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("Cayley system is singular".into()))?;
        let residual = (&lhs * &y - &rhs).norm();
        let tol = 1e-8f64.max(1e3 * T::epsilon().as_f64()) * (1.0 + rhs.norm());
        if !(residual <= tol) {
            return Err(Error::Numerical(format!(
                "Cayley solve residual {residual:e} exceeds {tol:e}"
            )));
        }
        let data = y.iter().map(|&v| T::of(v)).collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SkewCache<T>)> {
        if x.shape() != self.shape() {
            return Err(Error::shape("skew layer input", self.shape(), x.shape()));
        }
        match self.scheme {
            SkewScheme::Cayley => {
                let y = self.cayley_solve(x, false)?;
                Ok((y.clone(), SkewCache::Cayley { y }))
            }
            SkewScheme::Exponential { terms } => {
                let mut series = Vec::with_capacity(terms + 1);
                series.push(x.clone());
                let mut y = x.clone();
                for k in 1..=terms {
                    let mut t = self.half_skew_apply(&series[k - 1])?;
                    t.scale(T::one() / T::of(k as f64));
                    y.axpy(T::one(), &t);
                    series.push(t);
                }
                Ok((y, SkewCache::Exponential { terms: series }))
            }
        }
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &SkewCache<T>,
        g: &Tensor<T>,
        grads: Option<&mut [Tensor<T>]>,
    ) -> Result<Tensor<T>> {
        match cache {
            SkewCache::Cayley { y } => {
                // w = (I - S)^{-T} g = (I + S)^{-1} g;  dx = (I + S)^T w = (I - S) w
                let w = self.cayley_solve(g, true)?;
                let mut dx = w.clone();
                dx.axpy(-T::one(), &self.half_skew_apply(&w)?);
                if let Some(grads) = grads {
                    let xy = x.add(y);
                    self.skew_bilinear_grad(&w, &xy, T::one(), &mut grads[0]);
                }
                Ok(dx)
            }
            SkewCache::Exponential { terms } => {
                // adjoint series: G_n = g, G_k = g + S^T G_{k+1} / (k + 1), S^T = -S
                let n = terms.len() - 1;
                let mut upstream = g.clone();
                let mut grads = grads;
                for k in (1..=n).rev() {
                    if let Some(gr) = grads.as_deref_mut() {
                        let s = T::one() / T::of(k as f64);
                        self.skew_bilinear_grad(&upstream, &terms[k - 1], s, &mut gr[0]);
                    }
                    let mut back = self.half_skew_apply(&upstream)?;
                    back.scale(-T::one() / T::of(k as f64));
                    upstream = g.add(&back);
                }
                Ok(upstream)
            }
        }
    }

    pub fn jvp(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(v)?.0)
    }

    pub(crate) fn params(&self) -> [&Tensor<T>; 1] {
        [self.op.weight()]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor<T>; 1] {
        [self.op.weight_mut()]
    }
}
