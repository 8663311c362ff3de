//! Last-layer normalization: a linear classifier head whose rows are divided
//! by their Euclidean norms before use.

use crate::error::{Error, Result};
use crate::spectral::spectral_norm_oracle;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHead<T> {
    /// Raw `(classes, in_len)` weights; rows are normalized on use.
    pub(crate) weight: Tensor<T>,
    in_shape: Vec<usize>,
}

impl<T: Real> NormalizedHead<T> {
    pub fn new(weight: Tensor<T>, in_shape: Vec<usize>) -> Result<Self> {
        let n: usize = in_shape.iter().product();
        if weight.shape().len() != 2 || weight.shape()[1] != n {
            return Err(Error::shape("normalized head", &[n], weight.shape()));
        }
        Ok(NormalizedHead { weight, in_shape })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    fn cols(&self) -> usize {
        self.weight.shape()[1]
    }

    fn row_norms(&self) -> Vec<T> {
        self.weight
            .data()
            .chunks(self.cols())
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect()
    }

    /// The row-normalized matrix actually applied.
    pub fn normalized(&self) -> Tensor<T> {
        let cols = self.cols();
        let norms = self.row_norms();
        let mut data = self.weight.data().to_vec();
        for (row, n) in data.chunks_mut(cols).zip(norms) {
            let inv = if n > T::zero() { T::one() / n } else { T::zero() };
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        Tensor::from_parts(self.weight.shape().to_vec(), data)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.in_shape.as_slice() {
            return Err(Error::shape("normalized head input", &self.in_shape, x.shape()));
        }
        let w = self.normalized();
        let out = w
            .data()
            .chunks(self.cols())
            .map(|r| r.iter().zip(x.data()).fold(T::zero(), |a, (&wv, &xv)| a + wv * xv))
            .collect::<Vec<_>>();
        Ok(Tensor::from_parts(vec![out.len()], out))
    }

    /// Linear map, so the JVP is the forward pass on `v`.
    pub fn jvp(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(v)
    }

    pub fn backward(&self, x: &Tensor<T>, g: &Tensor<T>, grads: Option<&mut [Tensor<T>]>) -> Tensor<T> {
        let cols = self.cols();
        let w = self.normalized();
        let mut dx = vec![T::zero(); cols];
        for (row, &gv) in w.data().chunks(cols).zip(g.data()) {
            for (d, &r) in dx.iter_mut().zip(row) {
                *d = *d + r * gv;
            }
        }
        if let Some(grads) = grads {
            // d(r . x)/dw = (x - r (r . x)) / |w|
            let norms = self.row_norms();
            let grad = grads[0].data_mut();
            for (i, ((row, &gv), &n)) in w.data().chunks(cols).zip(g.data()).zip(&norms).enumerate() {
                if n == T::zero() {
                    continue;
                }
                let rx = row.iter().zip(x.data()).fold(T::zero(), |a, (&r, &xv)| a + r * xv);
                let s = gv / n;
                for j in 0..cols {
                    grad[i * cols + j] = grad[i * cols + j] + s * (x.data()[j] - row[j] * rx);
                }
            }
        }
        Tensor::from_parts(self.in_shape.clone(), dx)
    }

    /// Exact spectral norm of the normalized matrix, via its `classes x classes` Gram matrix.
    pub fn spectral_norm(&self) -> Result<f64> {
        let w = self.normalized().cast::<f64>();
        let (k, cols) = (self.classes(), self.cols());
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (ri, rj) = (&w.data()[i * cols..(i + 1) * cols], &w.data()[j * cols..(j + 1) * cols]);
                gram[i * k + j] = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            }
        }
        let lambda = spectral_norm_oracle(&Tensor::from_parts(vec![k, k], gram))?;
        Ok(lambda.sqrt())
    }

    pub(crate) fn params(&self) -> [&Tensor<T>; 1] {
        [&self.weight]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor<T>; 1] {
        [&mut self.weight]
    }
}
