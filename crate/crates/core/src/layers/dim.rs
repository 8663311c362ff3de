//! Dimension-changing 1-Lipschitz maps: channel zero-padding, truncation and
//! windowed l2 pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimOp {
    /// Appends zero channels (3-D inputs) or zero features (1-D inputs).
    ZeroPad {
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
    },
    /// Keeps the leading `out_len` coordinates of the flattened input.
    Truncate { in_shape: Vec<usize>, out_len: usize },
    /// Euclidean norm over non-overlapping `window x window` patches per channel.
    L2Pool { in_shape: Vec<usize>, window: usize },
}

impl DimOp {
    pub fn zero_pad(in_shape: &[usize], to: usize) -> Result<Self> {
        let mut out_shape = in_shape.to_vec();
        match in_shape.len() {
            1 | 3 => {
                if to < in_shape[0] {
                    return Err(Error::InvalidArgument(format!(
                        "zero_pad target {to} is smaller than source {}",
                        in_shape[0]
                    )));
                }
                out_shape[0] = to;
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "zero_pad expects a 1-D or (c, h, w) input, got {in_shape:?}"
                )))
            }
        }
        Ok(DimOp::ZeroPad {
            in_shape: in_shape.to_vec(),
            out_shape,
        })
    }

    pub fn truncate(in_shape: &[usize], to: usize) -> Result<Self> {
        let n: usize = in_shape.iter().product();
        if to > n {
            return Err(Error::InvalidArgument(format!(
                "truncate target {to} is larger than source dimension {n}"
            )));
        }
        Ok(DimOp::Truncate {
            in_shape: in_shape.to_vec(),
            out_len: to,
        })
    }

    pub fn l2_pool(in_shape: &[usize], window: usize) -> Result<Self> {
        if in_shape.len() != 3
            || window == 0
            || !in_shape[1].is_multiple_of(window)
            || !in_shape[2].is_multiple_of(window)
        {
            return Err(Error::InvalidArgument(format!(
                "l2_pool window {window} must tile a (c, h, w) input, got {in_shape:?}"
            )));
        }
        Ok(DimOp::L2Pool {
            in_shape: in_shape.to_vec(),
            window,
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        match self {
            DimOp::ZeroPad { in_shape, .. } | DimOp::Truncate { in_shape, .. } | DimOp::L2Pool { in_shape, .. } => {
                in_shape
            }
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        match self {
            DimOp::ZeroPad { out_shape, .. } => out_shape.clone(),
            DimOp::Truncate { out_len, .. } => vec![*out_len],
            DimOp::L2Pool { in_shape, window } => vec![in_shape[0], in_shape[1] / window, in_shape[2] / window],
        }
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.in_shape() {
            return Err(Error::shape("dimension op input", self.in_shape(), x.shape()));
        }
        let out_shape = self.out_shape();
        let out_len: usize = out_shape.iter().product();
        let data = match self {
            DimOp::ZeroPad { .. } => {
                let mut d = x.data().to_vec();
                d.resize(out_len, T::zero());
                d
            }
            DimOp::Truncate { .. } => x.data()[..out_len].to_vec(),
            DimOp::L2Pool { in_shape, window } => {
                let mut sq = vec![T::zero(); out_len];
                self.for_each_pooled(in_shape, *window, |o, i| sq[o] = sq[o] + x.data()[i] * x.data()[i]);
                sq.into_iter().map(|v| v.sqrt()).collect()
            }
        };
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Vector-Jacobian product at `x` (`y` is the forward output).
    pub fn backward<T: Real>(&self, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let n = x.len();
        let data = match self {
            DimOp::ZeroPad { .. } => g.data()[..n].to_vec(),
            DimOp::Truncate { .. } => {
                let mut d = g.data().to_vec();
                d.resize(n, T::zero());
                d
            }
            DimOp::L2Pool { in_shape, window } => {
                let mut d = vec![T::zero(); n];
                self.for_each_pooled(in_shape, *window, |o, i| {
                    let norm = y.data()[o];
                    if norm > T::zero() {
                        d[i] = g.data()[o] * x.data()[i] / norm;
                    }
                });
                d
            }
        };
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    /// Jacobian-vector product at `x`.
    pub fn jvp<T: Real>(&self, x: &Tensor<T>, y: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            DimOp::ZeroPad { .. } | DimOp::Truncate { .. } => self.forward(v),
            DimOp::L2Pool { in_shape, window } => {
                let mut d = vec![T::zero(); y.len()];
                self.for_each_pooled(in_shape, *window, |o, i| {
                    let norm = y.data()[o];
                    if norm > T::zero() {
                        d[o] = d[o] + x.data()[i] * v.data()[i] / norm;
                    }
                });
                Ok(Tensor::from_parts(y.shape().to_vec(), d))
            }
        }
    }

    /// Calls `f(out_index, in_index)` for every input entry of every pooling window.
    fn for_each_pooled(&self, in_shape: &[usize], window: usize, mut f: impl FnMut(usize, usize)) {
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (oh, ow) = (h / window, w / window);
        for ch in 0..c {
            for r in 0..h {
                for q in 0..w {
                    let o = (ch * oh + r / window) * ow + q / window;
                    f(o, (ch * h + r) * w + q);
                }
            }
        }
    }
}
