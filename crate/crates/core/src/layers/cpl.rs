//! Convex Potential Layer: `z = x - h W^T act(W x + b)` with `h = 2 / |W|_2^2`.
//!
//! `W^T act(W x + b)` is the gradient of the convex potential
//! `sum_i phi(w_i . x + b_i)` with `phi' = act`, so the layer is an explicit
//! gradient step whose size keeps it nonexpansive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::spectral::{power_converge, power_step, PowerStep, SpectralState};
use crate::tensor::{LinearOperator, Real, Tensor};

/// Nondecreasing 1-Lipschitz scalar activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative, with `relu'(0) = 0`.
    #[inline]
    pub fn derivative<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = v.tanh();
                T::one() - t * t
            }
        }
    }
}

/// Effective residual step of a CPL for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step<T> {
    /// Zero weights: the layer is the identity.
    Identity,
    Residual(T),
}

#[derive(Debug, Clone)]
pub struct CplCache<T> {
    pre: Tensor<T>,
    act: Tensor<T>,
    step: Step<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpLayer<T> {
    pub(crate) op: LinearOperator<T>,
    pub(crate) bias: Tensor<T>,
    pub activation: Activation,
    pub spectral: SpectralState<T>,
    /// Fixed step replacing `2 / sigma^2`; makes the layer uncertifiable.
    pub step_override: Option<T>,
}

impl<T: Real> CpLayer<T> {
    /// `bias` has one entry per output coordinate (dense) or per output channel (conv).
    pub fn new(op: LinearOperator<T>, bias: Tensor<T>, activation: Activation, seed: u64) -> Result<Self> {
        let expected = match &op {
            LinearOperator::Dense(_) => op.out_len(),
            LinearOperator::Conv2d(_) => op.out_shape()[0],
        };
        if bias.shape() != [expected] {
            return Err(Error::shape("CPL bias", &[expected], bias.shape()));
        }
        let spectral = SpectralState::new(op.in_shape(), seed);
        Ok(CpLayer {
            op,
            bias,
            activation,
            spectral,
            step_override: None,
        })
    }

    pub fn op(&self) -> &LinearOperator<T> {
        &self.op
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn shape(&self) -> &[usize] {
        self.op.in_shape()
    }

    pub fn step(&self, mode: Mode, layer: usize) -> Result<Step<T>> {
        if let Some(h) = self.step_override {
            return Ok(Step::Residual(h));
        }
        if self.op.is_zero() {
            return Ok(Step::Identity);
        }
        let s = self.spectral.sigma;
        if s > T::zero() {
            return Ok(Step::Residual(T::of(2.0) / (s * s)));
        }
        match mode {
            Mode::Infer => Err(Error::DegenerateLayer { layer }),
            // a degenerate power step during training leaves sigma at zero;
            // the layer sits out this step rather than dividing by zero
            Mode::Train => Ok(Step::Identity),
        }
    }

    pub fn power_step(&mut self) -> Result<PowerStep> {
        power_step(&self.op, &mut self.spectral)
    }

    /// Replaces the spectral state with a fresh `iters`-step estimate.
    pub fn converge(&mut self, iters: usize, seed: u64) -> Result<()> {
        let (sigma, u) = power_converge(&self.op, iters, seed)?;
        self.spectral.u = u;
        self.spectral.sigma = sigma;
        self.spectral.iterations = iters as u64;
        self.spectral.seed = seed;
        Ok(())
    }

    fn add_bias(&self, p: &mut Tensor<T>) {
        let b = self.bias.data();
        match &self.op {
            LinearOperator::Dense(_) => {
                for (v, &bv) in p.data_mut().iter_mut().zip(b) {
                    *v = *v + bv;
                }
            }
            LinearOperator::Conv2d(_) => {
                let plane = p.len() / b.len();
                for (chunk, &bv) in p.data_mut().chunks_mut(plane).zip(b) {
                    chunk.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
    }

    fn reduce_bias_grad(&self, dp: &Tensor<T>, grad: &mut Tensor<T>) {
        let n = grad.len();
        let plane = dp.len() / n;
        for (g, chunk) in grad.data_mut().iter_mut().zip(dp.data().chunks(plane)) {
            *g = *g + chunk.iter().copied().sum::<T>();
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode, layer: usize) -> Result<(Tensor<T>, CplCache<T>)> {
        let step = self.step(mode, layer)?;
        let h = match step {
            Step::Identity => {
                if x.shape() != self.shape() {
                    return Err(Error::shape("CPL input", self.shape(), x.shape()));
                }
                let cache = CplCache {
                    pre: Tensor::zeros(&[0]),
                    act: Tensor::zeros(&[0]),
                    step,
                };
                return Ok((x.clone(), cache));
            }
            Step::Residual(h) => h,
        };
        let mut pre = self.op.apply(x)?;
        self.add_bias(&mut pre);
        let act = pre.map(|v| self.activation.apply(v));
        let mut z = x.clone();
        z.axpy(-h, &self.op.apply_adjoint(&act)?);
        Ok((z, CplCache { pre, act, step }))
    }

    /// Input gradient; parameter gradients `[dW, db]` are added into `grads` when given.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &CplCache<T>,
        g: &Tensor<T>,
        grads: Option<&mut [Tensor<T>]>,
    ) -> Result<Tensor<T>> {
        let h = match cache.step {
            Step::Identity => return Ok(g.clone()),
            Step::Residual(h) => h,
        };
        let q = self.op.apply(g)?;
        let dp = cache.pre.zip_with(&q, |p, qv| -h * self.activation.derivative(p) * qv);
        let mut dx = g.clone();
        dx.axpy(T::one(), &self.op.apply_adjoint(&dp)?);
        if let Some(grads) = grads {
            let (dw, db) = grads.split_at_mut(1);
            self.op.accumulate_weight_grad(&cache.act, g, -h, &mut dw[0]);
            self.op.accumulate_weight_grad(&dp, x, T::one(), &mut dw[0]);
            self.reduce_bias_grad(&dp, &mut db[0]);
        }
        Ok(dx)
    }

    /// Jacobian-vector product at the cached point.
    pub fn jvp(&self, cache: &CplCache<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let h = match cache.step {
            Step::Identity => return Ok(v.clone()),
            Step::Residual(h) => h,
        };
        let wv = self.op.apply(v)?;
        let d = cache.pre.zip_with(&wv, |p, w| self.activation.derivative(p) * w);
        let mut out = v.clone();
        out.axpy(-h, &self.op.apply_adjoint(&d)?);
        Ok(out)
    }

    pub(crate) fn params(&self) -> [&Tensor<T>; 2] {
        [self.op.weight(), &self.bias]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [self.op.weight_mut(), &mut self.bias]
    }
}
