//! The 1-Lipschitz layer catalog and its sequential composition.

mod arch;
mod cpl;
mod dim;
mod head;
mod skew;

pub use arch::{ArchSpec, LayerSpec, Preset};
pub use cpl::{Activation, CpLayer, CplCache, Step};
pub use dim::DimOp;
pub use head::NormalizedHead;
pub use skew::{SkewCache, SkewLayer, SkewScheme, DEFAULT_TAYLOR_TERMS};

use crate::error::{Error, Result};
use crate::spectral::PowerStep;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running spectral estimates; zero estimates degrade to identity layers.
    Train,
    /// Frozen converged estimates; a zero estimate is an error.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Cpl(CpLayer<T>),
    Skew(SkewLayer<T>),
    Dim(DimOp),
    Head(NormalizedHead<T>),
}

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Cpl(CplCache<T>),
    Skew(SkewCache<T>),
    None,
}

impl<T: Real> Layer<T> {
    pub fn in_shape(&self) -> &[usize] {
        match self {
            Layer::Cpl(l) => l.shape(),
            Layer::Skew(l) => l.shape(),
            Layer::Dim(d) => d.in_shape(),
            Layer::Head(h) => h.in_shape(),
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        match self {
            Layer::Cpl(l) => l.shape().to_vec(),
            Layer::Skew(l) => l.shape().to_vec(),
            Layer::Dim(d) => d.out_shape(),
            Layer::Head(h) => vec![h.classes()],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Cpl(l) => match l.op() {
                crate::tensor::LinearOperator::Dense(_) => "cpl_dense",
                crate::tensor::LinearOperator::Conv2d(_) => "cpl_conv",
            },
            Layer::Skew(l) => match l.scheme {
                SkewScheme::Cayley => "cayley",
                SkewScheme::Exponential { .. } => "soc",
            },
            Layer::Dim(DimOp::ZeroPad { .. }) => "zero_pad",
            Layer::Dim(DimOp::Truncate { .. }) => "truncate",
            Layer::Dim(DimOp::L2Pool { .. }) => "l2_pool",
            Layer::Head(_) => "normalized_head",
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode, index: usize) -> Result<(Tensor<T>, LayerCache<T>)> {
        match self {
            Layer::Cpl(l) => l.forward(x, mode, index).map(|(y, c)| (y, LayerCache::Cpl(c))),
            Layer::Skew(l) => l.forward(x).map(|(y, c)| (y, LayerCache::Skew(c))),
            Layer::Dim(d) => Ok((d.forward(x)?, LayerCache::None)),
            Layer::Head(h) => Ok((h.forward(x)?, LayerCache::None)),
        }
    }

    fn backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        cache: &LayerCache<T>,
        g: &Tensor<T>,
        grads: Option<&mut [Tensor<T>]>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (Layer::Cpl(l), LayerCache::Cpl(c)) => l.backward(x, c, g, grads),
            (Layer::Skew(l), LayerCache::Skew(c)) => l.backward(x, c, g, grads),
            (Layer::Dim(d), _) => Ok(d.backward(x, y, g)),
            (Layer::Head(h), _) => Ok(h.backward(x, g, grads)),
            _ => Err(Error::InvalidArgument("tape does not match the network".into())),
        }
    }

    fn jvp(&self, x: &Tensor<T>, y: &Tensor<T>, cache: &LayerCache<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (Layer::Cpl(l), LayerCache::Cpl(c)) => l.jvp(c, v),
            (Layer::Skew(l), _) => l.jvp(v),
            (Layer::Dim(d), _) => d.jvp(x, y, v),
            (Layer::Head(h), _) => h.jvp(v),
            _ => Err(Error::InvalidArgument("tape does not match the network".into())),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Cpl(l) => l.params().to_vec(),
            Layer::Skew(l) => l.params().to_vec(),
            Layer::Dim(_) => Vec::new(),
            Layer::Head(h) => h.params().to_vec(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Cpl(l) => l.params_mut().into_iter().collect(),
            Layer::Skew(l) => l.params_mut().into_iter().collect(),
            Layer::Dim(_) => Vec::new(),
            Layer::Head(h) => h.params_mut().into_iter().collect(),
        }
    }

    /// Upper bound on this layer's Lipschitz constant, `None` when unknown.
    pub fn lipschitz_certificate(&self) -> Result<Option<f64>> {
        Ok(match self {
            Layer::Cpl(l) => {
                if l.step_override.is_some() {
                    None
                } else {
                    Some(1.0)
                }
            }
            Layer::Skew(l) => match l.scheme {
                SkewScheme::Cayley => Some(1.0),
                SkewScheme::Exponential { terms } => {
                    // |T_n(S)| <= |exp(S)| + tail = 1 + sum_{k>n} |S|^k / k!, with |S| <= |M| / 2
                    let (m_norm, _) = crate::spectral::power_converge(l.op(), crate::spectral::INFERENCE_ITERS, 0)?;
                    Some(1.0 + taylor_tail(m_norm.as_f64() / 2.0, terms))
                }
            },
            Layer::Dim(_) => Some(1.0),
            Layer::Head(h) => Some(h.spectral_norm()?),
        })
    }
}

/// `sum_{k > n} s^k / k!`
fn taylor_tail(s: f64, n: usize) -> f64 {
    let mut term = 1.0;
    let mut partial = 1.0;
    for k in 1..=n {
        term *= s / k as f64;
        partial += term;
    }
    (s.exp() - partial).max(0.0)
}

/// Activations and per-layer caches from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("tape holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

impl<T: Real> Network<T> {
    /// Validates that consecutive shapes chain and the output has `num_classes` entries.
    pub fn new(input_shape: Vec<usize>, num_classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_shape() != shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} ({}) expects input {:?} but receives {shape:?}",
                    layer.kind(),
                    layer.in_shape()
                )));
            }
            if matches!(layer, Layer::Head(_)) && i + 1 != layers.len() {
                return Err(Error::InvalidArgument("normalized head must be the last layer".into()));
            }
            shape = layer.out_shape();
        }
        if shape != [num_classes] {
            return Err(Error::shape("network output", &[num_classes], &shape));
        }
        Ok(Network {
            layers,
            input_shape,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Whether the last layer is a row-normalized head.
    pub fn lln(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Head(_)))
    }

    pub fn cpl_layers(&self) -> impl Iterator<Item = &CpLayer<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Cpl(c) => Some(c),
            _ => None,
        })
    }

    fn cpl_layers_mut(&mut self) -> impl Iterator<Item = &mut CpLayer<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Cpl(c) => Some(c),
            _ => None,
        })
    }

    /// Current spectral estimates of every CPL, in layer order.
    pub fn sigmas(&self) -> Vec<f64> {
        self.cpl_layers().map(|l| l.spectral.sigma.as_f64()).collect()
    }

    /// One power step on every CPL, as done at the start of each training step.
    /// Returns the number of degenerate steps.
    pub fn power_steps(&mut self) -> Result<usize> {
        let mut degenerate = 0;
        for layer in self.cpl_layers_mut() {
            if layer.power_step()? == PowerStep::Degenerate {
                degenerate += 1;
            }
        }
        Ok(degenerate)
    }

    /// Re-estimates every spectral norm from scratch with `iters` power steps.
    pub fn converge(&mut self, iters: usize, seed: u64) -> Result<()> {
        for (i, layer) in self.cpl_layers_mut().enumerate() {
            layer.converge(iters, layer_seed(seed, i))?;
        }
        Ok(())
    }

    /// Fixes every CPL step to `h`; the network loses its certificate.
    pub fn relax(&mut self, h: T) -> Result<()> {
        if !(h > T::zero()) || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "relaxed step must be positive, got {h}"
            )));
        }
        for layer in self.cpl_layers_mut() {
            layer.step_override = Some(h);
        }
        Ok(())
    }

    pub fn is_relaxed(&self) -> bool {
        self.cpl_layers().any(|l| l.step_override.is_some())
    }

    /// Product of per-layer certificates, `None` for relaxed networks.
    pub fn lipschitz_bound(&self) -> Result<Option<f64>> {
        let mut product = 1.0;
        for layer in &self.layers {
            match layer.lipschitz_certificate()? {
                Some(c) => product *= c,
                None => return Ok(None),
            }
        }
        Ok(Some(product))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape("network input", &self.input_shape, x.shape()));
        }
        x.ensure_finite("network input")
    }

    /// Pure forward pass with the current spectral states.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, mode, i)?.0;
        }
        h.ensure_finite("network output")?;
        Ok(h)
    }

    /// Forward pass that, in train mode, first advances every spectral state by one power step.
    pub fn run(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Train {
            self.power_steps()?;
        }
        self.forward(x, mode)
    }

    pub fn tape(&self, x: &Tensor<T>, mode: Mode) -> Result<Tape<T>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward(&acts[i], mode, i)?;
            acts.push(y);
            caches.push(c);
        }
        Ok(Tape { acts, caches })
    }

    /// Reverse pass: returns the input gradient and, when `grads` is given,
    /// adds parameter gradients into it (ordered as [`Network::params`]).
    pub fn backward(&self, tape: &Tape<T>, g: &Tensor<T>, mut grads: Option<&mut [Tensor<T>]>) -> Result<Tensor<T>> {
        let counts: Vec<usize> = self.layers.iter().map(|l| l.params().len()).collect();
        let mut end: usize = counts.iter().sum();
        let mut upstream = g.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let start = end - counts[i];
            let slot = grads.as_deref_mut().map(|gs| &mut gs[start..end]);
            upstream = layer.backward(&tape.acts[i], &tape.acts[i + 1], &tape.caches[i], &upstream, slot)?;
            end = start;
        }
        Ok(upstream)
    }

    pub fn jvp(&self, tape: &Tape<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = v.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            d = layer.jvp(&tape.acts[i], &tape.acts[i + 1], &tape.caches[i], &d)?;
        }
        Ok(d)
    }

    /// Spectral norm of the input Jacobian at `x`, by power iteration on `J^T J`.
    pub fn jacobian_norm(&self, x: &Tensor<T>, iters: usize, seed: u64) -> Result<f64> {
        let tape = self.tape(x, Mode::Infer)?;
        let mut v = Tensor::<T>::random_unit(&self.input_shape, seed);
        let mut est = 0.0f64;
        for _ in 0..iters.max(1) {
            let jv = self.jvp(&tape, &v)?;
            est = est.max(jv.norm().as_f64());
            let mut u = self.backward(&tape, &jv, None)?;
            let n = u.norm();
            if n == T::zero() {
                break;
            }
            u.scale(T::one() / n);
            v = u;
        }
        Ok(est.max(self.jvp(&tape, &v)?.norm().as_f64()))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Zeroed buffers shaped like [`Network::params`].
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// Same architecture and state in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Cpl(c) => Layer::Cpl(CpLayer {
                    op: cast_op(&c.op),
                    bias: c.bias.cast(),
                    activation: c.activation,
                    spectral: crate::spectral::SpectralState {
                        u: c.spectral.u.cast(),
                        sigma: U::of(c.spectral.sigma.as_f64()),
                        iterations: c.spectral.iterations,
                        seed: c.spectral.seed,
                        rayleigh_gap: U::of(c.spectral.rayleigh_gap.as_f64()),
                    },
                    step_override: c.step_override.map(|h| U::of(h.as_f64())),
                }),
                Layer::Skew(s) => Layer::Skew(SkewLayer {
                    op: cast_op(&s.op),
                    scheme: s.scheme,
                }),
                Layer::Dim(d) => Layer::Dim(d.clone()),
                Layer::Head(h) => Layer::Head(
                    NormalizedHead::new(h.weight.cast(), h.in_shape().to_vec()).expect("shape already validated"),
                ),
            })
            .collect();
        Network {
            layers,
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
        }
    }
}

fn cast_op<T: Real, U: Real>(op: &crate::tensor::LinearOperator<T>) -> crate::tensor::LinearOperator<U> {
    use crate::tensor::LinearOperator;
    match op {
        LinearOperator::Dense(_) => LinearOperator::dense_on(op.weight().cast(), op.in_shape().to_vec()),
        LinearOperator::Conv2d(_) => {
            let s = op.in_shape();
            let (stride, padding) = conv_geometry(op);
            LinearOperator::conv2d(op.weight().cast(), [s[0], s[1], s[2]], stride, padding)
        }
    }
    .expect("shape already validated")
}

/// `(stride, padding)` of a convolution operator.
pub(crate) fn conv_geometry<T: Real>(op: &crate::tensor::LinearOperator<T>) -> (usize, usize) {
    match op {
        crate::tensor::LinearOperator::Conv2d(c) => (c.stride(), c.padding()),
        crate::tensor::LinearOperator::Dense(_) => (1, 0),
    }
}

/// Per-layer seed for spectral initialization.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
