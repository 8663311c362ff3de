//! Declarative architecture descriptions and the seeded network builder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{layer_seed, Activation, CpLayer, DimOp, Layer, Network, NormalizedHead, SkewLayer, SkewScheme};
use crate::error::{Error, Result};
use crate::tensor::{LinearOperator, Real, Tensor};

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

fn default_terms() -> usize {
    super::DEFAULT_TAYLOR_TERMS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Dense CPL whose `W` has `width` rows.
    CplDense {
        width: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Convolutional CPL whose `W` maps to `channels` feature maps.
    CplConv {
        channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Dense Cayley orthogonal layer.
    Cayley,
    /// Dense truncated-exponential orthogonal layer.
    Soc {
        #[serde(default = "default_terms")]
        terms: usize,
    },
    /// Convolutional truncated-exponential orthogonal layer (stride 1, same padding).
    SocConv {
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_terms")]
        terms: usize,
    },
    ZeroPad {
        to: usize,
    },
    Truncate {
        to: usize,
    },
    L2Pool {
        window: usize,
    },
}

/// Size knobs of the conv-then-linear CPL family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    #[serde(default)]
    pub conv_layers: usize,
    /// Feature maps produced by each convolutional `W`.
    #[serde(default)]
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub conv_stride: usize,
    /// Zero-pad the input to this many channels (images) or features (vectors) first.
    #[serde(default)]
    pub pad_to: Option<usize>,
    /// l2-pool window applied after the convolutional block.
    #[serde(default)]
    pub pool: Option<usize>,
    pub lin_layers: usize,
    /// Rows of each dense `W`.
    pub lin_features: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Preset {
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        if let Some(to) = self.pad_to {
            out.push(LayerSpec::ZeroPad { to });
        }
        for _ in 0..self.conv_layers {
            out.push(LayerSpec::CplConv {
                channels: self.channels,
                kernel: self.kernel,
                stride: self.conv_stride,
                activation: self.activation,
            });
        }
        if let Some(window) = self.pool {
            out.push(LayerSpec::L2Pool { window });
        }
        for _ in 0..self.lin_layers {
            out.push(LayerSpec::CplDense {
                width: self.lin_features,
                activation: self.activation,
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// End with a row-normalized linear head instead of truncation.
    #[serde(default)]
    pub lln: bool,
}

impl ArchSpec {
    pub fn from_preset(input_shape: Vec<usize>, num_classes: usize, preset: &Preset, lln: bool) -> Self {
        ArchSpec {
            input_shape,
            num_classes,
            layers: preset.layers(),
            lln,
        }
    }

    /// Builds the network. Weights are uniform in `+-1/sqrt(fan_in)`, biases zero.
    /// Without LLN a truncation to `num_classes` is appended when the final
    /// dimension is larger; with LLN a normalized head is appended.
    pub fn build<T: Real>(&self, seed: u64) -> Result<Network<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = self.input_shape.clone();
        let mut layers: Vec<Layer<T>> = Vec::with_capacity(self.layers.len() + 1);
        let mut cpl_index = 0;
        for spec in &self.layers {
            let layer = match *spec {
                LayerSpec::CplDense { width, activation } => {
                    let n: usize = shape.iter().product();
                    let w = Tensor::uniform(&[width, n], 1.0 / (n as f64).sqrt(), &mut rng);
                    let op = LinearOperator::dense_on(w, shape.clone())?;
                    cpl_index += 1;
                    Layer::Cpl(CpLayer::new(
                        op,
                        Tensor::zeros(&[width]),
                        activation,
                        layer_seed(seed, cpl_index - 1),
                    )?)
                }
                LayerSpec::CplConv {
                    channels,
                    kernel,
                    stride,
                    activation,
                } => {
                    let s = image_shape(&shape, "cpl_conv")?;
                    let fan_in = s[0] * kernel * kernel;
                    let k = Tensor::uniform(
                        &[channels, s[0], kernel, kernel],
                        1.0 / (fan_in as f64).sqrt(),
                        &mut rng,
                    );
                    let op = LinearOperator::conv2d(k, s, stride, kernel / 2)?;
                    cpl_index += 1;
                    Layer::Cpl(CpLayer::new(
                        op,
                        Tensor::zeros(&[channels]),
                        activation,
                        layer_seed(seed, cpl_index - 1),
                    )?)
                }
                LayerSpec::Cayley | LayerSpec::Soc { .. } => {
                    let n: usize = shape.iter().product();
                    let m = Tensor::uniform(&[n, n], 1.0 / (n as f64).sqrt(), &mut rng);
                    let scheme = match *spec {
                        LayerSpec::Soc { terms } => SkewScheme::Exponential { terms },
                        _ => SkewScheme::Cayley,
                    };
                    Layer::Skew(SkewLayer::new(LinearOperator::dense_on(m, shape.clone())?, scheme)?)
                }
                LayerSpec::SocConv { kernel, terms } => {
                    let s = image_shape(&shape, "soc_conv")?;
                    if kernel % 2 == 0 {
                        return Err(Error::InvalidArgument("soc_conv needs an odd kernel".into()));
                    }
                    let fan_in = s[0] * kernel * kernel;
                    let k = Tensor::uniform(&[s[0], s[0], kernel, kernel], 1.0 / (fan_in as f64).sqrt(), &mut rng);
                    let op = LinearOperator::conv2d(k, s, 1, kernel / 2)?;
                    Layer::Skew(SkewLayer::new(op, SkewScheme::Exponential { terms })?)
                }
                LayerSpec::ZeroPad { to } => Layer::Dim(DimOp::zero_pad(&shape, to)?),
                LayerSpec::Truncate { to } => Layer::Dim(DimOp::truncate(&shape, to)?),
                LayerSpec::L2Pool { window } => Layer::Dim(DimOp::l2_pool(&shape, window)?),
            };
            shape = layer.out_shape();
            layers.push(layer);
        }
        let n: usize = shape.iter().product();
        if self.lln {
            let w = Tensor::uniform(&[self.num_classes, n], 1.0 / (n as f64).sqrt(), &mut rng);
            layers.push(Layer::Head(NormalizedHead::new(w, shape.clone())?));
        } else if shape != [self.num_classes] {
            layers.push(Layer::Dim(DimOp::truncate(&shape, self.num_classes)?));
        }
        Network::new(self.input_shape.clone(), self.num_classes, layers)
    }

    /// Recovers the description of a built network (including appended layers).
    pub fn of<T: Real>(net: &Network<T>) -> Self {
        let mut layers = Vec::new();
        for layer in net.layers() {
            let spec = match layer {
                Layer::Cpl(c) => match c.op() {
                    LinearOperator::Dense(_) => LayerSpec::CplDense {
                        width: c.op().out_len(),
                        activation: c.activation,
                    },
                    LinearOperator::Conv2d(conv) => LayerSpec::CplConv {
                        channels: c.op().out_shape()[0],
                        kernel: c.op().weight().shape()[2],
                        stride: conv.stride(),
                        activation: c.activation,
                    },
                },
                Layer::Skew(s) => match (s.op(), s.scheme) {
                    (LinearOperator::Conv2d(_), SkewScheme::Exponential { terms }) => LayerSpec::SocConv {
                        kernel: s.op().weight().shape()[2],
                        terms,
                    },
                    (_, SkewScheme::Exponential { terms }) => LayerSpec::Soc { terms },
                    (_, SkewScheme::Cayley) => LayerSpec::Cayley,
                },
                Layer::Dim(DimOp::ZeroPad { out_shape, .. }) => LayerSpec::ZeroPad { to: out_shape[0] },
                Layer::Dim(DimOp::Truncate { out_len, .. }) => LayerSpec::Truncate { to: *out_len },
                Layer::Dim(DimOp::L2Pool { window, .. }) => LayerSpec::L2Pool { window: *window },
                Layer::Head(_) => continue,
            };
            layers.push(spec);
        }
        ArchSpec {
            input_shape: net.input_shape().to_vec(),
            num_classes: net.num_classes(),
            layers,
            lln: net.lln(),
        }
    }
}

fn image_shape(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::InvalidArgument(format!(
            "{what} needs a (c, h, w) input, got {shape:?}"
        ))),
    }
}
