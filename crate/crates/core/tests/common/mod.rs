#![allow(dead_code)]

use certilip::layers::{Activation, CpLayer, DimOp, NormalizedHead, SkewLayer, SkewScheme};
use certilip::{Layer, LinearOperator, Mode, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

pub fn cpl_dense(n: usize, width: usize, act: Activation, rng: &mut ChaCha8Rng) -> CpLayer<f64> {
    let w = Tensor::randn(&[width, n], rng);
    let b = Tensor::randn(&[width], rng).scaled(0.3);
    CpLayer::new(LinearOperator::dense(w).unwrap(), b, act, rng.random()).unwrap()
}

pub fn cpl_conv(
    shape: [usize; 3],
    channels: usize,
    kernel: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> CpLayer<f64> {
    let k = Tensor::randn(&[channels, shape[0], kernel, kernel], rng);
    let b = Tensor::randn(&[channels], rng).scaled(0.3);
    let op = LinearOperator::conv2d(k, shape, stride, kernel / 2).unwrap();
    CpLayer::new(op, b, Activation::Relu, rng.random()).unwrap()
}

pub fn skew_dense(n: usize, scale: f64, scheme: SkewScheme, rng: &mut ChaCha8Rng) -> SkewLayer<f64> {
    let m = Tensor::randn(&[n, n], rng).scaled(scale);
    SkewLayer::new(LinearOperator::dense(m).unwrap(), scheme).unwrap()
}

pub fn skew_conv(shape: [usize; 3], kernel: usize, scale: f64, terms: usize, rng: &mut ChaCha8Rng) -> SkewLayer<f64> {
    let k = Tensor::randn(&[shape[0], shape[0], kernel, kernel], rng).scaled(scale);
    let op = LinearOperator::conv2d(k, shape, 1, kernel / 2).unwrap();
    SkewLayer::new(op, SkewScheme::Exponential { terms }).unwrap()
}

pub fn head(shape: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> NormalizedHead<f64> {
    let n: usize = shape.iter().product();
    NormalizedHead::new(Tensor::randn(&[classes, n], rng), shape.to_vec()).unwrap()
}

/// Wraps one layer into a network whose logits are its flattened output,
/// converging any spectral state so inference mode is valid.
pub fn single(layer: Layer<f64>) -> Network<f64> {
    let input = layer.in_shape().to_vec();
    let out = layer.out_shape();
    let n: usize = out.iter().product();
    let mut layers = vec![layer];
    if out.len() != 1 {
        layers.push(Layer::Dim(DimOp::truncate(&out, n).unwrap()));
    }
    let mut net = Network::new(input, n, layers).unwrap();
    net.converge(100, 11).unwrap();
    net
}

/// Largest `|f(x) - f(x')| / |x - x'|` over random pairs around a random centre.
pub fn sampled_lipschitz(net: &Network<f64>, pairs: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = net.input_shape().to_vec();
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let x = randn(&shape, &mut r);
        // alternate far pairs and close pairs, which probe local slopes
        let scale = if i % 2 == 0 { 1.0 } else { 1e-3 };
        let x2 = x.add(&randn(&shape, &mut r).scaled(scale));
        let (y, y2) = (
            net.forward(&x, Mode::Infer).unwrap(),
            net.forward(&x2, Mode::Infer).unwrap(),
        );
        worst = worst.max(y.sub(&y2).norm() / x.sub(&x2).norm());
    }
    worst
}

/// Largest relative discrepancy between analytic and central-difference
/// gradients of `<c, f(x)>` with respect to the input and every parameter.
pub fn gradient_error(net: &Network<f64>, x: &Tensor<f64>, c: &Tensor<f64>, h: f64) -> f64 {
    let tape = net.tape(x, Mode::Infer).unwrap();
    let mut grads = net.zero_grads();
    let dx = net.backward(&tape, c, Some(&mut grads)).unwrap();
    let objective = |n: &Network<f64>, x: &Tensor<f64>| n.forward(x, Mode::Infer).unwrap().dot(c);

    let mut worst = 0.0f64;
    let mut fd = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        fd.push((objective(net, &xp) - objective(net, &xm)) / (2.0 * h));
    }
    worst = worst.max(relative(dx.data(), &fd));

    for (p, g) in grads.iter().enumerate() {
        let mut fd = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let mut plus = net.clone();
            plus.params_mut()[p].data_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[p].data_mut()[i] -= h;
            fd.push((objective(&plus, x) - objective(&minus, x)) / (2.0 * h));
        }
        worst = worst.max(relative(g.data(), &fd));
    }
    worst
}

/// `max |a - b| / max(max |b|, 1e-8)`, the error relative to the gradient scale.
pub fn relative(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
