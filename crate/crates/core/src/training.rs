//! Margin-loss training: multi-class hinge loss, Adam, a triangular learning
//! rate schedule and seeded mini-batching.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Mode, Network};
use crate::tensor::{Real, Tensor};

/// Samples per parallel work unit. Fixed so the gradient reduction order
/// does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup to the peak at half of all steps, then linear decay to 0.
    #[default]
    Triangular,
    Constant,
}

impl Schedule {
    /// Learning rate for 1-based step `k` out of `total`.
    pub fn lr(self, peak: f64, k: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => peak,
            Schedule::Triangular => {
                if total == 0 {
                    return 0.0;
                }
                let t = k.min(total) as f64 / total as f64;
                if t <= 0.5 {
                    peak * 2.0 * t
                } else {
                    peak * 2.0 * (1.0 - t)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Zero-pad by this many pixels and crop back at a random offset.
    #[serde(default)]
    pub crop: usize,
    /// Mirror horizontally with probability 1/2.
    #[serde(default)]
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub augment: Augment,
}

fn default_batch() -> usize {
    256
}

fn default_lr() -> f64 {
    1e-3
}

fn default_margin() -> f64 {
    0.7
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            epochs: 0,
            lr: default_lr(),
            margin: default_margin(),
            seed: 0,
            schedule: Schedule::default(),
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted as the null update.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }
}

/// Multi-class hinge `max(0, m - (f_y - max_{j != y} f_j))` and its gradient
/// with respect to the logits. Ties among competitors go to the smallest index.
pub fn margin_loss<T: Real>(logits: &Tensor<T>, label: usize, m: f64) -> Result<(f64, Tensor<T>)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::InvalidLabel { label, classes: k });
    }
    let mut grad = Tensor::zeros(logits.shape());
    if k < 2 {
        return Ok((0.0, grad));
    }
    let f = logits.data();
    let rival = (0..k)
        .filter(|&j| j != label)
        .fold(None::<usize>, |best, j| match best {
            Some(b) if f[b] >= f[j] => Some(b),
            _ => Some(j),
        })
        .expect("k >= 2");
    let loss = m - (f[label].as_f64() - f[rival].as_f64());
    if loss > 0.0 {
        grad.data_mut()[label] = -T::one();
        grad.data_mut()[rival] = T::one();
        Ok((loss, grad))
    } else {
        Ok((0.0, grad))
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(net: &Network<T>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: net.zero_grads(),
            v: net.zero_grads(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("optimizer state", p.shape(), g.shape()));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub max_sigma: f64,
    pub max_grad_norm: f64,
    pub wall_time: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03))
}

fn augment<T: Real>(x: &Tensor<T>, aug: Augment, rng: &mut impl Rng) -> Tensor<T> {
    let [c, h, w] = match *x.shape() {
        [c, h, w] => [c, h, w],
        _ => return x.clone(),
    };
    if aug.crop == 0 && !aug.flip {
        return x.clone();
    }
    let p = aug.crop as i64;
    let (dy, dx) = if p > 0 {
        (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize)
    } else {
        (0, 0)
    };
    let flip = aug.flip && rng.random_bool(0.5);
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for i in 0..h {
            let si = i as isize + dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sj = jj as isize + dx;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                dst[(ch * h + i) * w + j] = src[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    out
}

struct ChunkResult<T> {
    grads: Vec<Tensor<T>>,
    loss: f64,
    correct: usize,
}

/// Loss, accuracy and summed gradients over one batch, in fixed chunk order.
fn batch_gradient<T: Real>(
    net: &Network<T>,
    inputs: &[Tensor<T>],
    labels: &[usize],
    margin: f64,
) -> Result<ChunkResult<T>> {
    let parts: Vec<Result<ChunkResult<T>>> = inputs
        .par_chunks(CHUNK)
        .zip(labels.par_chunks(CHUNK))
        .map(|(xs, ys)| {
            let mut acc = ChunkResult {
                grads: net.zero_grads(),
                loss: 0.0,
                correct: 0,
            };
            for (x, &y) in xs.iter().zip(ys) {
                let tape = net.tape(x, Mode::Train)?;
                let logits = tape.output();
                let (loss, g) = margin_loss(logits, y, margin)?;
                acc.loss += loss;
                acc.correct += usize::from(logits.argmax() == y);
                if g.max_abs() > T::zero() {
                    net.backward(&tape, &g, Some(&mut acc.grads))?;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = ChunkResult {
        grads: net.zero_grads(),
        loss: 0.0,
        correct: 0,
    };
    for part in parts {
        let part = part?;
        for (t, g) in total.grads.iter_mut().zip(&part.grads) {
            t.axpy(T::one(), g);
        }
        total.loss += part.loss;
        total.correct += part.correct;
    }
    Ok(total)
}

/// One pass over `data` in seeded shuffled mini-batches. Each step advances
/// every spectral state by one power iteration, then takes an Adam step.
pub fn train_epoch<T: Real>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
    opt: &mut Adam<T>,
    epoch: usize,
) -> Result<EpochMetrics> {
    config.validate()?;
    let start = Instant::now();
    let total_steps = config.steps_per_epoch(data.len()) * config.epochs.max(epoch + 1) as u64;
    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);

    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let (mut lr, mut max_grad_norm) = (0.0, 0.0f64);
    for batch in order.chunks(config.batch_size) {
        net.power_steps()?;
        let inputs: Vec<Tensor<T>> = batch
            .iter()
            .map(|&i| augment(&data.inputs[i], config.augment, &mut rng))
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let mut res = batch_gradient(net, &inputs, &labels, config.margin)?;
        let inv = T::one() / T::of(batch.len() as f64);
        res.grads.iter_mut().for_each(|g| g.scale(inv));
        let grad_norm = res.grads.iter().map(|g| g.dot(g).as_f64()).sum::<f64>().sqrt();
        if !res.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: opt.step + 1,
                sigmas: net.sigmas(),
                grad_norm,
            });
        }
        max_grad_norm = max_grad_norm.max(grad_norm);
        loss_sum += res.loss;
        correct += res.correct;
        lr = config.schedule.lr(config.lr, opt.step + 1, total_steps);
        opt.update(net.params_mut(), &res.grads, lr)?;
    }
    let n = data.len().max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        lr,
        max_sigma: net.sigmas().into_iter().fold(0.0, f64::max),
        max_grad_norm,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Runs the remaining epochs of `config`, resuming after the epochs already
/// counted by `opt.step`, and calls `on_epoch` after each one.
pub fn fit<T: Real>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
    opt: &mut Adam<T>,
    mut on_epoch: impl FnMut(&EpochMetrics, &Network<T>, &Adam<T>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let per_epoch = config.steps_per_epoch(data.len()).max(1);
    let first = (opt.step / per_epoch) as usize;
    let mut out = Vec::new();
    for epoch in first..config.epochs {
        let m = train_epoch(net, data, config, opt, epoch)?;
        log::info!(
            "epoch {} loss {:.5} acc {:.4} lr {:.2e} max sigma {:.4}",
            m.epoch,
            m.loss,
            m.accuracy,
            m.lr,
            m.max_sigma
        );
        on_epoch(&m, net, opt)?;
        out.push(m);
    }
    Ok(out)
}

/// Mean margin loss and accuracy in inference mode (spectral states must be converged).
pub fn evaluate<T: Real>(net: &Network<T>, data: &Dataset<T>, margin: f64) -> Result<(f64, f64)> {
    let parts: Vec<Result<(f64, usize)>> = data
        .inputs
        .par_chunks(CHUNK)
        .zip(data.labels.par_chunks(CHUNK))
        .map(|(xs, ys)| {
            let mut acc = (0.0, 0);
            for (x, &y) in xs.iter().zip(ys) {
                let logits = net.forward(x, Mode::Infer)?;
                acc.0 += margin_loss(&logits, y, margin)?.0;
                acc.1 += usize::from(logits.argmax() == y);
            }
            Ok(acc)
        })
        .collect();
    let (mut loss, mut correct) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fixes every CPL step to `h`. The result is no longer certifiably 1-Lipschitz.
pub fn relaxed_mode<T: Real>(net: &mut Network<T>, h: f64) -> Result<()> {
    net.relax(T::of(h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        let (l, g) = margin_loss(&Tensor::from_vec(vec![5.0f64, 0.0, 0.0]), 0, 0.7).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let (l, g) = margin_loss(&Tensor::from_vec(vec![0.0f64, 0.0]), 0, 0.7).unwrap();
        assert!((l - 0.7).abs() < 1e-15);
        assert_eq!(g.data(), &[-1.0, 1.0]);
        assert!(matches!(
            margin_loss(&Tensor::from_vec(vec![0.0f64, 0.0]), 2, 0.7),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn hinge_ties_pick_smallest_rival() {
        let (_, g) = margin_loss(&Tensor::from_vec(vec![1.0f64, 0.0, 3.0, 3.0]), 1, 0.7).unwrap();
        assert_eq!(g.data(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn triangular_schedule_shape() {
        let s = Schedule::Triangular;
        assert_eq!(s.lr(1e-3, 50, 100), 1e-3);
        assert_eq!(s.lr(1e-3, 100, 100), 0.0);
        assert!((s.lr(1e-3, 25, 100) - 5e-4).abs() < 1e-18);
        assert!((s.lr(1e-3, 75, 100) - 5e-4).abs() < 1e-18);
        let peak = (1..=100)
            .max_by(|&a, &b| s.lr(1.0, a, 100).total_cmp(&s.lr(1.0, b, 100)))
            .unwrap();
        assert_eq!(peak, 50);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            margin: -0.1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn crop_shifts_and_flip_mirrors() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = augment(&x, Augment { crop: 0, flip: true }, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(y == x || y.data() == [2.0, 1.0, 4.0, 3.0]);
        let z = augment(&x, Augment { crop: 1, flip: false }, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(z.norm() <= x.norm());
    }
}
