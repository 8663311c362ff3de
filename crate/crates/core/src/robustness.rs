//! Margin certification, the PGD l2 attack and sampled Lipschitz lower bounds.

use std::f64::consts::SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Mode, Network};
use crate::tensor::{Real, Tensor};

/// Index of the largest logit other than `label`, smallest index on ties.
fn rival<T: Real>(logits: &Tensor<T>, label: usize) -> Option<usize> {
    let f = logits.data();
    (0..f.len()).filter(|&j| j != label).fold(None, |best, j| match best {
        Some(b) if f[b] >= f[j] => Some(b),
        _ => Some(j),
    })
}

/// `max(0, f_y - max_{j != y} f_j)`.
pub fn margin<T: Real>(logits: &Tensor<T>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    Ok(match rival(logits, label) {
        Some(j) => (logits.data()[label].as_f64() - logits.data()[j].as_f64()).max(0.0),
        None => f64::INFINITY,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCertificate {
    pub predicted: usize,
    pub label: usize,
    pub margin: f64,
    pub radius: f64,
}

impl SampleCertificate {
    pub fn from_logits<T: Real>(logits: &Tensor<T>, label: usize, lipschitz: f64) -> Result<Self> {
        let predicted = logits.argmax();
        let m = if predicted == label {
            margin(logits, label)?
        } else {
            0.0
        };
        Ok(SampleCertificate {
            predicted,
            label,
            margin: m,
            radius: m / (SQRT_2 * lipschitz),
        })
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }

    /// Strict: a margin of exactly `sqrt(2) L eps` is not certified.
    pub fn certified_at(&self, eps: f64, lipschitz: f64) -> bool {
        self.correct() && self.margin > SQRT_2 * lipschitz * eps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub samples: Vec<SampleCertificate>,
    pub eps: Vec<f64>,
    pub clean_accuracy: f64,
    pub certified_accuracy: Vec<f64>,
    pub lipschitz_bound: f64,
}

/// Certifies every sample of `data`. The network's spectral states must be
/// converged; relaxed networks are refused.
pub fn certify<T: Real>(net: &Network<T>, data: &Dataset<T>, eps: &[f64]) -> Result<CertificationReport> {
    if let Some(&e) = eps.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {e}")));
    }
    let lipschitz = net.lipschitz_bound()?.ok_or(Error::RelaxedNetwork)?;
    let samples = data
        .inputs
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, &y)| SampleCertificate::from_logits(&net.forward(x, Mode::Infer)?, y, lipschitz))
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len().max(1) as f64;
    let clean_accuracy = samples.iter().filter(|s| s.correct()).count() as f64 / n;
    let certified_accuracy = eps
        .iter()
        .map(|&e| samples.iter().filter(|s| s.certified_at(e, lipschitz)).count() as f64 / n)
        .collect();
    Ok(CertificationReport {
        samples,
        eps: eps.to_vec(),
        clean_accuracy,
        certified_accuracy,
        lipschitz_bound: lipschitz,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub eps: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Defaults to `2 eps / iterations`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> usize {
    10
}

impl AttackConfig {
    pub fn new(eps: f64) -> Self {
        AttackConfig {
            eps,
            iterations: default_iterations(),
            step_size: None,
            random_start: false,
            seed: 0,
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(2.0 * self.eps / self.iterations.max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome<T> {
    pub x_adv: Tensor<T>,
    pub success: bool,
    /// Largest `|x_t - x|` over all iterates.
    pub max_excursion: f64,
}

fn project<T: Real>(x: &Tensor<T>, x_adv: &mut Tensor<T>, eps: f64) -> f64 {
    let mut delta = x_adv.sub(x);
    let n = delta.norm().as_f64();
    if n > eps {
        delta.scale(T::of(eps / n));
        *x_adv = x.add(&delta);
        return delta.norm().as_f64();
    }
    n
}

/// l2 PGD ascending `f_j - f_y` for the current best rival `j`.
pub fn pgd_attack<T: Real>(net: &Network<T>, x: &Tensor<T>, y: usize, cfg: &AttackConfig) -> Result<AttackOutcome<T>> {
    if !(cfg.eps >= 0.0) || cfg.iterations == 0 {
        return Err(Error::InvalidArgument(format!(
            "attack needs eps >= 0 and iterations >= 1, got eps {} and {} iterations",
            cfg.eps, cfg.iterations
        )));
    }
    if y >= net.num_classes() {
        return Err(Error::InvalidLabel {
            label: y,
            classes: net.num_classes(),
        });
    }
    let mut x_adv = x.clone();
    let mut max_excursion = 0.0f64;
    if cfg.eps > 0.0 {
        if cfg.random_start {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let dir = Tensor::<T>::random_unit(x.shape(), rng.random());
            let r: f64 = rng.random();
            x_adv.axpy(T::of(cfg.eps * r), &dir);
            max_excursion = project(x, &mut x_adv, cfg.eps);
        }
        let alpha = T::of(cfg.step());
        for _ in 0..cfg.iterations {
            let tape = net.tape(&x_adv, Mode::Infer)?;
            let Some(j) = rival(tape.output(), y) else { break };
            let mut g = Tensor::zeros(tape.output().shape());
            g.data_mut()[j] = T::one();
            g.data_mut()[y] = -T::one();
            let grad = net.backward(&tape, &g, None)?;
            let n = grad.norm();
            if n == T::zero() || !n.is_finite() {
                continue;
            }
            x_adv.axpy(alpha / n, &grad);
            max_excursion = max_excursion.max(project(x, &mut x_adv, cfg.eps));
        }
    }
    let success = net.forward(&x_adv, Mode::Infer)?.argmax() != y;
    Ok(AttackOutcome {
        x_adv,
        success,
        max_excursion,
    })
}

/// Attacks every sample; sample `i` uses seed `cfg.seed + i` for its random start.
pub fn attack_dataset<T: Real>(
    net: &Network<T>,
    data: &Dataset<T>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome<T>>> {
    data.inputs
        .par_iter()
        .zip(data.labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let c = AttackConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..*cfg
            };
            pgd_attack(net, x, y, &c)
        })
        .collect()
}

fn ratio<T: Real>(net: &Network<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Option<f64>> {
    let din = a.sub(b).norm().as_f64();
    if din == 0.0 {
        return Ok(None);
    }
    let fa = net.forward(a, Mode::Infer)?;
    let fb = net.forward(b, Mode::Infer)?;
    Ok(Some(fa.sub(&fb).norm().as_f64() / din))
}

/// Top right singular vector of the input Jacobian at `x`.
fn top_direction<T: Real>(net: &Network<T>, x: &Tensor<T>, iters: usize, seed: u64) -> Result<Tensor<T>> {
    let tape = net.tape(x, Mode::Infer)?;
    let mut v = Tensor::<T>::random_unit(x.shape(), seed);
    for _ in 0..iters {
        let jv = net.jvp(&tape, &v)?;
        let mut u = net.backward(&tape, &jv, None)?;
        let n = u.norm();
        if n == T::zero() {
            break;
        }
        u.scale(T::one() / n);
        v = u;
    }
    Ok(v)
}

/// Lower bound on the l2 Lipschitz constant: the largest output/input distance
/// ratio over `pairs` random pairs from `sampler`, plus, per pair, a short pair
/// along the locally most-stretched input direction.
pub fn empirical_lipschitz<T: Real>(
    net: &Network<T>,
    mut sampler: impl FnMut(&mut ChaCha8Rng) -> Tensor<T>,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::InvalidArgument(
            "empirical_lipschitz needs at least one pair".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for i in 0..pairs {
        let a = sampler(&mut rng);
        let b = sampler(&mut rng);
        if let Some(r) = ratio(net, &a, &b)? {
            best = best.max(r);
        }
        let v = top_direction(net, &a, 20, seed.wrapping_add(i as u64))?;
        let t = 1e-3 * a.norm().as_f64().max(1.0);
        let mut c = a.clone();
        c.axpy(T::of(t), &v);
        if let Some(r) = ratio(net, &a, &c)? {
            best = best.max(r);
        }
    }
    Ok(best)
}
