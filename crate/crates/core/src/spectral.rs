//! Power-iteration spectral norm estimation.
//!
//! Training performs a single power step per forward pass and carries the
//! singular-vector estimate `u` from one step to the next; inference
//! re-converges from a fresh seeded start with [`power_converge`].

use crate::error::{Error, Result};
use crate::tensor::{LinearOperator, Real, Tensor};

/// Iteration count used once per layer before inference and certification.
pub const INFERENCE_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<T> {
    /// Unit vector in the operator's input space.
    pub u: Tensor<T>,
    /// Current spectral-norm estimate.
    pub sigma: T,
    pub iterations: u64,
    /// Seed of the unit-vector generator used for (re)initialization.
    pub seed: u64,
    /// `||W u|| - sigma` after the last step; zero at convergence.
    pub rayleigh_gap: T,
}

/// Outcome of one power step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerStep {
    Updated,
    /// `W u` vanished; `u` was redrawn and `sigma` reset to zero.
    Degenerate,
}

impl<T: Real> SpectralState<T> {
    pub fn new(shape: &[usize], seed: u64) -> Self {
        SpectralState {
            u: Tensor::random_unit(shape, seed),
            sigma: T::zero(),
            iterations: 0,
            seed,
            rayleigh_gap: T::zero(),
        }
    }

    fn reinitialize(&mut self) {
        let shape = self.u.shape().to_vec();
        let reseed = self.seed ^ self.iterations.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        self.u = Tensor::random_unit(&shape, reseed);
        self.sigma = T::zero();
        self.rayleigh_gap = T::zero();
    }
}

/// One round of `v <- Wu/|Wu|`, `u <- W^T v/|W^T v|`, `sigma <- <W u, v>`.
pub fn power_step<T: Real>(op: &LinearOperator<T>, state: &mut SpectralState<T>) -> Result<PowerStep> {
    if state.u.shape() != op.in_shape() {
        return Err(Error::shape("spectral state", op.in_shape(), state.u.shape()));
    }
    state.iterations += 1;
    let mut v = op.apply(&state.u)?;
    let wu_norm = v.norm();
    if wu_norm == T::zero() || !wu_norm.is_finite() {
        state.reinitialize();
        return Ok(PowerStep::Degenerate);
    }
    v.scale(T::one() / wu_norm);
    let mut u = op.apply_adjoint(&v)?;
    let wtv_norm = u.norm();
    if wtv_norm == T::zero() || !wtv_norm.is_finite() {
        state.reinitialize();
        return Ok(PowerStep::Degenerate);
    }
    u.scale(T::one() / wtv_norm);
    let wu = op.apply(&u)?;
    let sigma = wu.dot(&v);
    state.rayleigh_gap = wu.norm() - sigma;
    if state.rayleigh_gap.abs() > T::of(1e-3) * sigma.abs() {
        log::debug!(
            "power step {}: sigma {} differs from |Wu| by {}",
            state.iterations,
            sigma,
            state.rayleigh_gap
        );
    }
    state.u = u;
    state.sigma = sigma.max(T::zero());
    Ok(PowerStep::Updated)
}

/// Runs `iters` power steps from a seeded random unit start.
pub fn power_converge<T: Real>(op: &LinearOperator<T>, iters: usize, seed: u64) -> Result<(T, Tensor<T>)> {
    if iters == 0 {
        return Err(Error::InvalidArgument(
            "power_converge needs at least one iteration".into(),
        ));
    }
    let mut state = SpectralState::new(op.in_shape(), seed);
    for _ in 0..iters {
        power_step(op, &mut state)?;
    }
    Ok((state.sigma, state.u))
}

/// Largest singular value of a dense matrix: power iteration on `M^T M`
/// until the relative change stagnates below 1e-12, best of three restarts.
pub fn spectral_norm_oracle(m: &Tensor<f64>) -> Result<f64> {
    const MAX_ITERS: usize = 200_000;
    if m.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "oracle needs a matrix, got {:?}",
            m.shape()
        )));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if cols > crate::tensor::ORACLE_MAX_DIM || rows > crate::tensor::ORACLE_MAX_DIM {
        return Err(Error::OracleScale {
            dim: rows.max(cols),
            limit: crate::tensor::ORACLE_MAX_DIM,
        });
    }
    let op = LinearOperator::dense(m.clone())?;
    let mut best = 0.0f64;
    for restart in 0..3u64 {
        let mut x = Tensor::<f64>::random_unit(&[cols], 0x5eed_0000 + restart);
        let mut prev = 0.0;
        for _ in 0..MAX_ITERS {
            let mx = op.apply(&x)?;
            let est = mx.norm();
            if est == 0.0 {
                break;
            }
            let mut next = op.apply_adjoint(&mx)?;
            let n = next.norm();
            if n == 0.0 {
                break;
            }
            next.scale(1.0 / n);
            x = next;
            if (est - prev).abs() <= 1e-12 * est {
                prev = est;
                break;
            }
            prev = est;
        }
        best = best.max(prev.max(op.apply(&x)?.norm()));
    }
    Ok(best)
}
