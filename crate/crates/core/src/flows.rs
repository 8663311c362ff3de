//! Continuous-time flows `dx/dt = -grad f_t(x) + A_t x` with convex `f_t` and
//! skew `A_t`, their RK4 reference solutions and the discrete schemes that
//! turn them into layers.
//!
//! Everything here runs in `f64` on small dense problems.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_PROX_TOL: f64 = 1e-10;
pub const PROX_MAX_ITERS: usize = 100_000;
pub const ENVELOPE_TOL: f64 = 1e-6;

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Convex potentials with closed-form gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    Zero,
    /// `mu/2 |x|^2`
    Isotropic {
        mu: f64,
    },
    /// `x^T S x / 2` with `S` symmetric positive semidefinite.
    Quadratic {
        s: DMatrix<f64>,
    },
    /// `sum_i softplus(w_i . x + b_i)`, rows of `w` are the `w_i`.
    Icnn {
        w: DMatrix<f64>,
        b: DVector<f64>,
    },
}

impl Potential {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Potential::Zero => Ok(()),
            Potential::Isotropic { mu } => {
                if *mu >= 0.0 && mu.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "isotropic potential needs mu >= 0, got {mu}"
                    )))
                }
            }
            Potential::Quadratic { s } => {
                if s.shape() != (dim, dim) {
                    return Err(Error::shape(
                        "quadratic potential",
                        &[dim, dim],
                        &[s.nrows(), s.ncols()],
                    ));
                }
                if s != &s.transpose() {
                    return Err(Error::InvalidArgument(
                        "quadratic potential matrix is not symmetric".into(),
                    ));
                }
                // PSD test: Cholesky of S plus a jitter far below any meaningful eigenvalue.
                let jitter = 1e-12 * (1.0 + s.amax());
                let shifted = s + DMatrix::identity(dim, dim) * jitter;
                if shifted.cholesky().is_none() {
                    return Err(Error::InvalidArgument(
                        "quadratic potential matrix is not positive semidefinite".into(),
                    ));
                }
                Ok(())
            }
            Potential::Icnn { w, b } => {
                if w.ncols() != dim || b.len() != w.nrows() {
                    return Err(Error::shape("icnn potential", &[w.nrows(), dim], &[b.len(), w.ncols()]));
                }
                Ok(())
            }
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Isotropic { mu } => 0.5 * mu * x.norm_squared(),
            Potential::Quadratic { s } => 0.5 * x.dot(&(s * x)),
            Potential::Icnn { w, b } => (w * x + b).iter().map(|&v| softplus(v)).sum(),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Potential::Zero => DVector::zeros(x.len()),
            Potential::Isotropic { mu } => x * *mu,
            Potential::Quadratic { s } => s * x,
            Potential::Icnn { w, b } => w.transpose() * (w * x + b).map(sigmoid),
        }
    }

    /// Hessian eigenvalue bounds `(m, L)`: `m I <= hess f <= L I` everywhere.
    pub fn hessian_bounds(&self) -> (f64, f64) {
        match self {
            Potential::Zero => (0.0, 0.0),
            Potential::Isotropic { mu } => (*mu, *mu),
            Potential::Quadratic { s } => {
                let eig = s.clone().symmetric_eigen().eigenvalues;
                (eig.min().max(0.0), eig.max().max(0.0))
            }
            // softplus'' <= 1/4, and the sum of rank-one terms can be singular
            Potential::Icnn { w, .. } => {
                let top = (w.transpose() * w).symmetric_eigen().eigenvalues.max();
                (0.0, 0.25 * top.max(0.0))
            }
        }
    }

    /// `argmin_u |u - x|^2 / 2 + h f(u)`: closed form where available,
    /// otherwise gradient descent on the strongly convex objective until the
    /// gradient norm is at most `tol`.
    pub fn prox(&self, x: &DVector<f64>, h: f64, tol: f64) -> Result<DVector<f64>> {
        if !(h >= 0.0) {
            return Err(Error::InvalidArgument(format!("prox step must be >= 0, got {h}")));
        }
        match self {
            Potential::Zero => Ok(x.clone()),
            Potential::Isotropic { mu } => Ok(x / (1.0 + h * mu)),
            Potential::Quadratic { s } => {
                let n = x.len();
                let m = DMatrix::identity(n, n) + s * h;
                m.cholesky()
                    .map(|c| c.solve(x))
                    .ok_or_else(|| Error::Numerical("I + hS is not positive definite".into()))
            }
            Potential::Icnn { .. } => {
                let (_, l) = self.hessian_bounds();
                let rate = 1.0 / (1.0 + h * l);
                let mut u = x.clone();
                for _ in 0..PROX_MAX_ITERS {
                    let g = &u - x + self.gradient(&u) * h;
                    if g.norm() <= tol {
                        return Ok(u);
                    }
                    u -= g * rate;
                }
                Err(Error::Convergence {
                    what: "proximal inner solve",
                    iterations: PROX_MAX_ITERS,
                })
            }
        }
    }
}

/// One constant piece of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub potential: Potential,
    /// Exactly skew-symmetric.
    pub skew: DMatrix<f64>,
}

impl Segment {
    pub fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.skew * x - self.potential.gradient(x)
    }
}

/// A flow whose potential and skew part are piecewise constant in time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub dim: usize,
    pub segments: Vec<Segment>,
}

impl FlowSpec {
    pub fn constant(potential: Potential, skew: DMatrix<f64>, horizon: f64) -> Result<Self> {
        let spec = FlowSpec {
            dim: skew.nrows(),
            segments: vec![Segment {
                duration: horizon,
                potential,
                skew,
            }],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidArgument("flow needs at least one segment".into()));
        }
        for seg in &self.segments {
            if !(seg.duration > 0.0) || !seg.duration.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "segment duration must be positive, got {}",
                    seg.duration
                )));
            }
            if seg.skew.shape() != (self.dim, self.dim) {
                return Err(Error::shape(
                    "skew field",
                    &[self.dim, self.dim],
                    &[seg.skew.nrows(), seg.skew.ncols()],
                ));
            }
            if seg.skew != -seg.skew.transpose() {
                return Err(Error::InvalidArgument(
                    "skew field is not exactly skew-symmetric".into(),
                ));
            }
            seg.potential.validate(self.dim)?;
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Segment active on `[start, start + duration)`, the last one at the horizon.
    pub fn segment_at(&self, t: f64) -> &Segment {
        let mut start = 0.0;
        for seg in &self.segments {
            start += seg.duration;
            if t < start {
                return seg;
            }
        }
        self.segments.last().expect("validated non-empty")
    }

    pub fn field(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.segment_at(t).field(x)
    }

    /// `(int_0^t m_s ds, int_0^t L_s ds)` of the Hessian bounds.
    pub fn integrated_bounds(&self, t: f64) -> (f64, f64) {
        let (mut lo, mut hi, mut start) = (0.0, 0.0, 0.0);
        for seg in &self.segments {
            let dt = (t - start).clamp(0.0, seg.duration);
            let (m, l) = seg.potential.hessian_bounds();
            lo += m * dt;
            hi += l * dt;
            start += seg.duration;
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub scheme: &'static str,
    pub step: f64,
}

impl FlowTrajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds the initial state")
    }
}

fn steps_for(duration: f64, step: f64) -> Result<usize> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let n = (duration / step).round();
    if n < 1.0 || (n * step - duration).abs() > 1e-9 * duration.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "step {step} does not divide duration {duration}"
        )));
    }
    Ok(n as usize)
}

/// Classical fixed-step RK4. The step must divide every segment duration.
pub fn integrate_continuous(spec: &FlowSpec, x0: &DVector<f64>, step: f64) -> Result<FlowTrajectory> {
    spec.validate()?;
    if x0.len() != spec.dim {
        return Err(Error::shape("flow initial state", &[spec.dim], &[x0.len()]));
    }
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut x = x0.clone();
    let mut t0 = 0.0;
    for seg in &spec.segments {
        let n = steps_for(seg.duration, step)?;
        let h = seg.duration / n as f64;
        for i in 0..n {
            let k1 = seg.field(&x);
            let k2 = seg.field(&(&x + &k1 * (h / 2.0)));
            let k3 = seg.field(&(&x + &k2 * (h / 2.0)));
            let k4 = seg.field(&(&x + &k3 * h));
            let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationBlowup {
                    last_valid_time: *times.last().expect("non-empty"),
                });
            }
            x = next;
            times.push(t0 + (i + 1) as f64 * h);
            states.push(x.clone());
        }
        t0 += seg.duration;
        *times.last_mut().expect("non-empty") = t0;
    }
    Ok(FlowTrajectory {
        times,
        states,
        scheme: "rk4",
        step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeRow {
    pub t: f64,
    pub distance: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub rows: Vec<EnvelopeRow>,
    /// Largest amount by which a bound was exceeded (0 when none).
    pub worst_violation: f64,
    pub worst_t: f64,
    pub holds: bool,
}

/// Integrates both trajectories and checks
/// `d_0 exp(-int L) <= d_t <= d_0 exp(-int m)` at every grid point.
pub fn contraction_envelope_check(
    spec: &FlowSpec,
    x0: &DVector<f64>,
    z0: &DVector<f64>,
    step: f64,
) -> Result<EnvelopeReport> {
    let xs = integrate_continuous(spec, x0, step)?;
    let zs = integrate_continuous(spec, z0, step)?;
    let d0 = (x0 - z0).norm();
    let tol = ENVELOPE_TOL * d0.max(1.0);
    let mut rows = Vec::with_capacity(xs.times.len());
    let (mut worst_violation, mut worst_t) = (0.0f64, 0.0);
    for ((&t, x), z) in xs.times.iter().zip(&xs.states).zip(&zs.states) {
        let d = (x - z).norm();
        let (lo, hi) = spec.integrated_bounds(t);
        let row = EnvelopeRow {
            t,
            distance: d,
            lower: d0 * (-hi).exp(),
            upper: d0 * (-lo).exp(),
        };
        let v = (row.lower - d).max(d - row.upper);
        if v > worst_violation {
            worst_violation = v;
            worst_t = t;
        }
        rows.push(row);
    }
    Ok(EnvelopeReport {
        rows,
        worst_violation,
        worst_t,
        holds: worst_violation <= tol,
    })
}

/// `x - h grad f(x)`, plus `h A x` when `with_skew` (explicit Euler on the
/// full field, which is not contractive for nonzero `A`).
pub fn explicit_step(seg: &Segment, x: &DVector<f64>, h: f64, with_skew: bool) -> Result<DVector<f64>> {
    if !(h >= 0.0) {
        return Err(Error::InvalidArgument(format!("step must be >= 0, got {h}")));
    }
    let mut next = x - seg.potential.gradient(x) * h;
    if with_skew {
        next += &seg.skew * x * h;
    }
    Ok(next)
}

/// Proximal (implicit Euler) step for the potential alone.
pub fn implicit_prox_step(potential: &Potential, x: &DVector<f64>, h: f64, inner_tol: f64) -> Result<DVector<f64>> {
    potential.prox(x, h, inner_tol)
}

/// `(I - hA/2)^{-1} (I + hA/2)`
pub fn cayley_map(a: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let half = a * (h / 2.0);
    let lhs = DMatrix::identity(n, n) - &half;
    let rhs = DMatrix::identity(n, n) + &half;
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("I - hA/2 is singular".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler on the whole field.
    Explicit,
    /// Prox on the potential, then the Cayley map for the skew part.
    ImplicitProx,
    /// Gradient step, then the Cayley map.
    SplitMidpoint,
    /// Gradient step, then the exact exponential.
    SplitExact,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Explicit,
        Scheme::ImplicitProx,
        Scheme::SplitMidpoint,
        Scheme::SplitExact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Explicit => "explicit",
            Scheme::ImplicitProx => "implicit_prox",
            Scheme::SplitMidpoint => "split_midpoint",
            Scheme::SplitExact => "split_exact",
        }
    }

    /// Global order of accuracy for a field with both parts nonzero.
    pub fn order(self) -> f64 {
        1.0
    }
}

/// Advances `x` by one step of `scheme`.
struct Stepper {
    scheme: Scheme,
    rotation: Option<DMatrix<f64>>,
}

impl Stepper {
    fn new(scheme: Scheme, seg: &Segment, h: f64) -> Result<Self> {
        let rotation = match scheme {
            Scheme::Explicit => None,
            Scheme::ImplicitProx | Scheme::SplitMidpoint => Some(cayley_map(&seg.skew, h)?),
            Scheme::SplitExact => Some((&seg.skew * h).exp()),
        };
        Ok(Stepper { scheme, rotation })
    }

    fn step(&self, seg: &Segment, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
        let half = match self.scheme {
            Scheme::Explicit => return explicit_step(seg, x, h, true),
            Scheme::ImplicitProx => seg.potential.prox(x, h, DEFAULT_PROX_TOL)?,
            Scheme::SplitMidpoint | Scheme::SplitExact => explicit_step(seg, x, h, false)?,
        };
        Ok(self.rotation.as_ref().expect("built with a rotation") * half)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeRow {
    pub scheme: Scheme,
    pub step: f64,
    pub k: usize,
    pub t: f64,
    pub distance: f64,
    /// `d_k / d_{k-1}`.
    pub ratio: f64,
    /// `|x_k| - |x_0|`.
    pub norm_drift: f64,
}

/// Runs each scheme from `x0` and `z0` over the first segment for `steps`
/// steps of size `h`.
pub fn scheme_compare(
    spec: &FlowSpec,
    x0: &DVector<f64>,
    z0: &DVector<f64>,
    schemes: &[Scheme],
    h: f64,
    steps: usize,
) -> Result<Vec<SchemeRow>> {
    spec.validate()?;
    let seg = &spec.segments[0];
    let mut rows = Vec::new();
    for &scheme in schemes {
        let stepper = Stepper::new(scheme, seg, h)?;
        let (mut x, mut z) = (x0.clone(), z0.clone());
        let mut d = (&x - &z).norm();
        for k in 1..=steps {
            x = stepper.step(seg, &x, h)?;
            z = stepper.step(seg, &z, h)?;
            let dn = (&x - &z).norm();
            rows.push(SchemeRow {
                scheme,
                step: h,
                k,
                t: k as f64 * h,
                distance: dn,
                ratio: if d > 0.0 { dn / d } else { 1.0 },
                norm_drift: x.norm() - x0.norm(),
            });
            d = dn;
        }
    }
    Ok(rows)
}

/// Endpoint of `scheme` after `horizon / h` steps on the first segment.
pub fn scheme_endpoint(
    spec: &FlowSpec,
    x0: &DVector<f64>,
    scheme: Scheme,
    h: f64,
    horizon: f64,
) -> Result<DVector<f64>> {
    let seg = &spec.segments[0];
    let n = steps_for(horizon, h)?;
    let stepper = Stepper::new(scheme, seg, h)?;
    let mut x = x0.clone();
    for _ in 0..n {
        x = stepper.step(seg, &x, h)?;
    }
    Ok(x)
}

/// Central-difference Jacobian of the field at `x`.
pub fn jacobian_fd(seg: &Segment, x: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut j = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += eps;
        xm[c] -= eps;
        j.set_column(c, &((seg.field(&xp) - seg.field(&xm)) / (2.0 * eps)));
    }
    j
}

/// Largest entry of `J + J^T`.
pub fn skew_defect(j: &DMatrix<f64>) -> f64 {
    (j + j.transpose()).amax()
}

/// Random exactly skew-symmetric matrix with standard normal entries.
pub fn random_skew(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = m[(i, j)];
            a[(i, j)] = v;
            a[(j, i)] = -v;
        }
    }
    a
}

/// Named witnesses covering every potential family.
pub fn catalog(seed: u64) -> Vec<(&'static str, FlowSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let b: DMatrix<f64> = DMatrix::from_fn(4, 4, |_, _| StandardNormal.sample(&mut rng));
    let psd = (&b * b.transpose()) * 0.25;
    let psd = (&psd + psd.transpose()) * 0.5;
    let skew4 = random_skew(4, &mut rng) * 0.5;
    let w = DMatrix::from_fn(6, 4, |_, _| StandardNormal.sample(&mut rng));
    let bias = DVector::from_fn(6, |_, _| StandardNormal.sample(&mut rng));
    let second = random_skew(4, &mut rng);
    vec![
        (
            "isotropic",
            FlowSpec::constant(Potential::Isotropic { mu: 1.0 }, DMatrix::zeros(3, 3), 1.0),
        ),
        (
            "diagonal",
            FlowSpec::constant(
                Potential::Quadratic {
                    s: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])),
                },
                DMatrix::zeros(2, 2),
                1.0,
            ),
        ),
        ("rotation", FlowSpec::constant(Potential::Zero, rot.clone(), 1.0)),
        (
            "quadratic_skew",
            FlowSpec::constant(Potential::Quadratic { s: psd.clone() }, skew4.clone(), 1.0),
        ),
        (
            "icnn_skew",
            FlowSpec::constant(
                Potential::Icnn {
                    w: w.clone(),
                    b: bias.clone(),
                },
                skew4.clone(),
                1.0,
            ),
        ),
        (
            "piecewise",
            Ok(FlowSpec {
                dim: 4,
                segments: vec![
                    Segment {
                        duration: 0.5,
                        potential: Potential::Isotropic { mu: 2.0 },
                        skew: skew4,
                    },
                    Segment {
                        duration: 0.5,
                        potential: Potential::Icnn { w, b: bias },
                        skew: second,
                    },
                ],
            }),
        ),
    ]
    .into_iter()
    .map(|(name, spec)| (name, spec.expect("catalog specs are valid")))
    .collect()
}
