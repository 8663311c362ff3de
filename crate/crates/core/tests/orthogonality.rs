//! Orthogonality of the Cayley and truncated-exponential skew layers.

mod common;

use certilip::layers::{SkewLayer, SkewScheme};
use certilip::{LinearOperator, Tensor};
use common::*;
use nalgebra::DMatrix;

/// The realized map as a dense matrix, by probing basis vectors.
fn realized(layer: &SkewLayer<f64>) -> DMatrix<f64> {
    let n: usize = layer.shape().iter().product();
    let mut q = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = Tensor::zeros(layer.shape());
        e.data_mut()[j] = 1.0;
        let y = layer.forward(&e).unwrap().0;
        for i in 0..n {
            q[(i, j)] = y.data()[i];
        }
    }
    q
}

fn orthogonality_defect(q: &DMatrix<f64>) -> f64 {
    let n = q.nrows();
    (q.transpose() * q - DMatrix::identity(n, n)).abs().max()
}

/// A free matrix whose half skew part `(M - M^T) / 4` has spectral norm `s`.
fn scaled_free(n: usize, s: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let m = randn(&[n, n], &mut r);
    let a = DMatrix::from_row_slice(n, n, m.data());
    let half = (&a - a.transpose()) / 4.0;
    let norm = half.singular_values().max();
    m.scaled(s / norm)
}

#[test]
fn cayley_is_orthogonal_at_oracle_scale() {
    let mut r = rng(12);
    for (n, scale) in [(8, 0.1), (32, 1.0), (64, 3.0), (96, 10.0)] {
        let layer = skew_dense(n, scale, SkewScheme::Cayley, &mut r);
        let defect = orthogonality_defect(&realized(&layer));
        assert!(defect <= 1e-8, "n={n} scale={scale}: {defect:e}");
    }
    let op = LinearOperator::conv2d(randn(&[2, 2, 3, 3], &mut r), [2, 4, 4], 1, 1).unwrap();
    let layer = SkewLayer::new(op, SkewScheme::Cayley).unwrap();
    assert!(orthogonality_defect(&realized(&layer)) <= 1e-8);
}

#[test]
fn exponential_drift_within_budget_up_to_unit_norm() {
    for (i, s) in [0.25, 0.5, 1.0].into_iter().enumerate() {
        let m = scaled_free(16, s, i as u64);
        let layer = SkewLayer::new(LinearOperator::dense(m).unwrap(), SkewScheme::Exponential { terms: 12 }).unwrap();
        let q = realized(&layer);
        let drift = q.singular_values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-7, "|A/2| = {s}: drift {drift:e}");
    }
}

#[test]
fn exponential_drift_matches_taylor_remainder() {
    // S = [[0, s], [-s, 0]] has eigenvalues +-is, so |T_n(S) x| / |x| = |T_n(is)|
    for s in [1.0f64, 1.5, 2.0] {
        let m = Tensor::new(vec![2, 2], vec![0.0, 2.0 * s, -2.0 * s, 0.0]).unwrap();
        let layer = SkewLayer::new(LinearOperator::dense(m).unwrap(), SkewScheme::Exponential { terms: 12 }).unwrap();
        let x = Tensor::from_vec(vec![0.3, -1.1]);
        let drift = layer.forward(&x).unwrap().0.norm() / x.norm() - 1.0;
        let (mut re, mut im, mut term_re, mut term_im) = (0.0, 0.0, 1.0f64, 0.0f64);
        for k in 0..=12 {
            re += term_re;
            im += term_im;
            // term *= i s / (k + 1)
            let (a, b) = (-term_im * s, term_re * s);
            term_re = a / (k + 1) as f64;
            term_im = b / (k + 1) as f64;
        }
        let expected = (re * re + im * im).sqrt() - 1.0;
        assert!((drift - expected).abs() <= 1e-13, "{s}: {drift:e} vs {expected:e}");
    }
}

#[test]
fn exponential_drift_shrinks_with_more_terms() {
    let m = scaled_free(12, 1.0, 3);
    let mut r = rng(4);
    let x = randn(&[12], &mut r);
    let mut last = f64::INFINITY;
    for terms in [4, 8, 12, 16] {
        let layer = SkewLayer::new(
            LinearOperator::dense(m.clone()).unwrap(),
            SkewScheme::Exponential { terms },
        )
        .unwrap();
        let drift = (layer.forward(&x).unwrap().0.norm() - x.norm()).abs();
        assert!(drift <= last.max(1e-14), "{terms}: {drift:e} after {last:e}");
        last = drift;
    }
}

#[test]
fn skew_part_is_exact() {
    let mut r = rng(2);
    let layer = skew_dense(7, 1.0, SkewScheme::Cayley, &mut r);
    let s = layer.half_skew_matrix().unwrap();
    assert_eq!((&s + s.transpose()).abs().max(), 0.0);
}
