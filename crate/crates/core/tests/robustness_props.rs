//! Certification, PGD and empirical Lipschitz estimates against closed forms.

mod common;

use certilip::data::Dataset;
use certilip::layers::{Activation, DimOp, NormalizedHead};
use certilip::robustness::*;
use certilip::spectral::spectral_norm_oracle;
use certilip::{ArchSpec, Error, Layer, LayerSpec, Mode, Network, Tensor};
use common::*;
use proptest::prelude::*;

fn linear_net(w: Vec<f64>, classes: usize) -> Network<f64> {
    let n = w.len() / classes;
    let head = NormalizedHead::new(Tensor::new(vec![classes, n], w).unwrap(), vec![n]).unwrap();
    Network::new(vec![n], classes, vec![Layer::Head(head)]).unwrap()
}

fn small_net(seed: u64) -> Network<f64> {
    let arch = ArchSpec {
        input_shape: vec![4],
        num_classes: 3,
        layers: vec![
            LayerSpec::ZeroPad { to: 6 },
            LayerSpec::CplDense {
                width: 8,
                activation: Activation::Relu,
            },
            LayerSpec::CplDense {
                width: 8,
                activation: Activation::Relu,
            },
        ],
        lln: false,
    };
    let mut net = arch.build::<f64>(seed).unwrap();
    net.converge(100, seed).unwrap();
    net
}

fn dataset(n: usize, seed: u64) -> Dataset<f64> {
    let mut r = rng(seed);
    let inputs = (0..n).map(|_| randn(&[4], &mut r)).collect();
    let labels = (0..n).map(|i| i % 3).collect();
    Dataset::new(inputs, labels, 3).unwrap()
}

#[test]
fn pgd_matches_linear_worst_case() {
    let mut r = rng(1);
    for _ in 0..20 {
        let w = randn(&[2, 5], &mut r).into_data();
        let net = linear_net(w, 2);
        let rows = match &net.layers()[0] {
            Layer::Head(h) => h.normalized(),
            _ => unreachable!(),
        };
        let d: Vec<f64> = (0..5).map(|j| rows.data()[5 + j] - rows.data()[j]).collect();
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x = randn(&[5], &mut r);
        let eps = 0.3;
        let out = pgd_attack(&net, &x, 0, &AttackConfig::new(eps)).unwrap();
        let logits = net.forward(&out.x_adv, Mode::Infer).unwrap();
        let clean = net.forward(&x, Mode::Infer).unwrap();
        let achieved = logits.data()[1] - logits.data()[0];
        let optimum = clean.data()[1] - clean.data()[0] + eps * dn;
        assert!((achieved - optimum).abs() <= 1e-3, "{achieved} vs {optimum}");
    }
}

#[test]
fn zero_budget_returns_the_input() {
    let net = small_net(2);
    let data = dataset(30, 3);
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let out = pgd_attack(&net, x, y, &AttackConfig::new(0.0)).unwrap();
        assert_eq!(&out.x_adv, x);
        let wrong = net.forward(x, Mode::Infer).unwrap().argmax() != y;
        assert_eq!(out.success, wrong);
    }
}

#[test]
fn certified_points_resist_pgd() {
    let net = small_net(4);
    let data = dataset(200, 5);
    let eps = [0.02, 0.05, 0.1, 0.3];
    let report = certify(&net, &data, &eps).unwrap();
    for &e in &eps {
        let mut cfg = AttackConfig::new(e);
        cfg.random_start = true;
        let outcomes = attack_dataset(&net, &data, &cfg).unwrap();
        for (s, o) in report.samples.iter().zip(&outcomes) {
            if s.certified_at(e, report.lipschitz_bound) {
                assert!(!o.success);
            }
        }
    }
}

#[test]
fn relaxed_networks_are_refused() {
    let mut net = small_net(6);
    net.relax(0.5).unwrap();
    assert!(matches!(
        certify(&net, &dataset(5, 1), &[0.1]),
        Err(Error::RelaxedNetwork)
    ));
}

#[test]
fn identity_network_has_unit_lipschitz_estimate() {
    let net = Network::<f64>::new(vec![6], 6, vec![Layer::Dim(DimOp::truncate(&[6], 6).unwrap())]).unwrap();
    let est = empirical_lipschitz(&net, |r| randn(&[6], r), 20, 3).unwrap();
    assert!((est - 1.0).abs() <= 1e-10, "{est}");
}

#[test]
fn linear_estimate_approaches_spectral_norm() {
    let mut r = rng(7);
    for _ in 0..5 {
        let net = linear_net(randn(&[4, 9], &mut r).into_data(), 4);
        let exact = match &net.layers()[0] {
            Layer::Head(h) => spectral_norm_oracle(&h.normalized()).unwrap(),
            _ => unreachable!(),
        };
        let est = empirical_lipschitz(&net, |r| randn(&[9], r), 10, 1).unwrap();
        assert!(est <= exact * (1.0 + 1e-9) && est >= 0.98 * exact, "{est} vs {exact}");
    }
}

#[test]
fn cpl_network_estimate_stays_below_one() {
    let net = small_net(8);
    let est = empirical_lipschitz(&net, |r| randn(&[4], r), 100, 2).unwrap();
    assert!(est <= 1.0 + 1e-4, "{est}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pgd_stays_in_the_ball(seed in 0u64..1000, eps in 0.0f64..2.0, random_start: bool) {
        let net = small_net(seed % 4);
        let mut r = rng(seed);
        let x = randn(&[4], &mut r);
        let cfg = AttackConfig { random_start, seed, ..AttackConfig::new(eps) };
        let out = pgd_attack(&net, &x, (seed % 3) as usize, &cfg).unwrap();
        prop_assert!(out.max_excursion <= eps + 1e-6);
        prop_assert!(out.x_adv.sub(&x).norm() <= eps + 1e-6);
    }

    #[test]
    fn certified_accuracy_is_monotone(seed in 0u64..1000) {
        let net = small_net(seed % 3);
        let data = dataset(40, seed);
        let eps = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5];
        let report = certify(&net, &data, &eps).unwrap();
        for w in report.certified_accuracy.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for s in &report.samples {
            for w in eps.windows(2) {
                prop_assert!(!s.certified_at(w[1], report.lipschitz_bound) || s.certified_at(w[0], report.lipschitz_bound));
            }
            if !s.correct() {
                prop_assert_eq!(s.radius, 0.0);
            }
        }
    }
}
