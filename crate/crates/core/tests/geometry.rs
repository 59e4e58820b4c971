mod common;

use common::*;
use genlayer::bregman::BregmanLoss;
use genlayer::geometry::{
    analyze_bounds, pulled_back_metric, rescaling_invariance_check, spectral_summary, verify_bound_chain,
};
use genlayer::linalg::{psd_min_eig, Matrix};
use genlayer::network::{Activation, InitScheme, LayerSpec, Network};
use genlayer::rng::SeededRng;

fn random_loss(rng: &mut SeededRng, out: usize) -> BregmanLoss {
    match rng.below(3) {
        0 => BregmanLoss::Squared,
        1 => BregmanLoss::SoftmaxCrossEntropy { num_classes: out },
        _ => BregmanLoss::BernoulliLogistic,
    }
}

fn random_architecture(rng: &mut SeededRng, input: usize, out: usize) -> Vec<LayerSpec> {
    let act = pick(rng, &Activation::ALL);
    let w = 1 + rng.below(6);
    let mut specs = vec![LayerSpec::dense(input, w, act)];
    for _ in 0..rng.below(4) {
        specs.push(match rng.below(4) {
            0 => LayerSpec::dense(w, w, pick(rng, &Activation::ALL)),
            1 => LayerSpec::residual(w, 1 + rng.below(2), act, rng.bernoulli(0.5)),
            2 => LayerSpec::gen_skip(w, act),
            _ => LayerSpec::gen_dropout(w, 1 + rng.below(5), w, act, 0.6),
        });
    }
    specs.push(LayerSpec::dense(w, out, pick(rng, &Activation::ALL)));
    specs
}

#[test]
fn zeta_is_psd_and_bound_chain_holds_over_random_configs() {
    let mut rng = SeededRng::new(4242);
    let schemes = [InitScheme::He, InitScheme::Xavier, InitScheme::FanInUniform];
    let mut checked = 0;
    while checked < 1200 {
        let input = 1 + rng.below(4);
        let out = 1 + rng.below(4);
        let specs = random_architecture(&mut rng, input, out);
        let net = Network::init(specs.clone(), rng.next_u64(), pick(&mut rng, &schemes)).unwrap();
        let loss = random_loss(&mut rng, out);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| vector(&mut rng, input, 3.0)).collect();
        let report = analyze_bounds(&net, &loss, &xs).unwrap();
        for (p, x) in report.points.iter().zip(&xs) {
            let m = pulled_back_metric(&net, &loss, x).unwrap();
            let min = psd_min_eig(&m.zeta).unwrap();
            assert!(min >= -1e-9, "{specs:?} {loss:?} x={x:?}: min eig {min}");
            assert!(p.violation.is_none(), "{specs:?} {loss:?} x={x:?}: {:?}", p.violation);
            assert!(p.sigma_max <= p.trace_bound * (1.0 + 1e-9) + 1e-300);
            assert!(p.trace_bound <= p.spectral_bound * (1.0 + 1e-9) + 1e-300);
            checked += 1;
        }
    }
}

#[test]
fn one_two_one_fixture_gives_hand_values() {
    let net = Network::from_dense_weights(
        vec![Matrix::column(&[2.0, -3.0]), Matrix::row_vector(&[1.0, 1.0])],
        &[Activation::Relu, Activation::Relu],
    )
    .unwrap();
    let report = verify_bound_chain(&net, &BregmanLoss::Squared, &[vec![1.0]]).unwrap();
    let p = &report.points[0];
    assert_eq!((p.sigma_max, p.trace_bound, p.spectral_bound), (4.0, 52.0, 104.0));
    assert_eq!(report.sigma_product, 26.0);
    // ReLU kills the negative branch at x = 1 and the positive one at x = -1.
    let neg = pulled_back_metric(&net, &BregmanLoss::Squared, &[-1.0]).unwrap();
    assert_eq!(neg.sigma_max, 9.0);
}

#[test]
fn rescaling_leaves_everything_invariant() {
    let mut rng = SeededRng::new(8);
    for case in 0..6 {
        let input = 1 + rng.below(3);
        let out = 1 + rng.below(3);
        let hidden: Vec<usize> = (0..2 + rng.below(2)).map(|_| 2 + rng.below(5)).collect();
        let mut d = vec![input];
        d.extend(&hidden);
        d.push(out);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Identity);
        let net = dense_net(&d, &acts, case, InitScheme::He);
        let loss = random_loss(&mut rng, out);
        let xs: Vec<Vec<f64>> = (0..100).map(|_| vector(&mut rng, input, 2.0)).collect();
        for beta in [0.1, 2.0, 10.0] {
            for l in 0..hidden.len() - 1 {
                let r = rescaling_invariance_check(&net, l, beta, &loss, &xs).unwrap();
                assert!(r.passed, "{r:?}");
                assert!(r.max_output_rel_diff < 1e-9);
                assert!(r.max_p_rel_diff < 1e-9);
                assert!(r.sigma_product_rel_diff < 1e-9);
                assert!(r.spectral_bound_rel_diff < 1e-9);
            }
        }
    }
}

#[test]
fn rescaling_changes_individual_layer_norms() {
    let net = dense_net(&[2, 4, 4, 1], &[Activation::Relu, Activation::Relu, Activation::Identity], 3, InitScheme::He);
    let scaled = net.scale_layer_pair(0, 10.0).unwrap();
    let (a, b) = (spectral_summary(&net), spectral_summary(&scaled));
    assert!((b.layer_sigmas[0] / a.layer_sigmas[0] - 10.0).abs() < 1e-9);
    assert!((b.sigma_product / a.sigma_product - 1.0).abs() < 1e-9);
}

#[test]
fn tanh_pairs_are_not_rescalable() {
    let net = dense_net(&[2, 3, 3, 1], &[Activation::Tanh, Activation::Tanh, Activation::Identity], 1, InitScheme::He);
    assert!(net.scale_layer_pair(0, 2.0).is_err());
}
