mod common;

use common::*;
use genlayer::bregman::{BregmanLoss, LossKind};
use genlayer::rng::SeededRng;
use proptest::prelude::*;

fn losses(n: usize) -> [BregmanLoss; 3] {
    [
        BregmanLoss::Squared,
        BregmanLoss::SoftmaxCrossEntropy { num_classes: n },
        BregmanLoss::BernoulliLogistic,
    ]
}

fn interior(rng: &mut SeededRng, loss: &BregmanLoss, n: usize) -> Vec<f64> {
    match loss {
        BregmanLoss::Squared => vector(rng, n, 5.0),
        BregmanLoss::SoftmaxCrossEntropy { .. } => {
            let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.01, 1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        }
        BregmanLoss::BernoulliLogistic => (0..n).map(|_| rng.uniform_range(0.01, 0.99)).collect(),
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = SeededRng::new(1);
    for _ in 0..200 {
        let n = 1 + rng.below(5);
        for loss in losses(n) {
            let z = vector(&mut rng, n, 4.0);
            let y = interior(&mut rng, &loss, n);
            let g = loss.grad_z(&z, &y).unwrap();
            let fd: Vec<f64> = (0..n)
                .map(|k| {
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[k] += 1e-6;
                    zm[k] -= 1e-6;
                    (loss.value(&zp, &y).unwrap() - loss.value(&zm, &y).unwrap()) / 2e-6
                })
                .collect();
            assert!(rel_diff(&g, &fd) < 1e-6, "{loss:?} z={z:?} y={y:?}: {g:?} vs {fd:?}");
        }
    }
}

#[test]
fn hessian_matches_second_differences_of_the_cumulant() {
    let mut rng = SeededRng::new(2);
    for _ in 0..200 {
        let n = 1 + rng.below(5);
        for loss in losses(n) {
            let t = vector(&mut rng, n, 3.0);
            let an = loss.hessian_psi(&t).unwrap();
            let psi = |i: usize, di: f64, j: usize, dj: f64| {
                let mut v = t.clone();
                v[i] += di;
                v[j] += dj;
                loss.psi(&v)
            };
            let second = |i: usize, j: usize, h: f64| {
                (psi(i, h, j, h) - psi(i, h, j, -h) - psi(i, -h, j, h) + psi(i, -h, j, -h)) / (4.0 * h * h)
            };
            // Richardson step removes the h^2 error term.
            let h = 2e-3;
            let mut fd = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    fd.push((4.0 * second(i, j, h / 2.0) - second(i, j, h)) / 3.0);
                }
            }
            let err = rel_diff(an.data(), &fd);
            assert!(err < 1e-6, "{loss:?} theta={t:?}: rel err {err}");
        }
    }
}

#[test]
fn conjugacy_holds_on_interior_points() {
    let mut rng = SeededRng::new(3);
    for loss in losses(4) {
        for _ in 0..100 {
            let y = interior(&mut rng, &loss, 4);
            let err = loss.conjugacy_check(&y).unwrap();
            assert!(err < 1e-10, "{loss:?} y={y:?}: {err}");
        }
    }
}

#[test]
fn boundary_targets_are_rejected_by_conjugacy() {
    let ce = BregmanLoss::SoftmaxCrossEntropy { num_classes: 3 };
    assert!(ce.conjugacy_check(&[1.0, 0.0, 0.0]).is_err());
    assert!(BregmanLoss::BernoulliLogistic.conjugacy_check(&[0.0]).is_err());
}

#[test]
fn kinds_resolve_against_output_dimension() {
    assert_eq!(
        BregmanLoss::from_kind(LossKind::SoftmaxCe, 10),
        BregmanLoss::SoftmaxCrossEntropy { num_classes: 10 }
    );
    assert!("hinge".parse::<LossKind>().is_err());
}

proptest! {
    #[test]
    fn divergence_is_nonnegative_and_zero_at_the_mean(
        seed in 0u64..10_000,
        n in 1usize..6,
    ) {
        let mut rng = SeededRng::new(seed);
        for loss in losses(n) {
            let z = vector(&mut rng, n, 6.0);
            let y = interior(&mut rng, &loss, n);
            prop_assert!(loss.value(&z, &y).unwrap() >= -1e-12);
            // The loss is minimized at the natural parameter of y.
            let theta = loss.grad_phi(&y);
            let at_min = loss.value(&theta, &y).unwrap();
            prop_assert!(at_min <= loss.value(&z, &y).unwrap() + 1e-12);
            let g = loss.grad_z(&theta, &y).unwrap();
            prop_assert!(g.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn hessian_is_symmetric_psd(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        for loss in losses(n) {
            let h = loss.hessian_psi(&vector(&mut rng, n, 10.0)).unwrap();
            prop_assert!(h.max_abs_diff(&h.transpose()) == 0.0);
            prop_assert!(genlayer::linalg::psd_min_eig(&h).unwrap() >= -1e-12);
        }
    }
}
