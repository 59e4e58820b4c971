#![allow(dead_code)]

use genlayer::linalg::Matrix;
use genlayer::network::{Activation, InitScheme, LayerSpec, Linear, Network};
use genlayer::rng::SeededRng;

pub const SMOOTH: [Activation; 2] = [Activation::Tanh, Activation::Softplus];

pub fn dims(rng: &mut SeededRng, layers: usize, max_width: usize, input: usize, output: usize) -> Vec<usize> {
    let mut d = vec![input];
    for _ in 1..layers {
        d.push(1 + rng.below(max_width));
    }
    d.push(output);
    d
}

/// Dense stack over `dims` with one activation per layer.
pub fn dense_net(dims: &[usize], acts: &[Activation], seed: u64, scheme: InitScheme) -> Network {
    let specs = dims
        .windows(2)
        .zip(acts)
        .map(|(w, &a)| LayerSpec::dense(w[0], w[1], a))
        .collect();
    Network::init(specs, seed, scheme).unwrap()
}

pub fn vector(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-scale, scale)).collect()
}

pub fn pick<T: Copy>(rng: &mut SeededRng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

/// Max-abs difference relative to the larger of the two magnitudes.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn central_jacobian(net: &Network, x: &[f64], h: f64) -> Matrix {
    let m = net.output_dim();
    let mut j = Matrix::zeros(m, x.len());
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[i] += h;
        xm[i] -= h;
        let (yp, ym) = (net.predict_one(&xp).unwrap(), net.predict_one(&xm).unwrap());
        for k in 0..m {
            j.set(k, i, (yp[k] - ym[k]) / (2.0 * h));
        }
    }
    j
}

/// Literal sum over paths of weight products times activation-derivative
/// products, with the derivatives from a hand-rolled forward pass.
pub fn enumerate_paths(net: &Network, acts: &[Activation], x: &[f64]) -> Matrix {
    let lins = net.linears();
    let mut h = x.to_vec();
    let mut derivs = Vec::new();
    for (lin, act) in lins.iter().zip(acts) {
        let mut pre = lin.weight.matvec(&h).unwrap();
        if let Some(b) = &lin.bias {
            pre.iter_mut().zip(b).for_each(|(p, b)| *p += b);
        }
        derivs.push(pre.iter().map(|&u| act.derivative(u)).collect::<Vec<_>>());
        h = pre.iter().map(|&u| act.apply(u)).collect();
    }
    fn walk(lins: &[&Linear], derivs: &[Vec<f64>], l: usize, node: usize, prod: f64, out: &mut [f64]) {
        if l == lins.len() {
            out[node] += prod;
            return;
        }
        let w = &lins[l].weight;
        for next in 0..w.rows() {
            walk(lins, derivs, l + 1, next, prod * w.get(next, node) * derivs[l][next], out);
        }
    }
    let (n_in, n_out) = (net.input_dim(), net.output_dim());
    let mut p = Matrix::zeros(n_in, n_out);
    for i in 0..n_in {
        let mut row = vec![0.0; n_out];
        walk(&lins, &derivs, 0, i, 1.0, &mut row);
        p.row_mut(i).copy_from_slice(&row);
    }
    p
}
