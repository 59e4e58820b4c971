//! Randomized property checks over small networks and all three losses.
//!
//! Every check draws its cases from a fixed seed, so a failure is
//! reproducible and the first counterexample is printed in full.

use genlayer::bregman::BregmanLoss;
use genlayer::geometry::{path_product_matrix, pulled_back_metric, rescaling_invariance_check, verify_bound_chain};
use genlayer::linalg::psd_min_eig;
use genlayer::network::{Activation, InitScheme, LayerSpec, Mode, Network};
use genlayer::rng::SeededRng;
use genlayer::{Matrix, Result};

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;
const EXACT_TOL: f64 = 1e-9;

pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub counterexample: Option<String>,
}

pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn print(&self) {
        for c in &self.checks {
            match &c.counterexample {
                None => println!("PASS {:<22} {} cases", c.name, c.cases),
                Some(ce) => {
                    println!("FAIL {:<22} after {} cases", c.name, c.cases);
                    for line in ce.lines() {
                        println!("     {line}");
                    }
                }
            }
        }
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|c| c.counterexample.is_some())
            .map(|c| c.name)
            .collect()
    }
}

type Case = Box<dyn Fn(&mut SeededRng) -> Result<Option<String>>>;

fn run_check(name: &'static str, seed: u64, cases: usize, case: Case) -> CheckResult {
    let mut rng = SeededRng::new(seed);
    for i in 0..cases {
        let outcome = match case(&mut rng) {
            Ok(v) => v,
            Err(e) => Some(format!("error: {e}")),
        };
        if let Some(ce) = outcome {
            return CheckResult {
                name,
                cases: i + 1,
                counterexample: Some(ce),
            };
        }
    }
    CheckResult {
        name,
        cases,
        counterexample: None,
    }
}

pub fn run_suite(quick: bool) -> SuiteReport {
    let n = if quick { 20 } else { 200 };
    let checks = vec![
        run_check("jacobian_fd", 11, n, Box::new(jacobian_case)),
        run_check("path_product", 12, n, Box::new(path_product_case)),
        run_check("psd", 13, n, Box::new(psd_case)),
        run_check("bound_chain", 14, n, Box::new(bound_chain_case)),
        run_check("rescaling_invariance", 15, n, Box::new(rescaling_case)),
        run_check("conjugacy", 16, n * 5, Box::new(conjugacy_case)),
        run_check("loss_gradients", 17, n, Box::new(loss_gradient_case)),
        run_check("hessian_psi", 18, n * 5, Box::new(hessian_case)),
    ];
    SuiteReport { checks }
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn vector(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.uniform_range(-1.0, 1.0)).collect()
}

fn smooth_activation(rng: &mut SeededRng) -> Activation {
    if rng.bernoulli(0.5) {
        Activation::Tanh
    } else {
        Activation::Softplus
    }
}

/// Dense, skip and dropout layers in random order, eval mode only.
fn random_net(rng: &mut SeededRng, act: Activation, out: usize) -> Result<(Network, Vec<LayerSpec>)> {
    let input = dim(rng, 1, 4);
    let width = dim(rng, 2, 5);
    let mut specs = vec![LayerSpec::dense(input, width, act)];
    for _ in 0..dim(rng, 0, 3) {
        specs.push(match rng.below(3) {
            0 => LayerSpec::dense(width, width, act),
            1 => LayerSpec::residual(width, dim(rng, 1, 2), act, rng.bernoulli(0.5)),
            _ => LayerSpec::gen_dropout(width, dim(rng, 2, 5), width, act, 0.5),
        });
    }
    specs.push(LayerSpec::dense(width, out, Activation::Identity));
    let net = Network::init(specs.clone(), rng.next_u64(), InitScheme::Xavier)?;
    Ok((net, specs))
}

fn random_loss(rng: &mut SeededRng) -> (BregmanLoss, usize) {
    let n = dim(rng, 1, 4);
    match rng.below(3) {
        0 => (BregmanLoss::Squared, n),
        1 => (BregmanLoss::SoftmaxCrossEntropy { num_classes: n + 1 }, n + 1),
        _ => (BregmanLoss::BernoulliLogistic, n),
    }
}

/// A target in the interior of the loss's mean domain.
fn interior_target(rng: &mut SeededRng, loss: &BregmanLoss, n: usize) -> Vec<f64> {
    match loss {
        BregmanLoss::Squared => vector(rng, n, 3.0),
        BregmanLoss::SoftmaxCrossEntropy { .. } => {
            let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.05, 1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        }
        BregmanLoss::BernoulliLogistic => (0..n).map(|_| rng.uniform_range(0.02, 0.98)).collect(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn jacobian_case(rng: &mut SeededRng) -> Result<Option<String>> {
    let act = smooth_activation(rng);
    let out = dim(rng, 1, 3);
    let (net, specs) = random_net(rng, act, out)?;
    let x = vector(rng, net.input_dim(), 2.0);
    let j = net.input_jacobian(&x)?;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += FD_STEP;
        xm[i] -= FD_STEP;
        let (yp, ym) = (net.predict_one(&xp)?, net.predict_one(&xm)?);
        for k in 0..out {
            let fd = (yp[k] - ym[k]) / (2.0 * FD_STEP);
            if rel_err(fd, j.get(k, i)) > FD_TOL {
                return Ok(Some(format!(
                    "specs = {specs:?}\nx = {x:?}\nd out[{k}] / d x[{i}]: analytic {} vs finite difference {fd}",
                    j.get(k, i)
                )));
            }
        }
    }
    Ok(None)
}

/// Sums weight and activation-derivative products over every input-to-output
/// path of a bias-carrying dense ReLU stack.
fn enumerate_paths(weights: &[Matrix], derivs: &[Vec<f64>], i: usize, k: usize) -> (f64, usize) {
    fn walk(weights: &[Matrix], derivs: &[Vec<f64>], l: usize, from: usize, k: usize, acc: f64) -> (f64, usize) {
        let w = &weights[l];
        if l + 1 == weights.len() {
            return (acc * w.get(k, from) * derivs[l][k], 1);
        }
        let mut total = (0.0, 0);
        for to in 0..w.rows() {
            let (s, n) = walk(weights, derivs, l + 1, to, k, acc * w.get(to, from) * derivs[l][to]);
            total.0 += s;
            total.1 += n;
        }
        total
    }
    walk(weights, derivs, 0, i, k, 1.0)
}

fn path_product_case(rng: &mut SeededRng) -> Result<Option<String>> {
    let input = dim(rng, 1, 3);
    let out = dim(rng, 1, 3);
    let mut dims = vec![input];
    for _ in 0..dim(rng, 1, 3) {
        dims.push(dim(rng, 1, 4));
    }
    dims.push(out);
    let specs: Vec<LayerSpec> = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let act = if l + 2 == dims.len() { Activation::Identity } else { Activation::Relu };
            LayerSpec::dense(w[0], w[1], act)
        })
        .collect();
    let net = Network::init(specs, rng.next_u64(), InitScheme::He)?;
    let x = vector(rng, input, 2.0);

    // Derivative masks from an independent forward pass.
    let weights: Vec<Matrix> = net.linears().iter().map(|l| l.weight.clone()).collect();
    let mut h = x.clone();
    let mut derivs = Vec::new();
    for (l, lin) in net.linears().iter().enumerate() {
        let mut pre = lin.weight.matvec(&h)?;
        if let Some(b) = &lin.bias {
            pre.iter_mut().zip(b).for_each(|(p, b)| *p += b);
        }
        let act = if l + 1 == weights.len() { Activation::Identity } else { Activation::Relu };
        derivs.push(pre.iter().map(|&u| act.derivative(u)).collect::<Vec<_>>());
        h = pre.iter().map(|&u| act.apply(u)).collect();
    }

    let report = path_product_matrix(&net, &x)?;
    let jac = net.input_jacobian(&x)?;
    let mut paths = 0usize;
    for i in 0..input {
        for k in 0..out {
            let (brute, n) = enumerate_paths(&weights, &derivs, i, k);
            paths += n;
            let p = report.p_matrix.get(i, k);
            if (brute - p).abs() > EXACT_TOL * brute.abs().max(1.0)
                || (p - jac.get(k, i)).abs() > EXACT_TOL * p.abs().max(1.0)
            {
                return Ok(Some(format!(
                    "dims = {dims:?}\nx = {x:?}\nentry ({i}, {k}): enumerated {brute}, path matrix {p}, jacobian {}",
                    jac.get(k, i)
                )));
            }
        }
    }
    if report.num_paths != paths as f64 {
        return Ok(Some(format!(
            "dims = {dims:?}: enumerated {paths} paths, report counts {}",
            report.num_paths
        )));
    }
    Ok(None)
}

fn psd_case(rng: &mut SeededRng) -> Result<Option<String>> {
    let (loss, out) = random_loss(rng);
    let act = if rng.bernoulli(0.5) { Activation::Relu } else { smooth_activation(rng) };
    let (net, specs) = random_net(rng, act, out)?;
    let x = vector(rng, net.input_dim(), 2.0);
    let m = pulled_back_metric(&net, &loss, &x)?;
    let min = psd_min_eig(&m.zeta)?;
    let theta = net.predict_one(&x)?;
    let h_min = psd_min_eig(&loss.hessian_psi(&theta)?)?;
    let tol = 1e-9 * m.zeta.max_abs().max(1.0);
    if min < -tol || h_min < -1e-12 {
        return Ok(Some(format!(
            "loss = {loss:?}\nspecs = {specs:?}\nx = {x:?}\nmin eigenvalue of pulled-back metric {min}, of output metric {h_min}"
        )));
    }
    Ok(None)
}

fn bound_chain_case(rng: &mut SeededRng) -> Result<Option<String>> {
    let (loss, out) = random_loss(rng);
    let act = if rng.bernoulli(0.5) { Activation::Relu } else { Activation::Tanh };
    let (net, specs) = random_net(rng, act, out)?;
    let xs: Vec<Vec<f64>> = (0..4).map(|_| vector(rng, net.input_dim(), 3.0)).collect();
    match verify_bound_chain(&net, &loss, &xs) {
        Ok(_) => Ok(None),
        Err(e) => Ok(Some(format!("loss = {loss:?}\nspecs = {specs:?}\n{e}"))),
    }
}

fn rescaling_case(rng: &mut SeededRng) -> Result<Option<String>> {
    let (loss, out) = random_loss(rng);
    let input = dim(rng, 1, 3);
    let hidden: Vec<usize> = (0..dim(rng, 2, 4)).map(|_| dim(rng, 2, 5)).collect();
    let mut specs = Vec::new();
    let mut prev = input;
    for &h in &hidden {
        specs.push(LayerSpec::dense(prev, h, Activation::Relu));
        prev = h;
    }
    specs.push(LayerSpec::dense(prev, out, Activation::Identity));
    let net = Network::init(specs.clone(), rng.next_u64(), InitScheme::He)?;
    let l = rng.below(hidden.len() - 1);
    let beta = 10f64.powf(rng.uniform_range(-2.0, 2.0));
    let xs: Vec<Vec<f64>> = (0..3).map(|_| vector(rng, input, 2.0)).collect();
    let r = rescaling_invariance_check(&net, l, beta, &loss, &xs)?;
    if r.passed {
        Ok(None)
    } else {
        Ok(Some(format!("loss = {loss:?}\nspecs = {specs:?}\nreport = {r:?}")))
    }
}

fn conjugacy_case(rng: &mut SeededRng) -> Result<Option<String>> {
    let (loss, n) = random_loss(rng);
    let y = interior_target(rng, &loss, n);
    let err = loss.conjugacy_check(&y)?;
    if err > 1e-9 {
        return Ok(Some(format!("loss = {loss:?}\ny = {y:?}\n|mean(grad_phi(y)) - y| = {err}")));
    }
    Ok(None)
}

fn loss_gradient_case(rng: &mut SeededRng) -> Result<Option<String>> {
    let (loss, out) = random_loss(rng);
    let z = vector(rng, out, 3.0);
    let y = interior_target(rng, &loss, out);
    let g = loss.grad_z(&z, &y)?;
    for k in 0..out {
        let (mut zp, mut zm) = (z.clone(), z.clone());
        zp[k] += FD_STEP;
        zm[k] -= FD_STEP;
        let fd = (loss.value(&zp, &y)? - loss.value(&zm, &y)?) / (2.0 * FD_STEP);
        if rel_err(fd, g[k]) > FD_TOL {
            return Ok(Some(format!(
                "loss = {loss:?}\nz = {z:?}\ny = {y:?}\nd loss / d z[{k}]: analytic {} vs finite difference {fd}",
                g[k]
            )));
        }
    }

    // Parameter gradients through the network.
    let act = smooth_activation(rng);
    let (net, specs) = random_net(rng, act, out)?;
    let x = vector(rng, net.input_dim(), 2.0);
    let (zn, tape) = net.forward(&x, Mode::Eval)?;
    let grads = net.backward_one(&tape, &loss.grad_z(&zn, &y)?)?;
    let nlin = net.linears().len();
    for _ in 0..4 {
        let p = rng.below(nlin);
        let shape = net.linears()[p].weight.shape();
        let (r, c) = (rng.below(shape.0), rng.below(shape.1));
        let bump = |delta: f64| -> Result<f64> {
            let mut moved = net.clone();
            let mut lins = moved.linears_mut();
            let w = &mut lins[p].weight;
            w.set(r, c, w.get(r, c) + delta);
            loss.value(&moved.predict_one(&x)?, &y)
        };
        let fd = (bump(FD_STEP)? - bump(-FD_STEP)?) / (2.0 * FD_STEP);
        let analytic = grads.params[p].weight.get(r, c);
        if rel_err(fd, analytic) > FD_TOL {
            return Ok(Some(format!(
                "loss = {loss:?}\nspecs = {specs:?}\nx = {x:?}\ny = {y:?}\nparameter {p} entry ({r}, {c}): backward {analytic} vs finite difference {fd}"
            )));
        }
    }
    Ok(None)
}

fn hessian_case(rng: &mut SeededRng) -> Result<Option<String>> {
    let (loss, n) = random_loss(rng);
    let theta = vector(rng, n, 3.0);
    let h = loss.hessian_psi(&theta)?;
    for j in 0..n {
        let (mut tp, mut tm) = (theta.clone(), theta.clone());
        tp[j] += FD_STEP;
        tm[j] -= FD_STEP;
        let (mp, mm) = (loss.mean(&tp), loss.mean(&tm));
        for i in 0..n {
            let fd = (mp[i] - mm[i]) / (2.0 * FD_STEP);
            if (fd - h.get(i, j)).abs() > FD_TOL || (h.get(i, j) - h.get(j, i)).abs() > EXACT_TOL {
                return Ok(Some(format!(
                    "loss = {loss:?}\ntheta = {theta:?}\nentry ({i}, {j}): hessian {} vs finite difference of the mean map {fd}",
                    h.get(i, j)
                )));
            }
        }
    }
    Ok(None)
}
