//! Batched forward pass, reverse-mode gradients and input Jacobians.
//!
//! Activations are stored as `batch × width` matrices, so a single sample is
//! just a batch of one.

use crate::error::{Error, Result};
use crate::linalg::{gemm, product, Matrix, Trans};
use crate::rng::SeededRng;

use super::{Activation, LayerParams, LayerSpec, Linear, Network};

/// Train mode samples dropout masks from the given stream; eval mode applies none.
pub enum Mode<'a> {
    Train(&'a mut SeededRng),
    Eval,
}

#[derive(Clone, Debug)]
struct LinearTape {
    input: Matrix,
    pre: Matrix,
    deriv: Matrix,
}

#[derive(Clone, Debug)]
enum LayerTape {
    Dense(LinearTape),
    GenSkip {
        branch: Vec<LinearTape>,
        nu: f64,
    },
    GenDropout {
        gate: LinearTape,
        /// Per-entry keep scale (`0` or `1/(1-p)`); `None` when no mask was applied.
        mask: Option<Matrix>,
        out: LinearTape,
    },
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    train: bool,
    input: Matrix,
    layers: Vec<LayerTape>,
    output: Matrix,
    param_shapes: Vec<(usize, usize)>,
}

impl ForwardTape {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// `ν` used by each skip layer during the recorded pass.
    pub fn skip_strengths(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerTape::GenSkip { nu, .. } => Some(*nu),
                _ => None,
            })
            .collect()
    }

    /// Dropout masks in layer order (`None` for eval or `p = 0`).
    pub fn dropout_masks(&self) -> Vec<Option<&Matrix>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerTape::GenDropout { mask, .. } => Some(mask.as_ref()),
                _ => None,
            })
            .collect()
    }

    /// Pre-activation matrices of every affine map, in canonical parameter order
    /// (learned projections excluded).
    pub fn pre_activations(&self) -> Vec<&Matrix> {
        self.linear_tapes().map(|t| &t.pre).collect()
    }

    fn linear_tapes(&self) -> impl Iterator<Item = &LinearTape> {
        self.layers.iter().flat_map(|l| -> Vec<&LinearTape> {
            match l {
                LayerTape::Dense(t) => vec![t],
                LayerTape::GenSkip { branch, .. } => branch.iter().collect(),
                LayerTape::GenDropout { gate, out, .. } => vec![gate, out],
            }
        })
    }

    /// Activation-derivative vectors `c'` of every affine map for sample `row`,
    /// in the canonical parameter order (learned projections excluded).
    pub fn activation_derivatives(&self, row: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerTape::Dense(t) => out.push(t.deriv.row(row).to_vec()),
                LayerTape::GenSkip { branch, .. } => {
                    out.extend(branch.iter().map(|t| t.deriv.row(row).to_vec()))
                }
                LayerTape::GenDropout { gate, mask, out: o } => {
                    let mut g = gate.deriv.row(row).to_vec();
                    if let Some(m) = mask {
                        g.iter_mut().zip(m.row(row)).for_each(|(d, s)| *d *= s);
                    }
                    out.push(g);
                    out.push(o.deriv.row(row).to_vec());
                }
            }
        }
        out
    }

    /// Recomputes the output from the recorded input, masks and `ν` values.
    pub fn replay(&self, net: &Network) -> Result<Matrix> {
        self.check_matches(net)?;
        let masks: Vec<Option<Matrix>> = self
            .dropout_masks()
            .into_iter()
            .map(|m| m.cloned())
            .collect();
        let nus = self.skip_strengths();
        let (out, _) = net.run_forward(
            &self.input,
            MaskSource::Replay(&masks),
            Some(&nus),
            false,
        )?;
        Ok(out)
    }

    fn check_matches(&self, net: &Network) -> Result<()> {
        let shapes: Vec<_> = net.linears().iter().map(|l| l.weight.shape()).collect();
        if shapes != self.param_shapes || self.layers.len() != net.layers.len() {
            return Err(Error::InvalidNetwork(
                "tape was recorded on a network with a different structure".into(),
            ));
        }
        Ok(())
    }
}

/// Gradient of one affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

/// Weight gradients aligned with [`Network::linears`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<LinearGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            params: net
                .linears()
                .iter()
                .map(|l| LinearGrad {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: l.bias.as_ref().map(|b| vec![0.0; b.len()]),
                })
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.params.iter().all(|g| {
            g.weight.data().iter().all(|&v| v == 0.0)
                && g.bias.as_ref().is_none_or(|b| b.iter().all(|&v| v == 0.0))
        })
    }

    pub fn check_shapes(&self, net: &Network) -> Result<()> {
        let linears = net.linears();
        if linears.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                op: "gradients",
                left: (self.params.len(), 0),
                right: (linears.len(), 0),
            });
        }
        for (g, l) in self.params.iter().zip(&linears) {
            if g.weight.shape() != l.weight.shape()
                || g.bias.as_ref().map(Vec::len) != l.bias.as_ref().map(Vec::len)
            {
                return Err(Error::DimensionMismatch {
                    op: "gradients",
                    left: g.weight.shape(),
                    right: l.weight.shape(),
                });
            }
        }
        Ok(())
    }
}

enum MaskSource<'a, 'r> {
    Sample(&'r mut SeededRng),
    Replay(&'a [Option<Matrix>]),
    None,
}

fn affine(x: &Matrix, lin: &Linear) -> Matrix {
    let mut pre = Matrix::zeros(x.rows(), lin.weight.rows());
    if let Some(b) = &lin.bias {
        for r in 0..pre.rows() {
            pre.row_mut(r).copy_from_slice(b);
        }
    }
    gemm(1.0, x, Trans::No, &lin.weight, Trans::Yes, 1.0, &mut pre).expect("checked shapes");
    pre
}

fn activate(pre: &Matrix, act: Activation) -> Result<(Matrix, Matrix)> {
    if !pre.is_finite() {
        return Err(Error::NonFinite("forward pre-activation"));
    }
    let (r, c) = pre.shape();
    let mut out = Vec::with_capacity(r * c);
    let mut deriv = Vec::with_capacity(r * c);
    for &u in pre.data() {
        out.push(act.apply(u));
        deriv.push(act.derivative(u));
    }
    Ok((Matrix::new(r, c, out)?, Matrix::new(r, c, deriv)?))
}

fn hadamard_in_place(a: &mut Matrix, b: &Matrix) {
    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in s.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    s
}

/// Backward through one affine map + activation. Returns the pre-activation
/// delta, the parameter gradient and (if requested) the input gradient.
fn linear_backward(
    lin: &Linear,
    tape: &LinearTape,
    d_act: Matrix,
    want_weights: bool,
    need_dx: bool,
) -> (Matrix, Option<LinearGrad>, Option<Matrix>) {
    let mut delta = d_act;
    hadamard_in_place(&mut delta, &tape.deriv);
    let grad = want_weights.then(|| LinearGrad {
        weight: product(&delta, Trans::Yes, &tape.input, Trans::No).expect("shapes"),
        bias: lin.bias.as_ref().map(|_| column_sums(&delta)),
    });
    let dx = need_dx.then(|| product(&delta, Trans::No, &lin.weight, Trans::No).expect("shapes"));
    (delta, grad, dx)
}

impl Network {
    fn run_forward(
        &self,
        x: &Matrix,
        mut masks: MaskSource<'_, '_>,
        nus: Option<&[f64]>,
        record: bool,
    ) -> Result<(Matrix, Vec<LayerTape>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                op: "forward",
                left: x.shape(),
                right: (x.rows(), self.input_dim()),
            });
        }
        let mut tapes = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut cur = x.clone();
        let mut skip_idx = 0;
        let mut drop_idx = 0;

        for (spec, layer) in self.specs.iter().zip(&self.layers) {
            let act = spec.activation();
            match layer {
                LayerParams::Dense(lin) => {
                    let pre = affine(&cur, lin);
                    let (out, deriv) = activate(&pre, act)?;
                    if record {
                        tapes.push(LayerTape::Dense(LinearTape {
                            input: cur,
                            pre,
                            deriv,
                        }));
                    }
                    cur = out;
                }
                LayerParams::GenSkip { branch, skip, nu } => {
                    let nu = nus.map_or(*nu, |v| v[skip_idx]);
                    skip_idx += 1;
                    let x_in = cur;
                    let mut branch_tapes = Vec::with_capacity(branch.len());
                    let mut h = x_in.clone();
                    let last = branch.len() - 1;
                    for (j, lin) in branch.iter().enumerate() {
                        let mut pre = affine(&h, lin);
                        if j == last {
                            match skip {
                                Some(ws) => {
                                    gemm(nu, &x_in, Trans::No, &ws.weight, Trans::Yes, 1.0, &mut pre)?
                                }
                                None => pre
                                    .data_mut()
                                    .iter_mut()
                                    .zip(x_in.data())
                                    .for_each(|(p, xi)| *p += nu * xi),
                            }
                        }
                        let (out, deriv) = activate(&pre, act)?;
                        if record {
                            branch_tapes.push(LinearTape {
                                input: h,
                                pre,
                                deriv,
                            });
                        }
                        h = out;
                    }
                    if record {
                        tapes.push(LayerTape::GenSkip {
                            branch: branch_tapes,
                            nu,
                        });
                    }
                    cur = h;
                }
                LayerParams::GenDropout { gate, out } => {
                    let drop_prob = match spec {
                        LayerSpec::GenDropout { drop_prob, .. } => *drop_prob,
                        _ => unreachable!("params follow specs"),
                    };
                    let pre_g = affine(&cur, gate);
                    let (mut g, deriv_g) = activate(&pre_g, act)?;
                    let mask = match &mut masks {
                        MaskSource::Sample(rng) if drop_prob > 0.0 => {
                            let keep = 1.0 / (1.0 - drop_prob);
                            let data = (0..g.rows() * g.cols())
                                .map(|_| if rng.uniform() < drop_prob { 0.0 } else { keep })
                                .collect();
                            Some(Matrix::new(g.rows(), g.cols(), data)?)
                        }
                        MaskSource::Replay(recorded) => recorded[drop_idx].clone(),
                        _ => None,
                    };
                    drop_idx += 1;
                    if let Some(m) = &mask {
                        hadamard_in_place(&mut g, m);
                    }
                    let pre_o = affine(&g, out);
                    let (y, deriv_o) = activate(&pre_o, act)?;
                    if record {
                        tapes.push(LayerTape::GenDropout {
                            gate: LinearTape {
                                input: cur,
                                pre: pre_g,
                                deriv: deriv_g,
                            },
                            mask,
                            out: LinearTape {
                                input: g,
                                pre: pre_o,
                                deriv: deriv_o,
                            },
                        });
                    }
                    cur = y;
                }
            }
        }
        Ok((cur, tapes))
    }

    /// Forward pass over a batch (`rows = samples`), recording a tape.
    pub fn forward_batch(&self, x: &Matrix, mode: Mode<'_>) -> Result<(Matrix, ForwardTape)> {
        let train = matches!(mode, Mode::Train(_));
        let source = match mode {
            Mode::Train(rng) => MaskSource::Sample(rng),
            Mode::Eval => MaskSource::None,
        };
        let (output, layers) = self.run_forward(x, source, None, true)?;
        let tape = ForwardTape {
            train,
            input: x.clone(),
            layers,
            output: output.clone(),
            param_shapes: self.linears().iter().map(|l| l.weight.shape()).collect(),
        };
        Ok((output, tape))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64], mode: Mode<'_>) -> Result<(Vec<f64>, ForwardTape)> {
        let (y, tape) = self.forward_batch(&Matrix::row_vector(x), mode)?;
        Ok((y.into_data(), tape))
    }

    /// Eval-mode outputs without keeping a tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run_forward(x, MaskSource::None, None, false)?.0)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(&Matrix::row_vector(x))?.into_data())
    }

    fn backprop(
        &self,
        tape: &ForwardTape,
        d_out: &Matrix,
        want_weights: bool,
    ) -> Result<(Option<Gradients>, Matrix)> {
        tape.check_matches(self)?;
        if d_out.shape() != tape.output.shape() {
            return Err(Error::DimensionMismatch {
                op: "backward",
                left: d_out.shape(),
                right: tape.output.shape(),
            });
        }
        let mut per_layer: Vec<Vec<LinearGrad>> = Vec::with_capacity(self.layers.len());
        let mut d = d_out.clone();

        for (layer, lt) in self.layers.iter().zip(&tape.layers).rev() {
            let mut grads = Vec::new();
            match (layer, lt) {
                (LayerParams::Dense(lin), LayerTape::Dense(t)) => {
                    let (_, g, dx) = linear_backward(lin, t, d, want_weights, true);
                    grads.extend(g);
                    d = dx.expect("requested");
                }
                (LayerParams::GenSkip { branch, skip, .. }, LayerTape::GenSkip { branch: bt, nu }) => {
                    let last = branch.len() - 1;
                    let (delta_out, g_out, dh) =
                        linear_backward(&branch[last], &bt[last], d, want_weights, true);
                    let mut dh = dh.expect("requested");
                    let mut branch_grads = vec![g_out];
                    for j in (0..last).rev() {
                        let (_, g, next) = linear_backward(&branch[j], &bt[j], dh, want_weights, true);
                        branch_grads.push(g);
                        dh = next.expect("requested");
                    }
                    branch_grads.reverse();
                    grads.extend(branch_grads.into_iter().flatten());

                    let x_in = &bt[0].input;
                    match skip {
                        Some(ws) => {
                            gemm(*nu, &delta_out, Trans::No, &ws.weight, Trans::No, 1.0, &mut dh)?;
                            if want_weights {
                                let mut gw = Matrix::zeros(ws.weight.rows(), ws.weight.cols());
                                gemm(*nu, &delta_out, Trans::Yes, x_in, Trans::No, 0.0, &mut gw)?;
                                grads.push(LinearGrad {
                                    weight: gw,
                                    bias: None,
                                });
                            }
                        }
                        None => dh
                            .data_mut()
                            .iter_mut()
                            .zip(delta_out.data())
                            .for_each(|(a, b)| *a += nu * b),
                    }
                    d = dh;
                }
                (LayerParams::GenDropout { gate, out }, LayerTape::GenDropout { gate: gt, mask, out: ot }) => {
                    let (_, g_out, dg) = linear_backward(out, ot, d, want_weights, true);
                    let mut dg = dg.expect("requested");
                    if let Some(m) = mask {
                        hadamard_in_place(&mut dg, m);
                    }
                    let (_, g_gate, dx) = linear_backward(gate, gt, dg, want_weights, true);
                    grads.extend(g_gate);
                    grads.extend(g_out);
                    d = dx.expect("requested");
                }
                _ => {
                    return Err(Error::InvalidNetwork(
                        "tape layer kinds do not match the network".into(),
                    ))
                }
            }
            per_layer.push(grads);
        }
        per_layer.reverse();
        let grads = want_weights.then(|| Gradients {
            params: per_layer.into_iter().flatten().collect(),
        });
        Ok((grads, d))
    }

    /// Gradients of a scalar loss with respect to every weight and bias, given
    /// `∂L/∂output` for each sample in the tape (summed over the batch).
    pub fn backward(&self, tape: &ForwardTape, loss_grad: &Matrix) -> Result<Gradients> {
        Ok(self.backprop(tape, loss_grad, true)?.0.expect("requested"))
    }

    /// Single-sample convenience over [`Network::backward`].
    pub fn backward_one(&self, tape: &ForwardTape, loss_grad: &[f64]) -> Result<Gradients> {
        self.backward(tape, &Matrix::row_vector(loss_grad))
    }

    /// Gradient with respect to the inputs of the recorded batch.
    pub fn backward_input(&self, tape: &ForwardTape, loss_grad: &Matrix) -> Result<Matrix> {
        Ok(self.backprop(tape, loss_grad, false)?.1)
    }

    /// Exact `dim(F) × dim(X)` Jacobian `∂f^κ/∂x^i` in eval mode.
    ///
    /// One reverse sweep per output coordinate, run as a single batch in
    /// which row `κ` carries the seed `e_κ`.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Matrix> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                op: "input_jacobian",
                left: (1, x.len()),
                right: (1, self.input_dim()),
            });
        }
        let m = self.output_dim();
        let mut xs = Matrix::zeros(m, x.len());
        for r in 0..m {
            xs.row_mut(r).copy_from_slice(x);
        }
        let (_, tape) = self.forward_batch(&xs, Mode::Eval)?;
        self.backward_input(&tape, &Matrix::identity(m))
    }
}
