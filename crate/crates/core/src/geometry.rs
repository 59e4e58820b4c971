//! Pulled-back metric `ζ(x) = Jᵀ·∂²ψ·J`, path products and the
//! trace / spectral-product upper bounds on `σ_max(ζ)`.
//!
//! Bounds are products over layers and overflow quickly for deep networks, so
//! every bound is also carried as a natural log; chain comparisons fall back to
//! the log form whenever a direct value is not finite.

use serde::Serialize;

use crate::bregman::BregmanLoss;
use crate::error::{Error, Result};
use crate::linalg::{gemm, largest_singular_value_sq, product, psd_min_eig, sym_eig, Matrix, Trans};
use crate::network::{LayerParams, Mode, Network, ParamGroup};

/// Relative slack allowed by the bound-chain and invariance checks.
pub const CHAIN_REL_TOL: f64 = 1e-9;

/// Largest input dimension for which `psd_min_eig(ζ)` is computed in reports.
pub const PSD_CHECK_MAX_DIM: usize = 64;

#[derive(Clone, Debug, Serialize)]
pub struct PulledBackMetric {
    pub output: Vec<f64>,
    pub zeta: Matrix,
    pub sigma_max: f64,
    pub sigma_psi: f64,
    /// Largest singular value of every weight matrix, canonical order.
    pub layer_sigmas: Vec<f64>,
    /// Data-independent spectral factor; `∏ σ_l²` for plain dense stacks.
    pub sigma_product: f64,
    pub trace_bound: f64,
    pub spectral_bound: f64,
    /// Product of squared layer widths.
    pub c: f64,
    pub ln_trace_bound: f64,
    pub ln_spectral_bound: f64,
}

/// Per-block factors of the bounds. A dense layer is one block; a skip or
/// dropout layer is one block covering its whole sub-network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlockFactors {
    pub sigma_sq: f64,
    pub trace: f64,
    pub c: f64,
}

/// Network-level (data-independent) bound ingredients.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralSummary {
    pub layer_sigmas: Vec<f64>,
    pub blocks: Vec<BlockFactors>,
    pub sigma_product: f64,
    pub trace_product: f64,
    pub c: f64,
    pub ln_sigma_product: f64,
    pub ln_trace_product: f64,
    pub ln_c: f64,
}

fn ln_prod(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut p = 1.0;
    let mut l = 0.0;
    for v in values {
        p *= v;
        l += v.ln();
    }
    (p, l)
}

/// Bound factors of every block plus their products.
pub fn spectral_summary(net: &Network) -> SpectralSummary {
    let mut layer_sigmas = Vec::new();
    let mut blocks = Vec::new();
    // A dropout block contributes its two factors separately, so that the
    // product matches the equivalent pair of dense layers bit for bit.
    let mut sigma_factors = Vec::new();
    for layer in net.layers() {
        match layer {
            LayerParams::Dense(lin) => {
                let s2 = largest_singular_value_sq(&lin.weight);
                layer_sigmas.push(s2.sqrt());
                let d = lin.weight.rows() as f64;
                sigma_factors.push(s2);
                blocks.push(BlockFactors {
                    sigma_sq: s2,
                    trace: lin.weight.frobenius_sq() * d,
                    c: d * d,
                });
            }
            LayerParams::GenSkip { branch, skip, nu } => {
                let mut sig = 1.0;
                let mut frob = 1.0;
                let mut dims = 1.0;
                for lin in branch {
                    let s = largest_singular_value_sq(&lin.weight).sqrt();
                    layer_sigmas.push(s);
                    sig *= s;
                    frob *= lin.weight.frobenius_norm();
                    dims *= lin.weight.rows() as f64;
                }
                let out_dim = branch.last().expect("non-empty branch").weight.rows() as f64;
                let (skip_sigma, skip_frob) = match skip {
                    Some(ws) => {
                        let s = largest_singular_value_sq(&ws.weight).sqrt();
                        layer_sigmas.push(s);
                        (s, ws.weight.frobenius_norm())
                    }
                    None => (1.0, out_dim.sqrt()),
                };
                let s = sig + nu * skip_sigma;
                let f = frob + nu * skip_frob;
                sigma_factors.push(s * s);
                blocks.push(BlockFactors {
                    sigma_sq: s * s,
                    trace: f * f * dims,
                    c: dims * dims,
                });
            }
            LayerParams::GenDropout { gate, out } => {
                let sg = largest_singular_value_sq(&gate.weight);
                let so = largest_singular_value_sq(&out.weight);
                layer_sigmas.push(sg.sqrt());
                layer_sigmas.push(so.sqrt());
                let w = gate.weight.rows() as f64;
                let d = out.weight.rows() as f64;
                sigma_factors.extend([sg, so]);
                blocks.push(BlockFactors {
                    sigma_sq: sg * so,
                    trace: gate.weight.frobenius_sq() * w * out.weight.frobenius_sq() * d,
                    c: w * w * d * d,
                });
            }
        }
    }
    let (sigma_product, ln_sigma_product) = ln_prod(sigma_factors.into_iter());
    let (trace_product, ln_trace_product) = ln_prod(blocks.iter().map(|b| b.trace));
    let (c, ln_c) = ln_prod(blocks.iter().map(|b| b.c));
    SpectralSummary {
        layer_sigmas,
        blocks,
        sigma_product,
        trace_product,
        c,
        ln_sigma_product,
        ln_trace_product,
        ln_c,
    }
}

/// `∏ σ²` over the weight matrices of one parameter group.
pub fn group_sigma_product(net: &Network, group: ParamGroup) -> f64 {
    net.linears()
        .iter()
        .filter(|l| l.group == group)
        .map(|l| largest_singular_value_sq(&l.weight))
        .product()
}

fn check_loss_dim(net: &Network, loss: &BregmanLoss) -> Result<()> {
    if let Some(k) = loss.required_dim() {
        if k != net.output_dim() {
            return Err(Error::DimensionMismatch {
                op: "loss/network output",
                left: (1, net.output_dim()),
                right: (1, k),
            });
        }
    }
    Ok(())
}

/// Largest eigenvalue of `JᵀHJ`, computed on the smaller side.
fn metric_sigma_max(j: &Matrix, h: &Matrix) -> Result<f64> {
    let (m, n) = j.shape();
    if n <= m {
        let hj = product(h, Trans::No, j, Trans::No)?;
        let z = product(j, Trans::Yes, &hj, Trans::No)?.symmetrized()?;
        return Ok(sym_eig(&z)?.max());
    }
    // Nonzero spectrum of JᵀHJ equals that of H^½ J Jᵀ H^½.
    let eh = sym_eig(h)?;
    let mut root = eh.vectors.clone();
    root.scale_columns(&eh.values.iter().map(|v| v.max(0.0).sqrt()).collect::<Vec<_>>());
    let h_half = product(&root, Trans::No, &eh.vectors, Trans::Yes)?;
    let a = product(&h_half, Trans::No, j, Trans::No)?;
    let small = product(&a, Trans::No, &a, Trans::Yes)?.symmetrized()?;
    Ok(sym_eig(&small)?.max().max(0.0))
}

/// `σ_max(ζ(x))` without materializing `ζ`.
pub fn sigma_max_at(net: &Network, loss: &BregmanLoss, x: &[f64]) -> Result<f64> {
    check_loss_dim(net, loss)?;
    let theta = net.predict_one(x)?;
    let h = loss.hessian_psi(&theta)?;
    let j = net.input_jacobian(x)?;
    metric_sigma_max(&j, &h)
}

pub fn pulled_back_metric(net: &Network, loss: &BregmanLoss, x: &[f64]) -> Result<PulledBackMetric> {
    let summary = spectral_summary(net);
    pulled_back_metric_with(net, loss, x, &summary)
}

fn pulled_back_metric_with(
    net: &Network,
    loss: &BregmanLoss,
    x: &[f64],
    summary: &SpectralSummary,
) -> Result<PulledBackMetric> {
    check_loss_dim(net, loss)?;
    let output = net.predict_one(x)?;
    let h = loss.hessian_psi(&output)?;
    let j = net.input_jacobian(x)?;
    let hj = product(&h, Trans::No, &j, Trans::No)?;
    let zeta = product(&j, Trans::Yes, &hj, Trans::No)?.symmetrized()?;
    let sigma_max = if j.cols() <= j.rows() {
        sym_eig(&zeta)?.max()
    } else {
        metric_sigma_max(&j, &h)?
    };
    let sigma_psi = sym_eig(&h)?.max();
    let dim_f = net.output_dim() as f64;
    let trace_bound = dim_f * sigma_psi * summary.trace_product;
    let spectral_bound = dim_f * summary.c * sigma_psi * summary.sigma_product;
    let ln_base = dim_f.ln() + sigma_psi.ln();
    Ok(PulledBackMetric {
        output,
        zeta,
        sigma_max,
        sigma_psi,
        layer_sigmas: summary.layer_sigmas.clone(),
        sigma_product: summary.sigma_product,
        trace_bound,
        spectral_bound,
        c: summary.c,
        ln_trace_bound: ln_base + summary.ln_trace_product,
        ln_spectral_bound: ln_base + summary.ln_c + summary.ln_sigma_product,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PathProductReport {
    /// `dim_in × dim_out`; entry `(i, κ)` sums `π_p·L_p` over paths from input `i` to output `κ`.
    pub p_matrix: Matrix,
    /// Structural input-to-output paths, zero weights included (a float: it overflows integers quickly).
    pub num_paths: f64,
    pub max_abs_path_product: f64,
}

/// Path-product matrix as the masked left-to-right product `W₁ᵀD₁W₂ᵀD₂⋯`,
/// with skip branches contributing `ν·W_sᵀ`. Eval mode.
pub fn path_product_matrix(net: &Network, x: &[f64]) -> Result<PathProductReport> {
    let (_, tape) = net.forward(x, Mode::Eval)?;
    let derivs = tape.activation_derivatives(0);
    let mut derivs = derivs.iter();
    let n_in = net.input_dim();

    let mut p = Matrix::identity(n_in);
    let mut counts = vec![1.0_f64; n_in];
    let mut best = vec![1.0_f64; n_in];

    // One affine map: P ← P·Wᵀ·D, plus the counting and max-product recursions.
    fn step(p: &Matrix, w: &Matrix, counts: &[f64], best: &[f64]) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
        let np = product(p, Trans::No, w, Trans::Yes)?;
        let total: f64 = counts.iter().sum();
        let nc = vec![total; w.rows()];
        let nb = (0..w.rows())
            .map(|j| {
                w.row(j)
                    .iter()
                    .zip(best)
                    .map(|(wji, b)| wji.abs() * b)
                    .fold(0.0, f64::max)
            })
            .collect();
        Ok((np, nc, nb))
    }
    fn mask(p: &mut Matrix, best: &mut [f64], d: &[f64]) {
        p.scale_columns(d);
        best.iter_mut().zip(d).for_each(|(b, dj)| *b *= dj.abs());
    }

    for layer in net.layers() {
        match layer {
            LayerParams::Dense(lin) => {
                let (np, nc, mut nb) = step(&p, &lin.weight, &counts, &best)?;
                p = np;
                mask(&mut p, &mut nb, derivs.next().expect("one per map"));
                counts = nc;
                best = nb;
            }
            LayerParams::GenSkip { branch, skip, nu } => {
                let (mut q, mut qc, mut qb) = (p.clone(), counts.clone(), best.clone());
                let last = branch.len() - 1;
                let mut out_deriv = None;
                for (j, lin) in branch.iter().enumerate() {
                    let (nq, nc, mut nb) = step(&q, &lin.weight, &qc, &qb)?;
                    q = nq;
                    let d = derivs.next().expect("one per map");
                    if j < last {
                        mask(&mut q, &mut nb, d);
                    } else {
                        out_deriv = Some(d);
                    }
                    qc = nc;
                    qb = nb;
                }
                match skip {
                    Some(ws) => {
                        gemm(*nu, &p, Trans::No, &ws.weight, Trans::Yes, 1.0, &mut q)?;
                        let (_, sc, sb) = step(&p, &ws.weight, &counts, &best)?;
                        qc.iter_mut().zip(sc).for_each(|(a, b)| *a += b);
                        qb.iter_mut().zip(sb).for_each(|(a, b)| *a = a.max(nu * b));
                    }
                    None => {
                        q.data_mut()
                            .iter_mut()
                            .zip(p.data())
                            .for_each(|(a, b)| *a += nu * b);
                        qc.iter_mut().zip(&counts).for_each(|(a, b)| *a += b);
                        qb.iter_mut().zip(&best).for_each(|(a, b)| *a = a.max(nu * b));
                    }
                }
                mask(&mut q, &mut qb, out_deriv.expect("branch has an output map"));
                p = q;
                counts = qc;
                best = qb;
            }
            LayerParams::GenDropout { gate, out } => {
                for lin in [gate, out] {
                    let (np, nc, mut nb) = step(&p, &lin.weight, &counts, &best)?;
                    p = np;
                    mask(&mut p, &mut nb, derivs.next().expect("one per map"));
                    counts = nc;
                    best = nb;
                }
            }
        }
    }
    Ok(PathProductReport {
        p_matrix: p,
        num_paths: counts.iter().sum(),
        max_abs_path_product: best.iter().copied().fold(0.0, f64::max),
    })
}

/// `a ≤ b` up to [`CHAIN_REL_TOL`], in log form when either side overflowed.
fn chain_le(a: f64, b: f64, ln_a: f64, ln_b: f64) -> bool {
    if a.is_finite() && b.is_finite() {
        a <= b + CHAIN_REL_TOL * b.abs().max(a.abs())
    } else {
        ln_a <= ln_b + CHAIN_REL_TOL
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PointBounds {
    pub index: usize,
    pub sigma_max: f64,
    pub sigma_psi: f64,
    pub trace_bound: f64,
    pub spectral_bound: f64,
    pub ln_trace_bound: f64,
    pub ln_spectral_bound: f64,
    /// `trace_bound − sigma_max`.
    pub trace_margin: f64,
    /// `spectral_bound − trace_bound`.
    pub spectral_margin: f64,
    /// Smallest eigenvalue of `ζ`; only for small input dimensions.
    pub psd_min_eig: Option<f64>,
    pub violation: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundChainReport {
    pub points: Vec<PointBounds>,
    pub layer_sigmas: Vec<f64>,
    pub sigma_product: f64,
    pub ln_sigma_product: f64,
    pub c: f64,
    pub violations: usize,
}

pub const BOUNDS_COLUMNS: [&str; 11] = [
    "index",
    "sigma_max",
    "sigma_psi",
    "trace_bound",
    "spectral_bound",
    "ln_trace_bound",
    "ln_spectral_bound",
    "trace_margin",
    "spectral_margin",
    "psd_min_eig",
    "violation",
];

impl BoundChainReport {
    pub fn first_violation(&self) -> Option<&PointBounds> {
        self.points.iter().find(|p| p.violation.is_some())
    }

    /// One row per point; `violation` is 0 or 1 and `psd_min_eig` is empty
    /// when it was not computed.
    pub fn to_csv_string(&self) -> String {
        let f = |v: f64| format!("{v:?}");
        let mut out = BOUNDS_COLUMNS.join(",");
        out.push('\n');
        for p in &self.points {
            let row = [
                p.index.to_string(),
                f(p.sigma_max),
                f(p.sigma_psi),
                f(p.trace_bound),
                f(p.spectral_bound),
                f(p.ln_trace_bound),
                f(p.ln_spectral_bound),
                f(p.trace_margin),
                f(p.spectral_margin),
                p.psd_min_eig.map(f).unwrap_or_default(),
                u8::from(p.violation.is_some()).to_string(),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Evaluates the bound chain at every point, recording (not raising) violations.
pub fn analyze_bounds(net: &Network, loss: &BregmanLoss, xs: &[Vec<f64>]) -> Result<BoundChainReport> {
    let summary = spectral_summary(net);
    let mut points = Vec::with_capacity(xs.len());
    for (index, x) in xs.iter().enumerate() {
        let m = pulled_back_metric_with(net, loss, x, &summary)?;
        let psd = if m.zeta.rows() <= PSD_CHECK_MAX_DIM {
            Some(psd_min_eig(&m.zeta)?)
        } else {
            None
        };
        let ln_sigma = m.sigma_max.ln();
        let violation = if psd.is_some_and(|v| v < -1e-9) {
            Some(format!("zeta not PSD: min eigenvalue {}", psd.unwrap_or(0.0)))
        } else if !chain_le(m.sigma_max, m.trace_bound, ln_sigma, m.ln_trace_bound) {
            Some(format!(
                "sigma_max {} exceeds trace_bound {}",
                m.sigma_max, m.trace_bound
            ))
        } else if !chain_le(m.trace_bound, m.spectral_bound, m.ln_trace_bound, m.ln_spectral_bound) {
            Some(format!(
                "trace_bound {} exceeds spectral_bound {}",
                m.trace_bound, m.spectral_bound
            ))
        } else {
            None
        };
        points.push(PointBounds {
            index,
            sigma_max: m.sigma_max,
            sigma_psi: m.sigma_psi,
            trace_bound: m.trace_bound,
            spectral_bound: m.spectral_bound,
            ln_trace_bound: m.ln_trace_bound,
            ln_spectral_bound: m.ln_spectral_bound,
            trace_margin: m.trace_bound - m.sigma_max,
            spectral_margin: m.spectral_bound - m.trace_bound,
            psd_min_eig: psd,
            violation,
        });
    }
    let violations = points.iter().filter(|p| p.violation.is_some()).count();
    Ok(BoundChainReport {
        points,
        layer_sigmas: summary.layer_sigmas,
        sigma_product: summary.sigma_product,
        ln_sigma_product: summary.ln_sigma_product,
        c: summary.c,
        violations,
    })
}

/// Like [`analyze_bounds`] but fails on the first violation, naming the point.
pub fn verify_bound_chain(net: &Network, loss: &BregmanLoss, xs: &[Vec<f64>]) -> Result<BoundChainReport> {
    if xs.is_empty() {
        return Err(Error::invalid("verify_bound_chain needs at least one point"));
    }
    let report = analyze_bounds(net, loss, xs)?;
    if let Some(p) = report.first_violation() {
        let stage = match p.violation.as_deref() {
            Some(v) if v.starts_with("zeta") => "psd",
            Some(v) if v.starts_with("sigma_max") => "sigma_max<=trace_bound",
            _ => "trace_bound<=spectral_bound",
        };
        return Err(Error::BoundChain {
            index: p.index,
            stage,
            message: format!(
                "x = {:?}: {} (trace margin {}, spectral margin {})",
                xs[p.index],
                p.violation.as_deref().unwrap_or(""),
                p.trace_margin,
                p.spectral_margin
            ),
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct RescalingReport {
    pub layer: usize,
    pub beta: f64,
    pub points: usize,
    pub max_output_rel_diff: f64,
    pub max_p_rel_diff: f64,
    pub sigma_product_rel_diff: f64,
    pub spectral_bound_rel_diff: f64,
    pub passed: bool,
}

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn rel_max_diff(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1.0);
    a.max_abs_diff(b) / scale
}

/// Checks that `W_l ← βW_l, W_{l+1} ← W_{l+1}/β` leaves outputs, path products,
/// the spectral factor and the spectral bound unchanged.
pub fn rescaling_invariance_check(
    net: &Network,
    l: usize,
    beta: f64,
    loss: &BregmanLoss,
    xs: &[Vec<f64>],
) -> Result<RescalingReport> {
    let scaled = net.scale_layer_pair(l, beta)?;
    let (s0, s1) = (spectral_summary(net), spectral_summary(&scaled));
    let mut out_diff = 0.0_f64;
    let mut p_diff = 0.0_f64;
    let mut bound_diff = 0.0_f64;
    for x in xs {
        let y0 = Matrix::row_vector(&net.predict_one(x)?);
        let y1 = Matrix::row_vector(&scaled.predict_one(x)?);
        out_diff = out_diff.max(rel_max_diff(&y0, &y1));
        let p0 = path_product_matrix(net, x)?.p_matrix;
        let p1 = path_product_matrix(&scaled, x)?.p_matrix;
        p_diff = p_diff.max(rel_max_diff(&p0, &p1));
        let b0 = pulled_back_metric_with(net, loss, x, &s0)?;
        let b1 = pulled_back_metric_with(&scaled, loss, x, &s1)?;
        let d = if b0.spectral_bound.is_finite() && b1.spectral_bound.is_finite() {
            rel_diff(b0.spectral_bound, b1.spectral_bound)
        } else {
            (b0.ln_spectral_bound - b1.ln_spectral_bound).abs()
        };
        bound_diff = bound_diff.max(d);
    }
    let sp_diff = rel_diff(s0.sigma_product, s1.sigma_product);
    let passed = [out_diff, p_diff, sp_diff, bound_diff]
        .iter()
        .all(|&d| d <= CHAIN_REL_TOL);
    Ok(RescalingReport {
        layer: l,
        beta,
        points: xs.len(),
        max_output_rel_diff: out_diff,
        max_p_rel_diff: p_diff,
        sigma_product_rel_diff: sp_diff,
        spectral_bound_rel_diff: bound_diff,
        passed,
    })
}
