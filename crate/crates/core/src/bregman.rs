//! Bregman-divergence losses and the output-layer metric they induce.
//!
//! Squared loss lives entirely on the mean side (`Φ(x) = ½⟨x,x⟩`). The two
//! probabilistic losses take network outputs as natural parameters (logits)
//! and evaluate the dual divergence `ψ(z) − ⟨z, y⟩ + Φ(y)`, where `ψ` is the
//! cumulant (log-partition) function and `Φ` its convex conjugate. With that
//! choice `∂²ψ` at the network output is exactly the Fisher information of
//! the output distribution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Tolerance for simplex membership of probabilistic targets.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Interior margin required by [`BregmanLoss::conjugacy_check`].
pub const INTERIOR_EPS: f64 = 1e-6;

/// The loss family as named in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "squared")]
    Squared,
    #[serde(rename = "softmax_ce")]
    SoftmaxCe,
    #[serde(rename = "bernoulli")]
    Bernoulli,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(LossKind::Squared),
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            "bernoulli" => Ok(LossKind::Bernoulli),
            other => Err(Error::invalid(format!(
                "unknown loss `{other}` (expected squared | softmax_ce | bernoulli)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Squared => "squared",
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::Bernoulli => "bernoulli",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BregmanLoss {
    Squared,
    SoftmaxCrossEntropy { num_classes: usize },
    /// Independent Bernoulli outputs, one logit per coordinate.
    BernoulliLogistic,
}

impl BregmanLoss {
    /// Resolves a config-level kind against the network output dimension.
    pub fn from_kind(kind: LossKind, output_dim: usize) -> Self {
        match kind {
            LossKind::Squared => BregmanLoss::Squared,
            LossKind::SoftmaxCe => BregmanLoss::SoftmaxCrossEntropy {
                num_classes: output_dim,
            },
            LossKind::Bernoulli => BregmanLoss::BernoulliLogistic,
        }
    }

    pub fn kind(&self) -> LossKind {
        match self {
            BregmanLoss::Squared => LossKind::Squared,
            BregmanLoss::SoftmaxCrossEntropy { .. } => LossKind::SoftmaxCe,
            BregmanLoss::BernoulliLogistic => LossKind::Bernoulli,
        }
    }

    /// Output dimension the loss insists on, if any.
    pub fn required_dim(&self) -> Option<usize> {
        match *self {
            BregmanLoss::SoftmaxCrossEntropy { num_classes } => Some(num_classes),
            _ => None,
        }
    }

    fn check_dims(&self, z: &[f64], y: &[f64]) -> Result<()> {
        if z.len() != y.len() {
            return Err(Error::DimensionMismatch {
                op: "loss",
                left: (z.len(), 1),
                right: (y.len(), 1),
            });
        }
        self.check_output_dim(z.len())
    }

    fn check_output_dim(&self, n: usize) -> Result<()> {
        if let BregmanLoss::SoftmaxCrossEntropy { num_classes } = *self {
            if n != num_classes {
                return Err(Error::DimensionMismatch {
                    op: "softmax_ce",
                    left: (n, 1),
                    right: (num_classes, 1),
                });
            }
        }
        if n == 0 {
            return Err(Error::invalid("empty loss argument"));
        }
        Ok(())
    }

    fn check_target(&self, y: &[f64]) -> Result<()> {
        match self {
            BregmanLoss::Squared => Ok(()),
            BregmanLoss::SoftmaxCrossEntropy { .. } => {
                let sum: f64 = y.iter().sum();
                if y.iter().any(|&p| p < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::invalid(format!(
                        "softmax_ce target is not on the simplex (sum {sum})"
                    )));
                }
                Ok(())
            }
            BregmanLoss::BernoulliLogistic => {
                if y.iter().any(|&p| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&p)) {
                    return Err(Error::invalid("bernoulli target outside [0, 1]"));
                }
                Ok(())
            }
        }
    }

    /// Cumulant function `ψ(θ)`.
    pub fn psi(&self, theta: &[f64]) -> f64 {
        match self {
            BregmanLoss::Squared => 0.5 * theta.iter().map(|t| t * t).sum::<f64>(),
            BregmanLoss::SoftmaxCrossEntropy { .. } => log_sum_exp(theta),
            BregmanLoss::BernoulliLogistic => theta.iter().map(|&t| softplus(t)).sum(),
        }
    }

    /// Mean parameters `∇ψ(θ)`.
    pub fn mean(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            BregmanLoss::Squared => theta.to_vec(),
            BregmanLoss::SoftmaxCrossEntropy { .. } => softmax(theta),
            BregmanLoss::BernoulliLogistic => theta.iter().map(|&t| sigmoid(t)).collect(),
        }
    }

    /// Conjugate `Φ(μ)` on the mean side (negative entropy for the probabilistic losses).
    pub fn phi(&self, mu: &[f64]) -> f64 {
        match self {
            BregmanLoss::Squared => 0.5 * mu.iter().map(|t| t * t).sum::<f64>(),
            BregmanLoss::SoftmaxCrossEntropy { .. } => mu.iter().map(|&p| xlogx(p)).sum(),
            BregmanLoss::BernoulliLogistic => mu.iter().map(|&p| xlogx(p) + xlogx(1.0 - p)).sum(),
        }
    }

    /// `∇Φ(μ)`; only defined in the interior for the probabilistic losses.
    pub fn grad_phi(&self, mu: &[f64]) -> Vec<f64> {
        match self {
            BregmanLoss::Squared => mu.to_vec(),
            BregmanLoss::SoftmaxCrossEntropy { .. } => mu.iter().map(|p| p.ln() + 1.0).collect(),
            BregmanLoss::BernoulliLogistic => mu.iter().map(|p| (p / (1.0 - p)).ln()).collect(),
        }
    }

    /// Loss value; always `≥ 0`.
    pub fn value(&self, z: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dims(z, y)?;
        self.check_target(y)?;
        Ok(self.value_unchecked(z, y))
    }

    pub(crate) fn value_unchecked(&self, z: &[f64], y: &[f64]) -> f64 {
        let v = match self {
            BregmanLoss::Squared => {
                0.5 * z.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            _ => {
                let inner: f64 = z.iter().zip(y).map(|(a, b)| a * b).sum();
                self.psi(z) - inner + self.phi(y)
            }
        };
        v.max(0.0)
    }

    /// Gradient of the loss with respect to the network output `z`.
    pub fn grad_z(&self, z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, y)?;
        self.check_target(y)?;
        Ok(self.grad_unchecked(z, y))
    }

    pub(crate) fn grad_unchecked(&self, z: &[f64], y: &[f64]) -> Vec<f64> {
        self.mean(z).iter().zip(y).map(|(m, t)| m - t).collect()
    }

    /// Output-layer metric `∂²ψ(θ)`.
    pub fn hessian_psi(&self, theta: &[f64]) -> Result<Matrix> {
        self.check_output_dim(theta.len())?;
        let n = theta.len();
        let h = match self {
            BregmanLoss::Squared => Matrix::identity(n),
            BregmanLoss::SoftmaxCrossEntropy { .. } => {
                let p = softmax(theta);
                let mut h = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let d = if i == j { p[i] } else { 0.0 };
                        h.set(i, j, d - p[i] * p[j]);
                    }
                }
                h
            }
            BregmanLoss::BernoulliLogistic => {
                let d: Vec<f64> = theta
                    .iter()
                    .map(|&t| {
                        let p = sigmoid(t);
                        p * (1.0 - p)
                    })
                    .collect();
                Matrix::from_diag(&d)
            }
        };
        Ok(if fault::hessian_sign_flip() { h.scaled(-1.0) } else { h })
    }

    /// `‖∇Ψ(∇Φ(y)) − y‖∞` for interior `y`; zero up to rounding when the two
    /// gradient maps are inverse to each other.
    pub fn conjugacy_check(&self, y: &[f64]) -> Result<f64> {
        self.check_output_dim(y.len())?;
        match self {
            BregmanLoss::Squared => {}
            BregmanLoss::SoftmaxCrossEntropy { .. } => {
                self.check_target(y)?;
                require_interior(y)?;
            }
            BregmanLoss::BernoulliLogistic => require_interior(y)?,
        }
        let back = self.mean(&self.grad_phi(y));
        Ok(back
            .iter()
            .zip(y)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

/// Deliberate defects for checking that the verification suite notices them.
#[doc(hidden)]
pub mod fault {
    use std::sync::atomic::{AtomicBool, Ordering};

    static HESSIAN_SIGN_FLIP: AtomicBool = AtomicBool::new(false);

    pub fn set_hessian_sign_flip(on: bool) {
        HESSIAN_SIGN_FLIP.store(on, Ordering::SeqCst);
    }

    pub fn hessian_sign_flip() -> bool {
        HESSIAN_SIGN_FLIP.load(Ordering::Relaxed)
    }
}

fn require_interior(y: &[f64]) -> Result<()> {
    if y
        .iter()
        .any(|&p| p <= INTERIOR_EPS || p >= 1.0 - INTERIOR_EPS)
    {
        return Err(Error::invalid(
            "conjugacy check needs targets strictly inside the simplex",
        ));
    }
    Ok(())
}

fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SM2: BregmanLoss = BregmanLoss::SoftmaxCrossEntropy { num_classes: 2 };
    const SM3: BregmanLoss = BregmanLoss::SoftmaxCrossEntropy { num_classes: 3 };

    #[test]
    fn squared_values() {
        let l = BregmanLoss::Squared;
        assert_eq!(l.value(&[1.5], &[1.5]).unwrap(), 0.0);
        assert_eq!(l.value(&[3.0], &[1.0]).unwrap(), 2.0);
        assert_eq!(l.grad_z(&[3.0], &[1.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn softmax_values() {
        let v = SM2.value(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(SM2.grad_z(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn hessians() {
        assert_eq!(
            BregmanLoss::Squared.hessian_psi(&[1.0, -2.0, 3.0]).unwrap(),
            Matrix::identity(3)
        );
        let h = BregmanLoss::BernoulliLogistic.hessian_psi(&[0.0]).unwrap();
        assert_eq!(h.data(), &[0.25]);
        let h = SM3.hessian_psi(&[1.0, 0.0, -1.0]).unwrap();
        for r in 0..3 {
            assert!(h.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn target_validation() {
        assert!(SM2.value(&[0.0, 0.0], &[0.7, 0.7]).is_err());
        assert!(SM2.value(&[0.0], &[1.0]).is_err());
        assert!(BregmanLoss::Squared.value(&[0.0, 1.0], &[1.0]).is_err());
        assert!(BregmanLoss::BernoulliLogistic
            .value(&[0.0], &[1.5])
            .is_err());
    }

    #[test]
    fn conjugacy() {
        assert_eq!(
            BregmanLoss::Squared.conjugacy_check(&[0.3, -2.0]).unwrap(),
            0.0
        );
        assert!(BregmanLoss::BernoulliLogistic.conjugacy_check(&[0.7]).unwrap() < 1e-10);
        assert!(SM3.conjugacy_check(&[0.2, 0.3, 0.5]).unwrap() < 1e-10);
        assert!(SM2.conjugacy_check(&[1.0, 0.0]).is_err());
        assert!(BregmanLoss::BernoulliLogistic.conjugacy_check(&[0.0]).is_err());
    }

    #[test]
    fn kind_strings_round_trip() {
        for s in ["squared", "softmax_ce", "bernoulli"] {
            assert_eq!(s.parse::<LossKind>().unwrap().to_string(), s);
            let json = format!("\"{s}\"");
            let k: LossKind = serde_json::from_str(&json).unwrap();
            assert_eq!(serde_json::to_string(&k).unwrap(), json);
        }
        assert!("kl".parse::<LossKind>().is_err());
    }

    #[test]
    fn stable_helpers() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
