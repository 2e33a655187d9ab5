//! Dirichlet evidential outputs and their losses.
//!
//! A member head emits logits z; the link alpha = softplus(z) + 1 turns them
//! into Dirichlet concentrations, always strictly above 1, so every opinion
//! carries nonzero evidence for every class. Training maximizes the expected
//! log-likelihood under the Dirichlet (a digamma expression) while a KL term
//! against the uniform Dirichlet shrinks the evidence the label does not
//! support: the true-class concentration is forced to 1 inside that KL so
//! correct evidence goes unpunished.

mod diff;

pub use diff::{
    alpha_from_logits_t, dirichlet_entropy_t, elbo_terms_t, expected_nll_t, kl_to_uniform_t,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{digamma, lgamma};

#[derive(Debug, Error)]
pub enum EvidentialError {
    #[error("invalid concentration vector: {detail}")]
    InvalidAlpha { detail: String },
    #[error("malformed one-hot label: {detail}")]
    MalformedOneHot { detail: String },
    #[error("class index {got} out of range for {classes} classes")]
    ClassIndex { got: usize, classes: usize },
    #[error("{context}: produced a non-finite value")]
    NonFinite { context: &'static str },
}

/// A Dirichlet over the class simplex, alpha_k > 0, at least two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletOpinion {
    alpha: Vec<f64>,
}

/// One-hot encoding of `class` among `n` classes.
pub fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

fn validate_one_hot(y: &[f64], n: usize) -> Result<usize, EvidentialError> {
    if y.len() != n {
        return Err(EvidentialError::MalformedOneHot {
            detail: format!("length {} does not match {} classes", y.len(), n),
        });
    }
    let mut hot = None;
    for (k, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.replace(k).is_some() {
                return Err(EvidentialError::MalformedOneHot {
                    detail: "more than one entry set".into(),
                });
            }
        } else if v != 0.0 {
            return Err(EvidentialError::MalformedOneHot {
                detail: format!("entry {k} is {v}, expected 0 or 1"),
            });
        }
    }
    hot.ok_or_else(|| EvidentialError::MalformedOneHot {
        detail: "no entry set".into(),
    })
}

/// Per-part evidential loss; `total = nll + kl_weight * kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidentialLossParts {
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

impl DirichletOpinion {
    pub fn new(alpha: Vec<f64>) -> Result<Self, EvidentialError> {
        if alpha.len() < 2 {
            return Err(EvidentialError::InvalidAlpha {
                detail: format!("need at least 2 classes, got {}", alpha.len()),
            });
        }
        for (k, &a) in alpha.iter().enumerate() {
            if !(a.is_finite() && a > 0.0) {
                return Err(EvidentialError::InvalidAlpha {
                    detail: format!("alpha[{k}] = {a}"),
                });
            }
        }
        Ok(Self { alpha })
    }

    /// softplus(z) + 1 applied to raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self, EvidentialError> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(EvidentialError::NonFinite {
                context: "from_logits",
            });
        }
        let alpha = logits
            .iter()
            .map(|&z| z.max(0.0) + (-z.abs()).exp().ln_1p() + 1.0)
            .collect();
        Self::new(alpha)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn n_classes(&self) -> usize {
        self.alpha.len()
    }

    /// Total concentration alpha_0.
    pub fn strength(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Mean of the Dirichlet: alpha / alpha_0.
    pub fn predictive_mean(&self) -> Vec<f64> {
        let s = self.strength();
        self.alpha.iter().map(|&a| a / s).collect()
    }

    fn check_class(&self, class: usize) -> Result<(), EvidentialError> {
        if class >= self.alpha.len() {
            return Err(EvidentialError::ClassIndex {
                got: class,
                classes: self.alpha.len(),
            });
        }
        Ok(())
    }

    /// Expected negative log-likelihood of the true class under the
    /// Dirichlet: psi(alpha_0) - psi(alpha_c).
    pub fn expected_nll(&self, class: usize) -> Result<f64, EvidentialError> {
        self.check_class(class)?;
        let a0 = self.strength();
        let v = digamma(a0).expect("alpha_0 > 0") - digamma(self.alpha[class]).expect("alpha > 0");
        Ok(v)
    }

    /// KL from the label-adjusted Dirichlet to the uniform Dirichlet. The
    /// adjusted concentrations are alpha-tilde = y + (1 - y) * alpha: the
    /// true class is pinned to 1 so only spurious evidence is penalized.
    pub fn kl_to_uniform(&self, y: &[f64]) -> Result<f64, EvidentialError> {
        let class = validate_one_hot(y, self.alpha.len())?;
        self.kl_to_uniform_class(class)
    }

    pub fn kl_to_uniform_class(&self, class: usize) -> Result<f64, EvidentialError> {
        self.check_class(class)?;
        let n = self.alpha.len();
        let tilde: Vec<f64> = self
            .alpha
            .iter()
            .enumerate()
            .map(|(k, &a)| if k == class { 1.0 } else { a })
            .collect();
        let t0: f64 = tilde.iter().sum();
        let lg = |x: f64| lgamma(x).expect("positive");
        let dg = |x: f64| digamma(x).expect("positive");
        let mut kl = lg(t0) - lg(n as f64);
        for &t in &tilde {
            kl -= lg(t);
            kl += (t - 1.0) * (dg(t) - dg(t0));
        }
        if !kl.is_finite() {
            return Err(EvidentialError::NonFinite {
                context: "kl_to_uniform",
            });
        }
        Ok(kl)
    }

    /// Differential entropy of the Dirichlet, closed form:
    /// ln B(alpha) + (alpha_0 - N) psi(alpha_0) - sum (alpha_k - 1) psi(alpha_k).
    pub fn entropy(&self) -> f64 {
        let n = self.alpha.len() as f64;
        let a0 = self.strength();
        let lg = |x: f64| lgamma(x).expect("positive");
        let dg = |x: f64| digamma(x).expect("positive");
        let ln_b: f64 = self.alpha.iter().map(|&a| lg(a)).sum::<f64>() - lg(a0);
        let mut h = ln_b + (a0 - n) * dg(a0);
        for &a in &self.alpha {
            h -= (a - 1.0) * dg(a);
        }
        h
    }

    /// Evidence loss parts for a one-hot label.
    pub fn elbo_loss(
        &self,
        y: &[f64],
        kl_weight: f64,
    ) -> Result<EvidentialLossParts, EvidentialError> {
        if !(kl_weight.is_finite() && kl_weight >= 0.0) {
            return Err(EvidentialError::InvalidAlpha {
                detail: format!("kl_weight must be finite and >= 0, got {kl_weight}"),
            });
        }
        let class = validate_one_hot(y, self.alpha.len())?;
        let nll = self.expected_nll(class)?;
        let kl = self.kl_to_uniform_class(class)?;
        Ok(EvidentialLossParts {
            nll,
            kl,
            total: nll + kl_weight * kl,
        })
    }
}
