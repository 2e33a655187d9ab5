//! Scalar special functions and seeded sampling.
//!
//! Everything downstream (evidential losses, Monte-Carlo checks, Dirichlet
//! sampling) reduces to `lgamma`/`digamma` plus a reproducible RNG, so both
//! live here with no dependencies on the rest of the crate.

mod dirichlet;
mod rng;
mod special;

pub use dirichlet::{dirichlet_ln_pdf, mc_dirichlet_entropy, sample_dirichlet, sample_gamma};
pub use rng::RngStream;
pub use special::{digamma, lgamma, trigamma};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("argument {value} outside domain of {function} (requires {requirement})")]
    Domain {
        function: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("{context}: value is not finite")]
    NonFinite { context: &'static str },
    #[error("{context}: need at least {minimum}, got {got}")]
    TooFew {
        context: &'static str,
        minimum: usize,
        got: usize,
    },
}

/// Acceptance band for special-function comparisons: a value passes against a
/// reference when `|a - b| <= abs_tol + rel_tol * |b|`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpecialFnTolerance {
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for SpecialFnTolerance {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-8,
        }
    }
}

impl SpecialFnTolerance {
    pub fn new(abs_tol: f64, rel_tol: f64) -> Result<Self, NumericsError> {
        if !(abs_tol > 0.0 && abs_tol.is_finite()) {
            return Err(NumericsError::Domain {
                function: "SpecialFnTolerance::new",
                value: abs_tol,
                requirement: "abs_tol > 0",
            });
        }
        if !(rel_tol > 0.0 && rel_tol.is_finite()) {
            return Err(NumericsError::Domain {
                function: "SpecialFnTolerance::new",
                value: rel_tol,
                requirement: "rel_tol > 0",
            });
        }
        Ok(Self { abs_tol, rel_tol })
    }

    pub fn accepts(&self, value: f64, reference: f64) -> bool {
        (value - reference).abs() <= self.abs_tol + self.rel_tol * reference.abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_default_band() {
        let tol = SpecialFnTolerance::default();
        assert!(tol.accepts(1.0, 1.0 + 9e-9));
        assert!(!tol.accepts(1.0, 1.0 + 2e-8));
        assert!(tol.accepts(0.0, 5e-11));
    }

    #[test]
    fn tolerance_rejects_bad_bounds() {
        assert!(SpecialFnTolerance::new(0.0, 1e-8).is_err());
        assert!(SpecialFnTolerance::new(1e-10, -1.0).is_err());
        assert!(SpecialFnTolerance::new(f64::NAN, 1e-8).is_err());
    }
}
