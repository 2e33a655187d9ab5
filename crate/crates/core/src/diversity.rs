//! RBF repulsion over member factor vectors.
//!
//! Members that collapse onto each other waste capacity, so training adds a
//! kernel-similarity penalty between the rank factors of every member pair.
//! The penalty enters through the gradients only: each member's factor
//! gradient gets lambda times the gradient of its summed kernel similarity,
//! so the minimizing step pushes members apart. Shared weights and biases
//! are never touched.
//!
//! The term for member i over one factor family is
//!
//!   term_i = sum_j d/dv_i k(v_i, v_j),   k(a, b) = exp(-|a - b|^2 / h)
//!
//! optionally divided by sum_j k(v_i, v_j) (the self kernel contributes 1,
//! so the denominator never vanishes). Vectors are one layer's factors with
//! all rank columns concatenated, one vector per member.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{EnsembleNet, GradientSet};

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("bandwidth must be positive and finite, got {got}")]
    BadBandwidth { got: f64 },
    #[error("diversity weight must be finite and >= 0, got {got}")]
    BadWeight { got: f64 },
    #[error("need at least {minimum} vectors, got {got}")]
    TooFew { minimum: usize, got: usize },
    #[error("vector {index} has length {got}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("member index {got} out of range for {members} members")]
    MemberIndex { got: usize, members: usize },
    #[error("gradient container does not match the network: {detail}")]
    Misaligned { detail: String },
}

/// Kernel bandwidth: a fixed value, or the median heuristic recomputed from
/// the current factor vectors each time. Serializes as a bare number or the
/// string "median".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Median,
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Fixed(h) => s.serialize_f64(*h),
            Bandwidth::Median => s.serialize_str("median"),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Bandwidth;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a positive number or \"median\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<Bandwidth, E> {
                Ok(Bandwidth::Fixed(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<Bandwidth, E> {
                Ok(Bandwidth::Fixed(v as f64))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<Bandwidth, E> {
                Ok(Bandwidth::Fixed(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Bandwidth, E> {
                if v == "median" {
                    Ok(Bandwidth::Median)
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// How per-pair kernel gradients are folded into one term per member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide by the summed kernel mass, self included.
    SvgdNormalized,
    /// Raw sum; pairwise contributions are antisymmetric, so these terms
    /// cancel across members.
    PlainSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiversityConfig {
    pub weight: f64,
    pub bandwidth: Bandwidth,
    pub normalization: Normalization,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            weight: 0.1,
            bandwidth: Bandwidth::Median,
            normalization: Normalization::SvgdNormalized,
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<(), DiversityError> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(DiversityError::BadWeight { got: self.weight });
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(DiversityError::BadBandwidth { got: h });
            }
        }
        Ok(())
    }
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// exp(-|a-b|^2 / h), in (0, 1].
pub fn rbf_kernel(a: &[f64], b: &[f64], h: f64) -> Result<f64, DiversityError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(DiversityError::BadBandwidth { got: h });
    }
    if a.len() != b.len() {
        return Err(DiversityError::LengthMismatch {
            index: 1,
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok((-sq_distance(a, b) / h).exp())
}

/// Median of pairwise squared distances divided by ln(M+1), floored at 1e-8
/// so coincident members cannot zero the bandwidth.
pub fn median_bandwidth(vectors: &[Vec<f64>]) -> Result<f64, DiversityError> {
    if vectors.len() < 2 {
        return Err(DiversityError::TooFew {
            minimum: 2,
            got: vectors.len(),
        });
    }
    check_lengths(vectors)?;
    let mut dists = Vec::with_capacity(vectors.len() * (vectors.len() - 1) / 2);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            dists.push(sq_distance(&vectors[i], &vectors[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    let h = median / ((vectors.len() + 1) as f64).ln();
    Ok(h.max(1e-8))
}

fn check_lengths(vectors: &[Vec<f64>]) -> Result<(), DiversityError> {
    let expected = vectors[0].len();
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != expected {
            return Err(DiversityError::LengthMismatch {
                index,
                expected,
                got: v.len(),
            });
        }
    }
    Ok(())
}

fn resolve_bandwidth(
    vectors: &[Vec<f64>],
    bandwidth: Bandwidth,
) -> Result<f64, DiversityError> {
    match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h.is_finite() && h > 0.0) {
                return Err(DiversityError::BadBandwidth { got: h });
            }
            Ok(h)
        }
        Bandwidth::Median => median_bandwidth(vectors),
    }
}

/// Repulsion term for member `i` given every member's flattened factor
/// vector for one layer and family. Already scaled by `cfg.weight`.
pub fn repulsive_term(
    i: usize,
    vectors: &[Vec<f64>],
    cfg: &DiversityConfig,
) -> Result<Vec<f64>, DiversityError> {
    if i >= vectors.len() {
        return Err(DiversityError::MemberIndex {
            got: i,
            members: vectors.len(),
        });
    }
    Ok(repulsive_terms(vectors, cfg)?.swap_remove(i))
}

/// Repulsion terms for every member at once.
pub fn repulsive_terms(
    vectors: &[Vec<f64>],
    cfg: &DiversityConfig,
) -> Result<Vec<Vec<f64>>, DiversityError> {
    cfg.validate()?;
    if vectors.len() < 2 {
        return Err(DiversityError::TooFew {
            minimum: 2,
            got: vectors.len(),
        });
    }
    check_lengths(vectors)?;
    let dim = vectors[0].len();
    let h = resolve_bandwidth(vectors, cfg.bandwidth)?;
    let mut terms = vec![vec![0.0; dim]; vectors.len()];
    for (i, vi) in vectors.iter().enumerate() {
        let mut kernel_mass = 0.0;
        let term = &mut terms[i];
        for vj in vectors {
            let k = (-sq_distance(vi, vj) / h).exp();
            kernel_mass += k;
            let scale = -2.0 / h * k;
            for (t, (a, b)) in term.iter_mut().zip(vi.iter().zip(vj)) {
                *t += scale * (a - b);
            }
        }
        let norm = match cfg.normalization {
            Normalization::SvgdNormalized => cfg.weight / kernel_mass,
            Normalization::PlainSum => cfg.weight,
        };
        for t in term.iter_mut() {
            *t *= norm;
        }
    }
    Ok(terms)
}

/// Adds the repulsion terms to the factor gradients in `grads`, layer by
/// layer and family by family. The loss gradient plus this term is what the
/// descent step follows, so similarity is minimized alongside the loss.
/// No-op when the weight is zero. Shared and bias gradients pass through.
pub fn apply_regularizer(
    grads: &mut GradientSet,
    net: &EnsembleNet,
    cfg: &DiversityConfig,
) -> Result<(), DiversityError> {
    cfg.validate()?;
    if grads.members.len() != net.n_members() {
        return Err(DiversityError::Misaligned {
            detail: format!(
                "{} member gradients for {} members",
                grads.members.len(),
                net.n_members()
            ),
        });
    }
    if cfg.weight == 0.0 || net.n_members() < 2 {
        return Ok(());
    }
    for layer in 0..net.n_layers() {
        for input_side in [true, false] {
            let vectors = net.factor_vectors(layer, input_side);
            let terms = repulsive_terms(&vectors, cfg)?;
            for (member, term) in grads.members.iter_mut().zip(terms) {
                let target = member
                    .layers
                    .get_mut(layer)
                    .ok_or_else(|| DiversityError::Misaligned {
                        detail: format!("gradient missing layer {layer}"),
                    })?;
                let family = if input_side {
                    &mut target.r
                } else {
                    &mut target.s
                };
                let have: usize = family.iter().map(|a| a.numel()).sum();
                if have != term.len() {
                    return Err(DiversityError::Misaligned {
                        detail: format!(
                            "layer {layer} factor gradient holds {have} values, term has {}",
                            term.len()
                        ),
                    });
                }
                let mut offset = 0;
                for rank_grad in family.iter_mut() {
                    let n = rank_grad.numel();
                    for (g, t) in rank_grad.data_mut().iter_mut().zip(&term[offset..offset + n])
                    {
                        *g += t;
                    }
                    offset += n;
                }
            }
        }
    }
    Ok(())
}
