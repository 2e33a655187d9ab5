//! Reference implementations used only by tests.
//!
//! These deliberately take different routes than the library: the Stirling
//! series here has nothing in common with the Lanczos core, and the digamma
//! reference differentiates the Stirling series numerically instead of using
//! its own expansion. Agreement between the two paths is the evidence.

#![allow(dead_code)]

use edens_core::numerics::RngStream;
use edens_core::SubjectiveOpinion;

const LN_2PI_HALF: f64 = 0.918_938_533_204_672_74;

// B_2k / ((2k)(2k-1)) for k = 1..8, the Stirling tail coefficients.
const STIRLING: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    7.0 / 1092.0,
    -3617.0 / 122_400.0,
];

/// Stirling-series log-gamma with recurrence lift to y >= 30, where the
/// 8-term tail is accurate to roughly 1e-24 relative.
pub fn lgamma_oracle(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "oracle domain is x > 0");
    let mut shift = 0.0;
    let mut y = x;
    while y < 30.0 {
        shift -= y.ln();
        y += 1.0;
    }
    let mut tail = 0.0;
    let mut power = y;
    for c in STIRLING {
        tail += c / power;
        power *= y * y;
    }
    shift + (y - 0.5) * y.ln() - y + LN_2PI_HALF + tail
}

/// Digamma reference: recurrence lift, then a five-point central-difference
/// stencil applied to the Stirling log-gamma at y >= 30. Truncation and
/// rounding both sit far below 1e-10 there.
pub fn digamma_oracle(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "oracle domain is x > 0");
    let mut shift = 0.0;
    let mut y = x;
    while y < 30.0 {
        shift -= 1.0 / y;
        y += 1.0;
    }
    let h = 0.05;
    let stencil = -lgamma_oracle(y + 2.0 * h) + 8.0 * lgamma_oracle(y + h)
        - 8.0 * lgamma_oracle(y - h)
        + lgamma_oracle(y - 2.0 * h);
    shift + stencil / (12.0 * h)
}

/// Monte-Carlo mean of `f(mu)` over Dirichlet(alpha) draws, with standard
/// error. Shares only the gamma sampler with the library.
pub fn mc_dirichlet_mean(
    alpha: &[f64],
    n: usize,
    rng: &mut RngStream,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let mu = edens_core::numerics::sample_dirichlet(alpha, rng).expect("valid alpha");
        let v = f(&mu);
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let var = ((sum_sq - sum * sum / n as f64) / (n as f64 - 1.0)).max(0.0);
    (mean, (var / n as f64).sqrt())
}

/// Frame size for the mass-function reference below.
pub const DSC_FRAME: usize = 3;
const FULL_SET: usize = (1 << DSC_FRAME) - 1;

/// Basic mass assignment over subsets of a 3-element frame, indexed by
/// bitmask. Singletons carry belief, the full frame carries uncertainty.
pub fn to_masses(op: &SubjectiveOpinion) -> [f64; 1 << DSC_FRAME] {
    let mut m = [0.0; 1 << DSC_FRAME];
    for (k, &b) in op.belief().iter().enumerate() {
        m[1 << k] = b;
    }
    m[FULL_SET] = op.uncertainty();
    m
}

/// Dempster's rule by exhaustive subset intersection; knows nothing about
/// the library's closed-form combination.
pub fn oracle_combine(
    a: &[f64; 1 << DSC_FRAME],
    b: &[f64; 1 << DSC_FRAME],
) -> Option<[f64; 1 << DSC_FRAME]> {
    let mut out = [0.0; 1 << DSC_FRAME];
    let mut conflict = 0.0;
    for (sa, &ma) in a.iter().enumerate() {
        if ma == 0.0 {
            continue;
        }
        for (sb, &mb) in b.iter().enumerate() {
            if mb == 0.0 {
                continue;
            }
            let meet = sa & sb;
            if meet == 0 {
                conflict += ma * mb;
            } else {
                out[meet] += ma * mb;
            }
        }
    }
    if conflict >= 1.0 - 1e-12 {
        return None;
    }
    let scale = 1.0 / (1.0 - conflict);
    out.iter_mut().for_each(|x| *x *= scale);
    Some(out)
}

pub fn masses_to_opinion(m: &[f64; 1 << DSC_FRAME]) -> SubjectiveOpinion {
    // Opinions only ever populate singletons and the frame; anything else
    // appearing would be an oracle bookkeeping bug.
    for (set, &mass) in m.iter().enumerate() {
        let is_singleton = set.count_ones() == 1;
        assert!(
            mass == 0.0 || is_singleton || set == FULL_SET,
            "mass {mass} on subset {set:#05b}"
        );
    }
    let belief: Vec<f64> = (0..DSC_FRAME).map(|k| m[1 << k]).collect();
    SubjectiveOpinion::new(belief, m[FULL_SET]).unwrap()
}

pub fn random_opinion(rng: &mut RngStream) -> SubjectiveOpinion {
    let raw: Vec<f64> = (0..DSC_FRAME).map(|_| rng.uniform(0.0, 1.0)).collect();
    let u = rng.uniform(0.02, 1.0);
    let total: f64 = raw.iter().sum();
    let belief = raw.iter().map(|&x| x / total * (1.0 - u)).collect();
    SubjectiveOpinion::new(belief, u).unwrap()
}
