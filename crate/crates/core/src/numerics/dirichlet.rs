//! Dirichlet sampling and a Monte-Carlo estimate of Dirichlet entropy.
//!
//! The Monte-Carlo entropy exists to cross-check the closed-form expression
//! used by the evidential losses, so it deliberately shares nothing with that
//! code path beyond `lgamma` itself.

use super::rng::RngStream;
use super::special::lgamma;
use super::NumericsError;

fn check_alpha(context: &'static str, alpha: &[f64]) -> Result<(), NumericsError> {
    if alpha.len() < 2 {
        return Err(NumericsError::TooFew {
            context,
            minimum: 2,
            got: alpha.len(),
        });
    }
    for &a in alpha {
        if !a.is_finite() {
            return Err(NumericsError::NonFinite { context });
        }
        if a <= 0.0 {
            return Err(NumericsError::Domain {
                function: context,
                value: a,
                requirement: "alpha > 0",
            });
        }
    }
    Ok(())
}

/// One Gamma(shape, 1) draw, Marsaglia-Tsang squeeze method.
pub fn sample_gamma(shape: f64, rng: &mut RngStream) -> Result<f64, NumericsError> {
    if !shape.is_finite() || shape <= 0.0 {
        return Err(NumericsError::Domain {
            function: "sample_gamma",
            value: shape,
            requirement: "shape > 0",
        });
    }
    if shape < 1.0 {
        // Boost: Gamma(a) = Gamma(a+1) * U^(1/a)
        let g = sample_gamma(shape + 1.0, rng)?;
        let u = rng.open_unit();
        return Ok(g * u.powf(1.0 / shape));
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.next_normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v3 = v * v * v;
        let u = rng.open_unit();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return Ok(d * v3);
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v3 + v3.ln()) {
            return Ok(d * v3);
        }
    }
}

/// One draw from Dirichlet(alpha) via normalized gamma variates.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut RngStream) -> Result<Vec<f64>, NumericsError> {
    check_alpha("sample_dirichlet", alpha)?;
    let mut draws = Vec::with_capacity(alpha.len());
    let mut total = 0.0;
    for &a in alpha {
        let g = sample_gamma(a, rng)?;
        total += g;
        draws.push(g);
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(NumericsError::NonFinite {
            context: "sample_dirichlet",
        });
    }
    for g in &mut draws {
        *g /= total;
    }
    Ok(draws)
}

/// Log density of Dirichlet(alpha) at a simplex point.
pub fn dirichlet_ln_pdf(alpha: &[f64], mu: &[f64]) -> Result<f64, NumericsError> {
    check_alpha("dirichlet_ln_pdf", alpha)?;
    if mu.len() != alpha.len() {
        return Err(NumericsError::TooFew {
            context: "dirichlet_ln_pdf",
            minimum: alpha.len(),
            got: mu.len(),
        });
    }
    let total: f64 = alpha.iter().sum();
    let mut ln_pdf = lgamma(total)?;
    for (&a, &m) in alpha.iter().zip(mu) {
        ln_pdf -= lgamma(a)?;
        if a != 1.0 {
            // Clamp keeps boundary samples finite; the exponent is exact
            // whenever the component is representable.
            ln_pdf += (a - 1.0) * m.max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(ln_pdf)
}

/// Monte-Carlo estimate of the differential entropy of Dirichlet(alpha).
///
/// Returns (estimate, standard_error) over `n` independent draws of
/// -ln p(mu). Used only as a reference for the closed form.
pub fn mc_dirichlet_entropy(
    alpha: &[f64],
    n: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64), NumericsError> {
    check_alpha("mc_dirichlet_entropy", alpha)?;
    if n < 2 {
        return Err(NumericsError::TooFew {
            context: "mc_dirichlet_entropy",
            minimum: 2,
            got: n,
        });
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let mu = sample_dirichlet(alpha, rng)?;
        let s = -dirichlet_ln_pdf(alpha, &mu)?;
        sum += s;
        sum_sq += s * s;
    }
    let mean = sum / n as f64;
    let var = ((sum_sq - sum * sum / n as f64) / (n as f64 - 1.0)).max(0.0);
    Ok((mean, (var / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_moments() {
        let mut rng = RngStream::from_seed(21);
        for &shape in &[0.5, 1.0, 2.5, 9.0] {
            let n = 60_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| sample_gamma(shape, &mut rng).unwrap())
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var =
                draws.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n as f64 - 1.0);
            // Gamma(a,1): mean a, variance a.
            assert!((mean - shape).abs() < 0.05 * shape.max(1.0), "shape {shape}");
            assert!((var - shape).abs() < 0.12 * shape.max(1.0), "shape {shape}");
        }
    }

    #[test]
    fn dirichlet_draws_live_on_simplex() {
        let mut rng = RngStream::from_seed(22);
        let alpha = [0.4, 1.0, 3.0, 7.5];
        for _ in 0..500 {
            let mu = sample_dirichlet(&alpha, &mut rng).unwrap();
            assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(mu.iter().all(|&m| (0.0..=1.0).contains(&m)));
        }
    }

    #[test]
    fn dirichlet_mean_matches_alpha_ratio() {
        let mut rng = RngStream::from_seed(23);
        let alpha = [2.0, 5.0, 3.0];
        let total: f64 = alpha.iter().sum();
        let n = 40_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let mu = sample_dirichlet(&alpha, &mut rng).unwrap();
            for (a, m) in acc.iter_mut().zip(&mu) {
                *a += m;
            }
        }
        for (k, a) in acc.iter().enumerate() {
            assert!((a / n as f64 - alpha[k] / total).abs() < 0.01, "k = {k}");
        }
    }

    #[test]
    fn uniform_dirichlet_entropy_is_ln_volume() {
        // Dirichlet(1,1) is uniform on the 1-simplex: pdf = 1, entropy 0.
        // Dirichlet(1,1,1): pdf = 2, entropy -ln 2.
        let mut rng = RngStream::from_seed(24);
        let (h2, se2) = mc_dirichlet_entropy(&[1.0, 1.0], 20_000, &mut rng).unwrap();
        assert!(h2.abs() < 1e-9 + 3.0 * se2, "h2 {h2} se {se2}");
        let (h3, se3) = mc_dirichlet_entropy(&[1.0, 1.0, 1.0], 20_000, &mut rng).unwrap();
        assert!((h3 + std::f64::consts::LN_2).abs() < 1e-9 + 3.0 * se3);
        // For alpha = 1 the integrand is constant, so the spread collapses.
        assert!(se2 < 1e-12);
    }

    #[test]
    fn ln_pdf_uniform_case() {
        // Dirichlet(1,1,1) density is Gamma(3) = 2 everywhere.
        let v = dirichlet_ln_pdf(&[1.0, 1.0, 1.0], &[0.2, 0.5, 0.3]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_alpha() {
        let mut rng = RngStream::from_seed(1);
        assert!(sample_dirichlet(&[1.0], &mut rng).is_err());
        assert!(sample_dirichlet(&[1.0, 0.0], &mut rng).is_err());
        assert!(sample_dirichlet(&[1.0, -2.0], &mut rng).is_err());
        assert!(sample_dirichlet(&[1.0, f64::NAN], &mut rng).is_err());
        assert!(mc_dirichlet_entropy(&[2.0, 2.0], 1, &mut rng).is_err());
    }
}
