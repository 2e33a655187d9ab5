//! Monte-Carlo cross-checks of the closed-form Dirichlet quantities, plus
//! finite-difference checks of their tape versions.
//!
//! Each closed form is compared against a 50k-sample estimate built from
//! the gamma sampler alone, so an error in the digamma/lgamma identities
//! cannot hide: agreement is required within three standard errors.

mod common;

use common::mc_dirichlet_mean;
use edens_core::evidential::{
    alpha_from_logits_t, dirichlet_entropy_t, elbo_terms_t, one_hot, DirichletOpinion,
};
use edens_core::numerics::dirichlet_ln_pdf;
use edens_core::tensor::finite_diff_check;
use edens_core::{Array, Graph, RngStream};

const MC_DRAWS: usize = 50_000;

fn random_alpha(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(1.0, 10.0)).collect()
}

/// 3 SE plus a small absolute floor for the near-deterministic cases.
fn within(closed: f64, mc: f64, se: f64, what: &str, alpha: &[f64]) {
    let band = 3.0 * se + 1e-9;
    assert!(
        (closed - mc).abs() <= band,
        "{what}: closed {closed} vs mc {mc} (se {se}) for alpha {alpha:?}"
    );
}

#[test]
fn closed_forms_match_monte_carlo() {
    let mut rng = RngStream::from_seed(0x5EED_E71D);
    for &n in &[2usize, 3, 10] {
        for case in 0..10 {
            let alpha = random_alpha(n, &mut rng);
            let op = DirichletOpinion::new(alpha.clone()).unwrap();
            let class = case % n;

            // Differential entropy: E[-ln p(mu)] under Dir(alpha).
            let (mc_h, se_h) = mc_dirichlet_mean(&alpha, MC_DRAWS, &mut rng, |mu| {
                -dirichlet_ln_pdf(&alpha, mu).unwrap()
            });
            within(op.entropy(), mc_h, se_h, "entropy", &alpha);

            // Expected NLL of the true class: E[-ln mu_c].
            let (mc_nll, se_nll) =
                mc_dirichlet_mean(&alpha, MC_DRAWS, &mut rng, |mu| -mu[class].ln());
            within(op.expected_nll(class).unwrap(), mc_nll, se_nll, "nll", &alpha);

            // KL(tilde || uniform) = E_tilde[ln p_tilde(mu) - ln p_uniform(mu)].
            let tilde: Vec<f64> = alpha
                .iter()
                .enumerate()
                .map(|(k, &a)| if k == class { 1.0 } else { a })
                .collect();
            let ones = vec![1.0; n];
            let (mc_kl, se_kl) = mc_dirichlet_mean(&tilde, MC_DRAWS, &mut rng, |mu| {
                dirichlet_ln_pdf(&tilde, mu).unwrap() - dirichlet_ln_pdf(&ones, mu).unwrap()
            });
            within(
                op.kl_to_uniform(&one_hot(class, n)).unwrap(),
                mc_kl,
                se_kl,
                "kl",
                &alpha,
            );
        }
    }
}

#[test]
fn elbo_gradient_passes_finite_differences() {
    let x0 = Array::from_vec(&[4], vec![1.5, -0.5, 0.25, 2.0]).unwrap();
    let report = finite_diff_check(
        |g, z| Ok(elbo_terms_t(g, z, 2, 0.7)?.total),
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "elbo gradient rel err {} at index {}",
        report.max_rel_err,
        report.worst_index
    );
}

#[test]
fn entropy_gradient_passes_finite_differences() {
    let x0 = Array::from_vec(&[3], vec![0.8, -1.2, 0.1]).unwrap();
    let report = finite_diff_check(
        |_g, z| dirichlet_entropy_t(&alpha_from_logits_t(z)?),
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "entropy gradient rel err {} at index {}",
        report.max_rel_err,
        report.worst_index
    );
}

#[test]
fn monte_carlo_checks_are_reproducible() {
    let run = || {
        let mut rng = RngStream::from_seed(42);
        let alpha = random_alpha(3, &mut rng);
        mc_dirichlet_mean(&alpha, 1000, &mut rng, |mu| -mu[0].ln())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(sa.to_bits(), sb.to_bits());
}
