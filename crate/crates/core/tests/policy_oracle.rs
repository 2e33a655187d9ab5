//! Checks the subjective-opinion combination rule against a from-scratch
//! Dempster mass-function implementation on 3-class frames.
//!
//! The oracle works on the full power set with explicit intersections and
//! knows nothing about the library's closed-form rule; agreement pins the
//! conflict accounting and the normalization to first principles.

mod common;

use common::{masses_to_opinion, oracle_combine, random_opinion, to_masses, DSC_FRAME};
use edens_core::policy::{dsc_combine, dsc_fuse_all};
use edens_core::{RngStream, SubjectiveOpinion};

fn assert_close(a: &SubjectiveOpinion, b: &SubjectiveOpinion, tol: f64, what: &str) {
    for (x, y) in a.belief().iter().zip(b.belief()) {
        assert!((x - y).abs() < tol, "{what}: belief {x} vs {y}");
    }
    assert!(
        (a.uncertainty() - b.uncertainty()).abs() < tol,
        "{what}: u {} vs {}",
        a.uncertainty(),
        b.uncertainty()
    );
}

#[test]
fn pairwise_combination_matches_mass_function_oracle() {
    let mut rng = RngStream::from_seed(0xD5C);
    for case in 0..300 {
        let (a, b) = (random_opinion(&mut rng), random_opinion(&mut rng));
        let fused = dsc_combine(&a, &b).unwrap();
        let oracle = masses_to_opinion(&oracle_combine(&to_masses(&a), &to_masses(&b)).unwrap());
        assert_close(&fused, &oracle, 1e-9, &format!("case {case}"));
    }
}

#[test]
fn three_member_fold_matches_oracle_any_order() {
    let mut rng = RngStream::from_seed(0xF01D);
    for case in 0..100 {
        let ops = [
            random_opinion(&mut rng),
            random_opinion(&mut rng),
            random_opinion(&mut rng),
        ];
        let fused = dsc_fuse_all(&ops).unwrap();

        // Oracle folded in a different order: (2, 0), then 1.
        let m = oracle_combine(&to_masses(&ops[2]), &to_masses(&ops[0])).unwrap();
        let m = oracle_combine(&m, &to_masses(&ops[1])).unwrap();
        assert_close(&fused, &masses_to_opinion(&m), 1e-9, &format!("case {case}"));

        // Library-side permutation stability on the same inputs.
        let swapped = dsc_fuse_all(&[ops[1].clone(), ops[2].clone(), ops[0].clone()]).unwrap();
        assert_close(&fused, &swapped, 1e-9, &format!("perm case {case}"));
    }
}

#[test]
fn fused_uncertainty_never_exceeds_inputs() {
    let mut rng = RngStream::from_seed(0x0111);
    for _ in 0..1000 {
        let (a, b) = (random_opinion(&mut rng), random_opinion(&mut rng));
        let fused = dsc_combine(&a, &b).unwrap();
        let floor = a.uncertainty().min(b.uncertainty());
        assert!(
            fused.uncertainty() <= floor + 1e-12,
            "fused {} above min input {floor}",
            fused.uncertainty()
        );
    }
}

#[test]
fn oracle_agrees_on_neutral_element() {
    let mut rng = RngStream::from_seed(7);
    let o = random_opinion(&mut rng);
    let v = SubjectiveOpinion::vacuous(DSC_FRAME).unwrap();
    let fused = dsc_combine(&o, &v).unwrap();
    let oracle = masses_to_opinion(&oracle_combine(&to_masses(&o), &to_masses(&v)).unwrap());
    assert_close(&fused, &oracle, 1e-12, "neutral");
    assert_close(&fused, &o, 1e-12, "identity");
}
