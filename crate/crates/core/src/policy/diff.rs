//! Graph-op versions of the subjective-opinion fusion, so the fused class
//! likelihood can sit inside the training objective.
//!
//! Numerically these mirror the scalar rules in the parent module, minus
//! the exact renormalization (the rule preserves total mass in exact
//! arithmetic, so gradients are unaffected). Tests hold the two paths
//! together.

use crate::tensor::{Array, Graph, Tensor, TensorError};

/// Belief vector and uncertainty scalar as graph nodes.
pub struct SubjectiveT {
    pub belief: Tensor,
    pub uncertainty: Tensor,
}

/// Evidence view of concentration node `alpha`: belief (alpha-1)/S and
/// uncertainty N/S. Requires every concentration at or above 1, which the
/// softplus link guarantees up to rounding.
pub fn subjective_t(g: &Graph, alpha: &Tensor) -> Result<SubjectiveT, TensorError> {
    let n: usize = alpha.shape().iter().product();
    if n < 2 {
        return Err(TensorError::InvalidShape {
            op: "subjective",
            detail: format!("need at least 2 classes, got {n}"),
        });
    }
    if let Some(&low) = alpha
        .value()
        .data()
        .iter()
        .find(|a| **a < 1.0 - 1e-12)
    {
        return Err(TensorError::Domain {
            op: "subjective",
            value: low,
        });
    }
    let s = alpha.sum()?;
    let belief = alpha.add_scalar(-1.0)?.div(&s)?;
    let uncertainty = g.constant_scalar(n as f64).div(&s)?;
    Ok(SubjectiveT {
        belief,
        uncertainty,
    })
}

/// Two-opinion reduction on graph nodes. Total conflict is checked against
/// the current values and refused.
pub fn dsc_combine_t(a: &SubjectiveT, b: &SubjectiveT) -> Result<SubjectiveT, TensorError> {
    let agree = a.belief.mul(&b.belief)?.sum()?;
    let mass = a.belief.sum()?.mul(&b.belief.sum()?)?;
    let conflict = mass.sub(&agree)?;
    let c = conflict.item()?;
    if c >= 1.0 - 1e-12 {
        return Err(TensorError::Domain {
            op: "dsc_combine",
            value: c,
        });
    }
    let scale = conflict.neg()?.add_scalar(1.0)?;
    let cross = a
        .belief
        .mul(&b.uncertainty)?
        .add(&b.belief.mul(&a.uncertainty)?)?;
    let belief = a.belief.mul(&b.belief)?.add(&cross)?.div(&scale)?;
    let uncertainty = a.uncertainty.mul(&b.uncertainty)?.div(&scale)?;
    Ok(SubjectiveT {
        belief,
        uncertainty,
    })
}

/// Left fold of `dsc_combine_t` in member order.
pub fn dsc_fuse_all_t(opinions: &[SubjectiveT]) -> Result<SubjectiveT, TensorError> {
    let (first, rest) = opinions.split_first().ok_or(TensorError::InvalidShape {
        op: "dsc_fuse_all",
        detail: "no opinions to fuse".into(),
    })?;
    let mut acc = SubjectiveT {
        belief: first.belief.clone(),
        uncertainty: first.uncertainty.clone(),
    };
    for op in rest {
        acc = dsc_combine_t(&acc, op)?;
    }
    Ok(acc)
}

/// ln p(class) of the fused opinion built from per-member concentration
/// nodes: fuse, read out belief_c + u/N, take the log.
pub fn dsc_class_loglik_t(
    g: &Graph,
    member_alphas: &[Tensor],
    class: usize,
) -> Result<Tensor, TensorError> {
    let opinions: Vec<SubjectiveT> = member_alphas
        .iter()
        .map(|a| subjective_t(g, a))
        .collect::<Result<_, _>>()?;
    let fused = dsc_fuse_all_t(&opinions)?;
    let n: usize = member_alphas[0].shape().iter().product();
    if class >= n {
        return Err(TensorError::InvalidShape {
            op: "dsc_class_loglik",
            detail: format!("class {class} out of range for {n} classes"),
        });
    }
    let mut mask = vec![0.0; n];
    mask[class] = 1.0;
    let mask = g.constant(Array::from_vec(&fused.belief.shape(), mask)?);
    let share = fused.uncertainty.mul_scalar(1.0 / n as f64)?;
    fused.belief.mul(&mask)?.sum()?.add(&share)?.log()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidential::{alpha_from_logits_t, DirichletOpinion};
    use crate::numerics::RngStream;
    use crate::policy::{dsc_fuse_all, SubjectiveOpinion};
    use crate::tensor::finite_diff_check;

    fn tape_fuse(logit_rows: &[Vec<f64>]) -> (Vec<f64>, f64) {
        let g = Graph::new();
        let ops: Vec<SubjectiveT> = logit_rows
            .iter()
            .map(|row| {
                let z = g.constant(Array::from_vec(&[row.len()], row.clone()).unwrap());
                subjective_t(&g, &alpha_from_logits_t(&z).unwrap()).unwrap()
            })
            .collect();
        let fused = dsc_fuse_all_t(&ops).unwrap();
        (
            fused.belief.value().data().to_vec(),
            fused.uncertainty.item().unwrap(),
        )
    }

    fn scalar_fuse(logit_rows: &[Vec<f64>]) -> SubjectiveOpinion {
        let subj: Vec<SubjectiveOpinion> = logit_rows
            .iter()
            .map(|row| {
                SubjectiveOpinion::from_dirichlet(&DirichletOpinion::from_logits(row).unwrap())
                    .unwrap()
            })
            .collect();
        dsc_fuse_all(&subj).unwrap()
    }

    #[test]
    fn tape_fusion_matches_scalar_path() {
        let mut rng = RngStream::from_seed(4);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.uniform(-2.0, 3.0)).collect())
                .collect();
            let (belief, u) = tape_fuse(&rows);
            let scalar = scalar_fuse(&rows);
            for (a, b) in belief.iter().zip(scalar.belief()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((u - scalar.uncertainty()).abs() < 1e-12);
        }
    }

    #[test]
    fn sub_unit_alpha_is_refused() {
        let g = Graph::new();
        let a = g.constant(Array::from_vec(&[2], vec![0.5, 2.0]).unwrap());
        assert!(subjective_t(&g, &a).is_err());
    }

    #[test]
    fn fused_loglik_gradient_passes_finite_differences() {
        // Three members' logits packed in one [3, 4] leaf.
        let x0 = Array::from_vec(
            &[3, 4],
            vec![
                1.2, -0.3, 0.5, 0.0, -0.8, 0.9, 0.1, 1.5, 0.4, 0.4, -1.0, 2.0,
            ],
        )
        .unwrap();
        let report = finite_diff_check(
            |g, x| {
                let alphas: Vec<Tensor> = (0..3)
                    .map(|m| alpha_from_logits_t(&x.row(m)?))
                    .collect::<Result<_, _>>()?;
                dsc_class_loglik_t(g, &alphas, 2)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "rel err {} at {}",
            report.max_rel_err,
            report.worst_index
        );
    }

    #[test]
    fn class_bounds_checked() {
        let g = Graph::new();
        let a = g.constant(Array::from_vec(&[2], vec![2.0, 3.0]).unwrap());
        assert!(dsc_class_loglik_t(&g, &[a], 2).is_err());
        assert!(dsc_fuse_all_t(&[]).is_err());
    }
}
