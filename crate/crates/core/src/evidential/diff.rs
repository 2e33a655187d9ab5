//! Tape-level builders for the evidential losses.
//!
//! Mirrors of the closed forms in the parent module, expressed as graph ops
//! so gradients flow back to the logits. Kept separate from the scalar
//! versions on purpose: tests check the two against each other.

use crate::numerics::lgamma;
use crate::tensor::{Array, Graph, Tensor, TensorError};

/// softplus(z) + 1, elementwise over logits of any shape.
pub fn alpha_from_logits_t(logits: &Tensor) -> Result<Tensor, TensorError> {
    logits.softplus()?.add_scalar(1.0)
}

fn check_class(op: &'static str, n: usize, class: usize) -> Result<(), TensorError> {
    if class >= n {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("class {class} out of range for {n} classes"),
        });
    }
    Ok(())
}

fn one_hot_const(g: &Graph, shape: &[usize], class: usize) -> Tensor {
    let mut data = vec![0.0; shape.iter().product()];
    data[class] = 1.0;
    g.constant(Array::from_vec(shape, data).expect("shape matches data"))
}

/// Expected negative log-likelihood psi(alpha_0) - psi(alpha_c) as a scalar
/// node. `alpha` is one opinion, any shape, indexed flat by `class`.
pub fn expected_nll_t(g: &Graph, alpha: &Tensor, class: usize) -> Result<Tensor, TensorError> {
    let shape = alpha.shape();
    let n: usize = shape.iter().product();
    check_class("expected_nll", n, class)?;
    let mask = one_hot_const(g, &shape, class);
    let a0 = alpha.sum()?;
    let ac = alpha.mul(&mask)?.sum()?;
    a0.digamma()?.sub(&ac.digamma()?)
}

/// KL(Dir(alpha-tilde) || Dir(1, ..., 1)) with the true class pinned to 1,
/// as a scalar node.
pub fn kl_to_uniform_t(g: &Graph, alpha: &Tensor, class: usize) -> Result<Tensor, TensorError> {
    let shape = alpha.shape();
    let n: usize = shape.iter().product();
    check_class("kl_to_uniform", n, class)?;
    let y = one_hot_const(g, &shape, class);
    let keep = {
        let mut data = vec![1.0; n];
        data[class] = 0.0;
        g.constant(Array::from_vec(&shape, data).expect("shape matches data"))
    };
    let tilde = y.add(&keep.mul(alpha)?)?;
    let t0 = tilde.sum()?;
    let ln_gamma_n = lgamma(n as f64).expect("n >= 1");
    let head = t0.lgamma()?.add_scalar(-ln_gamma_n)?;
    let head = head.sub(&tilde.lgamma()?.sum()?)?;
    let centered = tilde.digamma()?.sub(&t0.digamma()?)?;
    let tail = tilde.add_scalar(-1.0)?.mul(&centered)?.sum()?;
    head.add(&tail)
}

/// Differential entropy of Dir(alpha) as a scalar node.
pub fn dirichlet_entropy_t(alpha: &Tensor) -> Result<Tensor, TensorError> {
    let n: usize = alpha.shape().iter().product();
    if n < 2 {
        return Err(TensorError::InvalidShape {
            op: "dirichlet_entropy",
            detail: format!("need at least 2 concentrations, got {n}"),
        });
    }
    let a0 = alpha.sum()?;
    let ln_b = alpha.lgamma()?.sum()?.sub(&a0.lgamma()?)?;
    let spread = a0.add_scalar(-(n as f64))?.mul(&a0.digamma()?)?;
    let pull = alpha.add_scalar(-1.0)?.mul(&alpha.digamma()?)?.sum()?;
    ln_b.add(&spread)?.sub(&pull)
}

/// Evidential loss terms built from one row of logits.
pub struct ElboTensors {
    pub alpha: Tensor,
    pub nll: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
}

pub fn elbo_terms_t(
    g: &Graph,
    logits: &Tensor,
    class: usize,
    kl_weight: f64,
) -> Result<ElboTensors, TensorError> {
    let alpha = alpha_from_logits_t(logits)?;
    let nll = expected_nll_t(g, &alpha, class)?;
    let kl = kl_to_uniform_t(g, &alpha, class)?;
    let total = nll.add(&kl.mul_scalar(kl_weight)?)?;
    Ok(ElboTensors {
        alpha,
        nll,
        kl,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidential::DirichletOpinion;

    #[test]
    fn tape_values_match_closed_forms() {
        let g = Graph::new();
        let z = g.param(Array::from_vec(&[3], vec![3.0, 0.0, -3.0]).unwrap());
        let parts = elbo_terms_t(&g, &z, 1, 0.7).unwrap();
        let op = DirichletOpinion::from_logits(&[3.0, 0.0, -3.0]).unwrap();
        let scalar = op.elbo_loss(&[0.0, 1.0, 0.0], 0.7).unwrap();
        assert!((parts.nll.item().unwrap() - scalar.nll).abs() < 1e-12);
        assert!((parts.kl.item().unwrap() - scalar.kl).abs() < 1e-12);
        assert!((parts.total.item().unwrap() - scalar.total).abs() < 1e-12);
        let h = dirichlet_entropy_t(&parts.alpha).unwrap();
        assert!((h.item().unwrap() - op.entropy()).abs() < 1e-12);
    }

    #[test]
    fn class_bounds_checked() {
        let g = Graph::new();
        let a = g.param(Array::from_vec(&[2], vec![2.0, 3.0]).unwrap());
        assert!(expected_nll_t(&g, &a, 2).is_err());
        assert!(kl_to_uniform_t(&g, &a, 5).is_err());
    }

    #[test]
    fn kl_gradient_is_zero_on_the_true_class() {
        // The pinned coordinate contributes nothing, so its logit gets no
        // gradient from the KL term alone.
        let g = Graph::new();
        let z = g.param(Array::from_vec(&[3], vec![1.0, 0.5, -0.5]).unwrap());
        let alpha = alpha_from_logits_t(&z).unwrap();
        let kl = kl_to_uniform_t(&g, &alpha, 0).unwrap();
        kl.backward().unwrap();
        let grad = z.grad().unwrap();
        assert_eq!(grad.data()[0], 0.0);
        assert!(grad.data()[1] != 0.0);
        assert!(grad.data()[2] != 0.0);
    }
}
