//! Training loop: baseline pretraining, then ensemble fine-tuning that
//! combines the evidential loss on benign inputs with an
//! uncertainty-correction term on adversarial counterparts and a repulsive
//! regularizer on the factor gradients.
//!
//! Sign convention: the correction reward R (entropy-gap margin plus fused
//! adversarial log-likelihood) is ascended, so the descent objective is
//! the evidential loss minus R, negated once here and nowhere else.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, run_attack, AttackError, AttackSpec};
use crate::data::{batch_iter, DataError, Dataset};
use crate::diversity::{self, DiversityConfig, DiversityError};
use crate::ensemble::{Architecture, BaselineNet, EnsembleError, EnsembleNet};
use crate::evidential::{
    alpha_from_logits_t, dirichlet_entropy_t, elbo_terms_t, DirichletOpinion, EvidentialError,
};
use crate::numerics::RngStream;
use crate::policy::{
    dsc_class_loglik_t, dsc_fuse_all, policy_predict, PolicyError, PolicySpec, SubjectiveOpinion,
    SubsetFusion,
};
use crate::tensor::{Array, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {detail}")]
    BadConfig { detail: String },
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("optimizer fed a different parameter partition: {detail}")]
    Partition { detail: String },
    #[error("shape mismatch: {detail}")]
    Shape { detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Ensemble fine-tuning settings. Defaults are the desk scale: 4 members
/// of rank 2, dual learning rates 0.001 (shared) and 0.01 (factors), 20
/// epochs of batch 64, entropy-gap margin 8, and a 20-step eps-0.03
/// projected attack for the adversarial half of each batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub members: usize,
    pub rank: usize,
    pub lr_shared: f64,
    pub lr_factors: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub adv: AttackSpec,
    pub diversity: DiversityConfig,
    pub kl_weight: f64,
    /// Epochs over which the KL weight ramps linearly from 0; 0 disables.
    pub kl_warmup_epochs: usize,
    pub momentum: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            members: 4,
            rank: 2,
            lr_shared: 1e-3,
            lr_factors: 1e-2,
            epochs: 20,
            batch_size: 64,
            gamma: 8.0,
            adv: AttackSpec::pgd(0.03, 20, 1.0 / 255.0),
            diversity: DiversityConfig::default(),
            kl_weight: 1.0,
            kl_warmup_epochs: 0,
            momentum: 0.0,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |detail: String| Err(TrainError::BadConfig { detail });
        if self.members == 0 {
            return bad("need at least one member".into());
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        for (name, v) in [
            ("lr_shared", self.lr_shared),
            ("lr_factors", self.lr_factors),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} {v} must be finite and > 0"));
            }
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return bad(format!("kl_weight {} must be finite and >= 0", self.kl_weight));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad(format!("init_scale {} must be finite and >= 0", self.init_scale));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.adv.validate()?;
        self.diversity.validate()?;
        Ok(())
    }

    /// KL weight in force at `epoch`, after the optional linear warm-up.
    pub fn kl_weight_at(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            return self.kl_weight;
        }
        let ramp = (epoch + 1) as f64 / self.kl_warmup_epochs as f64;
        self.kl_weight * ramp.min(1.0)
    }
}

/// Plain SGD with optional momentum over one fixed parameter partition.
/// The first step freezes the partition shape; later steps must present
/// the same slots in the same order.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    lr: f64,
    momentum: f64,
    velocity: Vec<Array>,
}

impl SgdOptimizer {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, TrainError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(TrainError::BadConfig {
                detail: format!("learning rate {lr} must be finite and > 0"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TrainError::BadConfig {
                detail: format!("momentum {momentum} must lie in [0, 1)"),
            });
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, pairs: &mut [(&mut Array, &Array)]) -> Result<(), TrainError> {
        if self.velocity.is_empty() {
            self.velocity = pairs.iter().map(|(p, _)| Array::zeros(p.shape())).collect();
        } else if self.velocity.len() != pairs.len() {
            return Err(TrainError::Partition {
                detail: format!(
                    "optimizer owns {} slots, got {}",
                    self.velocity.len(),
                    pairs.len()
                ),
            });
        }
        for (i, (p, g)) in pairs.iter_mut().enumerate() {
            if self.velocity[i].shape() != g.shape() || p.shape() != g.shape() {
                return Err(TrainError::Partition {
                    detail: format!(
                        "slot {i}: param {:?}, grad {:?}, velocity {:?}",
                        p.shape(),
                        g.shape(),
                        self.velocity[i].shape()
                    ),
                });
            }
            if self.momentum != 0.0 {
                let mu = self.momentum;
                self.velocity[i] = self.velocity[i].map(|v| mu * v);
                self.velocity[i].add_scaled(g, 1.0)?;
                p.add_scaled(&self.velocity[i], -self.lr)?;
            } else {
                p.add_scaled(g, -self.lr)?;
            }
        }
        Ok(())
    }
}

const PRETRAIN_BATCH: usize = 128;

fn softmax_ce_loss(g: &Graph, logits: &Tensor, labels: &[usize], n: usize) -> Result<Tensor, TensorError> {
    let b = labels.len();
    let mut mask = vec![0.0; b * n];
    for (i, &c) in labels.iter().enumerate() {
        mask[i * n + c] = 1.0;
    }
    let mask = g.constant(Array::from_vec(&[b, n], mask)?);
    let ones = g.constant(Array::filled(&[n, 1], 1.0));
    let p = attacks::softmax_true_prob(g, logits, &mask, &ones)?;
    p.log()?.mean()?.mul_scalar(-1.0)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn baseline_accuracy(net: &BaselineNet, ds: &Dataset) -> Result<f64, TrainError> {
    let logits = net.logits(&ds.inputs)?;
    let n = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(n)
        .zip(&ds.labels)
        .filter(|(row, &c)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            best == c
        })
        .count();
    Ok(hits as f64 / ds.n_samples() as f64)
}

/// Standard softmax cross-entropy training of the deterministic backbone.
pub fn pretrain_baseline(
    arch: &Architecture,
    ds: &Dataset,
    epochs: usize,
    lr: f64,
    rng: &mut RngStream,
) -> Result<BaselineNet, TrainError> {
    if ds.n_samples() == 0 {
        return Err(TrainError::BadConfig {
            detail: "pretraining dataset is empty".into(),
        });
    }
    if ds.n_classes != arch.n_classes {
        return Err(TrainError::Shape {
            detail: format!(
                "dataset has {} classes, architecture expects {}",
                ds.n_classes, arch.n_classes
            ),
        });
    }
    let mut net = BaselineNet::init(arch.clone(), rng)?;
    let mut opt = SgdOptimizer::new(lr, 0.9)?;
    for epoch in 0..epochs {
        for (step, (xb, yb)) in batch_iter(ds, PRETRAIN_BATCH, true, rng)?.enumerate() {
            let g = Graph::new();
            let bound = net.bind(&g, true);
            let xt = g.constant(xb);
            let logits = bound.forward(&xt)?;
            let loss = softmax_ce_loss(&g, &logits, &yb, arch.n_classes)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!("pretraining loss {value}"),
                });
            }
            loss.backward()?;
            let grads = bound.collect_grads();
            let mut pairs: Vec<(&mut Array, &Array)> = Vec::new();
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(&grads) {
                pairs.push((&mut layer.weight, gw));
                pairs.push((&mut layer.bias, gb));
            }
            opt.step(&mut pairs)?;
        }
    }
    Ok(net)
}

/// Mean over samples of the ascended correction reward: the per-member
/// entropy gap |H(benign) - H(adv)| clamped at `gamma`, summed over
/// members, plus the log-likelihood of the true class under the fused
/// adversarial opinion. Opinion slices are member-major.
pub fn uncertainty_correction_loss(
    benign: &[Vec<DirichletOpinion>],
    adv: &[Vec<DirichletOpinion>],
    labels: &[usize],
    gamma: f64,
) -> Result<f64, TrainError> {
    if benign.len() != adv.len() || benign.is_empty() {
        return Err(TrainError::Shape {
            detail: format!("{} benign members vs {} adversarial", benign.len(), adv.len()),
        });
    }
    let b = labels.len();
    for (m, (ben, ad)) in benign.iter().zip(adv).enumerate() {
        if ben.len() != b || ad.len() != b {
            return Err(TrainError::Shape {
                detail: format!(
                    "member {m}: {} benign and {} adversarial opinions for {b} labels",
                    ben.len(),
                    ad.len()
                ),
            });
        }
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(TrainError::BadConfig {
            detail: format!("gamma {gamma} must be finite and > 0"),
        });
    }
    let mut total = 0.0;
    for i in 0..b {
        for m in 0..benign.len() {
            let gap = (benign[m][i].entropy() - adv[m][i].entropy()).abs();
            total += gap.min(gamma);
        }
        let fused = dsc_fuse_all(
            &adv.iter()
                .map(|member| SubjectiveOpinion::from_dirichlet(&member[i]))
                .collect::<Result<Vec<_>, _>>()?,
        )?;
        let readout = fused.prob_readout();
        total += readout[labels[i]].ln();
    }
    Ok(total / b as f64)
}

/// Per-step scalars; every term is already a batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Descent objective: elbo - margin - dsc_loglik.
    pub loss: f64,
    /// Member-summed evidential loss on the benign half.
    pub elbo: f64,
    /// Member-summed clamped entropy gap.
    pub margin: f64,
    /// Fused true-class log-likelihood on the adversarial half.
    pub dsc_loglik: f64,
}

/// Optimizer state carried across steps: one partition for the shared
/// backbone, one for member factors and biases.
pub struct TrainState {
    shared: SgdOptimizer,
    factors: SgdOptimizer,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        Ok(Self {
            shared: SgdOptimizer::new(cfg.lr_shared, cfg.momentum)?,
            factors: SgdOptimizer::new(cfg.lr_factors, cfg.momentum)?,
        })
    }
}

/// One combined update: adversarial batch generation against the current
/// ensemble, evidential loss on the benign half, correction terms across
/// the pair, one backward sweep, repulsion on the factor gradients, then
/// the dual-rate update.
pub fn train_step(
    net: &mut EnsembleNet,
    x: &Array,
    y: &[usize],
    cfg: &TrainConfig,
    kl_weight: f64,
    state: &mut TrainState,
    rng: &mut RngStream,
) -> Result<StepMetrics, TrainError> {
    let batch = y.len();
    if batch == 0 || x.shape()[0] != batch {
        return Err(TrainError::Shape {
            detail: format!("{} inputs for {} labels", x.shape()[0], batch),
        });
    }
    let adv = if cfg.adv.eps > 0.0 {
        run_attack(&*net, x, y, &cfg.adv, rng)?
    } else {
        x.clone()
    };

    let mut cat_shape = x.shape().to_vec();
    cat_shape[0] = 2 * batch;
    let mut cat = x.data().to_vec();
    cat.extend_from_slice(adv.data());
    let x_cat = Array::from_vec(&cat_shape, cat)?;

    let g = Graph::new();
    let bound = net.bind(&g, true);
    let xt = g.constant(x_cat);
    let member_logits = bound.grouped_forward(&xt)?;

    let mut elbo_sum: Option<Tensor> = None;
    let mut margin_sum: Option<Tensor> = None;
    let mut dsc_sum: Option<Tensor> = None;
    let mut adv_alphas: Vec<Vec<Tensor>> = vec![Vec::with_capacity(net.n_members()); batch];
    for logits in &member_logits {
        for i in 0..batch {
            let parts = elbo_terms_t(&g, &logits.row(i)?, y[i], kl_weight)?;
            let h_benign = dirichlet_entropy_t(&parts.alpha)?;
            let alpha_adv = alpha_from_logits_t(&logits.row(batch + i)?)?;
            let h_adv = dirichlet_entropy_t(&alpha_adv)?;
            let gap = h_benign.sub(&h_adv)?.abs()?.clamp(f64::NEG_INFINITY, cfg.gamma)?;
            elbo_sum = Some(match elbo_sum {
                Some(t) => t.add(&parts.total)?,
                None => parts.total,
            });
            margin_sum = Some(match margin_sum {
                Some(t) => t.add(&gap)?,
                None => gap,
            });
            adv_alphas[i].push(alpha_adv);
        }
    }
    for (i, alphas) in adv_alphas.iter().enumerate() {
        let loglik = dsc_class_loglik_t(&g, alphas, y[i])?;
        dsc_sum = Some(match dsc_sum.take() {
            Some(t) => t.add(&loglik)?,
            None => loglik,
        });
    }

    let scale = 1.0 / batch as f64;
    let elbo = elbo_sum.expect("nonempty batch").mul_scalar(scale)?;
    let margin = margin_sum.expect("nonempty batch").mul_scalar(scale)?;
    let dsc = dsc_sum.expect("nonempty batch").mul_scalar(scale)?;
    let loss = elbo.sub(&margin)?.sub(&dsc)?;

    let metrics = StepMetrics {
        loss: loss.item()?,
        elbo: elbo.item()?,
        margin: margin.item()?,
        dsc_loglik: dsc.item()?,
    };
    if !metrics.loss.is_finite() {
        return Err(TrainError::Diverged {
            epoch: 0,
            step: 0,
            detail: format!(
                "loss {} (elbo {}, margin {}, dsc {})",
                metrics.loss, metrics.elbo, metrics.margin, metrics.dsc_loglik
            ),
        });
    }

    loss.backward()?;
    let mut grads = bound.collect_grads();
    drop(g);
    diversity::apply_regularizer(&mut grads, net, &cfg.diversity)?;

    let mut shared_pairs: Vec<(&mut Array, &Array)> = net
        .shared
        .iter_mut()
        .zip(&grads.shared)
        .map(|(p, g)| (p, g))
        .collect();
    state.shared.step(&mut shared_pairs)?;

    let mut factor_pairs: Vec<(&mut Array, &Array)> = Vec::new();
    for (member, mg) in net.members.iter_mut().zip(&grads.members) {
        for (layer, lg) in member.layers.iter_mut().zip(&mg.layers) {
            for (p, gp) in layer.r.iter_mut().zip(&lg.r) {
                factor_pairs.push((p, gp));
            }
            for (p, gp) in layer.s.iter_mut().zip(&lg.s) {
                factor_pairs.push((p, gp));
            }
            factor_pairs.push((&mut layer.bias, &lg.bias));
        }
    }
    state.factors.step(&mut factor_pairs)?;
    Ok(metrics)
}

/// One epoch snapshot, measured on the evaluation subset after the
/// epoch's updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean descent loss over the epoch's steps.
    pub mean_loss: f64,
    pub policy_accuracy: BTreeMap<String, f64>,
    pub mean_entropy_benign: f64,
    pub mean_entropy_adv: f64,
    /// Mean over members and samples of |H(benign) - H(adv)|, unclamped.
    pub mean_entropy_gap: f64,
    pub min_factor_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

const EVAL_SUBSET: usize = 256;
const HISTORY_POLICIES: [PolicySpec; 3] = [
    PolicySpec::Uncertain { h: 1 },
    PolicySpec::Average,
    PolicySpec::Dsc,
];

/// Member opinions for every sample, member-major.
pub fn member_opinions(
    net: &EnsembleNet,
    x: &Array,
) -> Result<Vec<Vec<DirichletOpinion>>, TrainError> {
    let logits = net.all_member_logits(x)?;
    let n = net.arch().n_classes;
    logits
        .iter()
        .map(|lm| {
            lm.data()
                .chunks(n)
                .map(|row| DirichletOpinion::from_logits(row).map_err(TrainError::from))
                .collect()
        })
        .collect()
}

fn eval_epoch(
    net: &EnsembleNet,
    ds: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    mean_loss: f64,
    rng: &mut RngStream,
) -> Result<EpochRecord, TrainError> {
    let count = ds.n_samples().min(EVAL_SUBSET);
    let (xb, yb) = ds.slice(0, count)?;
    let adv = if cfg.adv.eps > 0.0 {
        run_attack(net, &xb, &yb, &cfg.adv, rng)?
    } else {
        xb.clone()
    };
    let benign_ops = member_opinions(net, &xb)?;
    let adv_ops = member_opinions(net, &adv)?;

    let members = benign_ops.len();
    let mut h_benign = 0.0;
    let mut h_adv = 0.0;
    let mut gap = 0.0;
    for m in 0..members {
        for i in 0..count {
            let hb = benign_ops[m][i].entropy();
            let ha = adv_ops[m][i].entropy();
            h_benign += hb;
            h_adv += ha;
            gap += (hb - ha).abs();
        }
    }
    let denom = (members * count) as f64;

    let mut policy_accuracy = BTreeMap::new();
    let mut scratch = rng.child(0xE);
    for spec in HISTORY_POLICIES {
        let mut hits = 0usize;
        for i in 0..count {
            let opinions: Vec<DirichletOpinion> =
                (0..members).map(|m| benign_ops[m][i].clone()).collect();
            let outcome = policy_predict(&opinions, spec, SubsetFusion::Mean, &mut scratch)?;
            if outcome.predicted == yb[i] {
                hits += 1;
            }
        }
        policy_accuracy.insert(spec.to_string(), hits as f64 / count as f64);
    }

    Ok(EpochRecord {
        epoch,
        mean_loss,
        policy_accuracy,
        mean_entropy_benign: h_benign / denom,
        mean_entropy_adv: h_adv / denom,
        mean_entropy_gap: gap / denom,
        min_factor_distance: net.min_pairwise_factor_distance(),
    })
}

/// Full fine-tuning run over `cfg.epochs`. The net is updated in place;
/// the history holds one record per epoch. Identical config and seed give
/// an identical history.
pub fn fit(net: &mut EnsembleNet, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if net.n_members() != cfg.members || net.rank() != cfg.rank {
        return Err(TrainError::BadConfig {
            detail: format!(
                "net has {} members of rank {}, config wants {} of rank {}",
                net.n_members(),
                net.rank(),
                cfg.members,
                cfg.rank
            ),
        });
    }
    if ds.n_classes != net.arch().n_classes {
        return Err(TrainError::Shape {
            detail: format!(
                "dataset has {} classes, net expects {}",
                ds.n_classes,
                net.arch().n_classes
            ),
        });
    }
    let root = RngStream::from_seed(cfg.seed);
    let mut step_rng = root.child(1);
    let mut eval_rng = root.child(2);
    let mut state = TrainState::new(cfg)?;
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let kl_weight = cfg.kl_weight_at(epoch);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, (xb, yb)) in batch_iter(ds, cfg.batch_size, true, &mut step_rng)?.enumerate() {
            let metrics = train_step(net, &xb, &yb, cfg, kl_weight, &mut state, &mut step_rng)
                .map_err(|e| match e {
                    TrainError::Diverged { detail, .. } => TrainError::Diverged { epoch, step, detail },
                    other => other,
                })?;
            loss_sum += metrics.loss;
            steps += 1;
        }
        let mean_loss = loss_sum / steps as f64;
        history
            .epochs
            .push(eval_epoch(net, ds, cfg, epoch, mean_loss, &mut eval_rng)?);
    }
    Ok(history)
}
