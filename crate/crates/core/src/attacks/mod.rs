//! Gradient-based adversarial example generation.
//!
//! Every attack is the same loop: differentiate a readout loss with respect
//! to the input, take a sign step, project back into the L-inf ball around
//! the clean input, clamp to [0, 1]. Families differ only in decoration:
//! fgsm is the one-step special case, pgd adds random starts, mim smooths
//! steps with an L1-normalized momentum, cw swaps the loss for a logit
//! margin, dim pushes a random resize-and-pad through the tape before the
//! model, tim blurs the gradient with a Gaussian stencil. The model is
//! frozen throughout; only the input moves.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::ensemble::{BaselineNet, EnsembleNet};
use crate::numerics::RngStream;
use crate::tensor::{Array, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack spec: {detail}")]
    BadSpec { detail: String },
    #[error("labels do not fit the batch: {detail}")]
    Labels { detail: String },
    #[error("{family} needs image-shaped input, got rank {rank}")]
    NeedsImages { family: AttackFamily, rank: usize },
    #[error("loss target not applicable: {detail}")]
    UnsupportedTarget { detail: String },
    #[error("member index {got} out of range for {members} members")]
    MemberIndex { got: usize, members: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Mim,
    Cw,
    Dim,
    Tim,
}

impl AttackFamily {
    pub fn needs_images(self) -> bool {
        matches!(self, AttackFamily::Dim | AttackFamily::Tim)
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let s = match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::Mim => "mim",
            AttackFamily::Cw => "cw",
            AttackFamily::Dim => "dim",
            AttackFamily::Tim => "tim",
        };
        f.write_str(s)
    }
}

impl FromStr for AttackFamily {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, AttackError> {
        Ok(match s {
            "fgsm" => AttackFamily::Fgsm,
            "pgd" => AttackFamily::Pgd,
            "mim" => AttackFamily::Mim,
            "cw" => AttackFamily::Cw,
            "dim" => AttackFamily::Dim,
            "tim" => AttackFamily::Tim,
            _ => {
                return Err(AttackError::BadSpec {
                    detail: format!("unknown attack family \"{s}\""),
                })
            }
        })
    }
}

/// Which readout the attack differentiates. Parsed from "member",
/// "member-2", "avg", "dsc".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTarget {
    /// One member's output alone.
    Member { index: usize },
    /// Mean over member probability vectors (or the averaged logits for
    /// the margin loss).
    EnsembleAverage,
    /// Evidentially fused class probability.
    DscFused,
}

impl fmt::Display for LossTarget {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            LossTarget::Member { index: 0 } => f.write_str("member"),
            LossTarget::Member { index } => write!(f, "member-{index}"),
            LossTarget::EnsembleAverage => f.write_str("avg"),
            LossTarget::DscFused => f.write_str("dsc"),
        }
    }
}

impl FromStr for LossTarget {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, AttackError> {
        match s {
            "member" => return Ok(LossTarget::Member { index: 0 }),
            "avg" => return Ok(LossTarget::EnsembleAverage),
            "dsc" => return Ok(LossTarget::DscFused),
            _ => {}
        }
        if let Some(i) = s.strip_prefix("member-") {
            if let Ok(index) = i.parse() {
                return Ok(LossTarget::Member { index });
            }
        }
        Err(AttackError::BadSpec {
            detail: format!("unknown loss target \"{s}\""),
        })
    }
}

impl Serialize for LossTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LossTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn default_steps() -> usize {
    1
}

fn default_step_size() -> f64 {
    1.0 / 255.0
}

fn default_momentum_decay() -> f64 {
    1.0
}

fn default_transform_prob() -> f64 {
    0.5
}

fn default_kernel_size() -> usize {
    7
}

fn default_loss_target() -> LossTarget {
    LossTarget::EnsembleAverage
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// L-inf budget in input units.
    pub eps: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    /// Momentum carry-over for mim.
    #[serde(default = "default_momentum_decay")]
    pub momentum_decay: f64,
    /// Uniform start inside the ball. Off unless set; the pgd constructor
    /// turns it on.
    #[serde(default)]
    pub random_init: bool,
    /// Chance per iteration that dim transforms the input.
    #[serde(default = "default_transform_prob")]
    pub transform_prob: f64,
    /// Gaussian stencil width for tim; odd.
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    /// Margin clamp for the cw loss.
    #[serde(default)]
    pub cw_kappa: f64,
    #[serde(default = "default_loss_target")]
    pub loss_target: LossTarget,
}

impl AttackSpec {
    fn base(family: AttackFamily, eps: f64, steps: usize, step_size: f64) -> Self {
        Self {
            family,
            eps,
            steps,
            step_size,
            momentum_decay: default_momentum_decay(),
            random_init: false,
            transform_prob: default_transform_prob(),
            kernel_size: default_kernel_size(),
            cw_kappa: 0.0,
            loss_target: default_loss_target(),
        }
    }

    /// Single sign step of size eps.
    pub fn fgsm(eps: f64) -> Self {
        Self::base(AttackFamily::Fgsm, eps, 1, eps)
    }

    /// Iterated projected steps with a random start.
    pub fn pgd(eps: f64, steps: usize, step_size: f64) -> Self {
        let mut s = Self::base(AttackFamily::Pgd, eps, steps, step_size);
        s.random_init = true;
        s
    }

    pub fn mim(eps: f64, steps: usize, step_size: f64) -> Self {
        Self::base(AttackFamily::Mim, eps, steps, step_size)
    }

    pub fn cw(eps: f64, steps: usize, step_size: f64) -> Self {
        Self::base(AttackFamily::Cw, eps, steps, step_size)
    }

    pub fn dim(eps: f64, steps: usize, step_size: f64) -> Self {
        Self::base(AttackFamily::Dim, eps, steps, step_size)
    }

    pub fn tim(eps: f64, steps: usize, step_size: f64) -> Self {
        Self::base(AttackFamily::Tim, eps, steps, step_size)
    }

    pub fn with_target(mut self, target: LossTarget) -> Self {
        self.loss_target = target;
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |detail: String| Err(AttackError::BadSpec { detail });
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return bad(format!("eps {} must be finite and >= 0", self.eps));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return bad(format!("step size {} must be finite and >= 0", self.step_size));
        }
        if self.steps > 1 && self.step_size == 0.0 {
            return bad("multi-step attacks need a positive step size".into());
        }
        if !(self.momentum_decay.is_finite() && self.momentum_decay >= 0.0) {
            return bad(format!("momentum decay {} out of range", self.momentum_decay));
        }
        if !(0.0..=1.0).contains(&self.transform_prob) {
            return bad(format!("transform prob {} outside [0,1]", self.transform_prob));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if !(self.cw_kappa.is_finite() && self.cw_kappa >= 0.0) {
            return bad(format!("cw margin {} out of range", self.cw_kappa));
        }
        Ok(())
    }
}

/// A frozen model an attack can differentiate through. Member logits come
/// back as graph nodes so input gradients flow.
pub trait AttackModel {
    fn n_members(&self) -> usize;
    fn n_classes(&self) -> usize;
    /// Per-sample input shape, without the batch axis.
    fn sample_shape(&self) -> Vec<usize>;
    /// True when logits parameterize a Dirichlet rather than a softmax.
    fn evidential_output(&self) -> bool;
    fn member_logits_t(&self, g: &Graph, x: &Tensor) -> Result<Vec<Tensor>, TensorError>;
    /// Parameter checksum; attacks must leave it unchanged.
    fn params_fingerprint(&self) -> u64;
}

impl AttackModel for EnsembleNet {
    fn n_members(&self) -> usize {
        EnsembleNet::n_members(self)
    }

    fn n_classes(&self) -> usize {
        self.arch().n_classes
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.arch().input_shape()
    }

    fn evidential_output(&self) -> bool {
        true
    }

    fn member_logits_t(&self, g: &Graph, x: &Tensor) -> Result<Vec<Tensor>, TensorError> {
        self.bind(g, false).grouped_forward(x)
    }

    fn params_fingerprint(&self) -> u64 {
        self.fingerprint()
    }
}

impl AttackModel for BaselineNet {
    fn n_members(&self) -> usize {
        1
    }

    fn n_classes(&self) -> usize {
        self.arch().n_classes
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.arch().input_shape()
    }

    fn evidential_output(&self) -> bool {
        false
    }

    fn member_logits_t(&self, g: &Graph, x: &Tensor) -> Result<Vec<Tensor>, TensorError> {
        Ok(vec![self.bind(g, false).forward(x)?])
    }

    fn params_fingerprint(&self) -> u64 {
        self.fingerprint()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn one_hot_batch(g: &Graph, y: &[usize], n_classes: usize) -> Tensor {
    let mut data = vec![0.0; y.len() * n_classes];
    for (b, &c) in y.iter().enumerate() {
        data[b * n_classes + c] = 1.0;
    }
    g.constant(Array::from_vec(&[y.len(), n_classes], data).expect("shape matches"))
}

fn ones_col(g: &Graph, n: usize) -> Tensor {
    g.constant(Array::filled(&[n, 1], 1.0))
}

/// Per-member true-class probability column [B, 1] under the Dirichlet
/// readout alpha / alpha_0.
fn evidential_true_prob(
    logits: &Tensor,
    y_mask: &Tensor,
    ones: &Tensor,
) -> Result<Tensor, TensorError> {
    let alpha = logits.softplus()?.add_scalar(1.0)?;
    let num = alpha.mul(y_mask)?.matmul(ones)?;
    let den = alpha.matmul(ones)?;
    num.div(&den)
}

/// True-class probability column [B, 1] under a softmax readout; the row
/// max is subtracted as a value constant for stability.
pub(crate) fn softmax_true_prob(
    g: &Graph,
    logits: &Tensor,
    y_mask: &Tensor,
    ones: &Tensor,
) -> Result<Tensor, TensorError> {
    let value = logits.value();
    let shape = value.shape();
    let (b, n) = (shape[0], shape[1]);
    let mut maxima = vec![f64::NEG_INFINITY; b];
    for (i, &v) in value.data().iter().enumerate() {
        let row = i / n;
        if v > maxima[row] {
            maxima[row] = v;
        }
    }
    let max_col = g.constant(Array::from_vec(&[b, 1], maxima)?);
    let ones_row = g.constant(Array::filled(&[1, n], 1.0));
    let shifted = logits.sub(&max_col.matmul(&ones_row)?)?;
    let e = shifted.exp()?;
    let num = e.mul(y_mask)?.matmul(ones)?;
    let den = e.matmul(ones)?;
    num.div(&den)
}

fn targeted_members(
    target: LossTarget,
    members: usize,
) -> Result<Vec<usize>, AttackError> {
    match target {
        LossTarget::Member { index } => {
            if index >= members {
                return Err(AttackError::MemberIndex {
                    got: index,
                    members,
                });
            }
            Ok(vec![index])
        }
        LossTarget::EnsembleAverage | LossTarget::DscFused => Ok((0..members).collect()),
    }
}

fn mean_of(tensors: &[Tensor]) -> Result<Tensor, TensorError> {
    let mut it = tensors.iter();
    let first = it.next().expect("nonempty");
    let mut acc = first.clone();
    for t in it {
        acc = acc.add(t)?;
    }
    acc.mul_scalar(1.0 / tensors.len() as f64)
}

/// Loss the attack ascends, as a scalar node: mean over the batch.
fn build_loss(
    g: &Graph,
    logits: &[Tensor],
    y: &[usize],
    spec: &AttackSpec,
    evidential: bool,
    n_classes: usize,
) -> Result<Tensor, AttackError> {
    let picked = targeted_members(spec.loss_target, logits.len())?;
    let y_mask = one_hot_batch(g, y, n_classes);
    let ones = ones_col(g, n_classes);

    if spec.family == AttackFamily::Cw {
        if spec.loss_target == LossTarget::DscFused {
            return Err(AttackError::UnsupportedTarget {
                detail: "margin loss works on logits, not fused opinions".into(),
            });
        }
        let picked_logits: Vec<Tensor> = picked.iter().map(|&m| logits[m].clone()).collect();
        let avg = mean_of(&picked_logits)?;
        return Ok(cw_margin(g, &avg, y, spec.cw_kappa, n_classes)?);
    }

    match spec.loss_target {
        LossTarget::DscFused => {
            if !evidential {
                return Err(AttackError::UnsupportedTarget {
                    detail: "dsc fusion needs evidential member outputs".into(),
                });
            }
            let mut logliks = Vec::with_capacity(y.len());
            for (b, &c) in y.iter().enumerate() {
                let alphas: Vec<Tensor> = picked
                    .iter()
                    .map(|&m| crate::evidential::alpha_from_logits_t(&logits[m].row(b)?))
                    .collect::<Result<_, _>>()?;
                logliks.push(crate::policy::dsc_class_loglik_t(g, &alphas, c)?);
            }
            Ok(mean_of(&logliks)?.neg()?)
        }
        _ => {
            let probs: Vec<Tensor> = picked
                .iter()
                .map(|&m| {
                    if evidential {
                        evidential_true_prob(&logits[m], &y_mask, &ones)
                    } else {
                        softmax_true_prob(g, &logits[m], &y_mask, &ones)
                    }
                })
                .collect::<Result<_, _>>()?;
            let mean_prob = mean_of(&probs)?;
            Ok(mean_prob.log()?.neg()?.mean()?)
        }
    }
}

/// max(max_{k != c} z_k - z_c, -kappa), averaged over the batch. The
/// runner-up class is read off the current values; the clamp zeroes the
/// gradient once the margin is saturated.
fn cw_margin(
    g: &Graph,
    avg_logits: &Tensor,
    y: &[usize],
    kappa: f64,
    n_classes: usize,
) -> Result<Tensor, TensorError> {
    let values = avg_logits.value();
    let mut margins = Vec::with_capacity(y.len());
    for (b, &c) in y.iter().enumerate() {
        let row_vals = &values.data()[b * n_classes..(b + 1) * n_classes];
        let mut runner = usize::from(c == 0);
        for (k, &v) in row_vals.iter().enumerate() {
            if k != c && v > row_vals[runner] {
                runner = k;
            }
        }
        let mut mask = vec![0.0; n_classes];
        mask[runner] = 1.0;
        mask[c] = -1.0;
        let mask = g.constant(Array::from_vec(&[n_classes], mask)?);
        let margin = avg_logits.row(b)?.mul(&mask)?.sum()?;
        margins.push(margin.clamp(-kappa, f64::INFINITY)?);
    }
    mean_of(&margins)
}

/// Readout loss value on clean inputs, no perturbation.
pub fn attack_loss(
    model: &dyn AttackModel,
    x: &Array,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<f64, AttackError> {
    spec.validate()?;
    check_batch(model, x, y)?;
    let g = Graph::new();
    let xt = g.constant(x.clone());
    let logits = model.member_logits_t(&g, &xt)?;
    let loss = build_loss(
        &g,
        &logits,
        y,
        spec,
        model.evidential_output(),
        model.n_classes(),
    )?;
    Ok(loss.item()?)
}

fn check_batch(
    model: &dyn AttackModel,
    x: &Array,
    y: &[usize],
) -> Result<usize, AttackError> {
    let shape = x.shape();
    let sample = model.sample_shape();
    if shape.len() != sample.len() + 1 || shape[1..] != sample[..] {
        return Err(AttackError::Labels {
            detail: format!(
                "input shape {shape:?} does not extend per-sample shape {sample:?}"
            ),
        });
    }
    let batch = shape[0];
    if y.len() != batch {
        return Err(AttackError::Labels {
            detail: format!("{} labels for batch of {batch}", y.len()),
        });
    }
    if let Some(&c) = y.iter().find(|&&c| c >= model.n_classes()) {
        return Err(AttackError::Labels {
            detail: format!("label {c} out of range for {} classes", model.n_classes()),
        });
    }
    Ok(batch)
}

/// Gaussian blur of an image-shaped gradient, depthwise, zero-padded,
/// sigma = kernel_size / 3. Shape preserved.
pub fn tim_smooth(grad: &Array, kernel_size: usize) -> Result<Array, AttackError> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(AttackError::BadSpec {
            detail: format!("kernel size {kernel_size} must be odd"),
        });
    }
    let shape = grad.shape();
    if shape.len() != 4 {
        return Err(AttackError::NeedsImages {
            family: AttackFamily::Tim,
            rank: shape.len(),
        });
    }
    if kernel_size == 1 {
        return Ok(grad.clone());
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let k = kernel_size;
    let half = (k / 2) as isize;
    let sigma = k as f64 / 3.0;
    let mut kernel = vec![0.0; k * k];
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let di = i as isize - half;
            let dj = j as isize - half;
            let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[i * k + j] = v;
            total += v;
        }
    }
    kernel.iter_mut().for_each(|v| *v /= total);

    let src = grad.data();
    let mut out = vec![0.0; src.len()];
    let plane = h * w;
    for bc in 0..b * c {
        let base = bc * plane;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for ki in 0..k as isize {
                    for kj in 0..k as isize {
                        let si = i + ki - half;
                        let sj = j + kj - half;
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            continue;
                        }
                        acc += kernel[(ki * k as isize + kj) as usize]
                            * src[base + (si * w as isize + sj) as usize];
                    }
                }
                out[base + (i * w as isize + j) as usize] = acc;
            }
        }
    }
    Ok(Array::from_vec(&shape, out).expect("same shape"))
}

/// Random resize-then-pad applied inside the tape so gradients flow back
/// through the transform. Identity when the coin says no.
fn dim_transform(
    x: &Tensor,
    transform_prob: f64,
    rng: &mut RngStream,
) -> Result<Tensor, TensorError> {
    let shape = x.shape();
    let (h, w) = (shape[2], shape[3]);
    if rng.next_f64() >= transform_prob || h < 2 || w < 2 {
        return Ok(x.clone());
    }
    let scale = rng.uniform(0.75, 1.0);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, h - 1);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, w - 1);
    let off_h = rng.uniform_usize(h - nh + 1);
    let off_w = rng.uniform_usize(w - nw + 1);
    x.resize_nearest(nh, nw)?.pad_zero(h, w, off_h, off_w)
}

/// Per-sample L1 norms over trailing axes.
fn l1_per_sample(grad: &Array, batch: usize) -> Vec<f64> {
    let per = grad.numel() / batch;
    grad.data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v.abs()).sum())
        .collect()
}

/// Runs `spec` against a frozen model. The result stays within eps of `x`
/// in L-inf and inside [0, 1] elementwise, exactly.
pub fn run_attack(
    model: &dyn AttackModel,
    x: &Array,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut RngStream,
) -> Result<Array, AttackError> {
    spec.validate()?;
    let batch = check_batch(model, x, y)?;
    if spec.family.needs_images() && x.rank() != 4 {
        return Err(AttackError::NeedsImages {
            family: spec.family,
            rank: x.rank(),
        });
    }
    if let Some(&v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(AttackError::Labels {
            detail: format!("clean input value {v} outside [0, 1]"),
        });
    }

    let clean = x.data();
    let numel = x.numel();
    let per_sample = numel / batch;
    let mut delta = vec![0.0; numel];
    if spec.random_init && spec.eps > 0.0 {
        for d in delta.iter_mut() {
            *d = rng.uniform(-spec.eps, spec.eps);
        }
        project(&mut delta, clean, spec.eps);
    }
    let mut momentum = vec![0.0; numel];

    for _ in 0..spec.steps {
        let current: Vec<f64> = clean.iter().zip(&delta).map(|(c, d)| c + d).collect();
        let g = Graph::new();
        let xt = g.param(Array::from_vec(&x.shape(), current)?);
        let model_input = if spec.family == AttackFamily::Dim {
            dim_transform(&xt, spec.transform_prob, rng)?
        } else {
            xt.clone()
        };
        let logits = model.member_logits_t(&g, &model_input)?;
        let loss = build_loss(
            &g,
            &logits,
            y,
            spec,
            model.evidential_output(),
            model.n_classes(),
        )?;
        loss.backward()?;
        let mut grad = xt.grad().unwrap_or_else(|| Array::zeros(&x.shape()));
        if spec.family == AttackFamily::Tim {
            grad = tim_smooth(&grad, spec.kernel_size)?;
        }

        let direction: &[f64] = if spec.family == AttackFamily::Mim {
            let norms = l1_per_sample(&grad, batch);
            for (i, m) in momentum.iter_mut().enumerate() {
                let norm = norms[i / per_sample];
                let unit = if norm > 0.0 { grad.data()[i] / norm } else { 0.0 };
                *m = spec.momentum_decay * *m + unit;
            }
            &momentum
        } else {
            grad.data()
        };

        for (d, &v) in delta.iter_mut().zip(direction) {
            *d += spec.step_size * sign(v);
        }
        project(&mut delta, clean, spec.eps);
    }

    let out: Vec<f64> = clean
        .iter()
        .zip(&delta)
        .map(|(&c, &d)| assemble(c, d, spec.eps))
        .collect();
    Ok(Array::from_vec(&x.shape(), out)?)
}

/// c + d with the last rounding pulled back inside the ball and [0, 1]:
/// the sum can land one ulp past either bound even though d itself is in
/// range, so step toward c until both hold exactly.
fn assemble(c: f64, d: f64, eps: f64) -> f64 {
    let mut v = (c + d).clamp(0.0, 1.0);
    while (v - c).abs() > eps && v != c {
        v = if v > c {
            f64::from_bits(v.to_bits() - 1)
        } else {
            f64::from_bits(v.to_bits() + 1)
        };
    }
    v
}

/// Clamps delta into the eps ball, then shrinks it so x + delta lands in
/// [0, 1]. Both invariants hold exactly afterward.
fn project(delta: &mut [f64], clean: &[f64], eps: f64) {
    for (d, &c) in delta.iter_mut().zip(clean) {
        *d = d.clamp(-eps, eps);
        let moved = (c + *d).clamp(0.0, 1.0);
        *d = moved - c;
        // Rounding in (c + d) - c can leave |d| a hair over eps; pull it in.
        *d = d.clamp(-eps, eps);
    }
}
