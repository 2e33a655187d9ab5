//! Shared-backbone ensembles with rank-p member factors.
//!
//! One weight tensor per layer is shared by every member; member m owns only
//! per-layer vectors r_t (input side) and s_t (output side), t < p, plus its
//! bias. A member's effective weight is W elementwise-scaled by sum_t r_t
//! s_t^T, which the forward pass never materializes: it computes
//! ((h * r_t) W) * s_t per rank and sums, so the cost stays one shared
//! matmul per rank.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind, CHECKPOINT_VERSION};
pub use forward::{BoundBaseline, BoundEnsemble, FactorGrads, GradientSet, MemberGrads};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::RngStream;
use crate::tensor::{Array, TensorError};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid configuration: {detail}")]
    Config { detail: String },
    #[error("member index {got} out of range for {members} members")]
    MemberIndex { got: usize, members: usize },
    #[error("inconsistent model: {detail}")]
    Inconsistent { detail: String },
    #[error("unsupported checkpoint version {got}, this build reads {supported}")]
    UnsupportedVersion { got: u32, supported: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

/// Network family plus its per-sample input geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Profile {
    Mlp {
        in_dim: usize,
        hidden: Vec<usize>,
    },
    ConvSmall {
        in_channels: usize,
        height: usize,
        width: usize,
        conv: Vec<ConvSpec>,
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub profile: Profile,
    pub n_classes: usize,
}

/// Shape of one layer in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Conv { in_c: usize, out_c: usize, k: usize },
    Dense { in_dim: usize, out_dim: usize },
}

impl LayerShape {
    /// (input-side factor length, output-side factor length).
    pub fn factor_dims(&self) -> (usize, usize) {
        match *self {
            LayerShape::Conv { in_c, out_c, .. } => (in_c, out_c),
            LayerShape::Dense { in_dim, out_dim } => (in_dim, out_dim),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Conv { in_c, out_c, k } => vec![out_c, in_c, k, k],
            LayerShape::Dense { in_dim, out_dim } => vec![in_dim, out_dim],
        }
    }
}

impl Architecture {
    /// Two hidden layers of 64 units, the default tabular profile.
    pub fn mlp(in_dim: usize, n_classes: usize) -> Self {
        Self {
            profile: Profile::Mlp {
                in_dim,
                hidden: vec![64, 64],
            },
            n_classes,
        }
    }

    /// Two small conv layers feeding an MLP head, for image inputs.
    pub fn conv_small(
        in_channels: usize,
        height: usize,
        width: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            profile: Profile::ConvSmall {
                in_channels,
                height,
                width,
                conv: vec![
                    ConvSpec {
                        out_channels: 8,
                        kernel: 3,
                    },
                    ConvSpec {
                        out_channels: 8,
                        kernel: 3,
                    },
                ],
                hidden: vec![64],
            },
            n_classes,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self.profile, Profile::ConvSmall { .. })
    }

    /// Per-sample input shape: `[d]` or `[c, h, w]`.
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.profile {
            Profile::Mlp { in_dim, .. } => vec![*in_dim],
            Profile::ConvSmall {
                in_channels,
                height,
                width,
                ..
            } => vec![*in_channels, *height, *width],
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.n_classes < 2 {
            return Err(EnsembleError::Config {
                detail: format!("need at least 2 classes, got {}", self.n_classes),
            });
        }
        match &self.profile {
            Profile::Mlp { in_dim, .. } if *in_dim == 0 => Err(EnsembleError::Config {
                detail: "mlp input dimension is zero".into(),
            }),
            Profile::ConvSmall {
                in_channels,
                height,
                width,
                conv,
                ..
            } => {
                if *in_channels == 0 || *height == 0 || *width == 0 {
                    return Err(EnsembleError::Config {
                        detail: "conv input geometry has a zero dimension".into(),
                    });
                }
                let (mut h, mut w) = (*height, *width);
                for spec in conv {
                    if spec.kernel == 0 || spec.kernel > h || spec.kernel > w || spec.out_channels == 0 {
                        return Err(EnsembleError::Config {
                            detail: format!(
                                "conv kernel {} does not fit {h}x{w} input",
                                spec.kernel
                            ),
                        });
                    }
                    h -= spec.kernel - 1;
                    w -= spec.kernel - 1;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Layers in execution order, conv stages first, flatten implied before
    /// the first dense layer of a conv profile.
    pub fn layer_plan(&self) -> Vec<LayerShape> {
        let mut plan = Vec::new();
        match &self.profile {
            Profile::Mlp { in_dim, hidden } => {
                let mut prev = *in_dim;
                for &h in hidden {
                    plan.push(LayerShape::Dense {
                        in_dim: prev,
                        out_dim: h,
                    });
                    prev = h;
                }
                plan.push(LayerShape::Dense {
                    in_dim: prev,
                    out_dim: self.n_classes,
                });
            }
            Profile::ConvSmall {
                in_channels,
                height,
                width,
                conv,
                hidden,
            } => {
                let (mut c, mut h, mut w) = (*in_channels, *height, *width);
                for spec in conv {
                    plan.push(LayerShape::Conv {
                        in_c: c,
                        out_c: spec.out_channels,
                        k: spec.kernel,
                    });
                    c = spec.out_channels;
                    h -= spec.kernel - 1;
                    w -= spec.kernel - 1;
                }
                let mut prev = c * h * w;
                for &hd in hidden {
                    plan.push(LayerShape::Dense {
                        in_dim: prev,
                        out_dim: hd,
                    });
                    prev = hd;
                }
                plan.push(LayerShape::Dense {
                    in_dim: prev,
                    out_dim: self.n_classes,
                });
            }
        }
        plan
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct BaselineLayer {
    pub(crate) weight: Array,
    pub(crate) bias: Array,
}

/// Conventional single-model network; the pretraining target and the
/// transfer-attack surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineNet {
    arch: Architecture,
    pub(crate) layers: Vec<BaselineLayer>,
}

impl BaselineNet {
    /// He-normal initialization sized from the layer plan.
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Result<Self, EnsembleError> {
        arch.validate()?;
        let mut layers = Vec::new();
        for shape in arch.layer_plan() {
            let ws = shape.weight_shape();
            let fan_in: usize = match shape {
                LayerShape::Conv { in_c, k, .. } => in_c * k * k,
                LayerShape::Dense { in_dim, .. } => in_dim,
            };
            let sigma = (2.0 / fan_in as f64).sqrt();
            let n: usize = ws.iter().product();
            let weight = Array::from_vec(&ws, rng.normal_vec(n, sigma))?;
            let bias = Array::zeros(&[shape.factor_dims().1]);
            layers.push(BaselineLayer { weight, bias });
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        self.arch.validate()?;
        let plan = self.arch.layer_plan();
        if plan.len() != self.layers.len() {
            return Err(EnsembleError::Inconsistent {
                detail: format!(
                    "architecture wants {} layers, found {}",
                    plan.len(),
                    self.layers.len()
                ),
            });
        }
        for (i, (shape, layer)) in plan.iter().zip(&self.layers).enumerate() {
            if layer.weight.shape() != shape.weight_shape().as_slice()
                || layer.bias.shape() != [shape.factor_dims().1]
            {
                return Err(EnsembleError::Inconsistent {
                    detail: format!("layer {i} arrays do not match the architecture"),
                });
            }
            if !layer.weight.all_finite() || !layer.bias.all_finite() {
                return Err(EnsembleError::Inconsistent {
                    detail: format!("layer {i} holds non-finite values"),
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Order-stable digest of every parameter bit.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0x9e37_79b9_7f4a_7c15u64;
        for l in &self.layers {
            h = h.rotate_left(9) ^ l.weight.fingerprint();
            h = h.rotate_left(9) ^ l.bias.fingerprint();
        }
        h
    }
}

/// Per-layer member parameters. `r[t]` scales layer input (length in_dim or
/// in_channels), `s[t]` scales layer output, `bias` replaces the shared bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberLayer {
    pub r: Vec<Array>,
    pub s: Vec<Array>,
    pub bias: Array,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberParams {
    pub layers: Vec<MemberLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleNet {
    arch: Architecture,
    rank: usize,
    pub(crate) shared: Vec<Array>,
    pub(crate) members: Vec<MemberParams>,
}

impl EnsembleNet {
    /// Wrap a pretrained baseline: shared weights are copied, every member
    /// bias starts at the baseline bias, and factors start at the identity
    /// (first rank column at 1, higher columns at 0) plus N(0, init_scale)
    /// noise. With `init_scale = 0` every member reproduces the baseline.
    pub fn init_from_pretrained(
        baseline: &BaselineNet,
        members: usize,
        rank: usize,
        init_scale: f64,
        rng: &mut RngStream,
    ) -> Result<Self, EnsembleError> {
        baseline.validate()?;
        if members == 0 {
            return Err(EnsembleError::Config {
                detail: "ensemble needs at least one member".into(),
            });
        }
        if rank == 0 {
            return Err(EnsembleError::Config {
                detail: "factor rank must be at least 1".into(),
            });
        }
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(EnsembleError::Config {
                detail: format!("init_scale must be finite and >= 0, got {init_scale}"),
            });
        }
        let plan = baseline.arch.layer_plan();
        let shared: Vec<Array> = baseline.layers.iter().map(|l| l.weight.clone()).collect();
        let mut member_params = Vec::with_capacity(members);
        for _ in 0..members {
            let mut layers = Vec::with_capacity(plan.len());
            for (shape, base) in plan.iter().zip(&baseline.layers) {
                let (din, dout) = shape.factor_dims();
                let mut r = Vec::with_capacity(rank);
                let mut s = Vec::with_capacity(rank);
                for t in 0..rank {
                    let center = if t == 0 { 1.0 } else { 0.0 };
                    let rv: Vec<f64> = rng
                        .normal_vec(din, init_scale)
                        .into_iter()
                        .map(|n| center + n)
                        .collect();
                    let sv: Vec<f64> = rng
                        .normal_vec(dout, init_scale)
                        .into_iter()
                        .map(|n| center + n)
                        .collect();
                    r.push(Array::from_vec(&[din], rv)?);
                    s.push(Array::from_vec(&[dout], sv)?);
                }
                layers.push(MemberLayer {
                    r,
                    s,
                    bias: base.bias.clone(),
                });
            }
            member_params.push(MemberParams { layers });
        }
        Ok(Self {
            arch: baseline.arch.clone(),
            rank,
            shared,
            members: member_params,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn n_layers(&self) -> usize {
        self.shared.len()
    }

    pub fn shared_weight(&self, layer: usize) -> &Array {
        &self.shared[layer]
    }

    pub fn shared_weight_mut(&mut self, layer: usize) -> &mut Array {
        &mut self.shared[layer]
    }

    pub fn member(&self, m: usize) -> &MemberParams {
        &self.members[m]
    }

    pub fn member_mut(&mut self, m: usize) -> &mut MemberParams {
        &mut self.members[m]
    }

    fn check_member(&self, m: usize) -> Result<(), EnsembleError> {
        if m >= self.members.len() {
            return Err(EnsembleError::MemberIndex {
                got: m,
                members: self.members.len(),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        self.arch.validate()?;
        let plan = self.arch.layer_plan();
        if plan.len() != self.shared.len() {
            return Err(EnsembleError::Inconsistent {
                detail: format!(
                    "architecture wants {} layers, found {} shared weights",
                    plan.len(),
                    self.shared.len()
                ),
            });
        }
        if self.rank == 0 || self.members.is_empty() {
            return Err(EnsembleError::Inconsistent {
                detail: "ensemble without members or with rank 0".into(),
            });
        }
        for (i, (shape, w)) in plan.iter().zip(&self.shared).enumerate() {
            if w.shape() != shape.weight_shape().as_slice() {
                return Err(EnsembleError::Inconsistent {
                    detail: format!("shared weight {i} does not match the architecture"),
                });
            }
        }
        for (m, member) in self.members.iter().enumerate() {
            if member.layers.len() != plan.len() {
                return Err(EnsembleError::Inconsistent {
                    detail: format!("member {m} has {} layers", member.layers.len()),
                });
            }
            for (i, (shape, layer)) in plan.iter().zip(&member.layers).enumerate() {
                let (din, dout) = shape.factor_dims();
                let rank_ok = layer.r.len() == self.rank && layer.s.len() == self.rank;
                let dims_ok = layer.r.iter().all(|v| v.shape() == [din])
                    && layer.s.iter().all(|v| v.shape() == [dout])
                    && layer.bias.shape() == [dout];
                if !rank_ok || !dims_ok {
                    return Err(EnsembleError::Inconsistent {
                        detail: format!("member {m} layer {i} factors are mis-shaped"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Shared parameters plus per-member factors and biases.
    pub fn param_count(&self) -> usize {
        let shared: usize = self.shared.iter().map(Array::numel).sum();
        let per_member: usize = self
            .arch
            .layer_plan()
            .iter()
            .map(|shape| {
                let (din, dout) = shape.factor_dims();
                self.rank * (din + dout) + dout
            })
            .sum();
        shared + self.members.len() * per_member
    }

    /// Effective per-layer weights of member `m`: the shared weight scaled
    /// elementwise by sum_t r_t s_t^T (input index picks r, output picks s).
    pub fn materialize_member(&self, m: usize) -> Result<Vec<Array>, EnsembleError> {
        self.check_member(m)?;
        let plan = self.arch.layer_plan();
        let mut out = Vec::with_capacity(plan.len());
        for (l, shape) in plan.iter().enumerate() {
            let w = &self.shared[l];
            let layer = &self.members[m].layers[l];
            let mut eff = w.clone();
            match *shape {
                LayerShape::Dense { in_dim, out_dim } => {
                    for i in 0..in_dim {
                        for j in 0..out_dim {
                            let mut f = 0.0;
                            for t in 0..self.rank {
                                f += layer.r[t].data()[i] * layer.s[t].data()[j];
                            }
                            eff.data_mut()[i * out_dim + j] *= f;
                        }
                    }
                }
                LayerShape::Conv { in_c, out_c, k } => {
                    for o in 0..out_c {
                        for i in 0..in_c {
                            let mut f = 0.0;
                            for t in 0..self.rank {
                                f += layer.r[t].data()[i] * layer.s[t].data()[o];
                            }
                            let base = (o * in_c + i) * k * k;
                            for e in 0..k * k {
                                eff.data_mut()[base + e] *= f;
                            }
                        }
                    }
                }
            }
            out.push(eff);
        }
        Ok(out)
    }

    /// Forward through the materialized weights of member `m` using plain
    /// loops; an independent reference for the factored forward.
    pub fn materialized_logits(&self, m: usize, x: &Array) -> Result<Array, EnsembleError> {
        let weights = self.materialize_member(m)?;
        let plan = self.arch.layer_plan();
        let batch = x.shape()[0];
        let mut h = x.clone();
        for (l, shape) in plan.iter().enumerate() {
            let last = l + 1 == plan.len();
            let bias = &self.members[m].layers[l].bias;
            match *shape {
                LayerShape::Dense { in_dim, out_dim } => {
                    let h_flat = if h.rank() == 2 {
                        h.clone()
                    } else {
                        h.reshaped(&[batch, in_dim])?
                    };
                    let mut out = vec![0.0; batch * out_dim];
                    for b in 0..batch {
                        for j in 0..out_dim {
                            let mut acc = 0.0;
                            for i in 0..in_dim {
                                acc += h_flat.data()[b * in_dim + i]
                                    * weights[l].data()[i * out_dim + j];
                            }
                            out[b * out_dim + j] = acc + bias.data()[j];
                        }
                    }
                    if !last {
                        for v in &mut out {
                            *v = v.max(0.0);
                        }
                    }
                    h = Array::from_vec(&[batch, out_dim], out)?;
                }
                LayerShape::Conv { in_c, out_c, k } => {
                    let (hh, ww) = (h.shape()[2], h.shape()[3]);
                    let (oh, ow) = (hh - k + 1, ww - k + 1);
                    let mut out = vec![0.0; batch * out_c * oh * ow];
                    for b in 0..batch {
                        for o in 0..out_c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut acc = 0.0;
                                    for i in 0..in_c {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                let xi = ((b * in_c + i) * hh + oy + ky) * ww
                                                    + ox
                                                    + kx;
                                                let wi = ((o * in_c + i) * k + ky) * k + kx;
                                                acc += h.data()[xi] * weights[l].data()[wi];
                                            }
                                        }
                                    }
                                    let v = acc + bias.data()[o];
                                    out[((b * out_c + o) * oh + oy) * ow + ox] =
                                        if last { v } else { v.max(0.0) };
                                }
                            }
                        }
                    }
                    h = Array::from_vec(&[batch, out_c, oh, ow], out)?;
                }
            }
        }
        Ok(h)
    }

    /// Flattened factor vectors (all ranks concatenated) for one layer, one
    /// per member. `input_side` picks the r family, otherwise s.
    pub fn factor_vectors(&self, layer: usize, input_side: bool) -> Vec<Vec<f64>> {
        self.members
            .iter()
            .map(|m| {
                let l = &m.layers[layer];
                let fam = if input_side { &l.r } else { &l.s };
                fam.iter().flat_map(|a| a.data().iter().copied()).collect()
            })
            .collect()
    }

    /// Smallest pairwise Euclidean distance between member factor bundles
    /// (all layers, both families, all ranks flattened per member).
    pub fn min_pairwise_factor_distance(&self) -> f64 {
        let flats: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| {
                m.layers
                    .iter()
                    .flat_map(|l| {
                        l.r.iter()
                            .chain(l.s.iter())
                            .flat_map(|a| a.data().iter().copied())
                    })
                    .collect()
            })
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..flats.len() {
            for j in i + 1..flats.len() {
                let d: f64 = flats[i]
                    .iter()
                    .zip(&flats[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        min
    }

    /// Order-stable digest of every parameter bit.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0x517c_c1b7_2722_0a95u64;
        for w in &self.shared {
            h = h.rotate_left(9) ^ w.fingerprint();
        }
        for m in &self.members {
            for l in &m.layers {
                for a in l.r.iter().chain(l.s.iter()) {
                    h = h.rotate_left(9) ^ a.fingerprint();
                }
                h = h.rotate_left(9) ^ l.bias.fingerprint();
            }
        }
        h
    }
}
