//! Tape-bound forward passes for the baseline and the factored ensemble.
//!
//! Binding records every parameter on a graph (as `param` leaves when
//! trainable, constants otherwise); the bound structs then build forwards on
//! that graph. The grouped ensemble forward concatenates member batches so
//! each (layer, rank) pair costs one shared matmul, and because every op
//! involved treats rows independently it reproduces the per-member forward
//! bit for bit.

use super::{Architecture, BaselineNet, EnsembleNet, LayerShape};
use crate::tensor::{Array, Graph, Tensor, TensorError};

pub struct BoundBaseline {
    plan: Vec<LayerShape>,
    input_shape: Vec<usize>,
    layers: Vec<(Tensor, Tensor)>,
}

fn check_batch_input(
    op: &'static str,
    x: &Tensor,
    per_sample: &[usize],
) -> Result<usize, TensorError> {
    let shape = x.shape();
    let ok = shape.len() == per_sample.len() + 1 && shape[1..] == *per_sample;
    if !ok {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("input shape {shape:?} does not extend per-sample shape {per_sample:?}"),
        });
    }
    Ok(shape[0])
}

impl BaselineNet {
    /// Record this network's parameters on `graph`.
    pub fn bind(&self, graph: &Graph, trainable: bool) -> BoundBaseline {
        let record = |a: &Array| {
            if trainable {
                graph.param(a.clone())
            } else {
                graph.constant(a.clone())
            }
        };
        BoundBaseline {
            plan: self.arch().layer_plan(),
            input_shape: self.arch().input_shape(),
            layers: self
                .layers
                .iter()
                .map(|l| (record(&l.weight), record(&l.bias)))
                .collect(),
        }
    }

    /// Logits for a batch without keeping a tape around.
    pub fn logits(&self, x: &Array) -> Result<Array, TensorError> {
        let graph = Graph::new();
        let bound = self.bind(&graph, false);
        let xt = graph.constant(x.clone());
        Ok(bound.forward(&xt)?.value())
    }
}

impl BoundBaseline {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let batch = check_batch_input("baseline_forward", x, &self.input_shape)?;
        let mut h = x.clone();
        for (l, shape) in self.plan.iter().enumerate() {
            let last = l + 1 == self.plan.len();
            let (w, b) = &self.layers[l];
            h = match *shape {
                LayerShape::Conv { .. } => h.conv2d(w)?.channelwise_add(b)?,
                LayerShape::Dense { in_dim, .. } => {
                    if h.shape().len() != 2 {
                        h = h.reshape(&[batch, in_dim])?;
                    }
                    h.matmul(w)?.rowwise_add(b)?
                }
            };
            if !last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Parameter gradients per layer as (weight, bias), zeros when a sweep
    /// never reached a leaf.
    pub fn collect_grads(&self) -> Vec<(Array, Array)> {
        self.layers
            .iter()
            .map(|(w, b)| {
                let gw = w.grad().unwrap_or_else(|| Array::zeros(&w.shape()));
                let gb = b.grad().unwrap_or_else(|| Array::zeros(&b.shape()));
                (gw, gb)
            })
            .collect()
    }
}

struct BoundMemberLayer {
    r: Vec<Tensor>,
    s: Vec<Tensor>,
    bias: Tensor,
}

pub struct BoundEnsemble {
    arch: Architecture,
    plan: Vec<LayerShape>,
    rank: usize,
    shared: Vec<Tensor>,
    members: Vec<Vec<BoundMemberLayer>>,
}

/// Gradients for one member layer, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct FactorGrads {
    pub r: Vec<Array>,
    pub s: Vec<Array>,
    pub bias: Array,
}

#[derive(Debug, Clone)]
pub struct MemberGrads {
    pub layers: Vec<FactorGrads>,
}

/// Harvested gradients, partitioned the same way the parameters are: the
/// shared backbone on one side, member factors and biases on the other.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub shared: Vec<Array>,
    pub members: Vec<MemberGrads>,
}

impl EnsembleNet {
    /// Record all parameters on `graph`. When `trainable` is false the whole
    /// network enters as constants, which is the right mode for attack
    /// generation: input gradients flow, parameters stay fixed.
    pub fn bind(&self, graph: &Graph, trainable: bool) -> BoundEnsemble {
        let record = |a: &Array| {
            if trainable {
                graph.param(a.clone())
            } else {
                graph.constant(a.clone())
            }
        };
        BoundEnsemble {
            arch: self.arch().clone(),
            plan: self.arch().layer_plan(),
            rank: self.rank(),
            shared: self.shared.iter().map(&record).collect(),
            members: self
                .members
                .iter()
                .map(|m| {
                    m.layers
                        .iter()
                        .map(|l| BoundMemberLayer {
                            r: l.r.iter().map(&record).collect(),
                            s: l.s.iter().map(&record).collect(),
                            bias: record(&l.bias),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Per-member logits for a batch, no tape retained.
    pub fn all_member_logits(&self, x: &Array) -> Result<Vec<Array>, TensorError> {
        let graph = Graph::new();
        let bound = self.bind(&graph, false);
        let xt = graph.constant(x.clone());
        let outs = bound.grouped_forward(&xt)?;
        Ok(outs.into_iter().map(|t| t.value()).collect())
    }
}

impl BoundEnsemble {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    fn member_layer_apply(
        &self,
        h: &Tensor,
        layer: usize,
        member: usize,
        batch: usize,
        last: bool,
    ) -> Result<Tensor, TensorError> {
        let shape = self.plan[layer];
        let w = &self.shared[layer];
        let ml = &self.members[member][layer];
        let mut h = h.clone();
        let mut acc: Option<Tensor> = None;
        match shape {
            LayerShape::Dense { in_dim, .. } => {
                if h.shape().len() != 2 {
                    h = h.reshape(&[batch, in_dim])?;
                }
                for t in 0..self.rank {
                    let contrib = h
                        .rowwise_mul(&ml.r[t])?
                        .matmul(w)?
                        .rowwise_mul(&ml.s[t])?;
                    acc = Some(match acc {
                        Some(a) => a.add(&contrib)?,
                        None => contrib,
                    });
                }
                let out = acc.expect("rank >= 1").rowwise_add(&ml.bias)?;
                if last {
                    Ok(out)
                } else {
                    out.relu()
                }
            }
            LayerShape::Conv { .. } => {
                for t in 0..self.rank {
                    let contrib = h
                        .channelwise_mul(&ml.r[t])?
                        .conv2d(w)?
                        .channelwise_mul(&ml.s[t])?;
                    acc = Some(match acc {
                        Some(a) => a.add(&contrib)?,
                        None => contrib,
                    });
                }
                let out = acc.expect("rank >= 1").channelwise_add(&ml.bias)?;
                if last {
                    Ok(out)
                } else {
                    out.relu()
                }
            }
        }
    }

    /// Logits of a single member: per layer, sum over ranks of
    /// (h * r_t) W * s_t, then the member bias.
    pub fn member_forward(&self, member: usize, x: &Tensor) -> Result<Tensor, TensorError> {
        let batch = check_batch_input("member_forward", x, &self.arch.input_shape())?;
        let mut h = x.clone();
        for layer in 0..self.plan.len() {
            let last = layer + 1 == self.plan.len();
            h = self.member_layer_apply(&h, layer, member, batch, last)?;
        }
        Ok(h)
    }

    /// Logits of every member with one shared matmul (or convolution) per
    /// (layer, rank): member batches are concatenated along rows, pushed
    /// through the shared weight together, and sliced apart again.
    pub fn grouped_forward(&self, x: &Tensor) -> Result<Vec<Tensor>, TensorError> {
        let batch = check_batch_input("grouped_forward", x, &self.arch.input_shape())?;
        let m_count = self.members.len();
        let mut blocks: Vec<Tensor> = vec![x.clone(); m_count];
        for (layer, shape) in self.plan.iter().enumerate() {
            let last = layer + 1 == self.plan.len();
            let mut acc: Vec<Option<Tensor>> = vec![None; m_count];
            match *shape {
                LayerShape::Dense { in_dim, .. } => {
                    for b in blocks.iter_mut() {
                        if b.shape().len() != 2 {
                            *b = b.reshape(&[batch, in_dim])?;
                        }
                    }
                    for t in 0..self.rank {
                        let scaled: Vec<Tensor> = blocks
                            .iter()
                            .enumerate()
                            .map(|(m, h)| h.rowwise_mul(&self.members[m][layer].r[t]))
                            .collect::<Result<_, _>>()?;
                        let joint = Tensor::concat_rows(&scaled)?.matmul(&self.shared[layer])?;
                        for m in 0..m_count {
                            let part = joint
                                .slice_rows(m * batch, batch)?
                                .rowwise_mul(&self.members[m][layer].s[t])?;
                            acc[m] = Some(match acc[m].take() {
                                Some(a) => a.add(&part)?,
                                None => part,
                            });
                        }
                    }
                    for m in 0..m_count {
                        let out = acc[m]
                            .take()
                            .expect("rank >= 1")
                            .rowwise_add(&self.members[m][layer].bias)?;
                        blocks[m] = if last { out } else { out.relu()? };
                    }
                }
                LayerShape::Conv { .. } => {
                    for t in 0..self.rank {
                        let scaled: Vec<Tensor> = blocks
                            .iter()
                            .enumerate()
                            .map(|(m, h)| h.channelwise_mul(&self.members[m][layer].r[t]))
                            .collect::<Result<_, _>>()?;
                        let joint = Tensor::concat_rows(&scaled)?.conv2d(&self.shared[layer])?;
                        for m in 0..m_count {
                            let part = joint
                                .slice_rows(m * batch, batch)?
                                .channelwise_mul(&self.members[m][layer].s[t])?;
                            acc[m] = Some(match acc[m].take() {
                                Some(a) => a.add(&part)?,
                                None => part,
                            });
                        }
                    }
                    for m in 0..m_count {
                        let out = acc[m]
                            .take()
                            .expect("rank >= 1")
                            .channelwise_add(&self.members[m][layer].bias)?;
                        blocks[m] = if last { out } else { out.relu()? };
                    }
                }
            }
        }
        Ok(blocks)
    }

    /// Harvest accumulated gradients into parameter-shaped arrays. Leaves a
    /// sweep never reached come back as zeros.
    pub fn collect_grads(&self) -> GradientSet {
        let take = |t: &Tensor| t.grad().unwrap_or_else(|| Array::zeros(&t.shape()));
        GradientSet {
            shared: self.shared.iter().map(&take).collect(),
            members: self
                .members
                .iter()
                .map(|layers| MemberGrads {
                    layers: layers
                        .iter()
                        .map(|l| FactorGrads {
                            r: l.r.iter().map(&take).collect(),
                            s: l.s.iter().map(&take).collect(),
                            bias: take(&l.bias),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}
