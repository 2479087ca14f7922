//! Recording a model's forward pass on an [`autodiff::Graph`](crate::autodiff::Graph).
//!
//! Relevance propagation reads layer weights and activations; to
//! differentiate heatmaps those must be graph values. [`ParamVars`] holds the
//! graph handles of every linear layer of a batchnorm-free model, either as
//! constants (plain explanation) or as expressions of trainable leaves (heatmap
//! training, where fused convolution weights are functions of the original
//! convolution and batchnorm parameters).

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{maxpool2d, Tensor};

use super::forward::{conv_dims_of, ActivationTape};
use super::fuse::{avgpool_as_conv, fuse_model, FusedModel, Origin};
use super::model::{LayerKind, Model, NodeId};

/// Graph handles for one linear layer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub weight: Var,
    pub bias: Var,
    /// Bias value used inside relevance rules, where it is a constant.
    pub detached_bias: Tensor,
}

/// Per-node parameters of a batchnorm-free model (`None` for parameter-free nodes).
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<Option<LayerParams>>,
}

impl ParamVars {
    pub fn get(&self, id: NodeId) -> Result<&LayerParams> {
        self.layers[id]
            .as_ref()
            .ok_or_else(|| Error::State(format!("node {id} has no recorded parameters")))
    }

    /// Every weight and bias as a graph constant. `detached_bias_from`, if
    /// given, must have the same structure and supplies the bias values that
    /// relevance rules see.
    pub fn constants(g: &mut Graph, model: &Model, detached_bias_from: Option<&Model>) -> Result<Self> {
        if model.has_batchnorm() {
            return Err(Error::State(
                "relevance propagation needs a batchnorm-free model; fuse it first".into(),
            ));
        }
        let mut layers = Vec::with_capacity(model.len());
        for (id, n) in model.nodes().iter().enumerate() {
            layers.push(match &n.kind {
                LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                    let detached = match detached_bias_from {
                        Some(src) => linear_bias(src, id)?,
                        None => bias.clone(),
                    };
                    Some(LayerParams {
                        weight: g.constant(weight.clone()),
                        bias: g.constant(bias.clone()),
                        detached_bias: detached,
                    })
                }
                _ => None,
            });
        }
        Ok(Self { layers })
    }

    /// Trainable leaves for every parameter of `original` (slot = index in
    /// [`Model::params`]) and derived handles for each node of `fused`.
    pub fn trainable(
        g: &mut Graph,
        original: &Model,
        fused: &FusedModel,
        detached_bias_from: Option<&Model>,
    ) -> Result<Self> {
        let detached_src = detached_bias_from.map(fuse_model).transpose()?;
        let mut layers = Vec::with_capacity(fused.model.len());
        for (id, org) in fused.origin.iter().enumerate() {
            let detached = |g: &Graph, bias: Var| -> Result<Tensor> {
                match &detached_src {
                    Some(src) => linear_bias(&src.model, id),
                    None => Ok(g.value(bias).clone()),
                }
            };
            let entry = match *org {
                Origin::Node(old) => match &original.node(old).kind {
                    LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                        let base = original.param_base(old);
                        let w = g.param(weight.clone(), base);
                        let b = g.param(bias.clone(), base + 1);
                        let d = detached(g, b)?;
                        Some(LayerParams {
                            weight: w,
                            bias: b,
                            detached_bias: d,
                        })
                    }
                    LayerKind::BatchNorm(_) => {
                        return Err(Error::State(format!(
                            "batchnorm node {old} does not follow a convolution and cannot be fused"
                        )))
                    }
                    _ => None,
                },
                Origin::ConvBn { conv, bn } => {
                    let (LayerKind::Conv2d { weight, bias, .. }, LayerKind::BatchNorm(p)) =
                        (&original.node(conv).kind, &original.node(bn).kind)
                    else {
                        return Err(Error::State(format!("fusion record for node {id} is stale")));
                    };
                    let cb = original.param_base(conv);
                    let bb = original.param_base(bn);
                    let w = g.param(weight.clone(), cb);
                    let b = g.param(bias.clone(), cb + 1);
                    let gamma = g.param(p.scale.clone(), bb);
                    let beta = g.param(p.shift.clone(), bb + 1);
                    p.factor()?;
                    let inv = p.var.map(|v| 1.0 / (v + p.eps).sqrt());
                    let f = g.mul_const(gamma, Arc::new(inv));
                    let wf = g.mul_channel(w, f);
                    let centered = g.add_const(b, &p.mean.scale(-1.0));
                    let scaled = g.mul(centered, f);
                    let bf = g.add(scaled, beta);
                    let d = detached(g, bf)?;
                    Some(LayerParams {
                        weight: wf,
                        bias: bf,
                        detached_bias: d,
                    })
                }
            };
            layers.push(entry);
        }
        Ok(Self { layers })
    }
}

fn linear_bias(model: &Model, id: NodeId) -> Result<Tensor> {
    match model.nodes().get(id).map(|n| &n.kind) {
        Some(LayerKind::Dense { bias, .. }) | Some(LayerKind::Conv2d { bias, .. }) => Ok(bias.clone()),
        _ => Err(Error::State(format!(
            "detached-bias source has no linear layer at node {id}"
        ))),
    }
}

/// Graph handles for every node output of one sample.
#[derive(Clone, Debug)]
pub struct GraphActs {
    pub out: Vec<Var>,
    pub argmax: Vec<Option<Arc<Vec<usize>>>>,
}

impl GraphActs {
    /// Wraps a recorded tape as graph constants.
    pub fn from_tape(g: &mut Graph, model: &Model, tape: &ActivationTape) -> Result<Self> {
        tape.check_complete(model)?;
        let out = tape.outputs().iter().map(|t| g.constant(t.clone())).collect();
        let argmax = (0..model.len())
            .map(|id| tape.argmax(id).map(|a| Arc::new(a.indices.clone())))
            .collect();
        Ok(Self { out, argmax })
    }
}

/// The constant convolution weight equivalent to an average-pool node.
pub(crate) fn avgpool_weight(model: &Model, id: NodeId) -> Result<Tensor> {
    match model.node(id).kind {
        LayerKind::AvgPool { window, stride } => {
            let c = model.node(id).shape[0];
            match avgpool_as_conv(c, window, stride) {
                LayerKind::Conv2d { weight, .. } => Ok(weight),
                _ => unreachable!("avgpool_as_conv returns a convolution"),
            }
        }
        _ => Err(Error::Contract(format!("node {id} is not an average pool"))),
    }
}

pub(crate) fn avgpool_dims(model: &Model, id: NodeId) -> Result<crate::tensor::kernels::ConvDims> {
    let LayerKind::AvgPool { window, stride } = model.node(id).kind else {
        return Err(Error::Contract(format!("node {id} is not an average pool")));
    };
    let x = &model.node(model.node(id).inputs[0]).shape;
    crate::tensor::kernels::ConvDims::new(
        (x[0], x[1], x[2]),
        &[x[0], x[0], window, window],
        crate::tensor::ConvGeometry::new(stride, 0),
    )
}

/// Records the forward pass of a batchnorm-free `model` on input `x`.
pub fn forward_graph(g: &mut Graph, model: &Model, params: &ParamVars, x: Var) -> Result<GraphActs> {
    let mut out: Vec<Var> = Vec::with_capacity(model.len());
    let mut argmax = vec![None; model.len()];
    for (id, node) in model.nodes().iter().enumerate() {
        let a = |k: usize| out[node.inputs[k]];
        let y = match &node.kind {
            LayerKind::Input => x,
            LayerKind::Dense { .. } => {
                let p = params.get(id)?;
                let z = g.dense(p.weight, a(0));
                g.add(z, p.bias)
            }
            LayerKind::Conv2d { .. } => {
                let p = params.get(id)?;
                let z = g.conv(p.weight, a(0), conv_dims_of(model, id)?);
                g.add_channel(z, p.bias)
            }
            LayerKind::BatchNorm(_) => {
                return Err(Error::State(format!(
                    "batchnorm node {id} must be fused before recording"
                )))
            }
            LayerKind::Relu => g.relu(a(0)),
            LayerKind::MaxPool { window, stride } => {
                let (_, idx) = maxpool2d(g.value(a(0)), *window, *stride)?;
                let idx = Arc::new(idx.indices);
                argmax[id] = Some(idx.clone());
                g.gather(a(0), idx, &node.shape)
            }
            LayerKind::AvgPool { .. } => {
                let w = g.constant(avgpool_weight(model, id)?);
                g.conv(w, a(0), avgpool_dims(model, id)?)
            }
            LayerKind::Flatten => g.reshape(a(0), &node.shape),
            LayerKind::SumJunction => g.add(a(0), a(1)),
            LayerKind::Output => a(0),
        };
        if !g.value(y).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activation at node {id} ({})",
                node.kind.name()
            )));
        }
        out.push(y);
    }
    Ok(GraphActs { out, argmax })
}
