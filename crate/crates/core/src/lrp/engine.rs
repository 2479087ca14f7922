//! Relevance propagation recorded on an autodiff graph.
//!
//! Each rule is the four-step procedure: forward the layer input through a
//! (possibly modified) copy of the layer, divide the incoming relevance by
//! the stabilized result, pass the quotient back through the layer's
//! transpose, and multiply by the input. Biases enter as constants.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::graph::record::{avgpool_dims, avgpool_weight, GraphActs, ParamVars};
use crate::graph::{conv_dims_of, LayerKind, Model, NodeId};
use crate::tensor::kernels::{sign0, ConvDims};
use crate::tensor::Tensor;

use super::rules::{ExplanationTarget, LrpRule, RulePolicy};

#[derive(Clone, Copy, Debug)]
pub(crate) enum LinKind {
    Dense,
    Conv(ConvDims),
}

/// A linear layer as relevance rules see it.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: Var,
    pub bias: Tensor,
    pub kind: LinKind,
    pub in_shape: Vec<usize>,
}

impl Linear {
    pub fn fwd(&self, g: &mut Graph, w: Var, x: Var) -> Var {
        match self.kind {
            LinKind::Dense => g.dense(w, x),
            LinKind::Conv(d) => g.conv(w, x, d),
        }
    }

    pub fn adj(&self, g: &mut Graph, w: Var, s: Var) -> Var {
        match self.kind {
            LinKind::Dense => g.dense_t(w, s, &self.in_shape),
            LinKind::Conv(d) => g.conv_t(w, s, d),
        }
    }

    /// `z + b` with the bias broadcast over the output (per channel for convs).
    pub fn add_bias(&self, g: &mut Graph, z: Var, bias: &Tensor) -> Var {
        let b = broadcast_bias(g.value(z).shape(), bias);
        g.add_const(z, &b)
    }

    pub fn for_node(g: &mut Graph, model: &Model, params: &ParamVars, id: NodeId) -> Result<Self> {
        let in_shape = model.node(model.node(id).inputs[0]).shape.clone();
        match &model.node(id).kind {
            LayerKind::Dense { .. } => {
                let p = params.get(id)?;
                Ok(Self {
                    weight: p.weight,
                    bias: p.detached_bias.clone(),
                    kind: LinKind::Dense,
                    in_shape,
                })
            }
            LayerKind::Conv2d { .. } => {
                let p = params.get(id)?;
                Ok(Self {
                    weight: p.weight,
                    bias: p.detached_bias.clone(),
                    kind: LinKind::Conv(conv_dims_of(model, id)?),
                    in_shape,
                })
            }
            LayerKind::AvgPool { .. } => {
                let w = g.constant(avgpool_weight(model, id)?);
                Ok(Self {
                    weight: w,
                    bias: Tensor::zeros(&[in_shape[0]]),
                    kind: LinKind::Conv(avgpool_dims(model, id)?),
                    in_shape,
                })
            }
            other => Err(Error::Contract(format!(
                "node {id} ({}) is not a linear layer",
                other.name()
            ))),
        }
    }
}

fn broadcast_bias(out_shape: &[usize], bias: &Tensor) -> Tensor {
    let n: usize = out_shape.iter().product();
    let plane = n / bias.len();
    let data = bias
        .data()
        .iter()
        .flat_map(|&b| std::iter::repeat_n(b, plane))
        .collect();
    Tensor::new(out_shape.to_vec(), data).expect("bias broadcast preserves element count")
}

/// `z + ε·sign(z)`, the sign taken from the current value (a constant).
fn stabilize(g: &mut Graph, z: Var, eps: f64) -> Var {
    if eps == 0.0 {
        return z;
    }
    let shift = g.value(z).map(|v| eps * sign0(v));
    g.add_const(z, &shift)
}

pub(crate) fn epsilon_step(g: &mut Graph, lin: &Linear, a: Var, r: Var, eps: f64) -> Var {
    let z = lin.fwd(g, lin.weight, a);
    let z = lin.add_bias(g, z, &lin.bias);
    let den = stabilize(g, z, eps);
    let s = g.safe_div(r, den);
    let c = lin.adj(g, lin.weight, s);
    g.mul(a, c)
}

/// LRP-0 at a layer whose output relevance equals `mask ⊙ z`: the quotient
/// `R/z` is exactly the mask, so it is used directly.
pub(crate) fn masked_zero_step(g: &mut Graph, lin: &Linear, a: Var, mask: Tensor) -> Var {
    let s = g.constant(mask);
    let c = lin.adj(g, lin.weight, s);
    g.mul(a, c)
}

/// Positive pre-activation mass `Σ_j (w a)⁺ + b⁺` of every output unit.
pub(crate) fn zplus_forward(g: &mut Graph, lin: &Linear, a: Var) -> (Var, Option<(Var, Var, Var, Var)>) {
    let bpos = lin.bias.map(|b| b.max(0.0));
    let wp = g.relu(lin.weight);
    if g.value(a).min() >= 0.0 {
        let z = lin.fwd(g, wp, a);
        (lin.add_bias(g, z, &bpos), None)
    } else {
        let wn = g.neg_part(lin.weight);
        let ap = g.relu(a);
        let an = g.neg_part(a);
        let zp = lin.fwd(g, wp, ap);
        let zn = lin.fwd(g, wn, an);
        let z = g.add(zp, zn);
        (lin.add_bias(g, z, &bpos), Some((wp, wn, ap, an)))
    }
}

pub(crate) fn zplus_step(g: &mut Graph, lin: &Linear, a: Var, r: Var, eps: f64) -> Result<Var> {
    if g.value(r).min() < 0.0 {
        return Err(Error::Contract(
            "z⁺ rule received negative relevance".into(),
        ));
    }
    let (z, general) = zplus_forward(g, lin, a);
    let den = g.add_scalar(z, eps);
    let s = g.safe_div(r, den);
    Ok(match general {
        None => {
            let wp = g.relu(lin.weight);
            let c = lin.adj(g, wp, s);
            g.mul(a, c)
        }
        Some((wp, wn, ap, an)) => {
            let cp = lin.adj(g, wp, s);
            let cn = lin.adj(g, wn, s);
            let rp = g.mul(ap, cp);
            let rn = g.mul(an, cn);
            g.add(rp, rn)
        }
    })
}

pub(crate) fn zb_step(g: &mut Graph, lin: &Linear, x: Var, r: Var, low: f64, high: f64, eps: f64) -> Var {
    let shape = lin.in_shape.clone();
    let lo = Arc::new(Tensor::full(&shape, low));
    let hi = Arc::new(Tensor::full(&shape, high));
    let wp = g.relu(lin.weight);
    let wn = g.neg_part(lin.weight);
    let lo_v = g.constant((*lo).clone());
    let hi_v = g.constant((*hi).clone());
    let z = lin.fwd(g, lin.weight, x);
    let zl = lin.fwd(g, wp, lo_v);
    let zh = lin.fwd(g, wn, hi_v);
    let z = g.sub(z, zl);
    let z = g.sub(z, zh);
    let den = stabilize(g, z, eps);
    let s = g.safe_div(r, den);
    let c = lin.adj(g, lin.weight, s);
    let cp = lin.adj(g, wp, s);
    let cn = lin.adj(g, wn, s);
    let rx = g.mul(x, c);
    let rl = g.mul_const(cp, lo);
    let rh = g.mul_const(cn, hi);
    let out = g.sub(rx, rl);
    g.sub(out, rh)
}

pub(crate) fn sum_junction_step(g: &mut Graph, a1: Var, a2: Var, r: Var, rule: LrpRule) -> (Var, Var) {
    match rule {
        LrpRule::ZPlus(eps) => {
            let p1 = g.relu(a1);
            let p2 = g.relu(a2);
            let z = g.add(p1, p2);
            let den = g.add_scalar(z, eps);
            let s = g.safe_div(r, den);
            (g.mul(p1, s), g.mul(p2, s))
        }
        LrpRule::Epsilon(eps) | LrpRule::ZB { eps, .. } => {
            let z = g.add(a1, a2);
            let den = stabilize(g, z, eps);
            let s = g.safe_div(r, den);
            (g.mul(a1, s), g.mul(a2, s))
        }
    }
}

/// Class-difference layer for the selective target: builds
/// `z_{c,k} = z_c − z_k` from the last layer, assigns the bounded relevance,
/// and runs the ε procedure back to the last layer's input.
pub(crate) fn selective_step(g: &mut Graph, lin: &Linear, a: Var, c: usize, eps: f64, mu: f64) -> Result<Var> {
    if !matches!(lin.kind, LinKind::Dense) {
        return Err(Error::Contract("the selective target needs a dense last layer".into()));
    }
    let z = lin.fwd(g, lin.weight, a);
    let z = lin.add_bias(g, z, &lin.bias);
    let k = g.value(z).len();
    let zc = g.index(z, c);
    let ones = g.constant(Tensor::full(&[k], 1.0));
    let zc_vec = g.mul_scalar_var(ones, zc);
    let zdiff = g.sub(zc_vec, z);
    let r = g.selective_relevance(zdiff, c, mu);
    let den = stabilize(g, zdiff, eps);
    let s = g.safe_div(r, den);
    let total = g.sum(s);
    let wc = g.row(lin.weight, c);
    let t1 = g.mul_scalar_var(wc, total);
    let t1 = g.reshape(t1, &lin.in_shape);
    let t2 = lin.adj(g, lin.weight, s);
    let cvec = g.sub(t1, t2);
    Ok(g.mul(a, cvec))
}

pub(crate) struct Propagated {
    pub input: Var,
    pub captured: Vec<(NodeId, Var)>,
}

fn deposit(g: &mut Graph, rel: &mut [Option<Var>], node: NodeId, r: Var) {
    rel[node] = Some(match rel[node] {
        None => r,
        Some(prev) => g.add(prev, r),
    });
}

fn check_finite(g: &Graph, v: Var, model: &Model, id: NodeId) -> Result<()> {
    g.value(v)
        .ensure_finite(&format!("relevance at node {id} ({})", model.node(id).kind.name()))
}

/// Capture points must read a single predecessor; returns that predecessor.
pub(crate) fn capture_source(model: &Model, layer: NodeId) -> Result<NodeId> {
    if layer == 0 {
        return Ok(0);
    }
    if layer >= model.len() {
        return Err(Error::Contract(format!("capture layer {layer} does not exist")));
    }
    model
        .predecessor(layer)
        .ok_or_else(|| Error::Contract(format!("capture layer {layer} has no single input")))
}

/// Relevance at the last layer's input for `target`.
pub(crate) fn last_layer_relevance(
    g: &mut Graph,
    model: &Model,
    params: &ParamVars,
    acts: &GraphActs,
    target: ExplanationTarget,
    policy: &RulePolicy,
) -> Result<Var> {
    let last = model.last_layer();
    let lin = Linear::for_node(g, model, params, last)?;
    let a = acts.out[model.node(last).inputs[0]];
    let k = model.num_classes();
    let mask_step = |g: &mut Graph, mask: Tensor| -> Var {
        if policy.output_epsilon == 0.0 {
            masked_zero_step(g, &lin, a, mask)
        } else {
            let z = lin.fwd(g, lin.weight, a);
            let z = lin.add_bias(g, z, &lin.bias);
            let r = g.mul_const(z, Arc::new(mask));
            epsilon_step(g, &lin, a, r, policy.output_epsilon)
        }
    };
    match target {
        ExplanationTarget::Logit(c) => {
            let mut mask = Tensor::zeros(&[k]);
            mask.data_mut()[c] = 1.0;
            Ok(mask_step(g, mask))
        }
        ExplanationTarget::JointEpsilon => Ok(mask_step(g, Tensor::full(&[k], 1.0))),
        ExplanationTarget::JointZPlus => {
            let eps = match policy.hidden {
                LrpRule::ZPlus(e) => e,
                _ => super::rules::DEFAULT_EPSILON,
            };
            let (r, _) = zplus_forward(g, &lin, a);
            zplus_step(g, &lin, a, r, eps)
        }
        ExplanationTarget::SelectiveEta(c) => {
            selective_step(g, &lin, a, c, policy.selective_epsilon, policy.selective_mu)
        }
        ExplanationTarget::SoftmaxProb(_) => Err(Error::Config(
            "the softmax-probability target is only available in the flex engine".into(),
        )),
    }
}

/// Full propagation from the logits to the input, collecting relevance at
/// the inputs of `capture` layers.
pub(crate) fn propagate_on_graph(
    g: &mut Graph,
    model: &Model,
    params: &ParamVars,
    acts: &GraphActs,
    target: ExplanationTarget,
    policy: &RulePolicy,
    capture: &[NodeId],
) -> Result<Propagated> {
    policy.validate()?;
    target.check_classes(model.num_classes())?;
    if model.has_batchnorm() {
        return Err(Error::State(
            "unfused batchnorm in relevance propagation; fuse the model first".into(),
        ));
    }
    let sources: Vec<NodeId> = capture
        .iter()
        .map(|&l| capture_source(model, l))
        .collect::<Result<_>>()?;
    let last = model.last_layer();
    if !model.node(last).kind.is_linear() {
        return Err(Error::Contract(format!(
            "the logits must come from a dense or conv layer, found {}",
            model.node(last).kind.name()
        )));
    }
    let first = model.first_linear();
    let mut rel: Vec<Option<Var>> = vec![None; model.len()];
    let r_last = last_layer_relevance(g, model, params, acts, target, policy)?;
    check_finite(g, r_last, model, last)?;
    deposit(g, &mut rel, model.node(last).inputs[0], r_last);

    for id in (1..last).rev() {
        let Some(r) = rel[id] else { continue };
        let node = model.node(id);
        let p0 = node.inputs[0];
        let a = acts.out[p0];
        match &node.kind {
            LayerKind::Relu | LayerKind::Output => deposit(g, &mut rel, p0, r),
            LayerKind::Flatten => {
                let shape = model.node(p0).shape.clone();
                let v = g.reshape(r, &shape);
                deposit(g, &mut rel, p0, v);
            }
            LayerKind::MaxPool { .. } => {
                let idx = acts.argmax[id]
                    .clone()
                    .ok_or_else(|| Error::State(format!("missing max-pool indices for node {id}")))?;
                let shape = model.node(p0).shape.clone();
                let v = g.scatter(r, idx, &shape);
                deposit(g, &mut rel, p0, v);
            }
            LayerKind::SumJunction => {
                let a2 = acts.out[node.inputs[1]];
                let (r1, r2) = sum_junction_step(g, a, a2, r, policy.hidden);
                deposit(g, &mut rel, p0, r1);
                deposit(g, &mut rel, node.inputs[1], r2);
            }
            LayerKind::AvgPool { .. } => {
                let lin = Linear::for_node(g, model, params, id)?;
                let v = match policy.hidden {
                    LrpRule::ZPlus(eps) => zplus_step(g, &lin, a, r, eps)?,
                    _ => epsilon_step(g, &lin, a, r, 0.0),
                };
                check_finite(g, v, model, id)?;
                deposit(g, &mut rel, p0, v);
            }
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                let lin = Linear::for_node(g, model, params, id)?;
                let rule = match policy.first_layer {
                    Some(zb) if Some(id) == first && p0 == 0 => zb,
                    _ => policy.hidden,
                };
                let v = match rule {
                    LrpRule::Epsilon(eps) => epsilon_step(g, &lin, a, r, eps),
                    LrpRule::ZPlus(eps) => zplus_step(g, &lin, a, r, eps)?,
                    LrpRule::ZB { low, high, eps } => zb_step(g, &lin, a, r, low, high, eps),
                };
                check_finite(g, v, model, id)?;
                deposit(g, &mut rel, p0, v);
            }
            LayerKind::BatchNorm(_) | LayerKind::Input => unreachable!("excluded above"),
        }
    }
    let zero = |g: &mut Graph, id: NodeId| g.constant(Tensor::zeros(&model.node(id).shape));
    let input = match rel[0] {
        Some(v) => v,
        None => zero(g, 0),
    };
    let mut captured = Vec::with_capacity(capture.len());
    for (&layer, &src) in capture.iter().zip(&sources) {
        let v = match rel[src] {
            Some(v) => v,
            None => zero(g, src),
        };
        captured.push((layer, v));
    }
    Ok(Propagated { input, captured })
}
