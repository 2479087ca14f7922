//! Eager relevance propagation on a recorded forward tape.
//!
//! The single-layer rules here and the whole-network [`propagate`] share the
//! graph-recorded implementation used for training, evaluated on constants.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::graph::record::{GraphActs, ParamVars};
use crate::graph::{ActivationTape, LayerKind, Model, NodeId};
use crate::tensor::kernels::ConvDims;
use crate::tensor::{ArgmaxIndices, Tensor};

use super::engine::{self, LinKind, Linear};
use super::rules::{ExplanationTarget, Heatmap, LrpRule, RulePolicy};

/// Graph constants for a single linear layer applied to `a`, with `r_out`
/// checked against the layer's output size.
fn constant_layer(g: &mut Graph, layer: &LayerKind, a: &Tensor, r_out: &Tensor) -> Result<(Linear, Var, Var)> {
    let (lin, out_len) = match layer {
        LayerKind::Dense { weight, bias } => {
            if weight.shape()[1] != a.len() {
                return Err(dim_err!(
                    "dense weight {:?} cannot read an input of {} elements",
                    weight.shape(),
                    a.len()
                ));
            }
            let lin = Linear {
                weight: g.constant(weight.clone()),
                bias: bias.clone(),
                kind: LinKind::Dense,
                in_shape: a.shape().to_vec(),
            };
            (lin, weight.shape()[0])
        }
        LayerKind::Conv2d { weight, bias, geom } => {
            let [c, h, w] = a.shape() else {
                return Err(dim_err!("conv input must be C×H×W, got {:?}", a.shape()));
            };
            let dims = ConvDims::new((*c, *h, *w), weight.shape(), *geom)?;
            let lin = Linear {
                weight: g.constant(weight.clone()),
                bias: bias.clone(),
                kind: LinKind::Conv(dims),
                in_shape: a.shape().to_vec(),
            };
            (lin, dims.out_len())
        }
        other => return Err(Error::Contract(format!("{} is not a linear layer", other.name()))),
    };
    if r_out.len() != out_len {
        return Err(dim_err!(
            "relevance of {} elements for a layer with {out_len} outputs",
            r_out.len()
        ));
    }
    let av = g.constant(a.clone());
    let shape: Vec<usize> = match lin.kind {
        LinKind::Dense => vec![out_len],
        LinKind::Conv(d) => vec![d.f, d.oh, d.ow],
    };
    let rv = g.constant(r_out.reshape(&shape)?);
    Ok((lin, av, rv))
}

fn finish(g: &Graph, v: Var, context: &str) -> Result<Tensor> {
    let t = g.value(v).clone();
    t.ensure_finite(context)?;
    Ok(t)
}

/// LRP-ε through one dense or convolutional layer.
pub fn lrp_epsilon_linear(layer: &LayerKind, a: &Tensor, r_out: &Tensor, eps: f64) -> Result<Tensor> {
    LrpRule::Epsilon(eps).validate()?;
    let mut g = Graph::new();
    let (lin, av, rv) = constant_layer(&mut g, layer, a, r_out)?;
    let v = engine::epsilon_step(&mut g, &lin, av, rv, eps);
    finish(&g, v, layer.name())
}

/// LRP-z⁺ through one layer; the general two-pass form is used when `a` has
/// negative entries.
pub fn lrp_zplus_linear(layer: &LayerKind, a: &Tensor, r_out: &Tensor, eps: f64) -> Result<Tensor> {
    LrpRule::ZPlus(eps).validate()?;
    let mut g = Graph::new();
    let (lin, av, rv) = constant_layer(&mut g, layer, a, r_out)?;
    let v = engine::zplus_step(&mut g, &lin, av, rv, eps)?;
    finish(&g, v, layer.name())
}

/// LRP-zB through the layer reading the image, for pixels bounded by `[low, high]`.
pub fn lrp_zb_first_layer(layer: &LayerKind, a: &Tensor, r_out: &Tensor, low: f64, high: f64, eps: f64) -> Result<Tensor> {
    LrpRule::ZB { low, high, eps }.validate()?;
    let mut g = Graph::new();
    let (lin, av, rv) = constant_layer(&mut g, layer, a, r_out)?;
    let v = engine::zb_step(&mut g, &lin, av, rv, low, high, eps);
    finish(&g, v, layer.name())
}

/// Winner-take-all routing of pooled relevance.
pub fn lrp_maxpool(indices: &ArgmaxIndices, r_out: &Tensor) -> Result<Tensor> {
    if r_out.shape() != indices.output_shape.as_slice() {
        return Err(Error::State(format!(
            "max-pool indices recorded for output {:?}, relevance has shape {:?}",
            indices.output_shape,
            r_out.shape()
        )));
    }
    let mut out = Tensor::zeros(&indices.input_shape);
    for (&i, &r) in indices.indices.iter().zip(r_out.data()) {
        out.data_mut()[i] += r;
    }
    Ok(out)
}

/// Splits junction relevance between its two operands.
pub fn lrp_sum_junction(a1: &Tensor, a2: &Tensor, r_out: &Tensor, rule: LrpRule) -> Result<(Tensor, Tensor)> {
    a1.check_same_shape(a2)?;
    a1.check_same_shape(r_out)?;
    rule.validate()?;
    let mut g = Graph::new();
    let (v1, v2, r) = (g.constant(a1.clone()), g.constant(a2.clone()), g.constant(r_out.clone()));
    let (o1, o2) = engine::sum_junction_step(&mut g, v1, v2, r, rule);
    Ok((finish(&g, o1, "junction")?, finish(&g, o2, "junction")?))
}

/// Relevance assigned at the logits for the logit and joint targets, or at
/// the last layer's input for the selective target.
pub fn init_relevance(model: &Model, tape: &ActivationTape, target: ExplanationTarget, policy: &RulePolicy) -> Result<Tensor> {
    target.check_classes(model.num_classes())?;
    let z = tape.output(model.output_id());
    match target {
        ExplanationTarget::Logit(c) => {
            let mut r = Tensor::zeros(z.shape());
            r.data_mut()[c] = z.data()[c];
            Ok(r)
        }
        ExplanationTarget::JointEpsilon => Ok(z.clone()),
        ExplanationTarget::JointZPlus => {
            let mut g = Graph::new();
            let params = ParamVars::constants(&mut g, model, None)?;
            let acts = GraphActs::from_tape(&mut g, model, tape)?;
            let last = model.last_layer();
            let lin = Linear::for_node(&mut g, model, &params, last)?;
            let (v, _) = engine::zplus_forward(&mut g, &lin, acts.out[model.node(last).inputs[0]]);
            Ok(g.value(v).clone())
        }
        ExplanationTarget::SelectiveEta(_) | ExplanationTarget::SoftmaxProb(_) => {
            let mut g = Graph::new();
            let params = ParamVars::constants(&mut g, model, None)?;
            let acts = GraphActs::from_tape(&mut g, model, tape)?;
            let v = engine::last_layer_relevance(&mut g, model, &params, &acts, target, policy)?;
            Ok(g.value(v).clone())
        }
    }
}

/// Explains one sample: the input-level heatmap first, then one heatmap per
/// entry of `capture` (relevance at that layer's input).
pub fn propagate(
    model: &Model,
    tape: &ActivationTape,
    target: ExplanationTarget,
    policy: &RulePolicy,
    capture: &[NodeId],
) -> Result<Vec<Heatmap>> {
    propagate_detached(model, tape, target, policy, capture, None)
}

/// [`propagate`] with the bias values inside the rules taken from
/// `detached_bias_from` (same structure as `model`).
pub fn propagate_detached(
    model: &Model,
    tape: &ActivationTape,
    target: ExplanationTarget,
    policy: &RulePolicy,
    capture: &[NodeId],
    detached_bias_from: Option<&Model>,
) -> Result<Vec<Heatmap>> {
    let mut g = Graph::new();
    let params = ParamVars::constants(&mut g, model, detached_bias_from)?;
    let acts = GraphActs::from_tape(&mut g, model, tape)?;
    let out = engine::propagate_on_graph(&mut g, model, &params, &acts, target, policy, capture)?;
    let mut maps = vec![Heatmap {
        relevance: g.value(out.input).clone(),
        target,
        layer_id: 0,
    }];
    for (layer, v) in out.captured {
        maps.push(Heatmap {
            relevance: g.value(v).clone(),
            target,
            layer_id: layer,
        });
    }
    Ok(maps)
}

/// The two joint maps of the dual scheme: ε-joint and z⁺-joint, each with its
/// default policy (bounded first layer switched by `zb`).
pub fn explain_dual(model: &Model, tape: &ActivationTape, zb: bool, capture: &[NodeId]) -> Result<(Vec<Heatmap>, Vec<Heatmap>)> {
    let pick = |t: ExplanationTarget| {
        let p = RulePolicy::for_target(t);
        if zb {
            p
        } else {
            p.without_zb()
        }
    };
    let eps = propagate(model, tape, ExplanationTarget::JointEpsilon, &pick(ExplanationTarget::JointEpsilon), capture)?;
    let zp = propagate(model, tape, ExplanationTarget::JointZPlus, &pick(ExplanationTarget::JointZPlus), capture)?;
    Ok((eps, zp))
}
