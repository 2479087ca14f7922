//! Relevance through a modified gradient pass.
//!
//! ReLU nets propagate `G = R / a` with ordinary linear adjoints and an
//! attenuated step `r / (r + ε)` at every ReLU; the heatmap is `G⁰ ⊙ X`.
//! Equal to the ε rule on ReLU-separated linear layers, and to
//! gradient × input at `ε = 0`.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::graph::record::{avgpool_dims, avgpool_weight, GraphActs, ParamVars};
use crate::graph::{
    attenuated_step, backward_sample, conv_dims_of, softmax, ActivationTape, LayerKind, Model, NodeId, ReluRule,
};
use crate::tensor::Tensor;

use super::engine::{self, capture_source, Linear, Propagated};
use super::explicit::lrp_zb_first_layer;
use super::rules::{ExplanationTarget, Heatmap, LrpRule};

/// Bound in the log-odds seed `ln(P+μ) − ln(1−P+μ)`.
pub const MU_ETA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardMode {
    Standard,
    Modified,
}

/// Per-explanation context of the modified pass.
#[derive(Clone, Debug)]
pub struct FlexState {
    mode: BackwardMode,
    pub eps: f64,
    pub mu_eta: f64,
    relu_outputs: Vec<Option<Tensor>>,
}

impl FlexState {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::Config(format!("flex ε must be ≥ 0, got {eps}")));
        }
        Ok(Self {
            mode: BackwardMode::Standard,
            eps,
            mu_eta: MU_ETA,
            relu_outputs: Vec::new(),
        })
    }

    pub fn mode(&self) -> BackwardMode {
        self.mode
    }

    /// Stores the ReLU outputs of `tape` and switches to the modified pass.
    pub fn enter(&mut self, model: &Model, tape: &ActivationTape) -> Result<()> {
        tape.check_complete(model)?;
        self.relu_outputs = model
            .nodes()
            .iter()
            .enumerate()
            .map(|(id, n)| matches!(n.kind, LayerKind::Relu).then(|| tape.output(id).clone()))
            .collect();
        self.mode = BackwardMode::Modified;
        Ok(())
    }

    /// Back to the standard pass; stored outputs are dropped.
    pub fn exit(&mut self) {
        self.relu_outputs.clear();
        self.mode = BackwardMode::Standard;
    }

    /// Rule the backward visitor must use in the current mode.
    pub fn relu_rule(&self) -> ReluRule {
        match self.mode {
            BackwardMode::Standard => ReluRule::UnitStep,
            BackwardMode::Modified => ReluRule::Attenuated(self.eps),
        }
    }

    /// Modified backward of ReLU node `id`.
    pub fn relu_backward(&self, id: NodeId, g_out: &Tensor) -> Result<Tensor> {
        if self.mode != BackwardMode::Modified {
            return Err(Error::State("modified ReLU backward outside modified mode".into()));
        }
        modified_relu_backward(g_out, self.relu_outputs.get(id).and_then(Option::as_ref), self.eps)
    }
}

/// `G_in = A(r) ⊙ G_out` with the stored ReLU output `r`.
pub fn modified_relu_backward(g_out: &Tensor, stored: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    let r = stored.ok_or_else(|| Error::State("no stored ReLU output for the modified backward".into()))?;
    g_out.zip_map(r, |g, r| g * attenuated_step(r, eps))
}

/// Gradient at the logits of the explained quantity.
pub fn flex_seed(logits: &Tensor, target: ExplanationTarget, mu_eta: f64) -> Result<Tensor> {
    let k = logits.len();
    target.check_classes(k)?;
    let onehot = |c: usize| {
        let mut t = Tensor::zeros(&[k]);
        t.data_mut()[c] = 1.0;
        t
    };
    match target {
        ExplanationTarget::Logit(c) => Ok(onehot(c)),
        ExplanationTarget::SoftmaxProb(c) | ExplanationTarget::SelectiveEta(c) => {
            let p = softmax(logits);
            let pc = p.data()[c];
            let dp = onehot(c).sub(&p)?.scale(pc);
            Ok(match target {
                ExplanationTarget::SelectiveEta(_) => dp.scale(1.0 / (pc + mu_eta) + 1.0 / (1.0 - pc + mu_eta)),
                _ => dp,
            })
        }
        other => Err(Error::Config(format!(
            "the flex engine cannot explain {}",
            other.tag()
        ))),
    }
}

/// The first linear layer, reading the image, and the ReLU right after it.
fn zb_splice_point(model: &Model) -> Result<(NodeId, NodeId)> {
    let first = model
        .first_linear()
        .ok_or_else(|| Error::Contract("no linear layer for the bounded first-layer rule".into()))?;
    if model.node(first).inputs[0] != 0 {
        return Err(Error::Contract("the first linear layer does not read the input".into()));
    }
    match model.consumers(first).as_slice() {
        [r] if matches!(model.node(*r).kind, LayerKind::Relu) => Ok((first, *r)),
        _ => Err(Error::Contract(
            "the bounded first-layer rule needs the first layer to feed a single ReLU".into(),
        )),
    }
}

/// Flex heatmaps for one sample: the input map first, then one per entry of
/// `capture` (relevance at that layer's input).
pub fn flex_explain(
    model: &Model,
    tape: &ActivationTape,
    target: ExplanationTarget,
    eps: f64,
    first_layer_zb: Option<LrpRule>,
    capture: &[NodeId],
) -> Result<Vec<Heatmap>> {
    let mut state = FlexState::new(eps)?;
    let result = run_modified(&mut state, model, tape, target, first_layer_zb, capture);
    state.exit();
    if state.mode() != BackwardMode::Standard {
        return Err(Error::Contract("flex explanation left the modified mode enabled".into()));
    }
    result
}

fn run_modified(
    state: &mut FlexState,
    model: &Model,
    tape: &ActivationTape,
    target: ExplanationTarget,
    first_layer_zb: Option<LrpRule>,
    capture: &[NodeId],
) -> Result<Vec<Heatmap>> {
    if model.has_batchnorm() {
        return Err(Error::State("flex heatmaps need a batchnorm-free model; fuse it first".into()));
    }
    let sources: Vec<NodeId> = capture.iter().map(|&l| capture_source(model, l)).collect::<Result<_>>()?;
    state.enter(model, tape)?;
    let seed = flex_seed(tape.output(model.output_id()), target, state.mu_eta)?;
    let pass = backward_sample(model, tape, &seed, state.relu_rule(), false)?;
    let relevance_at = |id: NodeId| -> Result<Tensor> {
        match pass.grad_at(id) {
            Some(g) => g.mul(tape.output(id)),
            None => Ok(Tensor::zeros(&model.node(id).shape)),
        }
    };
    let input = match first_layer_zb {
        None => relevance_at(0)?,
        Some(rule @ LrpRule::ZB { low, high, eps }) => {
            rule.validate()?;
            let (first, relu) = zb_splice_point(model)?;
            let r1 = relevance_at(relu)?;
            lrp_zb_first_layer(&model.node(first).kind, tape.input(), &r1, low, high, eps)?
        }
        Some(other) => return Err(Error::Config(format!("first-layer rule must be zB, got {other:?}"))),
    };
    input.ensure_finite("flex input relevance")?;
    let mut maps = vec![Heatmap {
        relevance: input,
        target,
        layer_id: 0,
    }];
    for (&layer, &src) in capture.iter().zip(&sources) {
        maps.push(Heatmap {
            relevance: relevance_at(src)?,
            target,
            layer_id: layer,
        });
    }
    Ok(maps)
}

fn seed_on_graph(g: &mut Graph, logits: Var, target: ExplanationTarget, mu_eta: f64) -> Result<Var> {
    let k = g.value(logits).len();
    target.check_classes(k)?;
    let mut onehot = Tensor::zeros(&[k]);
    match target {
        ExplanationTarget::Logit(c) => {
            onehot.data_mut()[c] = 1.0;
            Ok(g.constant(onehot))
        }
        ExplanationTarget::SoftmaxProb(c) | ExplanationTarget::SelectiveEta(c) => {
            onehot.data_mut()[c] = 1.0;
            let p = g.softmax(logits);
            let pc = g.index(p, c);
            let e = g.constant(onehot);
            let diff = g.sub(e, p);
            let dp = g.mul_scalar_var(diff, pc);
            if let ExplanationTarget::SoftmaxProb(_) = target {
                return Ok(dp);
            }
            let one = g.constant(Tensor::scalar(1.0));
            let lo = g.add_scalar(pc, mu_eta);
            let neg = g.neg(pc);
            let hi = g.add_scalar(neg, 1.0 + mu_eta);
            let a = g.div_scalar_var(one, lo);
            let b = g.div_scalar_var(one, hi);
            let k = g.add(a, b);
            Ok(g.mul_scalar_var(dp, k))
        }
        other => Err(Error::Config(format!("the flex engine cannot explain {}", other.tag()))),
    }
}

fn deposit(g: &mut Graph, grads: &mut [Option<Var>], node: NodeId, v: Var) {
    grads[node] = Some(match grads[node] {
        None => v,
        Some(prev) => g.add(prev, v),
    });
}

/// The flex procedure recorded on a graph, so heatmaps can be differentiated
/// with respect to the parameters in `params`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn flex_on_graph(
    g: &mut Graph,
    model: &Model,
    params: &ParamVars,
    acts: &GraphActs,
    target: ExplanationTarget,
    eps: f64,
    first_layer_zb: Option<LrpRule>,
    capture: &[NodeId],
) -> Result<Propagated> {
    if model.has_batchnorm() {
        return Err(Error::State("flex heatmaps need a batchnorm-free model; fuse it first".into()));
    }
    let sources: Vec<NodeId> = capture.iter().map(|&l| capture_source(model, l)).collect::<Result<_>>()?;
    let splice = match first_layer_zb {
        None => None,
        Some(rule @ LrpRule::ZB { .. }) => {
            rule.validate()?;
            Some((zb_splice_point(model)?, rule))
        }
        Some(other) => return Err(Error::Config(format!("first-layer rule must be zB, got {other:?}"))),
    };
    let out_id = model.output_id();
    let seed = seed_on_graph(g, acts.out[out_id], target, MU_ETA)?;
    let mut grads: Vec<Option<Var>> = vec![None; model.len()];
    grads[out_id] = Some(seed);
    let stop = splice.map_or(0, |((_, relu), _)| relu);
    for id in (stop + 1..model.len()).rev() {
        let Some(gv) = grads[id] else { continue };
        let node = model.node(id);
        let p0 = node.inputs[0];
        let in_shape = model.node(p0).shape.clone();
        let back = match &node.kind {
            LayerKind::Input => continue,
            LayerKind::Output => gv,
            LayerKind::Flatten => g.reshape(gv, &in_shape),
            LayerKind::Relu => {
                let r = acts.out[id];
                let den = g.add_scalar(r, eps);
                let att = g.safe_div(r, den);
                g.mul(att, gv)
            }
            LayerKind::Dense { .. } => {
                let w = params.get(id)?.weight;
                g.dense_t(w, gv, &in_shape)
            }
            LayerKind::Conv2d { .. } => {
                let w = params.get(id)?.weight;
                g.conv_t(w, gv, conv_dims_of(model, id)?)
            }
            LayerKind::AvgPool { .. } => {
                let w = g.constant(avgpool_weight(model, id)?);
                g.conv_t(w, gv, avgpool_dims(model, id)?)
            }
            LayerKind::MaxPool { .. } => {
                let idx: Arc<Vec<usize>> = acts.argmax[id]
                    .clone()
                    .ok_or_else(|| Error::State(format!("missing max-pool indices for node {id}")))?;
                g.scatter(gv, idx, &in_shape)
            }
            LayerKind::SumJunction => {
                deposit(g, &mut grads, node.inputs[1], gv);
                gv
            }
            LayerKind::BatchNorm(_) => unreachable!("excluded above"),
        };
        deposit(g, &mut grads, p0, back);
    }
    let relevance_at = |g: &mut Graph, id: NodeId| -> Var {
        match grads[id] {
            Some(gv) => g.mul(gv, acts.out[id]),
            None => g.constant(Tensor::zeros(&model.node(id).shape)),
        }
    };
    let input = match splice {
        None => relevance_at(g, 0),
        Some(((first, relu), LrpRule::ZB { low, high, eps })) => {
            let r1 = relevance_at(g, relu);
            let lin = Linear::for_node(g, model, params, first)?;
            engine::zb_step(g, &lin, acts.out[0], r1, low, high, eps)
        }
        Some(_) => unreachable!("validated above"),
    };
    g.value(input).ensure_finite("flex input relevance")?;
    let mut captured = Vec::with_capacity(capture.len());
    for (&layer, &src) in capture.iter().zip(&sources) {
        if src < stop {
            return Err(Error::Contract(format!(
                "capture layer {layer} lies below the bounded first-layer splice"
            )));
        }
        captured.push((layer, relevance_at(g, src)));
    }
    Ok(Propagated { input, captured })
}
