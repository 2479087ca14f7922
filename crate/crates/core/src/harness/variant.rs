//! Training variants and the heatmaps each one supervises.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ActivationTape, Model, NodeId};
use crate::lrp::{self, ExplanationTarget, Heatmap, LrpRule, RulePolicy, DEFAULT_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    Standard,
    Original,
    Dual,
    Selective,
    Stochastic,
    SoftmaxGradInput,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Standard,
        VariantKind::Original,
        VariantKind::Dual,
        VariantKind::Selective,
        VariantKind::Stochastic,
        VariantKind::SoftmaxGradInput,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::Standard => "standard",
            VariantKind::Original => "original",
            VariantKind::Dual => "dual",
            VariantKind::Selective => "selective",
            VariantKind::Stochastic => "stochastic",
            VariantKind::SoftmaxGradInput => "softmax-grad-input",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    /// Heatmaps per image.
    pub fn maps_per_image(&self, classes: usize) -> usize {
        match self {
            VariantKind::Standard => 0,
            VariantKind::Original => classes,
            VariantKind::Dual => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Engine {
    Explicit,
    Flex,
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Explicit => "explicit",
            Engine::Flex => "flex",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(Engine::Explicit),
            "flex" => Ok(Engine::Flex),
            other => Err(Error::Config(format!("unknown engine '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub engine: Engine,
    pub zb_first_layer: bool,
    pub lds: bool,
    /// ε of the ε rule (and of the flex attenuated step).
    pub epsilon: f64,
}

impl VariantSpec {
    pub fn new(kind: VariantKind) -> Self {
        Self {
            kind,
            engine: if kind == VariantKind::SoftmaxGradInput {
                Engine::Flex
            } else {
                Engine::Explicit
            },
            zb_first_layer: true,
            lds: false,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == VariantKind::Dual && self.engine != Engine::Explicit {
            return Err(Error::Config("the dual variant needs the explicit engine".into()));
        }
        if self.kind == VariantKind::SoftmaxGradInput && self.engine != Engine::Flex {
            return Err(Error::Config("the softmax gradient variant needs the flex engine".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("ε must be ≥ 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// The bounded first-layer rule, when used by this variant.
    pub fn first_layer_rule(&self) -> Option<LrpRule> {
        (self.zb_first_layer && self.kind != VariantKind::SoftmaxGradInput).then_some(LrpRule::ZB {
            low: 0.0,
            high: 1.0,
            eps: self.epsilon,
        })
    }

    /// Rule policy for an explicit-engine explanation of `target`.
    pub fn policy(&self, target: ExplanationTarget) -> RulePolicy {
        let mut p = match target {
            ExplanationTarget::JointZPlus => RulePolicy::zplus(self.epsilon),
            _ => RulePolicy::epsilon(self.epsilon),
        };
        p.selective_epsilon = self.epsilon;
        p.first_layer = self.first_layer_rule();
        p
    }

    /// Flex ε: zero for the softmax gradient variant.
    pub fn flex_epsilon(&self) -> f64 {
        if self.kind == VariantKind::SoftmaxGradInput {
            0.0
        } else {
            self.epsilon
        }
    }
}

/// Highest logit with probability 1/2, every other one with `1/(2(C−1))`.
pub fn select_stochastic_logit(logits: &[f64], rng: &mut impl Rng) -> usize {
    select_stochastic_from_uniform(logits, rng.random::<f64>())
}

/// [`select_stochastic_logit`] driven by a pre-drawn uniform `u ∈ [0, 1)`.
pub fn select_stochastic_from_uniform(logits: &[f64], u: f64) -> usize {
    let c = logits.len();
    let top = argmax(logits);
    if c <= 1 {
        return 0;
    }
    if u < 0.5 {
        return top;
    }
    let k = (((u - 0.5) * 2.0 * (c - 1) as f64) as usize).min(c - 2);
    if k >= top {
        k + 1
    } else {
        k
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// The explanation targets a variant supervises for one image.
pub fn training_targets(kind: VariantKind, logits: &[f64], u: f64) -> Vec<ExplanationTarget> {
    match kind {
        VariantKind::Standard => Vec::new(),
        VariantKind::Original => (0..logits.len()).map(ExplanationTarget::Logit).collect(),
        VariantKind::Dual => vec![ExplanationTarget::JointEpsilon, ExplanationTarget::JointZPlus],
        VariantKind::Selective => vec![ExplanationTarget::SelectiveEta(argmin(logits))],
        VariantKind::Stochastic => vec![ExplanationTarget::Logit(select_stochastic_from_uniform(logits, u))],
        VariantKind::SoftmaxGradInput => vec![ExplanationTarget::SoftmaxProb(argmax(logits))],
    }
}

/// Eager heatmaps a variant would supervise for one image (model already
/// fused), each with its capture-layer maps.
pub fn build_training_heatmaps(
    spec: &VariantSpec,
    model: &Model,
    tape: &ActivationTape,
    rng: &mut impl Rng,
    capture: &[NodeId],
) -> Result<Vec<Vec<Heatmap>>> {
    spec.validate()?;
    let logits = tape.output(model.output_id()).data().to_vec();
    let u = if spec.kind == VariantKind::Stochastic { rng.random::<f64>() } else { 0.0 };
    let targets = training_targets(spec.kind, &logits, u);
    let maps = targets
        .into_iter()
        .map(|t| match spec.engine {
            Engine::Explicit => lrp::propagate(model, tape, t, &spec.policy(t), capture),
            Engine::Flex => lrp::flex_explain(model, tape, t, spec.flex_epsilon(), spec.first_layer_rule(), capture),
        })
        .collect::<Result<Vec<_>>>()?;
    let want = spec.kind.maps_per_image(model.num_classes());
    if maps.len() != want {
        return Err(Error::State(format!("{} maps for an image, expected {want}", maps.len())));
    }
    Ok(maps)
}
