use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::tensor::Tensor;

/// Per-layer relevance rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrpRule {
    /// Proportional split with `ε·sign(z)` added to denominators; `ε = 0` is LRP-0.
    Epsilon(f64),
    /// Split over positive contributions only (positive weights and biases).
    ZPlus(f64),
    /// Bounded-input rule for the layer reading the image, with uniform
    /// per-pixel bounds `low ≤ x ≤ high`.
    ZB { low: f64, high: f64, eps: f64 },
}

impl LrpRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrpRule::Epsilon(e) if e >= 0.0 => Ok(()),
            LrpRule::ZPlus(e) if e >= 0.0 => Ok(()),
            LrpRule::ZB { low, high, eps } => {
                if low > high {
                    Err(Error::Config(format!("zB bounds reversed: low {low} > high {high}")))
                } else if eps < 0.0 {
                    Err(Error::Config(format!("zB epsilon must be ≥ 0, got {eps}")))
                } else {
                    Ok(())
                }
            }
            other => Err(Error::Config(format!("negative epsilon in {other:?}"))),
        }
    }
}

/// What a heatmap explains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExplanationTarget {
    /// One logit.
    Logit(usize),
    /// All logits at once, each starting from its own value.
    JointEpsilon,
    /// All logits at once, each starting from its positive pre-activation mass.
    JointZPlus,
    /// The log-odds of class `c`'s softmax probability.
    SelectiveEta(usize),
    /// Class `c`'s softmax probability (gradient engine only).
    SoftmaxProb(usize),
}

impl ExplanationTarget {
    pub fn class(&self) -> Option<usize> {
        match *self {
            ExplanationTarget::Logit(c)
            | ExplanationTarget::SelectiveEta(c)
            | ExplanationTarget::SoftmaxProb(c) => Some(c),
            _ => None,
        }
    }

    /// Short tag used in file names.
    pub fn tag(&self) -> String {
        match *self {
            ExplanationTarget::Logit(c) => format!("logit-c{c}"),
            ExplanationTarget::JointEpsilon => "joint-eps".into(),
            ExplanationTarget::JointZPlus => "joint-zplus".into(),
            ExplanationTarget::SelectiveEta(c) => format!("selective-c{c}"),
            ExplanationTarget::SoftmaxProb(c) => format!("softmax-c{c}"),
        }
    }

    /// Inverse of [`ExplanationTarget::tag`].
    pub fn parse(s: &str) -> Result<Self> {
        let class = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad class in target '{s}'")))
        };
        match s {
            "joint-eps" => Ok(ExplanationTarget::JointEpsilon),
            "joint-zplus" => Ok(ExplanationTarget::JointZPlus),
            _ => {
                if let Some(c) = s.strip_prefix("logit-c") {
                    Ok(ExplanationTarget::Logit(class(c)?))
                } else if let Some(c) = s.strip_prefix("selective-c") {
                    Ok(ExplanationTarget::SelectiveEta(class(c)?))
                } else if let Some(c) = s.strip_prefix("softmax-c") {
                    Ok(ExplanationTarget::SoftmaxProb(class(c)?))
                } else {
                    Err(Error::Config(format!("unknown target '{s}'")))
                }
            }
        }
    }

    pub(crate) fn check_classes(&self, k: usize) -> Result<()> {
        match self.class() {
            Some(c) if c >= k => Err(Error::Contract(format!(
                "target class {c} out of range for {k} classes"
            ))),
            _ => Ok(()),
        }
    }
}

/// Which rule each layer uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RulePolicy {
    /// Rule for hidden linear layers (and the default for junctions).
    pub hidden: LrpRule,
    /// ε of the layer producing the logits, for logit and ε-joint targets.
    pub output_epsilon: f64,
    /// ε and μ of the class-difference layer used by the selective target.
    pub selective_epsilon: f64,
    pub selective_mu: f64,
    /// Optional rule for the layer reading the image; must be `ZB`.
    pub first_layer: Option<LrpRule>,
}

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const SELECTIVE_MU: f64 = 1e-5;

impl Default for RulePolicy {
    fn default() -> Self {
        Self {
            hidden: LrpRule::Epsilon(DEFAULT_EPSILON),
            output_epsilon: 0.0,
            selective_epsilon: DEFAULT_EPSILON,
            selective_mu: SELECTIVE_MU,
            first_layer: Some(LrpRule::ZB {
                low: 0.0,
                high: 1.0,
                eps: DEFAULT_EPSILON,
            }),
        }
    }
}

impl RulePolicy {
    /// ε everywhere, no bounded first layer.
    pub fn epsilon(eps: f64) -> Self {
        Self {
            hidden: LrpRule::Epsilon(eps),
            first_layer: None,
            ..Self::default()
        }
    }

    /// z⁺ everywhere, no bounded first layer.
    pub fn zplus(eps: f64) -> Self {
        Self {
            hidden: LrpRule::ZPlus(eps),
            first_layer: None,
            ..Self::default()
        }
    }

    /// The default policy matching a target: z⁺ hidden rules for the z⁺-joint
    /// target, ε otherwise; bounded first layer on.
    pub fn for_target(target: ExplanationTarget) -> Self {
        match target {
            ExplanationTarget::JointZPlus => Self {
                hidden: LrpRule::ZPlus(DEFAULT_EPSILON),
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    pub fn with_zb(mut self, low: f64, high: f64) -> Self {
        self.first_layer = Some(LrpRule::ZB {
            low,
            high,
            eps: DEFAULT_EPSILON,
        });
        self
    }

    pub fn without_zb(mut self) -> Self {
        self.first_layer = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.hidden.validate()?;
        if matches!(self.hidden, LrpRule::ZB { .. }) {
            return Err(Error::Config("zB applies to the first layer only".into()));
        }
        if let Some(r) = self.first_layer {
            r.validate()?;
            if !matches!(r, LrpRule::ZB { .. }) {
                return Err(Error::Config("first-layer rule must be zB".into()));
            }
        }
        if self.output_epsilon < 0.0 || self.selective_epsilon < 0.0 || self.selective_mu < 0.0 {
            return Err(Error::Config("output/selective ε and μ must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Relevance at the input of `layer_id` (0 = the network input).
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub relevance: Tensor,
    pub target: ExplanationTarget,
    pub layer_id: NodeId,
}
