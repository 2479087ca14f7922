use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::tensor::kernels::{pool_dims, ConvDims};
use crate::tensor::{ConvGeometry, Tensor};

pub type NodeId = usize;

/// Inference-mode batch normalization: `y = (x - mean)/sqrt(var + eps)·scale + shift`
/// per channel. `scale` and `shift` are trainable; the running statistics are fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub mean: Tensor,
    pub var: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Per-channel multiplier `scale / sqrt(var + eps)`.
    pub fn factor(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let v = self.var.data()[c] + self.eps;
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "batchnorm channel {c}: variance + eps = {v} is not positive"
                )));
            }
            out.push(self.scale.data()[c] / v.sqrt());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    /// `weight: [out, in]`, `bias: [out]`.
    Dense { weight: Tensor, bias: Tensor },
    /// `weight: [F, C, kh, kw]`, `bias: [F]`.
    Conv2d { weight: Tensor, bias: Tensor, geom: ConvGeometry },
    BatchNorm(BatchNormParams),
    Relu,
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    Flatten,
    SumJunction,
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::BatchNorm(_) => "BatchNorm",
            LayerKind::Relu => "ReLU",
            LayerKind::MaxPool { .. } => "MaxPool",
            LayerKind::AvgPool { .. } => "AvgPool",
            LayerKind::Flatten => "Flatten",
            LayerKind::SumJunction => "SumJunction",
            LayerKind::Output => "Output",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub(crate) fn params(&self) -> Vec<&Tensor> {
        match self {
            LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            LayerKind::BatchNorm(bn) => vec![&bn.scale, &bn.shift],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            LayerKind::BatchNorm(bn) => vec![&mut bn.scale, &mut bn.shift],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Per-sample output shape.
    pub shape: Vec<usize>,
}

/// A validated layer DAG. Node ids are topologically ordered; node 0 is the
/// input and exactly one `Output` node carries the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    nodes: Vec<LayerNode>,
    output: NodeId,
}

impl Model {
    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_id(&self) -> NodeId {
        self.output
    }

    pub fn num_classes(&self) -> usize {
        self.nodes[self.output].shape[0]
    }

    /// The sole predecessor of `id`, if it has exactly one.
    pub fn predecessor(&self, id: NodeId) -> Option<NodeId> {
        match self.nodes[id].inputs.as_slice() {
            [p] => Some(*p),
            _ => None,
        }
    }

    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&n| self.nodes[n].inputs.contains(&id))
            .collect()
    }

    /// The layer producing the logits.
    pub fn last_layer(&self) -> NodeId {
        self.nodes[self.output].inputs[0]
    }

    /// The linear layer reading the network input directly, if unique.
    pub fn first_linear(&self) -> Option<NodeId> {
        let mut found = self
            .consumers(0)
            .into_iter()
            .filter(|&n| self.nodes[n].kind.is_linear());
        let first = found.next()?;
        found.next().is_none().then_some(first)
    }

    pub fn has_batchnorm(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.kind, LayerKind::BatchNorm(_)))
    }

    /// Trainable tensors in deterministic order: by node, weight before bias,
    /// batchnorm scale before shift.
    pub fn params(&self) -> Vec<&Tensor> {
        self.nodes.iter().flat_map(|n| n.kind.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.nodes.iter_mut().flat_map(|n| n.kind.params_mut()).collect()
    }

    /// `(node, offset within node)` for every entry of [`Model::params`].
    pub fn param_slots(&self) -> Vec<(NodeId, usize)> {
        let mut out = Vec::new();
        for (id, n) in self.nodes.iter().enumerate() {
            for k in 0..n.kind.params().len() {
                out.push((id, k));
            }
        }
        out
    }

    /// Index of the first parameter of `node` in [`Model::params`].
    pub fn param_base(&self, node: NodeId) -> usize {
        self.nodes[..node].iter().map(|n| n.kind.params().len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    #[cfg(test)]
    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut LayerNode {
        &mut self.nodes[id]
    }

    pub(crate) fn from_nodes(nodes: Vec<LayerNode>) -> Result<Self> {
        let mut b = ModelBuilder {
            nodes: Vec::with_capacity(nodes.len()),
        };
        let mut it = nodes.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Contract("model has no nodes".into()))?;
        if first.kind != LayerKind::Input {
            return Err(Error::Contract("node 0 must be the input".into()));
        }
        b.nodes.push(first);
        for n in it {
            b.push(n.kind, n.inputs)?;
        }
        b.build()
    }
}

/// Incremental, shape-checked model construction.
#[derive(Clone, Debug)]
pub struct ModelBuilder {
    nodes: Vec<LayerNode>,
}

impl ModelBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            nodes: vec![LayerNode {
                kind: LayerKind::Input,
                inputs: Vec::new(),
                shape: input_shape.to_vec(),
            }],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn push(&mut self, kind: LayerKind, inputs: Vec<NodeId>) -> Result<NodeId> {
        let id = self.nodes.len();
        for &p in &inputs {
            if p >= id {
                return Err(Error::Contract(format!(
                    "node {id} reads node {p}, which is not defined before it"
                )));
            }
        }
        let arity = match kind {
            LayerKind::Input => {
                return Err(Error::Contract("only node 0 may be an input".into()))
            }
            LayerKind::SumJunction => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{} node {id} needs {arity} predecessor(s), got {}",
                kind.name(),
                inputs.len()
            )));
        }
        let in_shape = self.nodes[inputs[0]].shape.clone();
        let shape = output_shape(&kind, &in_shape, inputs.get(1).map(|&p| &self.nodes[p].shape[..]))
            .map_err(|e| match e {
                Error::Dimension(m) => dim_err!("{} node {id}: {m}", kind.name()),
                other => other,
            })?;
        self.nodes.push(LayerNode { kind, inputs, shape });
        Ok(id)
    }

    pub fn dense(&mut self, x: NodeId, weight: Tensor, bias: Tensor) -> Result<NodeId> {
        self.push(LayerKind::Dense { weight, bias }, vec![x])
    }

    pub fn conv2d(&mut self, x: NodeId, weight: Tensor, bias: Tensor, geom: ConvGeometry) -> Result<NodeId> {
        self.push(LayerKind::Conv2d { weight, bias, geom }, vec![x])
    }

    pub fn batchnorm(&mut self, x: NodeId, params: BatchNormParams) -> Result<NodeId> {
        self.push(LayerKind::BatchNorm(params), vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(LayerKind::Relu, vec![x])
    }

    pub fn maxpool(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.push(LayerKind::MaxPool { window, stride }, vec![x])
    }

    pub fn avgpool(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.push(LayerKind::AvgPool { window, stride }, vec![x])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(LayerKind::Flatten, vec![x])
    }

    pub fn sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(LayerKind::SumJunction, vec![a, b])
    }

    pub fn output(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(LayerKind::Output, vec![x])
    }

    /// Dense layer with He-normal weights and zero bias.
    pub fn dense_he(&mut self, x: NodeId, out: usize, rng: &mut impl Rng) -> Result<NodeId> {
        let fan_in: usize = self.nodes[x].shape.iter().product();
        let weight = he_normal(rng, &[out, fan_in], fan_in);
        self.dense(x, weight, Tensor::zeros(&[out]))
    }

    /// Square-kernel convolution with He-normal weights and zero bias.
    pub fn conv_he(
        &mut self,
        x: NodeId,
        filters: usize,
        kernel: usize,
        geom: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let c = *self.nodes[x]
            .shape
            .first()
            .ok_or_else(|| dim_err!("conv input has no channel extent"))?;
        let fan_in = c * kernel * kernel;
        let weight = he_normal(rng, &[filters, c, kernel, kernel], fan_in);
        self.conv2d(x, weight, Tensor::zeros(&[filters]), geom)
    }

    pub fn build(self) -> Result<Model> {
        let outputs: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind == LayerKind::Output)
            .collect();
        let [output] = outputs.as_slice() else {
            return Err(Error::Contract(format!(
                "model must have exactly one Output node, found {}",
                outputs.len()
            )));
        };
        if self.nodes[*output].shape.len() != 1 {
            return Err(dim_err!(
                "Output node must receive a vector of logits, got shape {:?}",
                self.nodes[*output].shape
            ));
        }
        Ok(Model {
            nodes: self.nodes,
            output: *output,
        })
    }
}

pub(crate) fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

fn output_shape(kind: &LayerKind, x: &[usize], second: Option<&[usize]>) -> Result<Vec<usize>> {
    let chw = |x: &[usize]| -> Result<(usize, usize, usize)> {
        match x {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(dim_err!("expects a C×H×W input, got {:?}", s)),
        }
    };
    match kind {
        LayerKind::Input => Ok(x.to_vec()),
        LayerKind::Dense { weight, bias } => {
            let [rows, cols] = weight.shape() else {
                return Err(dim_err!("weight must be 2-D, got {:?}", weight.shape()));
            };
            if x.len() != 1 || x[0] != *cols {
                return Err(dim_err!("weight {:?} cannot read input {:?}", weight.shape(), x));
            }
            if bias.shape() != [*rows] {
                return Err(dim_err!("bias {:?} does not match {rows} outputs", bias.shape()));
            }
            Ok(vec![*rows])
        }
        LayerKind::Conv2d { weight, bias, geom } => {
            let d = ConvDims::new(chw(x)?, weight.shape(), *geom)?;
            if bias.shape() != [d.f] {
                return Err(dim_err!("bias {:?} does not match {} filters", bias.shape(), d.f));
            }
            Ok(vec![d.f, d.oh, d.ow])
        }
        LayerKind::BatchNorm(bn) => {
            let c = bn.channels();
            for t in [&bn.var, &bn.scale, &bn.shift] {
                if t.len() != c {
                    return Err(dim_err!("batchnorm statistics disagree on channel count"));
                }
            }
            if x.is_empty() || x[0] != c {
                return Err(dim_err!("{c}-channel batchnorm cannot read input {:?}", x));
            }
            bn.factor()?;
            Ok(x.to_vec())
        }
        LayerKind::Relu | LayerKind::Output => Ok(x.to_vec()),
        LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
            let (c, h, w) = chw(x)?;
            let (oh, ow) = pool_dims((c, h, w), *window, *stride)?;
            Ok(vec![c, oh, ow])
        }
        LayerKind::Flatten => Ok(vec![x.iter().product()]),
        LayerKind::SumJunction => {
            let y = second.expect("sum junction arity checked");
            if x != y {
                return Err(dim_err!("operands {:?} and {:?} differ", x, y));
            }
            Ok(x.to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_dense() {
        let mut b = ModelBuilder::new(&[3]);
        let err = b.dense(0, Tensor::zeros(&[2, 4]), Tensor::zeros(&[2]));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn requires_exactly_one_output() {
        let mut b = ModelBuilder::new(&[2]);
        let d = b.dense(0, Tensor::zeros(&[1, 2]), Tensor::zeros(&[1])).unwrap();
        assert!(b.clone().build().is_err());
        b.output(d).unwrap();
        b.output(d).unwrap();
        assert!(b.build().is_err());
    }

    #[test]
    fn junction_needs_equal_shapes() {
        let mut b = ModelBuilder::new(&[1, 4, 4]);
        let p = b.maxpool(0, 2, 2).unwrap();
        assert!(b.sum(0, p).is_err());
        assert!(b.sum(0, 0).is_ok());
    }

    #[test]
    fn batchnorm_rejects_nonpositive_variance() {
        let mut bn = BatchNormParams::identity(2);
        bn.var = Tensor::vector(vec![1.0, -1.0]);
        bn.eps = 0.5;
        let mut b = ModelBuilder::new(&[2, 3, 3]);
        assert!(matches!(b.batchnorm(0, bn), Err(Error::Numeric(_))));
    }

    #[test]
    fn param_slots_follow_node_order() {
        let mut b = ModelBuilder::new(&[1, 4, 4]);
        let c = b.conv2d(0, Tensor::zeros(&[2, 1, 3, 3]), Tensor::zeros(&[2]), ConvGeometry::new(1, 1)).unwrap();
        let n = b.batchnorm(c, BatchNormParams::identity(2)).unwrap();
        let f = b.flatten(n).unwrap();
        let d = b.dense(f, Tensor::zeros(&[3, 32]), Tensor::zeros(&[3])).unwrap();
        b.output(d).unwrap();
        let m = b.build().unwrap();
        assert_eq!(m.param_slots(), vec![(1, 0), (1, 1), (2, 0), (2, 1), (4, 0), (4, 1)]);
        assert_eq!(m.param_base(4), 4);
        assert_eq!(m.num_classes(), 3);
        assert_eq!(m.first_linear(), Some(1));
    }
}
