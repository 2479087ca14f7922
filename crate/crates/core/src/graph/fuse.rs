//! Rewrites that put a model into the form relevance propagation expects:
//! batch normalization folded into the preceding convolution, and average
//! pooling expressed as a fixed convolution.

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

use super::model::{BatchNormParams, LayerKind, LayerNode, Model, NodeId};

/// Folds an inference-mode batchnorm into the convolution feeding it:
/// `W' = W·f`, `b' = (b − mean)·f + shift` with `f = scale/sqrt(var + eps)`.
pub fn fuse_batchnorm(conv: &LayerKind, bn: &BatchNormParams) -> Result<LayerKind> {
    let LayerKind::Conv2d { weight, bias, geom } = conv else {
        return Err(Error::Contract(format!("cannot fuse batchnorm into {}", conv.name())));
    };
    let factor = bn.factor()?;
    let filters = weight.shape()[0];
    if filters != factor.len() {
        return Err(crate::error::dim_err!(
            "{filters}-filter convolution followed by {}-channel batchnorm",
            factor.len()
        ));
    }
    let per = weight.len() / filters;
    let mut w = weight.clone();
    for (f, chunk) in w.data_mut().chunks_exact_mut(per).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= factor[f]);
    }
    let b: Vec<f64> = (0..filters)
        .map(|f| (bias.data()[f] - bn.mean.data()[f]) * factor[f] + bn.shift.data()[f])
        .collect();
    Ok(LayerKind::Conv2d {
        weight: w,
        bias: Tensor::vector(b),
        geom: *geom,
    })
}

/// The convolution equivalent to `window × window` average pooling over
/// `channels` channels: each filter averages its own channel only.
pub fn avgpool_as_conv(channels: usize, window: usize, stride: usize) -> LayerKind {
    let mut w = Tensor::zeros(&[channels, channels, window, window]);
    let area = (window * window) as f64;
    let per = window * window;
    for c in 0..channels {
        let base = (c * channels + c) * per;
        w.data_mut()[base..base + per].iter_mut().for_each(|v| *v = 1.0 / area);
    }
    LayerKind::Conv2d {
        weight: w,
        bias: Tensor::zeros(&[channels]),
        geom: ConvGeometry::new(stride, 0),
    }
}

/// Where a node of a fused model came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Node(NodeId),
    ConvBn { conv: NodeId, bn: NodeId },
}

/// A batchnorm-free model plus the bookkeeping to map ids back and forth.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel {
    pub model: Model,
    pub origin: Vec<Origin>,
    /// Original node id → fused id; `None` for convolutions absorbed into a batchnorm.
    pub new_id: Vec<Option<NodeId>>,
}

impl FusedModel {
    pub fn map_id(&self, original: NodeId) -> Result<NodeId> {
        self.new_id
            .get(original)
            .copied()
            .flatten()
            .ok_or_else(|| Error::State(format!("node {original} does not survive batchnorm fusion")))
    }
}

/// Fuses every `Conv2d → BatchNorm` pair where the convolution feeds only the
/// batchnorm. Models without batchnorm come back unchanged with identity maps.
pub fn fuse_model(model: &Model) -> Result<FusedModel> {
    let n = model.len();
    let mut absorbed = vec![false; n];
    for id in 0..n {
        if let LayerKind::BatchNorm(_) = model.node(id).kind {
            let p = model.node(id).inputs[0];
            if model.node(p).kind.is_linear()
                && matches!(model.node(p).kind, LayerKind::Conv2d { .. })
                && model.consumers(p) == [id]
            {
                absorbed[p] = true;
            }
        }
    }
    let mut nodes: Vec<LayerNode> = Vec::new();
    let mut origin = Vec::new();
    let mut new_id = vec![None; n];
    for id in 0..n {
        if absorbed[id] {
            continue;
        }
        let node = model.node(id);
        let remap = |ins: &[NodeId]| -> Result<Vec<NodeId>> {
            ins.iter().map(|&i| new_id[i].ok_or_else(|| Error::State(format!("node {i} absorbed")))).collect()
        };
        let (kind, inputs, org) = match &node.kind {
            LayerKind::BatchNorm(bn) if absorbed[node.inputs[0]] => {
                let conv = node.inputs[0];
                let cnode = model.node(conv);
                (fuse_batchnorm(&cnode.kind, bn)?, remap(&cnode.inputs)?, Origin::ConvBn { conv, bn: id })
            }
            k => (k.clone(), remap(&node.inputs)?, Origin::Node(id)),
        };
        new_id[id] = Some(nodes.len());
        nodes.push(LayerNode {
            kind,
            inputs,
            shape: node.shape.clone(),
        });
        origin.push(org);
    }
    Ok(FusedModel {
        model: Model::from_nodes(nodes)?,
        origin,
        new_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{backbones, forward_sample, ModelBuilder};
    use crate::tensor::{avgpool2d, conv2d};
    use crate::test_util::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv1x1(w: f64) -> LayerKind {
        LayerKind::Conv2d {
            weight: Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap(),
            bias: Tensor::zeros(&[1]),
            geom: ConvGeometry::default(),
        }
    }

    #[test]
    fn identity_batchnorm_leaves_conv_unchanged() {
        let mut bn = BatchNormParams::identity(1);
        bn.eps = 0.0;
        assert_eq!(fuse_batchnorm(&conv1x1(3.0), &bn).unwrap(), conv1x1(3.0));
    }

    #[test]
    fn scale_and_shift_fold_into_conv() {
        let bn = BatchNormParams {
            scale: Tensor::vector(vec![2.0]),
            shift: Tensor::vector(vec![1.0]),
            eps: 0.0,
            ..BatchNormParams::identity(1)
        };
        let LayerKind::Conv2d { weight, bias, .. } = fuse_batchnorm(&conv1x1(3.0), &bn).unwrap() else {
            unreachable!()
        };
        assert_eq!(weight.item(), 6.0);
        assert_eq!(bias.item(), 1.0);
    }

    #[test]
    fn nonpositive_variance_is_numeric_error() {
        let bn = BatchNormParams {
            var: Tensor::vector(vec![-1.0]),
            eps: 0.5,
            ..BatchNormParams::identity(1)
        };
        assert!(matches!(fuse_batchnorm(&conv1x1(1.0), &bn), Err(Error::Numeric(_))));
    }

    #[test]
    fn fused_resnet_matches_unfused_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut m = backbones::mini_resnet(&[1, 8, 8], 3, 4, &mut rng).unwrap();
        for id in 0..m.len() {
            if let LayerKind::BatchNorm(bn) = &mut m.node_mut(id).kind {
                let c = bn.channels();
                bn.mean = random_tensor(&mut rng, &[c]);
                bn.var = random_tensor(&mut rng, &[c]).map(|v| v.abs() + 0.1);
                bn.scale = random_tensor(&mut rng, &[c]);
                bn.shift = random_tensor(&mut rng, &[c]);
            }
        }
        let fused = fuse_model(&m).unwrap();
        assert!(!fused.model.has_batchnorm());
        let x = random_tensor(&mut rng, &[1, 8, 8]);
        let a = forward_sample(&m, &x).unwrap();
        let b = forward_sample(&fused.model, &x).unwrap();
        for (old, new) in fused.new_id.iter().enumerate() {
            if let Some(new) = new {
                for (u, v) in a.output(old).data().iter().zip(b.output(*new).data()) {
                    assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()), "node {old}");
                }
            }
        }
    }

    #[test]
    fn avgpool_conv_equivalence() {
        let LayerKind::Conv2d { weight, bias, geom } = avgpool_as_conv(2, 2, 2) else {
            unreachable!()
        };
        assert_eq!(&weight.data()[..4], &[0.25; 4]);
        assert_eq!(&weight.data()[4..8], &[0.0; 4]);
        let c = Tensor::full(&[2, 4, 4], 1.7);
        let y = conv2d(&c, &weight, &bias, geom).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.7).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[2, 6, 6]);
        let y = conv2d(&x, &weight, &bias, geom).unwrap();
        let want = avgpool2d(&x, 2, 2).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn model_without_batchnorm_is_unchanged() {
        let mut b = ModelBuilder::new(&[2]);
        let d = b.dense(0, Tensor::zeros(&[1, 2]), Tensor::zeros(&[1])).unwrap();
        b.output(d).unwrap();
        let m = b.build().unwrap();
        let f = fuse_model(&m).unwrap();
        assert_eq!(f.model, m);
        assert_eq!(f.new_id, vec![Some(0), Some(1), Some(2)]);
    }
}
