use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::tensor::kernels::ConvDims;
use crate::tensor::{avgpool2d, conv2d, maxpool2d, ArgmaxIndices, Tensor};

use super::model::{LayerKind, Model, NodeId};

/// Every node's output for one sample, plus the max-pool routing it used.
///
/// A node's inputs are its predecessors' outputs, so the tape holds the
/// pre-activation of every ReLU (its predecessor's output) and the
/// post-activation (its own output) without duplication.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTape {
    outputs: Vec<Tensor>,
    argmax: Vec<Option<ArgmaxIndices>>,
}

impl ActivationTape {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn output(&self, id: NodeId) -> &Tensor {
        &self.outputs[id]
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn input(&self) -> &Tensor {
        &self.outputs[0]
    }

    pub fn argmax(&self, id: NodeId) -> Option<&ArgmaxIndices> {
        self.argmax[id].as_ref()
    }

    /// Checks that this tape was recorded on `model`.
    pub fn check_complete(&self, model: &Model) -> Result<()> {
        if self.outputs.len() != model.len() {
            return Err(Error::State(format!(
                "tape has {} entries but the model has {} nodes",
                self.outputs.len(),
                model.len()
            )));
        }
        for (id, node) in model.nodes().iter().enumerate() {
            if self.outputs[id].shape() != node.shape.as_slice() {
                return Err(Error::State(format!(
                    "tape entry {id} has shape {:?}, node expects {:?}",
                    self.outputs[id].shape(),
                    node.shape
                )));
            }
            if matches!(node.kind, LayerKind::MaxPool { .. }) && self.argmax[id].is_none() {
                return Err(Error::State(format!("tape entry {id} lacks max-pool indices")));
            }
        }
        Ok(())
    }
}

/// Tapes for a batch, one per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTape {
    pub samples: Vec<ActivationTape>,
}

impl BatchTape {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }
}

pub(crate) fn batchnorm_apply(x: &Tensor, factor: &[f64], mean: &[f64], shift: &[f64]) -> Tensor {
    let plane = x.len() / factor.len();
    let mut out = x.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - mean[c]) * factor[c] + shift[c];
        }
    }
    out
}

/// Forward pass for one sample shaped like the model input.
pub fn forward_sample(model: &Model, x: &Tensor) -> Result<ActivationTape> {
    if x.shape() != model.input_shape() {
        return Err(dim_err!(
            "input shape {:?} does not match model input {:?}",
            x.shape(),
            model.input_shape()
        ));
    }
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.len());
    let mut argmax = vec![None; model.len()];
    for (id, node) in model.nodes().iter().enumerate() {
        let a = |k: usize| &outputs[node.inputs[k]];
        let y = match &node.kind {
            LayerKind::Input => x.clone(),
            LayerKind::Dense { weight, bias } => {
                let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
                let mut out = bias.data().to_vec();
                crate::tensor::kernels::matvec_raw(weight.data(), rows, cols, a(0).data(), &mut out);
                Tensor::from_parts(vec![rows], out)
            }
            LayerKind::Conv2d { weight, bias, geom } => conv2d(a(0), weight, bias, *geom)?,
            LayerKind::BatchNorm(bn) => {
                batchnorm_apply(a(0), &bn.factor()?, bn.mean.data(), bn.shift.data())
            }
            LayerKind::Relu => a(0).map(|v| v.max(0.0)),
            LayerKind::MaxPool { window, stride } => {
                let (y, idx) = maxpool2d(a(0), *window, *stride)?;
                argmax[id] = Some(idx);
                y
            }
            LayerKind::AvgPool { window, stride } => avgpool2d(a(0), *window, *stride)?,
            LayerKind::Flatten => a(0).flatten(),
            LayerKind::SumJunction => a(0).add(a(1))?,
            LayerKind::Output => a(0).clone(),
        };
        if !y.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activation at node {id} ({})",
                node.kind.name()
            )));
        }
        outputs.push(y);
    }
    Ok(ActivationTape { outputs, argmax })
}

/// Batched forward pass over `N × (input shape)`; returns `N × K` logits.
pub fn forward(model: &Model, batch: &Tensor) -> Result<(Tensor, BatchTape)> {
    let n = batch_len(model, batch)?;
    let samples = par::try_map_indices(n, |i| forward_sample(model, &batch.sample(i)?))?;
    let logits: Vec<Tensor> = samples.iter().map(|t| t.output(model.output_id()).clone()).collect();
    Ok((Tensor::stack(&logits)?, BatchTape { samples }))
}

/// Logits only, without keeping tapes around.
pub fn logits(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let n = batch_len(model, batch)?;
    let rows = par::try_map_indices(n, |i| {
        Ok::<_, Error>(forward_sample(model, &batch.sample(i)?)?.outputs.swap_remove(model.output_id()))
    })?;
    Tensor::stack(&rows)
}

pub fn predict(model: &Model, batch: &Tensor) -> Result<Vec<usize>> {
    let z = logits(model, batch)?;
    let k = model.num_classes();
    Ok(z.data().chunks_exact(k).map(|row| Tensor::vector(row.to_vec()).argmax()).collect())
}

fn batch_len(model: &Model, batch: &Tensor) -> Result<usize> {
    if batch.shape().len() != model.input_shape().len() + 1 || &batch.shape()[1..] != model.input_shape() {
        return Err(dim_err!(
            "batch shape {:?} does not match N × {:?}",
            batch.shape(),
            model.input_shape()
        ));
    }
    Ok(batch.shape()[0])
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    Tensor::from_parts(logits.shape().to_vec(), crate::autodiff::softmax_values(logits.data()))
}

/// `-ln softmax(z)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, label: usize) -> f64 {
    let z = logits.data();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[label]
}

pub(crate) fn conv_dims_of(model: &Model, id: NodeId) -> Result<ConvDims> {
    match &model.node(id).kind {
        LayerKind::Conv2d { weight, geom, .. } => {
            let x = &model.node(model.node(id).inputs[0]).shape;
            ConvDims::new((x[0], x[1], x[2]), weight.shape(), *geom)
        }
        other => Err(Error::Contract(format!("node {id} is {}, not Conv2d", other.name()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelBuilder;
    use crate::tensor::ConvGeometry;
    use crate::test_util::{naive_conv2d, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_dense_logit() {
        let mut b = ModelBuilder::new(&[2]);
        let d = b
            .dense(0, Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), Tensor::zeros(&[1]))
            .unwrap();
        b.output(d).unwrap();
        let m = b.build().unwrap();
        let (z, _) = forward(&m, &Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(z.data(), &[5.0]);
    }

    #[test]
    fn zero_input_bias_free_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ModelBuilder::new(&[6]);
        let h = b.dense_he(0, 5, &mut rng).unwrap();
        let r = b.relu(h).unwrap();
        let o = b.dense_he(r, 3, &mut rng).unwrap();
        b.output(o).unwrap();
        let m = b.build().unwrap();
        let (z, _) = forward(&m, &Tensor::zeros(&[2, 6])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_conv_net_matches_kernel_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = random_tensor(&mut rng, &[3, 1, 3, 3]);
        let b1 = random_tensor(&mut rng, &[3]);
        let w2 = random_tensor(&mut rng, &[2, 3, 2, 2]);
        let b2 = random_tensor(&mut rng, &[2]);
        let g1 = ConvGeometry::new(1, 1);
        let g2 = ConvGeometry::new(2, 0);
        let mut b = ModelBuilder::new(&[1, 6, 6]);
        let c1 = b.conv2d(0, w1.clone(), b1.clone(), g1).unwrap();
        let r1 = b.relu(c1).unwrap();
        let c2 = b.conv2d(r1, w2.clone(), b2.clone(), g2).unwrap();
        let f = b.flatten(c2).unwrap();
        b.output(f).unwrap();
        let m = b.build().unwrap();
        let x = random_tensor(&mut rng, &[1, 6, 6]);
        let tape = forward_sample(&m, &x).unwrap();
        let h = naive_conv2d(&x, &w1, Some(&b1), g1).map(|v| v.max(0.0));
        let y = naive_conv2d(&h, &w2, Some(&b2), g2);
        for (a, e) in tape.output(m.output_id()).data().iter().zip(y.data()) {
            assert!((a - e).abs() < 1e-12);
        }
        for id in 0..m.len() {
            if m.node(id).kind == LayerKind::Relu {
                let pre = tape.output(m.node(id).inputs[0]);
                assert_eq!(tape.output(id), &pre.map(|v| v.max(0.0)));
            }
        }
        tape.check_complete(&m).unwrap();
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Tensor::vector(vec![1000.0, 0.0]));
        assert!((p.data()[0] - 1.0).abs() < 1e-12 && p.data()[1] < 1e-300);
        let p = softmax(&Tensor::vector(vec![2.0, 1.0, 0.0]));
        let e = [2f64.exp(), 1f64.exp(), 1.0];
        let s: f64 = e.iter().sum();
        for (a, v) in p.data().iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((a - v).abs() < 1e-4);
        }
        for (a, v) in p.data().iter().zip(e) {
            assert!((a - v / s).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let mut b = ModelBuilder::new(&[2]);
        let d = b.dense(0, Tensor::zeros(&[1, 2]), Tensor::zeros(&[1])).unwrap();
        b.output(d).unwrap();
        let m = b.build().unwrap();
        assert!(matches!(forward(&m, &Tensor::zeros(&[1, 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_activation_names_node() {
        let mut b = ModelBuilder::new(&[1]);
        let d = b
            .dense(0, Tensor::new(vec![1, 1], vec![f64::MAX]).unwrap(), Tensor::zeros(&[1]))
            .unwrap();
        b.output(d).unwrap();
        let m = b.build().unwrap();
        let err = forward_sample(&m, &Tensor::vector(vec![10.0])).unwrap_err();
        assert!(err.to_string().contains("node 1"), "{err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = crate::graph::backbones::cnn(&[1, 12, 12], &[2, 3, 4], 4, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[1, 12, 12]);
        assert_eq!(forward_sample(&m, &x).unwrap(), forward_sample(&m, &x).unwrap());
    }
}
