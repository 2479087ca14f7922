use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::tensor::kernels::{matvec_t_raw, outer_acc_raw};
use crate::tensor::Tensor;

use super::forward::{conv_dims_of, softmax, ActivationTape, BatchTape};
use super::model::{LayerKind, Model, NodeId};

/// How gradients cross a ReLU during the backward sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReluRule {
    /// The true derivative: pass where the pre-activation is positive.
    UnitStep,
    /// Multiply by `r / (r + ε)` of the stored ReLU output `r` (0 where `r = 0`).
    Attenuated(f64),
}

/// Parameter gradients aligned with [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            tensors: model.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Sums per-sample gradients in order.
    pub fn sum(model: &Model, parts: impl IntoIterator<Item = ParamGrads>) -> ParamGrads {
        let mut acc = ParamGrads::zeros_like(model);
        for p in parts {
            acc.add_assign(&p);
        }
        acc
    }
}

/// Result of one backward sweep: the gradient at every node output that
/// received one, and optionally the parameter gradients.
#[derive(Clone, Debug)]
pub struct BackwardPass {
    pub node_grads: Vec<Option<Tensor>>,
    pub params: Option<ParamGrads>,
}

impl BackwardPass {
    pub fn grad_at(&self, id: NodeId) -> Option<&Tensor> {
        self.node_grads[id].as_ref()
    }

    pub fn input_grad(&self) -> Option<&Tensor> {
        self.grad_at(0)
    }
}

fn acc_into(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

/// Backpropagates `seed` (the gradient at the logits) through one sample's tape.
pub fn backward_sample(
    model: &Model,
    tape: &ActivationTape,
    seed: &Tensor,
    rule: ReluRule,
    want_params: bool,
) -> Result<BackwardPass> {
    tape.check_complete(model)?;
    if seed.len() != model.num_classes() {
        return Err(dim_err!(
            "seed has {} entries for {} logits",
            seed.len(),
            model.num_classes()
        ));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; model.len()];
    grads[model.output_id()] = Some(seed.reshape(&[model.num_classes()])?);
    let mut params = want_params.then(|| ParamGrads::zeros_like(model));

    for id in (1..model.len()).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = model.node(id);
        let p0 = node.inputs[0];
        let in_shape = model.node(p0).shape.clone();
        let x = tape.output(p0);
        let base = model.param_base(id);
        match &node.kind {
            LayerKind::Input => {}
            LayerKind::Output | LayerKind::Flatten => {
                acc_into(&mut grads[p0], &in_shape, |d| add(d, g.data()))
            }
            LayerKind::Dense { weight, .. } => {
                let cols = weight.shape()[1];
                acc_into(&mut grads[p0], &in_shape, |d| matvec_t_raw(weight.data(), cols, g.data(), d));
                if let Some(p) = params.as_mut() {
                    outer_acc_raw(g.data(), x.data(), p.tensors[base].data_mut());
                    add(p.tensors[base + 1].data_mut(), g.data());
                }
            }
            LayerKind::Conv2d { weight, .. } => {
                let dims = conv_dims_of(model, id)?;
                acc_into(&mut grads[p0], &in_shape, |d| dims.adjoint_raw(g.data(), weight.data(), d));
                if let Some(p) = params.as_mut() {
                    dims.weight_grad_raw(g.data(), x.data(), p.tensors[base].data_mut());
                    let plane = dims.oh * dims.ow;
                    for (b, chunk) in p.tensors[base + 1].data_mut().iter_mut().zip(g.data().chunks_exact(plane)) {
                        *b += chunk.iter().sum::<f64>();
                    }
                }
            }
            LayerKind::BatchNorm(bn) => {
                let factor = bn.factor()?;
                let plane = x.len() / factor.len();
                acc_into(&mut grads[p0], &in_shape, |d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += g.data()[i] * factor[i / plane];
                    }
                });
                if let Some(p) = params.as_mut() {
                    for c in 0..factor.len() {
                        let inv = 1.0 / (bn.var.data()[c] + bn.eps).sqrt();
                        let r = c * plane..(c + 1) * plane;
                        let gs: f64 = g.data()[r.clone()]
                            .iter()
                            .zip(&x.data()[r.clone()])
                            .map(|(gv, xv)| gv * (xv - bn.mean.data()[c]) * inv)
                            .sum();
                        p.tensors[base].data_mut()[c] += gs;
                        p.tensors[base + 1].data_mut()[c] += g.data()[r].iter().sum::<f64>();
                    }
                }
            }
            LayerKind::Relu => {
                let post = tape.output(id);
                acc_into(&mut grads[p0], &in_shape, |d| match rule {
                    ReluRule::UnitStep => {
                        for i in 0..d.len() {
                            if x.data()[i] > 0.0 {
                                d[i] += g.data()[i];
                            }
                        }
                    }
                    ReluRule::Attenuated(eps) => {
                        for i in 0..d.len() {
                            d[i] += g.data()[i] * attenuated_step(post.data()[i], eps);
                        }
                    }
                });
            }
            LayerKind::MaxPool { .. } => {
                let idx = tape
                    .argmax(id)
                    .ok_or_else(|| Error::State(format!("missing max-pool indices for node {id}")))?;
                acc_into(&mut grads[p0], &in_shape, |d| {
                    for (&i, &gv) in idx.indices.iter().zip(g.data()) {
                        d[i] += gv;
                    }
                });
            }
            LayerKind::AvgPool { window, stride } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let area = (window * window) as f64;
                acc_into(&mut grads[p0], &in_shape, |d| {
                    for ci in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = g.data()[(ci * oh + i) * ow + j] / area;
                                for di in 0..*window {
                                    for dj in 0..*window {
                                        d[(ci * h + i * stride + di) * w + j * stride + dj] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            LayerKind::SumJunction => {
                let p1 = node.inputs[1];
                acc_into(&mut grads[p0], &in_shape, |d| add(d, g.data()));
                acc_into(&mut grads[p1], &in_shape, |d| add(d, g.data()));
            }
        }
        grads[id] = Some(g);
    }
    Ok(BackwardPass { node_grads: grads, params })
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `r / (r + ε)` for a ReLU output `r ≥ 0`, with `A(0) = 0` even when `ε = 0`.
pub fn attenuated_step(r: f64, eps: f64) -> f64 {
    if r > 0.0 {
        r / (r + eps)
    } else {
        0.0
    }
}

/// Gradients of the mean cross-entropy over the batch.
pub fn backward_classification(model: &Model, tape: &BatchTape, labels: &[usize]) -> Result<ParamGrads> {
    if labels.len() != tape.batch_size() {
        return Err(Error::State(format!(
            "{} labels for a tape of {} samples",
            labels.len(),
            tape.batch_size()
        )));
    }
    let k = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let n = labels.len() as f64;
    let parts = par::try_map_indices(labels.len(), |i| {
        let t = &tape.samples[i];
        let mut seed = softmax(t.output(model.output_id()));
        seed.data_mut()[labels[i]] -= 1.0;
        let seed = seed.scale(1.0 / n);
        let pass = backward_sample(model, t, &seed, ReluRule::UnitStep, true)?;
        Ok::<_, Error>(pass.params.expect("requested"))
    })?;
    Ok(ParamGrads::sum(model, parts))
}

/// `∂z_class/∂x` for one sample.
pub fn input_gradient(model: &Model, tape: &ActivationTape, class: usize) -> Result<Tensor> {
    let mut seed = Tensor::zeros(&[model.num_classes()]);
    seed.data_mut()[class] = 1.0;
    let pass = backward_sample(model, tape, &seed, ReluRule::UnitStep, false)?;
    Ok(pass
        .input_grad()
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(model.input_shape())))
}
