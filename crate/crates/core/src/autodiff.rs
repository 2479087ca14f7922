//! Reverse-mode differentiation over per-sample tensor graphs.
//!
//! Heatmap-loss training needs gradients *through* relevance propagation,
//! which the fixed-layer backward visitor in [`crate::graph`] cannot give.
//! Every LRP procedure is therefore expressed as a chain of the ops below,
//! recorded on a [`Graph`], and differentiated once per training sample.
//!
//! Graphs are single-threaded and short-lived: build, evaluate, call
//! [`Graph::backward`], drop. Ops assert shape agreement; a mismatch is an
//! engine bug, not a user error, because model shapes are validated when a
//! model is built.

use std::sync::Arc;

use crate::tensor::kernels::{matvec_raw, matvec_t_raw, outer_acc_raw, ConvDims};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SafeDiv(Var, Var),
    AddConst(Var),
    MulConst(Var, Arc<Tensor>),
    Scale(Var, f64),
    Relu(Var),
    NegPart(Var),
    Abs(Var),
    Ln(Var),
    Exp(Var),
    Dense { w: Var, x: Var, cols: usize },
    DenseT { w: Var, s: Var, cols: usize },
    Conv { w: Var, x: Var, dims: ConvDims },
    ConvT { w: Var, s: Var, dims: ConvDims },
    AddChannel { x: Var, b: Var, plane: usize },
    MulChannel { x: Var, f: Var, plane: usize },
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Scatter { x: Var, idx: Arc<Vec<usize>> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Row { w: Var, row: usize },
    Index { x: Var, i: usize },
    MulScalarVar { x: Var, s: Var },
    DivScalarVar { x: Var, s: Var },
    Softmax(Var),
    CrossEntropy { logits: Var, label: usize },
    Gwrp { x: Var, plane: usize, coef: Vec<f64> },
    SelectiveRelevance { z: Var, c: usize, q: Vec<f64> },
    Penalty { s: Var, c1: f64, c2: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the seeded objective with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of all parameter leaves, indexed by their parameter slot.
    /// Slots that received no gradient are zero-filled by the caller.
    pub fn params(&self) -> impl Iterator<Item = (usize, Option<&Tensor>)> + '_ {
        self.params.iter().map(|&(slot, v)| (slot, self.grads[v.0].as_ref()))
    }
}

fn zip2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.shape(), b.shape(), "graph op on mismatched shapes");
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A differentiable leaf; `slot` identifies it in [`Gradients::params`].
    pub fn param(&mut self, t: Tensor, slot: usize) -> Var {
        self.push(t, Op::Param(slot), &[])
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let d = zip2(self.value(a), self.value(b), |x, y| x + y);
        self.push(Tensor::from_parts(self.shape_of(a), d), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let d = zip2(self.value(a), self.value(b), |x, y| x - y);
        self.push(Tensor::from_parts(self.shape_of(a), d), Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let d = zip2(self.value(a), self.value(b), |x, y| x * y);
        self.push(Tensor::from_parts(self.shape_of(a), d), Op::Mul(a, b), &[a, b])
    }

    /// `a / b` with `x / 0 := 0`; a zero denominator only arises for neurons
    /// that carry no relevance.
    pub fn safe_div(&mut self, a: Var, b: Var) -> Var {
        let d = zip2(self.value(a), self.value(b), |x, y| if y == 0.0 { 0.0 } else { x / y });
        self.push(Tensor::from_parts(self.shape_of(a), d), Op::SafeDiv(a, b), &[a, b])
    }

    /// `x + c` for a constant tensor `c` (gradient passes to `x` only).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let d = zip2(self.value(x), c, |a, b| a + b);
        self.push(Tensor::from_parts(self.shape_of(x), d), Op::AddConst(x), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).add_scalar(k);
        self.push(t, Op::AddConst(x), &[x])
    }

    pub fn mul_const(&mut self, x: Var, c: Arc<Tensor>) -> Var {
        let d = zip2(self.value(x), &c, |a, b| a * b);
        self.push(Tensor::from_parts(self.shape_of(x), d), Op::MulConst(x, c), &[x])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).scale(k);
        self.push(t, Op::Scale(x, k), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    /// `min(x, 0)`.
    pub fn neg_part(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.min(0.0));
        self.push(t, Op::NegPart(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Ln(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    /// `W x` for `W: [rows, cols]`; `x` is read flat.
    pub fn dense(&mut self, w: Var, x: Var) -> Var {
        let (rows, cols) = match self.value(w).shape() {
            [r, c] => (*r, *c),
            s => panic!("dense weight must be 2-D, got {s:?}"),
        };
        assert_eq!(self.value(x).len(), cols, "dense input length");
        let mut out = vec![0.0; rows];
        matvec_raw(self.value(w).data(), rows, cols, self.value(x).data(), &mut out);
        self.push(Tensor::from_parts(vec![rows], out), Op::Dense { w, x, cols }, &[w, x])
    }

    /// `Wᵀ s`, reshaped to `out_shape`.
    pub fn dense_t(&mut self, w: Var, s: Var, out_shape: &[usize]) -> Var {
        let (rows, cols) = match self.value(w).shape() {
            [r, c] => (*r, *c),
            sh => panic!("dense weight must be 2-D, got {sh:?}"),
        };
        assert_eq!(self.value(s).len(), rows, "dense_t input length");
        assert_eq!(out_shape.iter().product::<usize>(), cols);
        let mut out = vec![0.0; cols];
        matvec_t_raw(self.value(w).data(), cols, self.value(s).data(), &mut out);
        self.push(
            Tensor::from_parts(out_shape.to_vec(), out),
            Op::DenseT { w, s, cols },
            &[w, s],
        )
    }

    pub fn conv(&mut self, w: Var, x: Var, dims: ConvDims) -> Var {
        assert_eq!(self.value(x).len(), dims.in_len(), "conv input length");
        let mut out = vec![0.0; dims.out_len()];
        dims.forward_raw(self.value(x).data(), self.value(w).data(), &mut out);
        self.push(
            Tensor::from_parts(vec![dims.f, dims.oh, dims.ow], out),
            Op::Conv { w, x, dims },
            &[w, x],
        )
    }

    pub fn conv_t(&mut self, w: Var, s: Var, dims: ConvDims) -> Var {
        assert_eq!(self.value(s).len(), dims.out_len(), "conv_t input length");
        let mut out = vec![0.0; dims.in_len()];
        dims.adjoint_raw(self.value(s).data(), self.value(w).data(), &mut out);
        self.push(
            Tensor::from_parts(vec![dims.c, dims.h, dims.w], out),
            Op::ConvT { w, s, dims },
            &[w, s],
        )
    }

    /// Adds `b[c]` to every element of leading slice `c`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let channels = self.value(b).len();
        let plane = self.value(x).len() / channels;
        let mut out = self.value(x).clone();
        for (chunk, &bv) in out.data_mut().chunks_exact_mut(plane).zip(self.value(b).data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.push(out, Op::AddChannel { x, b, plane }, &[x, b])
    }

    /// Multiplies every element of leading slice `c` by `f[c]`.
    pub fn mul_channel(&mut self, x: Var, f: Var) -> Var {
        let channels = self.value(f).len();
        let plane = self.value(x).len() / channels;
        let mut out = self.value(x).clone();
        for (chunk, &fv) in out.data_mut().chunks_exact_mut(plane).zip(self.value(f).data()) {
            chunk.iter_mut().for_each(|v| *v *= fv);
        }
        self.push(out, Op::MulChannel { x, f, plane }, &[x, f])
    }

    /// `y[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let xd = self.value(x).data();
        let d: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), d), Op::Gather { x, idx }, &[x])
    }

    /// `y[idx[i]] += x[i]` into a zero tensor of `shape`.
    pub fn scatter(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let mut out = Tensor::zeros(shape);
        {
            let od = out.data_mut();
            for (&i, &v) in idx.iter().zip(self.value(x).data()) {
                od[i] += v;
            }
        }
        self.push(out, Op::Scatter { x, idx }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .reshape(shape)
            .expect("reshape to a shape with a different element count");
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(t, Op::Mean(x), &[x])
    }

    /// Row `row` of a 2-D tensor.
    pub fn row(&mut self, w: Var, row: usize) -> Var {
        let cols = self.value(w).shape()[1];
        let d = self.value(w).data()[row * cols..(row + 1) * cols].to_vec();
        self.push(Tensor::from_parts(vec![cols], d), Op::Row { w, row }, &[w])
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let t = Tensor::scalar(self.value(x).data()[i]);
        self.push(t, Op::Index { x, i }, &[x])
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let t = self.value(x).scale(k);
        self.push(t, Op::MulScalarVar { x, s }, &[x, s])
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let t = self.value(x).map(|v| v / k);
        self.push(t, Op::DivScalarVar { x, s }, &[x, s])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let p = softmax_values(self.value(x).data());
        let t = Tensor::from_parts(self.shape_of(x), p);
        self.push(t, Op::Softmax(x), &[x])
    }

    /// `-ln softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits).data();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let t = Tensor::scalar(lse - z[label]);
        self.push(t, Op::CrossEntropy { logits, label }, &[logits])
    }

    /// Global weighted ranked pooling over each leading slice: sort descending,
    /// weight by `d^rank`, normalize by the weight sum. Returns one value per slice.
    pub fn gwrp(&mut self, x: Var, channels: usize, d: f64) -> Var {
        let v = self.value(x).data();
        let plane = v.len() / channels;
        let mut coef = vec![0.0; v.len()];
        let mut out = Vec::with_capacity(channels);
        for ch in 0..channels {
            let slice = &v[ch * plane..(ch + 1) * plane];
            let weights = crate::loss::gwrp_weights(slice, d);
            let mut acc = 0.0;
            for (i, w) in weights.into_iter().enumerate() {
                coef[ch * plane + i] = w;
                acc += w * slice[i];
            }
            out.push(acc);
        }
        let t = Tensor::from_parts(vec![channels], out);
        self.push(t, Op::Gwrp { x, plane, coef }, &[x])
    }

    /// Output relevance of the class-difference layer when explaining the
    /// log-odds of class `c`: `R_k = z_k e^{-z_k} / (Σ_{j≠c} e^{-z_j} + μ)`.
    pub fn selective_relevance(&mut self, z: Var, c: usize, mu: f64) -> Var {
        let zd = self.value(z).data();
        let ln_d = selective_log_denominator(zd, c, mu);
        let q: Vec<f64> = zd.iter().map(|&v| (-v - ln_d).exp()).collect();
        let r: Vec<f64> = zd.iter().zip(&q).map(|(&v, &qv)| v * qv).collect();
        let t = Tensor::from_parts(self.shape_of(z), r);
        self.push(t, Op::SelectiveRelevance { z, c, q }, &[z])
    }

    /// Piecewise foreground penalty: quadratic outside `[c1, c2]`, linear past `c2 + c1`.
    pub fn penalty(&mut self, s: Var, c1: f64, c2: f64) -> Var {
        let t = Tensor::scalar(crate::loss::foreground_penalty_f(self.value(s).item(), c1, c2));
        self.push(t, Op::Penalty { s, c1, c2 }, &[s])
    }

    /// Reverse sweep from `seeds` (each paired with the upstream gradient of
    /// the objective with respect to that value).
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape");
            accumulate(&mut grads, &self.nodes, *v, |dst| {
                dst.iter_mut().zip(g.data()).for_each(|(d, s)| *d += s)
            });
            top = top.max(v.0 + 1);
        }
        let mut params = Vec::new();
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if let Op::Param(slot) = node.op {
                params.push((slot, Var(i)));
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        params.reverse();
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, |d| add_into(d, gd));
                accumulate(grads, nodes, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, |d| add_into(d, gd));
                accumulate(grads, nodes, *b, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                accumulate(grads, nodes, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::SafeDiv(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |d| {
                    for i in 0..d.len() {
                        if bv[i] != 0.0 {
                            d[i] += gd[i] / bv[i];
                        }
                    }
                });
                accumulate(grads, nodes, *b, |d| {
                    for i in 0..d.len() {
                        if bv[i] != 0.0 {
                            d[i] -= gd[i] * av[i] / (bv[i] * bv[i]);
                        }
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => accumulate(grads, nodes, *x, |d| add_into(d, gd)),
            Op::MulConst(x, c) => accumulate(grads, nodes, *x, |d| {
                for ((o, &gv), &cv) in d.iter_mut().zip(gd).zip(c.data()) {
                    *o += gv * cv;
                }
            }),
            Op::Scale(x, k) => accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(gd).for_each(|(o, g)| *o += k * g)
            }),
            Op::Relu(x) => {
                let xv = val(*x);
                accumulate(grads, nodes, *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                })
            }
            Op::NegPart(x) => {
                let xv = val(*x);
                accumulate(grads, nodes, *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] < 0.0 {
                            d[i] += gd[i];
                        }
                    }
                })
            }
            Op::Abs(x) => {
                let xv = val(*x);
                accumulate(grads, nodes, *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += gd[i];
                        } else if xv[i] < 0.0 {
                            d[i] -= gd[i];
                        }
                    }
                })
            }
            Op::Ln(x) => {
                let xv = val(*x);
                accumulate(grads, nodes, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] / xv[i];
                    }
                })
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                accumulate(grads, nodes, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * yv[i];
                    }
                })
            }
            Op::Dense { w, x, cols } => {
                let (wv, xv) = (val(*w), val(*x));
                accumulate(grads, nodes, *x, |d| matvec_t_raw(wv, *cols, gd, d));
                accumulate(grads, nodes, *w, |d| outer_acc_raw(gd, xv, d));
            }
            Op::DenseT { w, s, cols } => {
                let (wv, sv) = (val(*w), val(*s));
                let rows = wv.len() / cols;
                accumulate(grads, nodes, *s, |d| matvec_raw(wv, rows, *cols, gd, d));
                accumulate(grads, nodes, *w, |d| outer_acc_raw(sv, gd, d));
            }
            Op::Conv { w, x, dims } => {
                let (wv, xv) = (val(*w), val(*x));
                accumulate(grads, nodes, *x, |d| dims.adjoint_raw(gd, wv, d));
                accumulate(grads, nodes, *w, |d| dims.weight_grad_raw(gd, xv, d));
            }
            Op::ConvT { w, s, dims } => {
                let (wv, sv) = (val(*w), val(*s));
                accumulate(grads, nodes, *s, |d| dims.forward_raw(gd, wv, d));
                accumulate(grads, nodes, *w, |d| dims.weight_grad_raw(sv, gd, d));
            }
            Op::AddChannel { x, b, plane } => {
                accumulate(grads, nodes, *x, |d| add_into(d, gd));
                accumulate(grads, nodes, *b, |d| {
                    for (o, chunk) in d.iter_mut().zip(gd.chunks_exact(*plane)) {
                        *o += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MulChannel { x, f, plane } => {
                let (xv, fv) = (val(*x), val(*f));
                accumulate(grads, nodes, *x, |d| {
                    for (c, (dc, gc)) in d.chunks_exact_mut(*plane).zip(gd.chunks_exact(*plane)).enumerate() {
                        dc.iter_mut().zip(gc).for_each(|(o, g)| *o += g * fv[c]);
                    }
                });
                accumulate(grads, nodes, *f, |d| {
                    for (c, o) in d.iter_mut().enumerate() {
                        let r = c * plane..(c + 1) * plane;
                        *o += gd[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Gather { x, idx } => accumulate(grads, nodes, *x, |d| {
                for (&i, &gv) in idx.iter().zip(gd) {
                    d[i] += gv;
                }
            }),
            Op::Scatter { x, idx } => accumulate(grads, nodes, *x, |d| {
                for (o, &i) in d.iter_mut().zip(idx.iter()) {
                    *o += gd[i];
                }
            }),
            Op::Sum(x) => accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|o| *o += gd[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|o| *o += gd[0] / n))
            }
            Op::Row { w, row } => accumulate(grads, nodes, *w, |d| {
                let cols = gd.len();
                add_into(&mut d[row * cols..(row + 1) * cols], gd)
            }),
            Op::Index { x, i } => accumulate(grads, nodes, *x, |d| d[*i] += gd[0]),
            Op::MulScalarVar { x, s } => {
                let (xv, k) = (val(*x), val(*s)[0]);
                accumulate(grads, nodes, *x, |d| d.iter_mut().zip(gd).for_each(|(o, g)| *o += g * k));
                accumulate(grads, nodes, *s, |d| {
                    d[0] += gd.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
                });
            }
            Op::DivScalarVar { x, s } => {
                let (xv, k) = (val(*x), val(*s)[0]);
                accumulate(grads, nodes, *x, |d| d.iter_mut().zip(gd).for_each(|(o, g)| *o += g / k));
                accumulate(grads, nodes, *s, |d| {
                    d[0] -= gd.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() / (k * k)
                });
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let gp: f64 = gd.iter().zip(p).map(|(a, b)| a * b).sum();
                accumulate(grads, nodes, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += p[i] * (gd[i] - gp);
                    }
                })
            }
            Op::CrossEntropy { logits, label } => {
                let p = softmax_values(val(*logits));
                accumulate(grads, nodes, *logits, |d| {
                    for i in 0..d.len() {
                        let t = if i == *label { 1.0 } else { 0.0 };
                        d[i] += gd[0] * (p[i] - t);
                    }
                })
            }
            Op::Gwrp { x, plane, coef } => accumulate(grads, nodes, *x, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    *o += gd[i / plane] * coef[i];
                }
            }),
            Op::SelectiveRelevance { z, c, q } => {
                let zv = val(*z);
                let r = node.value.data();
                let gr: f64 = gd.iter().zip(r).map(|(a, b)| a * b).sum();
                accumulate(grads, nodes, *z, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * (1.0 - zv[i]) * q[i];
                        if i != *c {
                            d[i] += q[i] * gr;
                        }
                    }
                })
            }
            Op::Penalty { s, c1, c2 } => {
                let sv = val(*s)[0];
                let slope = crate::loss::foreground_penalty_slope(sv, *c1, *c2);
                accumulate(grads, nodes, *s, |d| d[0] += gd[0] * slope)
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(slot.data_mut());
}

pub(crate) fn softmax_values(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `ln(Σ_{j≠c} e^{-z_j} + μ)` without overflow.
pub(crate) fn selective_log_denominator(z: &[f64], c: usize, mu: f64) -> f64 {
    let terms: Vec<f64> = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != c)
        .map(|(_, &v)| -v)
        .collect();
    let mut lse = f64::NEG_INFINITY;
    if !terms.is_empty() {
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    }
    if mu > 0.0 {
        let lm = mu.ln();
        let hi = lse.max(lm);
        hi + ((lse - hi).exp() + (lm - hi).exp()).ln()
    } else {
        lse
    }
}
