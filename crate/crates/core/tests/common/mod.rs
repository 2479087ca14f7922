//! Random ReLU networks with a naive reference forward pass and input
//! gradient, written independently of the library kernels.

#![allow(dead_code)]

use isnet::graph::{Model, ModelBuilder, NodeId};
use isnet::tensor::ConvGeometry;
use isnet::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub enum Op {
    Dense { w: Vec<f64>, b: Vec<f64>, out: usize },
    Conv { w: Vec<f64>, b: Vec<f64>, f: usize, k: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { win: usize, stride: usize },
    AvgPool { win: usize, stride: usize },
    Flatten,
}

/// A chain network: its ops, the shape entering each op, and the model built from it.
pub struct Net {
    pub input_shape: Vec<usize>,
    pub ops: Vec<Op>,
    pub shapes: Vec<Vec<usize>>,
    pub model: Model,
}

fn size(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn out_shape(op: &Op, s: &[usize]) -> Vec<usize> {
    match op {
        Op::Dense { out, .. } => vec![*out],
        Op::Conv { f, k, stride, pad, .. } => {
            vec![*f, (s[1] + 2 * pad - k) / stride + 1, (s[2] + 2 * pad - k) / stride + 1]
        }
        Op::MaxPool { win, stride } | Op::AvgPool { win, stride } => {
            vec![s[0], (s[1] - win) / stride + 1, (s[2] - win) / stride + 1]
        }
        Op::Relu => s.to_vec(),
        Op::Flatten => vec![size(s)],
    }
}

impl Net {
    pub fn new(input_shape: Vec<usize>, ops: Vec<Op>) -> Net {
        let mut shapes = vec![input_shape.clone()];
        for op in &ops {
            let s = out_shape(op, shapes.last().unwrap());
            shapes.push(s);
        }
        let mut b = ModelBuilder::new(&input_shape);
        let mut x: NodeId = b.input();
        for (op, s) in ops.iter().zip(&shapes) {
            x = match op {
                Op::Dense { w, b: bias, out } => b
                    .dense(
                        x,
                        Tensor::new(vec![*out, size(s)], w.clone()).unwrap(),
                        Tensor::vector(bias.clone()),
                    )
                    .unwrap(),
                Op::Conv { w, b: bias, f, k, stride, pad } => b
                    .conv2d(
                        x,
                        Tensor::new(vec![*f, s[0], *k, *k], w.clone()).unwrap(),
                        Tensor::vector(bias.clone()),
                        ConvGeometry::new(*stride, *pad),
                    )
                    .unwrap(),
                Op::Relu => b.relu(x).unwrap(),
                Op::MaxPool { win, stride } => b.maxpool(x, *win, *stride).unwrap(),
                Op::AvgPool { win, stride } => b.avgpool(x, *win, *stride).unwrap(),
                Op::Flatten => b.flatten(x).unwrap(),
            };
        }
        b.output(x).unwrap();
        let model = b.build().unwrap();
        Net { input_shape, ops, shapes, model }
    }

    pub fn classes(&self) -> usize {
        size(self.shapes.last().unwrap())
    }

    /// Activations entering each op, plus the final output.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (op, s) in self.ops.iter().zip(&self.shapes) {
            let a = acts.last().unwrap();
            let y = match op {
                Op::Dense { w, b, out } => {
                    let n = a.len();
                    (0..*out).map(|j| b[j] + (0..n).map(|i| w[j * n + i] * a[i]).sum::<f64>()).collect()
                }
                Op::Conv { w, b, f, k, stride, pad } => {
                    let (c, h, wd) = (s[0], s[1], s[2]);
                    let oh = (h + 2 * pad - k) / stride + 1;
                    let ow = (wd + 2 * pad - k) / stride + 1;
                    let mut y = vec![0.0; f * oh * ow];
                    for fi in 0..*f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[fi];
                                for ci in 0..c {
                                    for ky in 0..*k {
                                        for kx in 0..*k {
                                            let iy = (oy * stride + ky) as isize - *pad as isize;
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            acc += w[((fi * c + ci) * k + ky) * k + kx]
                                                * a[(ci * h + iy as usize) * wd + ix as usize];
                                        }
                                    }
                                }
                                y[(fi * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                    y
                }
                Op::Relu => a.iter().map(|v| v.max(0.0)).collect(),
                Op::MaxPool { win, stride } | Op::AvgPool { win, stride } => {
                    let max = matches!(op, Op::MaxPool { .. });
                    let (c, h, wd) = (s[0], s[1], s[2]);
                    let oh = (h - win) / stride + 1;
                    let ow = (wd - win) / stride + 1;
                    let mut y = Vec::with_capacity(c * oh * ow);
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let vals = (0..*win).flat_map(|dy| {
                                    (0..*win).map(move |dx| (oy * stride + dy, ox * stride + dx))
                                });
                                let vals: Vec<f64> = vals.map(|(yy, xx)| a[(ci * h + yy) * wd + xx]).collect();
                                y.push(if max {
                                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                                } else {
                                    vals.iter().sum::<f64>() / vals.len() as f64
                                });
                            }
                        }
                    }
                    y
                }
                Op::Flatten => a.clone(),
            };
            acts.push(y);
        }
        acts
    }

    /// Gradient of output `class` with respect to the input.
    pub fn input_gradient(&self, x: &[f64], class: usize) -> Vec<f64> {
        let acts = self.forward(x);
        let mut g = vec![0.0; self.classes()];
        g[class] = 1.0;
        for (idx, op) in self.ops.iter().enumerate().rev() {
            let s = &self.shapes[idx];
            let a = &acts[idx];
            let mut gi = vec![0.0; a.len()];
            match op {
                Op::Dense { w, out, .. } => {
                    let n = a.len();
                    for j in 0..*out {
                        for i in 0..n {
                            gi[i] += w[j * n + i] * g[j];
                        }
                    }
                }
                Op::Conv { w, f, k, stride, pad, .. } => {
                    let (c, h, wd) = (s[0], s[1], s[2]);
                    let oh = (h + 2 * pad - k) / stride + 1;
                    let ow = (wd + 2 * pad - k) / stride + 1;
                    for fi in 0..*f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[(fi * oh + oy) * ow + ox];
                                for ci in 0..c {
                                    for ky in 0..*k {
                                        for kx in 0..*k {
                                            let iy = (oy * stride + ky) as isize - *pad as isize;
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            gi[(ci * h + iy as usize) * wd + ix as usize] +=
                                                w[((fi * c + ci) * k + ky) * k + kx] * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Relu => {
                    for i in 0..a.len() {
                        gi[i] = if a[i] > 0.0 { g[i] } else { 0.0 };
                    }
                }
                Op::MaxPool { win, stride } | Op::AvgPool { win, stride } => {
                    let max = matches!(op, Op::MaxPool { .. });
                    let (c, h, wd) = (s[0], s[1], s[2]);
                    let oh = (h - win) / stride + 1;
                    let ow = (wd - win) / stride + 1;
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[(ci * oh + oy) * ow + ox];
                                let cells: Vec<usize> = (0..*win)
                                    .flat_map(|dy| (0..*win).map(move |dx| (oy * stride + dy, ox * stride + dx)))
                                    .map(|(yy, xx)| (ci * h + yy) * wd + xx)
                                    .collect();
                                if max {
                                    let mut best = cells[0];
                                    for &p in &cells {
                                        if a[p] > a[best] {
                                            best = p;
                                        }
                                    }
                                    gi[best] += go;
                                } else {
                                    for &p in &cells {
                                        gi[p] += go / cells.len() as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Flatten => gi.copy_from_slice(&g),
            }
            g = gi;
        }
        g
    }
}

fn dense(rng: &mut impl Rng, n_in: usize, out: usize, bias: bool) -> Op {
    let scale = (3.0 / n_in as f64).sqrt();
    Op::Dense {
        w: uniform(rng, out * n_in, scale),
        b: if bias { uniform(rng, out, 0.1) } else { vec![0.0; out] },
        out,
    }
}

/// MLP with 1–5 dense layers, widths ≤ 16.
pub fn random_mlp(rng: &mut impl Rng, bias: bool) -> Net {
    let n_in = rng.random_range(2..=16);
    let depth = rng.random_range(1..=5);
    let mut ops = Vec::new();
    let mut width = n_in;
    for d in 0..depth {
        let out = if d + 1 == depth { rng.random_range(2..=8) } else { rng.random_range(2..=16) };
        ops.push(dense(rng, width, out, bias));
        if d + 1 < depth {
            ops.push(Op::Relu);
        }
        width = out;
    }
    Net::new(vec![n_in], ops)
}

/// CNN with 1–3 conv layers (each followed by ReLU, sometimes pooling) and a
/// dense output layer; spatial extents ≤ 16.
pub fn random_cnn(rng: &mut impl Rng, bias: bool) -> Net {
    let c = rng.random_range(1..=3);
    let side = rng.random_range(6..=16);
    let input = vec![c, side, side];
    let convs = rng.random_range(1..=3);
    let mut ops = Vec::new();
    let mut shape = input.clone();
    for _ in 0..convs {
        let k = if shape[1] >= 3 { rng.random_range(1..=3) } else { 1 };
        let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
        let f = rng.random_range(1..=4);
        let scale = (3.0 / (shape[0] * k * k) as f64).sqrt();
        let op = Op::Conv {
            w: uniform(rng, f * shape[0] * k * k, scale),
            b: if bias { uniform(rng, f, 0.1) } else { vec![0.0; f] },
            f,
            k,
            stride: 1,
            pad,
        };
        shape = out_shape(&op, &shape);
        ops.push(op);
        ops.push(Op::Relu);
        if shape[1] >= 4 {
            let pool = match rng.random_range(0..3) {
                0 => Some(Op::MaxPool { win: 2, stride: 2 }),
                1 => Some(Op::AvgPool { win: 2, stride: 2 }),
                _ => None,
            };
            if let Some(p) = pool {
                shape = out_shape(&p, &shape);
                ops.push(p);
            }
        }
    }
    ops.push(Op::Flatten);
    let classes = rng.random_range(2..=6);
    ops.push(dense(rng, size(&shape), classes, bias));
    Net::new(input, ops)
}

pub fn random_net(rng: &mut impl Rng, index: usize, bias: bool) -> Net {
    if index.is_multiple_of(2) {
        random_mlp(rng, bias)
    } else {
        random_cnn(rng, bias)
    }
}

pub fn random_input(rng: &mut impl Rng, net: &Net, nonnegative: bool) -> Tensor {
    let n = size(&net.input_shape);
    let data = (0..n)
        .map(|_| if nonnegative { rng.random_range(0.0..1.0) } else { rng.random_range(-1.0..1.0) })
        .collect();
    Tensor::new(net.input_shape.clone(), data).unwrap()
}

/// `max |a − b| / max |b|`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
