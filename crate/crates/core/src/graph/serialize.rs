//! Checkpoint text format.
//!
//! ```text
//! isnet-model 1
//! node 0 Input shape=1x28x28 inputs=
//! node 1 Conv2d shape=4x28x28 inputs=0 stride=1 padding=1
//! node 2 BatchNorm shape=4x28x28 inputs=1 eps=0.00001
//! ...
//! tensor 1 weight
//! <tensor csv: shape line, then rows>
//! ...
//! end
//! ```
//!
//! Nodes appear in id order and tensors in parameter order, so two saves of
//! the same model are byte-identical.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{write_csv, ConvGeometry, Tensor};

use super::model::{BatchNormParams, LayerKind, LayerNode, Model};

const MAGIC: &str = "isnet-model 1";

fn tensor_names(kind: &LayerKind) -> Vec<(&'static str, &Tensor)> {
    match kind {
        LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
            vec![("weight", weight), ("bias", bias)]
        }
        LayerKind::BatchNorm(bn) => vec![
            ("mean", &bn.mean),
            ("var", &bn.var),
            ("scale", &bn.scale),
            ("shift", &bn.shift),
        ],
        _ => Vec::new(),
    }
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn write_model<W: Write>(model: &Model, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    for (id, n) in model.nodes().iter().enumerate() {
        write!(out, "node {id} {} shape={} inputs={}", n.kind.name(), join(&n.shape, "x"), join(&n.inputs, ","))?;
        match &n.kind {
            LayerKind::Conv2d { geom, .. } => write!(out, " stride={} padding={}", geom.stride, geom.padding)?,
            LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
                write!(out, " window={window} stride={stride}")?
            }
            LayerKind::BatchNorm(bn) => write!(out, " eps={:?}", bn.eps)?,
            _ => {}
        }
        writeln!(out)?;
    }
    for (id, n) in model.nodes().iter().enumerate() {
        for (name, t) in tensor_names(&n.kind) {
            writeln!(out, "tensor {id} {name}")?;
            write_csv(t, &mut out)?;
        }
    }
    writeln!(out, "end")?;
    Ok(())
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let f = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(f))
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let header = self.next_line()?;
        let shape: Vec<usize> = header
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.err(format!("bad tensor shape {header:?}: {e}")))?;
        let n: usize = shape.iter().product();
        let row = *shape.last().ok_or_else(|| self.err("empty tensor shape"))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n / row.max(1) {
            let l = self.next_line()?;
            for cell in l.split(',') {
                data.push(cell.trim().parse::<f64>().map_err(|e| self.err(format!("bad value {cell:?}: {e}")))?);
            }
        }
        Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))
    }
}

fn field<'a>(parts: &'a [&str], key: &str) -> Option<&'a str> {
    parts.iter().find_map(|p| p.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

pub fn read_model<R: BufRead>(input: R) -> Result<Model> {
    let mut lines = Lines {
        inner: input.lines(),
        line: 0,
    };
    if lines.next_line()?.trim() != MAGIC {
        return Err(lines.err(format!("expected header {MAGIC:?}")));
    }
    struct Spec {
        kind: String,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        stride: usize,
        padding: usize,
        window: usize,
        eps: f64,
    }
    let mut specs: Vec<Spec> = Vec::new();
    let mut tensors: Vec<Vec<(String, Tensor)>> = Vec::new();
    loop {
        let l = lines.next_line()?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.first().copied() {
            Some("node") => {
                if parts.len() < 5 || parts[1].parse::<usize>().ok() != Some(specs.len()) {
                    return Err(lines.err("node lines must be numbered consecutively from 0"));
                }
                let nums = |s: Option<&str>, sep: char| -> Result<Vec<usize>> {
                    match s {
                        None | Some("") => Ok(Vec::new()),
                        Some(s) => s
                            .split(sep)
                            .map(|x| x.parse().map_err(|e| lines.err(format!("bad number {x:?}: {e}"))))
                            .collect(),
                    }
                };
                let one = |key: &str| -> Result<usize> {
                    field(&parts, key).unwrap_or("0").parse().map_err(|e| lines.err(format!("bad {key}: {e}")))
                };
                specs.push(Spec {
                    kind: parts[2].to_string(),
                    shape: nums(field(&parts, "shape"), 'x')?,
                    inputs: nums(field(&parts, "inputs"), ',')?,
                    stride: one("stride")?,
                    padding: one("padding")?,
                    window: one("window")?,
                    eps: field(&parts, "eps")
                        .unwrap_or("0")
                        .parse()
                        .map_err(|e| lines.err(format!("bad eps: {e}")))?,
                });
                tensors.push(Vec::new());
            }
            Some("tensor") => {
                let id: usize = parts
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .filter(|&i| i < specs.len())
                    .ok_or_else(|| lines.err("tensor line names an unknown node"))?;
                let name = parts.get(2).ok_or_else(|| lines.err("tensor line lacks a name"))?.to_string();
                let t = lines.tensor()?;
                tensors[id].push((name, t));
            }
            Some("end") => break,
            _ => return Err(lines.err(format!("unexpected line {l:?}"))),
        }
    }
    let mut nodes = Vec::with_capacity(specs.len());
    for (id, (s, ts)) in specs.into_iter().zip(tensors).enumerate() {
        let take = |name: &str| -> Result<Tensor> {
            let pos = ts
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("node {id} lacks tensor {name:?}"),
                })?;
            Ok(ts[pos].1.clone())
        };
        let kind = match s.kind.as_str() {
            "Input" => LayerKind::Input,
            "Dense" => LayerKind::Dense {
                weight: take("weight")?,
                bias: take("bias")?,
            },
            "Conv2d" => LayerKind::Conv2d {
                weight: take("weight")?,
                bias: take("bias")?,
                geom: ConvGeometry::new(s.stride, s.padding),
            },
            "BatchNorm" => LayerKind::BatchNorm(BatchNormParams {
                mean: take("mean")?,
                var: take("var")?,
                scale: take("scale")?,
                shift: take("shift")?,
                eps: s.eps,
            }),
            "ReLU" => LayerKind::Relu,
            "MaxPool" => LayerKind::MaxPool {
                window: s.window,
                stride: s.stride,
            },
            "AvgPool" => LayerKind::AvgPool {
                window: s.window,
                stride: s.stride,
            },
            "Flatten" => LayerKind::Flatten,
            "SumJunction" => LayerKind::SumJunction,
            "Output" => LayerKind::Output,
            other => {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("unknown node kind {other:?}"),
                })
            }
        };
        nodes.push(LayerNode {
            kind,
            inputs: s.inputs,
            shape: s.shape.clone(),
        });
    }
    let declared: Vec<Vec<usize>> = nodes.iter().map(|n| n.shape.clone()).collect();
    let model = Model::from_nodes(nodes)?;
    for (id, shape) in declared.iter().enumerate() {
        if &model.node(id).shape != shape {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "node {id} declares shape {:?} but its layer produces {:?}",
                    shape,
                    model.node(id).shape
                ),
            });
        }
    }
    Ok(model)
}
