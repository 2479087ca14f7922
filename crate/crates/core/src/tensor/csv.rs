//! Plain-text tensor dumps: the first line holds the shape, each following
//! line one row of the last dimension.

use std::io::{BufRead, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_csv<W: Write>(tensor: &Tensor, mut out: W) -> Result<()> {
    let shape: Vec<String> = tensor.shape().iter().map(|e| e.to_string()).collect();
    writeln!(out, "{}", shape.join(","))?;
    let row = *tensor.shape().last().unwrap_or(&1);
    for chunk in tensor.data().chunks(row) {
        let cells: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Tensor> {
    let mut lines = input.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing shape line".into(),
    })?;
    let shape = header?
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad shape: {e}"),
        })?;
    let mut data = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for cell in line.split(',') {
            data.push(cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad value {cell:?}: {e}"),
            })?);
        }
    }
    Tensor::new(shape, data)
}
