//! Heatmap files: 8-bit PGM images and tensor CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{write_csv, Tensor};

use super::rules::Heatmap;

/// Grey levels `128 + 127·R/max|R|`, channels summed first. An all-zero map
/// is uniformly 128.
pub fn heatmap_pixels(relevance: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = match relevance.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        [n] => (1, 1, *n),
        other => return Err(dim_err!("cannot render a heatmap of shape {other:?}")),
    };
    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for (p, v) in plane.iter_mut().zip(&relevance.data()[ch * h * w..(ch + 1) * h * w]) {
            *p += v;
        }
    }
    let max = plane.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let px = plane
        .iter()
        .map(|&v| {
            let level = if max > 0.0 { 128.0 + 127.0 * v / max } else { 128.0 };
            level.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok((h, w, px))
}

pub fn write_pgm<W: Write>(relevance: &Tensor, mut out: W) -> Result<()> {
    let (h, w, px) = heatmap_pixels(relevance)?;
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(&px)?;
    Ok(())
}

/// Reads a binary (P5) 8-bit PGM as a `[1, h, w]` tensor scaled to `[0, 1]`.
pub fn read_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: start, message: "truncated PGM header".into() });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format { offset: 0, message: "not a binary PGM (P5)".into() });
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| Error::Format { offset: 0, message: format!("bad PGM {what} '{t}'") })
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format { offset: 0, message: format!("unsupported PGM maxval {maxval}") });
    }
    let start = pos + 1;
    let body = bytes.get(start..start + w * h).ok_or(Error::Format {
        offset: bytes.len(),
        message: format!("PGM body shorter than {w}x{h}"),
    })?;
    let data = body.iter().map(|&b| b as f64 / maxval as f64).collect();
    Tensor::new(vec![1, h, w], data)
}

/// `{stem}_{target}_layer{id}.pgm`, e.g. `digit7_selective-c7_layer0.pgm`.
pub fn heatmap_file_name(stem: &str, map: &Heatmap, extension: &str) -> String {
    format!("{stem}_{}_layer{}.{extension}", map.target.tag(), map.layer_id)
}

/// Writes each map as PGM and CSV into `dir`; returns the PGM paths.
pub fn export_heatmaps(dir: &Path, stem: &str, maps: &[Heatmap]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(maps.len());
    for map in maps {
        let pgm = dir.join(heatmap_file_name(stem, map, "pgm"));
        let mut f = BufWriter::new(File::create(&pgm)?);
        write_pgm(&map.relevance, &mut f)?;
        f.flush()?;
        let mut f = BufWriter::new(File::create(dir.join(heatmap_file_name(stem, map, "csv")))?);
        write_csv(&map.relevance, &mut f)?;
        f.flush()?;
        written.push(pgm);
    }
    Ok(written)
}
