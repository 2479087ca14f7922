//! IDX ubyte files: `0x00000803` image stacks and `0x00000801` label vectors,
//! big-endian extents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw 8-bit image stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len().checked_div(self.rows * self.cols).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: usize, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(format_err(
                    offset + filled,
                    format!("file ends inside {what} ({} of {} bytes)", filled, buf.len()),
                ))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, offset: usize, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, offset, what)?;
    Ok(u32::from_be_bytes(b))
}

fn check_magic<R: Read>(r: &mut R, expected: u32) -> Result<()> {
    let magic = read_u32(r, 0, "the magic number")?;
    if magic != expected {
        return Err(format_err(
            0,
            format!("magic number {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

fn check_trailing<R: Read>(r: &mut R, offset: usize) -> Result<()> {
    let mut b = [0u8; 1];
    loop {
        match r.read(&mut b) {
            Ok(0) => return Ok(()),
            Ok(_) => return Err(format_err(offset, "trailing bytes after the declared data")),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
}

pub fn read_images<R: Read>(mut r: R) -> Result<IdxImages> {
    check_magic(&mut r, IMAGE_MAGIC)?;
    let n = read_u32(&mut r, 4, "the item count")? as usize;
    let rows = read_u32(&mut r, 8, "the row count")? as usize;
    let cols = read_u32(&mut r, 12, "the column count")? as usize;
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(4, "declared extents overflow"))?;
    let mut pixels = vec![0u8; total];
    read_exact_at(&mut r, &mut pixels, 16, "the pixel data")?;
    check_trailing(&mut r, 16 + total)?;
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_labels<R: Read>(mut r: R) -> Result<Vec<u8>> {
    check_magic(&mut r, LABEL_MAGIC)?;
    let n = read_u32(&mut r, 4, "the item count")? as usize;
    let mut labels = vec![0u8; n];
    read_exact_at(&mut r, &mut labels, 8, "the label data")?;
    check_trailing(&mut r, 8 + n)?;
    Ok(labels)
}

pub fn write_images<W: Write>(images: &IdxImages, mut w: W) -> Result<()> {
    w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    for v in [images.len(), images.rows, images.cols] {
        w.write_all(&(v as u32).to_be_bytes())?;
    }
    w.write_all(&images.pixels)?;
    Ok(())
}

pub fn write_labels<W: Write>(labels: &[u8], mut w: W) -> Result<()> {
    w.write_all(&LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

pub fn read_images_file(path: &Path) -> Result<IdxImages> {
    read_images(BufReader::new(File::open(path)?))
}

pub fn read_labels_file(path: &Path) -> Result<Vec<u8>> {
    read_labels(BufReader::new(File::open(path)?))
}

pub fn write_images_file(images: &IdxImages, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_images(images, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_labels_file(labels: &[u8], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_labels(labels, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> IdxImages {
        IdxImages {
            rows: 2,
            cols: 3,
            pixels: (0..12).map(|v| v * 20).collect(),
        }
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        write_images(&fixture(), &mut buf).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 8, 3]);
        assert_eq!(read_images(buf.as_slice()).unwrap(), fixture());
        let mut buf = Vec::new();
        write_labels(&[3, 9], &mut buf).unwrap();
        assert_eq!(&buf[..8], &[0, 0, 8, 1, 0, 0, 0, 2]);
        assert_eq!(read_labels(buf.as_slice()).unwrap(), vec![3, 9]);
    }

    #[test]
    fn malformed_files() {
        assert!(matches!(read_images(&[][..]), Err(Error::Format { offset: 0, .. })));
        let mut buf = Vec::new();
        write_images(&fixture(), &mut buf).unwrap();
        assert!(matches!(read_labels(buf.as_slice()), Err(Error::Format { offset: 0, .. })));
        buf.truncate(20);
        assert!(matches!(read_images(buf.as_slice()), Err(Error::Format { offset: 20, .. })));
        let mut buf = Vec::new();
        write_labels(&[1], &mut buf).unwrap();
        buf.push(7);
        assert!(matches!(read_labels(buf.as_slice()), Err(Error::Format { offset: 9, .. })));
    }
}
