//! IDX decoding for MNIST, padded from 28×28 to 32×32 with a 2-pixel border.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{bank::ClassBank, Split, SIDE};
use crate::error::{Error, Result};

const RAW_SIDE: usize = 28;
const PAD: usize = (SIDE - RAW_SIDE) / 2;

const HINT: &str = "MNIST idx files not found; run scripts/fetch_mnist.sh <data-root> \
                    or place train/t10k *-idx?-ubyte[.gz] files under <data-root>/mnist/";

fn prefix(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "t10k",
    }
}

/// Reads `name` or `name.gz` from the mnist directory.
fn read_idx(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let raw = dir.join(name);
    if raw.is_file() {
        return Ok(fs::read(raw)?);
    }
    let gz: PathBuf = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        let mut out = Vec::new();
        GzDecoder::new(fs::File::open(&gz)?).read_to_end(&mut out)?;
        return Ok(out);
    }
    Err(Error::DataUnavailable {
        path: raw,
        hint: HINT.into(),
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::data("truncated idx header"))
}

pub(super) fn decode(root: &Path, split: Split) -> Result<ClassBank> {
    let dir = root.join("mnist");
    let images = read_idx(&dir, &format!("{}-images-idx3-ubyte", prefix(split)))?;
    let labels = read_idx(&dir, &format!("{}-labels-idx1-ubyte", prefix(split)))?;
    if be_u32(&images, 0)? != 0x0803 || be_u32(&labels, 0)? != 0x0801 {
        return Err(Error::data("bad idx magic number"));
    }
    let n = be_u32(&images, 4)?;
    let (rows, cols) = (be_u32(&images, 8)?, be_u32(&images, 12)?);
    if rows != RAW_SIDE || cols != RAW_SIDE || be_u32(&labels, 4)? != n {
        return Err(Error::data("unexpected MNIST geometry"));
    }
    let pixels = &images[16..];
    let labels = &labels[8..];
    if pixels.len() != n * RAW_SIDE * RAW_SIDE || labels.len() != n {
        return Err(Error::data("truncated MNIST file"));
    }
    let mut classes: Vec<Vec<u8>> = vec![Vec::new(); 10];
    for (i, &label) in labels.iter().enumerate() {
        let class = classes
            .get_mut(label as usize)
            .ok_or_else(|| Error::data(format!("MNIST label {label} out of range")))?;
        let raw = &pixels[i * RAW_SIDE * RAW_SIDE..(i + 1) * RAW_SIDE * RAW_SIDE];
        class.extend(pad(raw));
    }
    ClassBank::from_classes(1, classes)
}

/// Centers a 28×28 digit on a 32×32 zero canvas.
pub(crate) fn pad(raw: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; SIDE * SIDE];
    for r in 0..RAW_SIDE {
        let dst = (r + PAD) * SIDE + PAD;
        out[dst..dst + RAW_SIDE].copy_from_slice(&raw[r * RAW_SIDE..(r + 1) * RAW_SIDE]);
    }
    out
}
