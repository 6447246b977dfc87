//! Class-sorted image banks and their on-disk cache.
//!
//! Cache layout (`<root>/cache/<source>-<split>.bank`, little endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 8                | magic `HSBBANK1`                          |
//! | 4                | channels (u32)                            |
//! | 4                | number of classes K (u32)                 |
//! | 4·K              | images per class (u32 each)               |
//! | rest             | pixels, class 0 first, file order within  |
//!
//! Each image is `channels × 32 × 32` bytes, channel-major, already padded
//! to 32×32.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{make_patch, quantize, PatchClass, SourceKind, Split, PLANE};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HSBBANK1";

#[derive(Clone, Debug, PartialEq)]
pub struct ClassBank {
    channels: usize,
    counts: Vec<usize>,
    offsets: Vec<usize>,
    data: Vec<u8>,
}

impl ClassBank {
    /// Builds a bank from per-class image lists.
    pub fn from_classes(channels: usize, classes: Vec<Vec<u8>>) -> Result<Self> {
        let stride = channels * PLANE;
        let mut counts = Vec::with_capacity(classes.len());
        let mut offsets = Vec::with_capacity(classes.len());
        let mut data = Vec::with_capacity(classes.iter().map(Vec::len).sum());
        for (c, imgs) in classes.into_iter().enumerate() {
            if imgs.len() % stride != 0 {
                return Err(Error::data(format!(
                    "class {c}: {} bytes is not a multiple of the image size {stride}",
                    imgs.len()
                )));
            }
            offsets.push(data.len());
            counts.push(imgs.len() / stride);
            data.extend_from_slice(&imgs);
        }
        Ok(ClassBank {
            channels,
            counts,
            offsets,
            data,
        })
    }

    pub(crate) fn patches() -> Self {
        let classes = PatchClass::ALL
            .iter()
            .map(|&p| make_patch(p).pixels.iter().map(|&v| quantize(v)).collect())
            .collect();
        ClassBank::from_classes(1, classes).expect("patch geometry")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, class_id: u32) -> usize {
        self.counts.get(class_id as usize).copied().unwrap_or(0)
    }

    pub fn check_class(&self, class_id: u32) -> Result<()> {
        if (class_id as usize) < self.counts.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "class id".into(),
                index: class_id as usize,
                len: self.counts.len(),
            })
        }
    }

    /// Raw bytes of the `index`-th image of `class_id`.
    pub fn image(&self, class_id: u32, index: usize) -> Result<&[u8]> {
        self.check_class(class_id)?;
        let n = self.count(class_id);
        if index >= n {
            return Err(Error::OutOfRange {
                what: format!("image of class {class_id}"),
                index,
                len: n,
            });
        }
        let stride = self.channels * PLANE;
        let start = self.offsets[class_id as usize] + index * stride;
        Ok(&self.data[start..start + stride])
    }

    fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(self.channels as u32).to_le_bytes())?;
        out.write_all(&(self.counts.len() as u32).to_le_bytes())?;
        for &c in &self.counts {
            out.write_all(&(c as u32).to_le_bytes())?;
        }
        out.write_all(&self.data)
    }

    fn read_from(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::data("corrupt bank cache");
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad());
        }
        let u32_at = |at: usize| -> Result<usize> {
            let b = bytes.get(at..at + 4).ok_or_else(bad)?;
            Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
        };
        let channels = u32_at(8)?;
        let k = u32_at(12)?;
        let counts = (0..k)
            .map(|i| u32_at(16 + 4 * i))
            .collect::<Result<Vec<_>>>()?;
        let body = &bytes[16 + 4 * k..];
        let stride = channels * PLANE;
        if body.len() != counts.iter().sum::<usize>() * stride {
            return Err(bad());
        }
        let mut offsets = Vec::with_capacity(k);
        let mut acc = 0;
        for &c in &counts {
            offsets.push(acc);
            acc += c * stride;
        }
        Ok(ClassBank {
            channels,
            counts,
            offsets,
            data: body.to_vec(),
        })
    }
}

pub(crate) fn cache_path(root: &Path, kind: SourceKind, split: Split) -> PathBuf {
    root.join("cache")
        .join(format!("{}-{}.bank", kind.name(), split.name()))
}

/// Reads the cached bank or decodes the source and writes the cache.
///
/// The cache is written to a temporary file and renamed into place so that
/// concurrent processes never observe a partial file.
pub(crate) fn load_cached(
    root: &Path,
    kind: SourceKind,
    split: Split,
    decode: impl FnOnce(&Path) -> Result<ClassBank>,
) -> Result<ClassBank> {
    let path = cache_path(root, kind, split);
    if let Ok(bytes) = fs::read(&path) {
        match ClassBank::read_from(&bytes) {
            Ok(bank) => return Ok(bank),
            Err(e) => log::warn!("ignoring {}: {e}", path.display()),
        }
    }
    let bank = decode(root)?;
    if let Err(e) = write_cache(&path, &bank) {
        log::warn!("could not write bank cache {}: {e}", path.display());
    }
    Ok(bank)
}

fn write_cache(path: &Path, bank: &ClassBank) -> std::io::Result<()> {
    let dir = path.parent().expect("cache path has a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().unwrap().to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        bank.write_to(&mut f)?;
        f.flush()?;
    }
    fs::rename(tmp, path)
}
