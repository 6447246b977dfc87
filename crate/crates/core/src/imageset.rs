use serde::{Deserialize, Serialize};

use crate::datasets::PLANE;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub type Label = u32;

/// Coarse-feature group of a sample: the class ids of its coarse levels, in
/// level order (or a variant-specific group id).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupKey(pub Vec<u32>);

impl GroupKey {
    pub fn prefix(&self, depth: usize) -> GroupKey {
        GroupKey(self.0[..depth.min(self.0.len())].to_vec())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn starts_with(&self, other: &GroupKey) -> bool {
        self.0.starts_with(&other.0)
    }
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// A labeled set of C×32×32 byte images with one group key per sample.
///
/// Pixels are kept as bytes (value / 255 is the `[0, 1]` intensity); every
/// source in this crate is byte-valued, so this is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    channels: usize,
    num_labels: usize,
    pixels: Vec<u8>,
    labels: Vec<Label>,
    groups: Vec<GroupKey>,
}

impl ImageSet {
    pub fn new(
        channels: usize,
        num_labels: usize,
        pixels: Vec<u8>,
        labels: Vec<Label>,
        groups: Vec<GroupKey>,
    ) -> Result<Self> {
        if channels == 0 || pixels.len() != labels.len() * channels * PLANE {
            return Err(Error::data(format!(
                "{} pixel bytes do not match {} images of {channels} channels",
                pixels.len(),
                labels.len()
            )));
        }
        if groups.len() != labels.len() {
            return Err(Error::data("one group key per image required"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(Error::OutOfRange {
                what: "label".into(),
                index: bad as usize,
                len: num_labels,
            });
        }
        Ok(ImageSet {
            channels,
            num_labels,
            pixels,
            labels,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn stride(&self) -> usize {
        self.channels * PLANE
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn groups(&self) -> &[GroupKey] {
        &self.groups
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.stride()..(i + 1) * self.stride()]
    }

    /// Gathers the images at `indices` as `[0, 1]` floats, image-major.
    pub fn gather_f32(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            out.extend(self.image(i).iter().map(|&b| f32::from(b) * (1.0 / 255.0)));
        }
        out
    }

    /// Subset of samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet {
            channels: self.channels,
            num_labels: self.num_labels,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i].clone()).collect(),
        }
    }

    /// Keeps only channels `range` of every image.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Result<ImageSet> {
        if range.is_empty() || range.end > self.channels {
            return Err(Error::spec(format!(
                "channel range {range:?} outside 0..{}",
                self.channels
            )));
        }
        let mut pixels = Vec::with_capacity(self.len() * range.len() * PLANE);
        for i in 0..self.len() {
            let img = self.image(i);
            pixels.extend_from_slice(&img[range.start * PLANE..range.end * PLANE]);
        }
        Ok(ImageSet {
            channels: range.len(),
            num_labels: self.num_labels,
            pixels,
            labels: self.labels.clone(),
            groups: self.groups.clone(),
        })
    }

    /// Concatenates sets with identical geometry.
    pub fn concat(parts: &[ImageSet]) -> Result<ImageSet> {
        let first = parts
            .first()
            .ok_or_else(|| Error::data("nothing to concatenate"))?;
        let mut out = ImageSet {
            channels: first.channels,
            num_labels: first.num_labels,
            pixels: Vec::new(),
            labels: Vec::new(),
            groups: Vec::new(),
        };
        for p in parts {
            if p.channels != out.channels || p.num_labels != out.num_labels {
                return Err(Error::data("cannot concatenate sets of different geometry"));
            }
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
            out.groups.extend(p.groups.iter().cloned());
        }
        Ok(out)
    }

    /// SHA-256 over geometry, labels, group keys and pixels.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.pixels.len() + self.labels.len() * 8 + 16);
        bytes.extend((self.channels as u64).to_le_bytes());
        bytes.extend((self.num_labels as u64).to_le_bytes());
        for (l, g) in self.labels.iter().zip(&self.groups) {
            bytes.extend(l.to_le_bytes());
            bytes.extend((g.0.len() as u32).to_le_bytes());
            for c in &g.0 {
                bytes.extend(c.to_le_bytes());
            }
        }
        bytes.extend_from_slice(&self.pixels);
        sha256_hex(&bytes)
    }

    #[cfg(test)]
    pub(crate) fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }
}
