//! The three building-block image sources, all exposed as 32×32 planes with
//! pixel values in `[0, 1]`.
//!
//! MNIST and CIFAR-10 are read from a data root in their standard
//! distribution formats:
//!
//! ```text
//! <root>/mnist/train-images-idx3-ubyte[.gz]   <root>/mnist/train-labels-idx1-ubyte[.gz]
//! <root>/mnist/t10k-images-idx3-ubyte[.gz]    <root>/mnist/t10k-labels-idx1-ubyte[.gz]
//! <root>/cifar-10-batches-bin/data_batch_{1..5}.bin
//! <root>/cifar-10-batches-bin/test_batch.bin
//! ```
//!
//! Decoded splits are cached under `<root>/cache/` as class-sorted byte banks
//! (see [`bank`]). Patches are generated, never read.

pub mod bank;
mod cifar;
mod mnist;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use bank::ClassBank;

use crate::error::{Error, Result};

/// Image side length shared by every source.
pub const SIDE: usize = 32;
/// Pixels per channel plane.
pub const PLANE: usize = SIDE * SIDE;

/// Environment variable that overrides the data root.
pub const DATA_ROOT_ENV: &str = "HIERBIAS_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Patch,
    Mnist,
    Cifar10,
}

impl SourceKind {
    pub fn channels(self) -> usize {
        match self {
            SourceKind::Patch | SourceKind::Mnist => 1,
            SourceKind::Cifar10 => 3,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            SourceKind::Patch => 4,
            SourceKind::Mnist | SourceKind::Cifar10 => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Patch => "patch",
            SourceKind::Mnist => "mnist",
            SourceKind::Cifar10 => "cifar10",
        }
    }

    /// Short human label for a class id, used in rendered trees and tables.
    pub fn class_name(self, class_id: u32) -> String {
        const CIFAR: [&str; 10] = [
            "airplane",
            "automobile",
            "bird",
            "cat",
            "deer",
            "dog",
            "frog",
            "horse",
            "ship",
            "truck",
        ];
        match self {
            SourceKind::Patch => PatchClass::from_id(class_id)
                .map(|p| p.name().to_string())
                .unwrap_or_else(|| format!("patch{class_id}")),
            SourceKind::Mnist => format!("digit {class_id}"),
            SourceKind::Cifar10 => CIFAR
                .get(class_id as usize)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("cifar{class_id}")),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// The four deterministic corner patches. Class ids follow declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClass {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl PatchClass {
    pub const ALL: [PatchClass; 4] = [
        PatchClass::UpperLeft,
        PatchClass::UpperRight,
        PatchClass::LowerLeft,
        PatchClass::LowerRight,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PatchClass::UpperLeft => "upper-left",
            PatchClass::UpperRight => "upper-right",
            PatchClass::LowerLeft => "lower-left",
            PatchClass::LowerRight => "lower-right",
        }
    }

    /// Row and column ranges of the white quadrant.
    fn quadrant(self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let half = SIDE / 2;
        let (top, left) = match self {
            PatchClass::UpperLeft => (true, true),
            PatchClass::UpperRight => (true, false),
            PatchClass::LowerLeft => (false, true),
            PatchClass::LowerRight => (false, false),
        };
        let rows = if top { 0..half } else { half..SIDE };
        let cols = if left { 0..half } else { half..SIDE };
        (rows, cols)
    }
}

/// One channels×32×32 image with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceImage {
    pub pixels: Vec<f32>,
    pub channels: usize,
    pub source: SourceKind,
    pub class_id: u32,
    pub split: Split,
    pub index: usize,
}

impl SourceImage {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, SIDE, SIDE)
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.pixels[channel * PLANE + row * SIDE + col]
    }

    pub(crate) fn from_bytes(
        bytes: &[u8],
        source: SourceKind,
        class_id: u32,
        split: Split,
        index: usize,
    ) -> Self {
        SourceImage {
            pixels: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
            channels: bytes.len() / PLANE,
            source,
            class_id,
            split,
            index,
        }
    }

    /// Quantizes back to bytes, rounding to the nearest level.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| quantize(p)).collect()
    }
}

pub(crate) fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A white 16×16 quadrant at `corner`, black elsewhere.
pub fn make_patch(corner: PatchClass) -> SourceImage {
    let mut pixels = vec![0.0f32; PLANE];
    let (rows, cols) = corner.quadrant();
    for r in rows {
        for c in cols.clone() {
            pixels[r * SIDE + c] = 1.0;
        }
    }
    SourceImage {
        pixels,
        channels: 1,
        source: SourceKind::Patch,
        class_id: corner.id(),
        split: Split::Train,
        index: 0,
    }
}

/// Resolves the data root: explicit path, then `HIERBIAS_DATA_ROOT`, then `./data`.
pub fn resolve_data_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Lazily loads and caches class banks per (source, split).
///
/// Banks are decoded once and shared; the lock serializes decoding and cache
/// writes, reads afterwards go through the shared `Arc`.
pub struct SourceStore {
    root: Option<PathBuf>,
    banks: Mutex<HashMap<(SourceKind, Split), Arc<ClassBank>>>,
}

impl SourceStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        SourceStore {
            root: Some(root.into()),
            banks: Mutex::new(HashMap::new()),
        }
    }

    /// A store with no backing directory; only patches and inserted banks resolve.
    pub fn in_memory() -> Self {
        SourceStore {
            root: None,
            banks: Mutex::new(HashMap::new()),
        }
    }

    /// Class-templated random images standing in for MNIST and CIFAR-10.
    ///
    /// Each class has a fixed random template; images are the template plus
    /// per-image noise, so the classes are learnable. Meant for tests and dry
    /// runs without the real data.
    pub fn synthetic(seed: u64, train_per_class: usize, test_per_class: usize) -> Self {
        let store = Self::in_memory();
        for kind in [SourceKind::Mnist, SourceKind::Cifar10] {
            for (split, n) in [(Split::Train, train_per_class), (Split::Test, test_per_class)] {
                store.insert_bank(kind, split, synthetic::bank(kind, split, seed, n));
            }
        }
        store
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn insert_bank(&self, kind: SourceKind, split: Split, bank: ClassBank) {
        self.banks
            .lock()
            .expect("bank lock poisoned")
            .insert((kind, split), Arc::new(bank));
    }

    pub fn bank(&self, kind: SourceKind, split: Split) -> Result<Arc<ClassBank>> {
        let mut banks = self.banks.lock().expect("bank lock poisoned");
        if let Some(b) = banks.get(&(kind, split)) {
            return Ok(Arc::clone(b));
        }
        let bank = match kind {
            SourceKind::Patch => ClassBank::patches(),
            _ => {
                let root = self.root.as_deref().ok_or_else(|| Error::DataUnavailable {
                    path: PathBuf::from("<in-memory store>"),
                    hint: format!("no bank registered for {kind}/{}", split.name()),
                })?;
                bank::load_cached(root, kind, split, |root| match kind {
                    SourceKind::Mnist => mnist::decode(root, split),
                    SourceKind::Cifar10 => cifar::decode(root, split),
                    SourceKind::Patch => unreachable!(),
                })?
            }
        };
        let bank = Arc::new(bank);
        banks.insert((kind, split), Arc::clone(&bank));
        Ok(bank)
    }

    /// Number of images of `class_id` in the split. Patches report 1.
    pub fn count(&self, kind: SourceKind, class_id: u32, split: Split) -> Result<usize> {
        let bank = self.bank(kind, split)?;
        bank.check_class(class_id)?;
        Ok(bank.count(class_id))
    }

    pub fn load(
        &self,
        kind: SourceKind,
        class_id: u32,
        split: Split,
        index: usize,
    ) -> Result<SourceImage> {
        if kind == SourceKind::Patch {
            let corner = PatchClass::from_id(class_id).ok_or(Error::OutOfRange {
                what: "patch class".into(),
                index: class_id as usize,
                len: 4,
            })?;
            let mut img = make_patch(corner);
            img.split = split;
            img.index = index;
            return Ok(img);
        }
        let bank = self.bank(kind, split)?;
        let bytes = bank.image(class_id, index)?;
        Ok(SourceImage::from_bytes(bytes, kind, class_id, split, index))
    }

    pub fn load_mnist(&self, class_id: u32, split: Split, index: usize) -> Result<SourceImage> {
        self.load(SourceKind::Mnist, class_id, split, index)
    }

    pub fn load_cifar(&self, class_id: u32, split: Split, index: usize) -> Result<SourceImage> {
        self.load(SourceKind::Cifar10, class_id, split, index)
    }
}
