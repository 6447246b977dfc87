//! On-disk dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "HSBDSET1"
//! hlen     u32       length of the JSON header
//! header   hlen      UTF-8 JSON, see [`ContainerHeader`]
//! pixels   n·C·1024  u8, image-major, channel-major within an image
//! labels   n·4       u32
//! groups   n·d·4     u32, d = header.group_depth
//! prov     n·L·9     optional: (u8 source, u32 class, u32 index) per level
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coupling::{ComposedDataset, CouplingSpec, CouplingTree, Provenance};
use crate::datasets::{SourceKind, Split, PLANE};
use crate::error::{Error, Result};
use crate::imageset::{GroupKey, ImageSet};

const MAGIC: &[u8; 8] = b"HSBDSET1";

/// Self-describing index stored at the front of a container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    /// Free-form dataset name, e.g. `mnist_cifar/train`.
    pub name: String,
    pub len: usize,
    /// `[len, channels, 32, 32]`.
    pub shape: [usize; 4],
    pub num_labels: usize,
    pub counts_per_label: Vec<usize>,
    pub group_depth: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<CouplingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_hash: Option<String>,
    /// Provenance levels per example (0 when absent).
    pub provenance_levels: usize,
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// A dataset read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Stored {
    pub header: ContainerHeader,
    pub images: ImageSet,
    pub provenance: Vec<Provenance>,
}

impl Stored {
    /// Rebuilds the composed dataset when the container holds one.
    pub fn into_composed(self) -> Result<ComposedDataset> {
        let (Some(spec), Some(split)) = (self.header.tree, self.header.split) else {
            return Err(Error::data(format!("{} is not a composed dataset", self.header.name)));
        };
        let tree = CouplingTree::try_from(spec)?;
        ComposedDataset::from_parts(tree, split, self.header.seed, self.images, self.provenance)
    }
}

fn group_depth(images: &ImageSet) -> Result<usize> {
    let d = images.groups().first().map_or(0, GroupKey::depth);
    if images.groups().iter().any(|g| g.depth() != d) {
        return Err(Error::data("group keys of mixed depth cannot be stored"));
    }
    Ok(d)
}

fn header_for(name: &str, images: &ImageSet, seed: u64) -> Result<ContainerHeader> {
    let mut counts = vec![0; images.num_labels()];
    for &l in images.labels() {
        counts[l as usize] += 1;
    }
    Ok(ContainerHeader {
        name: name.to_string(),
        len: images.len(),
        shape: [images.len(), images.channels(), 32, 32],
        num_labels: images.num_labels(),
        counts_per_label: counts,
        group_depth: group_depth(images)?,
        seed,
        split: None,
        tree: None,
        tree_hash: None,
        provenance_levels: 0,
        content_hash: images.content_hash(),
        config_hash: None,
    })
}

/// Header for a plain image set (variants).
pub fn image_header(name: &str, images: &ImageSet, seed: u64) -> Result<ContainerHeader> {
    header_for(name, images, seed)
}

/// Header for a composed dataset, including its tree and provenance.
pub fn composed_header(name: &str, ds: &ComposedDataset) -> Result<ContainerHeader> {
    let mut h = header_for(name, ds.images(), ds.seed)?;
    h.split = Some(ds.split);
    h.tree = Some(ds.tree.spec());
    h.tree_hash = Some(ds.tree.hash());
    h.provenance_levels = ds.tree.num_levels();
    h.content_hash = ds.content_hash();
    Ok(h)
}

fn source_from_u8(b: u8) -> Result<SourceKind> {
    [SourceKind::Patch, SourceKind::Mnist, SourceKind::Cifar10]
        .into_iter()
        .find(|k| *k as u8 == b)
        .ok_or_else(|| Error::data(format!("unknown source tag {b}")))
}

/// Writes `images` (and, for composed data, its provenance) atomically.
pub fn write(path: &Path, header: &ContainerHeader, images: &ImageSet, provenance: &[Provenance]) -> Result<()> {
    if header.len != images.len() || provenance.len() != header.len * header.provenance_levels {
        return Err(Error::data("container header does not match its payload"));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        let json = serde_json::to_vec(header)?;
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u32).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(images.pixels())?;
        for l in images.labels() {
            f.write_all(&l.to_le_bytes())?;
        }
        for g in images.groups() {
            for v in &g.0 {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        for p in provenance {
            f.write_all(&[p.source as u8])?;
            f.write_all(&p.class_id.to_le_bytes())?;
            f.write_all(&p.index.to_le_bytes())?;
        }
        f.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn write_composed(path: &Path, name: &str, ds: &ComposedDataset, config_hash: Option<&str>) -> Result<ContainerHeader> {
    let mut h = composed_header(name, ds)?;
    h.config_hash = config_hash.map(str::to_string);
    let prov: Vec<Provenance> = (0..ds.len()).flat_map(|i| ds.provenance(i).to_vec()).collect();
    write(path, &h, ds.images(), &prov)?;
    Ok(h)
}

pub fn write_images(path: &Path, name: &str, images: &ImageSet, seed: u64, config_hash: Option<&str>) -> Result<ContainerHeader> {
    let mut h = image_header(name, images, seed)?;
    h.config_hash = config_hash.map(str::to_string);
    write(path, &h, images, &[])?;
    Ok(h)
}

fn u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Reads only the JSON header.
pub fn read_header(path: &Path) -> Result<ContainerHeader> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head)?;
    if &head[..8] != MAGIC {
        return Err(Error::data(format!("{} is not a dataset container", path.display())));
    }
    let hlen = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
    let mut json = vec![0; hlen];
    f.read_exact(&mut json)?;
    Ok(serde_json::from_slice(&json)?)
}

pub fn read(path: &Path) -> Result<Stored> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::data(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a dataset container"));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let mut at = 12;
    let header: ContainerHeader =
        serde_json::from_slice(bytes.get(at..at + hlen).ok_or_else(|| bad("truncated header"))?)?;
    at += hlen;
    let n = header.len;
    let c = header.shape[1];
    let mut take = |len: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + len).ok_or_else(|| bad("truncated payload"))?;
        at += len;
        Ok(s)
    };
    let pixels = take(n * c * PLANE)?.to_vec();
    let labels = u32s(take(n * 4)?);
    let d = header.group_depth;
    let groups: Vec<GroupKey> = if d == 0 {
        vec![GroupKey::default(); n]
    } else {
        u32s(take(n * d * 4)?).chunks(d).map(|g| GroupKey(g.to_vec())).collect()
    };
    let mut provenance = Vec::with_capacity(n * header.provenance_levels);
    for rec in take(n * header.provenance_levels * 9)?.chunks_exact(9) {
        provenance.push(Provenance {
            source: source_from_u8(rec[0])?,
            class_id: u32::from_le_bytes([rec[1], rec[2], rec[3], rec[4]]),
            index: u32::from_le_bytes([rec[5], rec[6], rec[7], rec[8]]),
        });
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    let images = ImageSet::new(c, header.num_labels, pixels, labels, groups)?;
    if header.provenance_levels == 0 && images.content_hash() != header.content_hash {
        return Err(bad("content hash mismatch"));
    }
    let stored = Stored {
        header,
        images,
        provenance,
    };
    if stored.header.provenance_levels > 0 {
        let want = stored.header.content_hash.clone();
        let ds = stored.clone().into_composed()?;
        if ds.content_hash() != want {
            return Err(bad("content hash mismatch"));
        }
    }
    Ok(stored)
}
