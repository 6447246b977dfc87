//! Imbalanced label coupling: coupling trees and the composed datasets built
//! from them by channel concatenation.
//!
//! A tree is declared by its sources (coarse first, fine last) and the list of
//! root-to-leaf class paths. The position of a path in that list is its label,
//! so paths must be grouped by shared prefixes:
//!
//! ```toml
//! sources = ["mnist", "cifar10"]
//! paths = [[1, 1], [1, 3], [2, 5], [2, 9]]   # digit 1 -> {automobile, cat}, digit 2 -> {dog, truck}
//! ```
//!
//! Composed images stack the levels' channels coarse-first.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{SourceKind, SourceStore, Split, PLANE};
use crate::error::{Error, Result};
use crate::evaluation::LabelHierarchy;
use crate::imageset::{GroupKey, ImageSet, Label};
use crate::util::{mix_seed, sha256_hex};

/// Training examples per label.
pub const TRAIN_PER_LABEL: usize = 5000;
/// Test examples per Cartesian combination of selected classes.
pub const TEST_PER_COMBINATION: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub sources: Vec<SourceKind>,
    pub paths: Vec<Vec<u32>>,
}

/// One level of a coupling tree: its source and selected classes in
/// first-appearance order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CouplingLevel {
    pub source: SourceKind,
    pub classes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CouplingSpec", into = "CouplingSpec")]
pub struct CouplingTree {
    levels: Vec<CouplingLevel>,
    paths: Vec<Vec<u32>>,
}

impl TryFrom<CouplingSpec> for CouplingTree {
    type Error = Error;

    fn try_from(spec: CouplingSpec) -> Result<Self> {
        CouplingTree::new(spec.sources, spec.paths)
    }
}

impl From<CouplingTree> for CouplingSpec {
    fn from(t: CouplingTree) -> Self {
        CouplingSpec {
            sources: t.levels.iter().map(|l| l.source).collect(),
            paths: t.paths,
        }
    }
}

impl CouplingTree {
    pub fn new(sources: Vec<SourceKind>, paths: Vec<Vec<u32>>) -> Result<Self> {
        let depth = sources.len();
        if depth < 2 {
            return Err(Error::spec("a coupling tree needs at least two levels"));
        }
        if paths.is_empty() {
            return Err(Error::spec("a coupling tree needs at least one leaf path"));
        }
        for (i, p) in paths.iter().enumerate() {
            if p.len() != depth {
                return Err(Error::spec(format!(
                    "path {i} has {} classes, expected {depth}",
                    p.len()
                )));
            }
            for (lvl, (&c, src)) in p.iter().zip(&sources).enumerate() {
                if c as usize >= src.num_classes() {
                    return Err(Error::spec(format!(
                        "path {i}: class {c} at level {lvl} not a {src} class"
                    )));
                }
            }
        }
        // Each node (level, class) hangs under exactly one prefix; for the
        // fine level this makes the leaf sets of coarse nodes disjoint.
        for lvl in 1..depth {
            let mut parent: HashMap<u32, &[u32]> = HashMap::new();
            for p in &paths {
                let prev = parent.entry(p[lvl]).or_insert(&p[..lvl]);
                if *prev != &p[..lvl] {
                    return Err(Error::spec(format!(
                        "class {} at level {lvl} is coupled under both {:?} and {:?}",
                        p[lvl],
                        prev,
                        &p[..lvl]
                    )));
                }
            }
        }
        let mut seen_leaf = std::collections::HashSet::new();
        for p in &paths {
            if !seen_leaf.insert(p[depth - 1]) {
                return Err(Error::spec(format!(
                    "fine class {} appears in more than one path",
                    p[depth - 1]
                )));
            }
        }
        // Label order must be (level-0 order, then branch order): every prefix
        // occupies one contiguous run of paths.
        for lvl in 0..depth - 1 {
            let mut closed = std::collections::HashSet::new();
            let mut current: Option<&[u32]> = None;
            for p in &paths {
                let pre = &p[..=lvl];
                if current != Some(pre) {
                    if let Some(c) = current {
                        closed.insert(c);
                    }
                    if closed.contains(pre) {
                        return Err(Error::spec(format!(
                            "paths under {pre:?} are not contiguous; list leaves grouped by their coarse classes"
                        )));
                    }
                    current = Some(pre);
                }
            }
        }
        let levels = sources
            .iter()
            .enumerate()
            .map(|(lvl, &source)| {
                let mut classes = Vec::new();
                for p in &paths {
                    if !classes.contains(&p[lvl]) {
                        classes.push(p[lvl]);
                    }
                }
                CouplingLevel { source, classes }
            })
            .collect();
        Ok(CouplingTree { levels, paths })
    }

    pub fn levels(&self) -> &[CouplingLevel] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_labels(&self) -> usize {
        self.paths.len()
    }

    /// Depth of the full coarse key (all levels but the fine one).
    pub fn coarse_depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn fine_source(&self) -> SourceKind {
        self.levels.last().unwrap().source
    }

    pub fn paths(&self) -> &[Vec<u32>] {
        &self.paths
    }

    pub fn leaf_path(&self, label: Label) -> Option<&[u32]> {
        self.paths.get(label as usize).map(Vec::as_slice)
    }

    /// Label carried by a fine-level class.
    pub fn label_of_fine(&self, class_id: u32) -> Option<Label> {
        let last = self.levels.len() - 1;
        self.paths
            .iter()
            .position(|p| p[last] == class_id)
            .map(|i| i as Label)
    }

    /// Total channel count of a composed image.
    pub fn channels(&self) -> usize {
        self.levels.iter().map(|l| l.source.channels()).sum()
    }

    /// Channel range occupied by `level` in a composed image.
    pub fn channel_range(&self, level: usize) -> std::ops::Range<usize> {
        let start: usize = self.levels[..level]
            .iter()
            .map(|l| l.source.channels())
            .sum();
        start..start + self.levels[level].source.channels()
    }

    /// Labels whose path starts with `prefix`: the subset Y_g of a coarse group.
    pub fn leaves_under(&self, prefix: &[u32]) -> Vec<Label> {
        self.paths
            .iter()
            .enumerate()
            .filter(|(_, p)| p.starts_with(prefix))
            .map(|(i, _)| i as Label)
            .collect()
    }

    /// Coupled children of the node at `prefix`, in branch order.
    pub fn children(&self, prefix: &[u32]) -> Vec<u32> {
        let lvl = prefix.len();
        let mut out = Vec::new();
        if lvl >= self.levels.len() {
            return out;
        }
        for p in &self.paths {
            if p.starts_with(prefix) && !out.contains(&p[lvl]) {
                out.push(p[lvl]);
            }
        }
        out
    }

    /// Edges from level `lvl` to level `lvl + 1`.
    pub fn edges(&self, lvl: usize) -> BTreeMap<u32, Vec<u32>> {
        let mut out: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for p in &self.paths {
            let e = out.entry(p[lvl]).or_default();
            if !e.contains(&p[lvl + 1]) {
                e.push(p[lvl + 1]);
            }
        }
        out
    }

    pub fn spec(&self) -> CouplingSpec {
        self.clone().into()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.spec()).expect("tree serializes"))
    }

    /// Human-readable name of a class at a level.
    pub fn class_name(&self, level: usize, class_id: u32) -> String {
        self.levels[level].source.class_name(class_id)
    }

    /// Display name of a label (its fine class).
    pub fn label_name(&self, label: Label) -> String {
        let last = self.levels.len() - 1;
        self.class_name(last, self.paths[label as usize][last])
    }
}

impl LabelHierarchy for CouplingTree {
    fn num_labels(&self) -> usize {
        self.paths.len()
    }

    fn subset(&self, group: &GroupKey) -> Option<Vec<Label>> {
        if group.0.is_empty() || group.0.len() >= self.levels.len() {
            return None;
        }
        let s = self.leaves_under(&group.0);
        (!s.is_empty()).then_some(s)
    }

    fn is_uncoupled(&self, group: &GroupKey) -> bool {
        let k = &group.0;
        k.len() >= 2
            && k.len() < self.levels.len()
            && k.iter().zip(&self.levels).all(|(c, l)| l.classes.contains(c))
            && self.leaves_under(k).is_empty()
    }
}

/// Where one channel group of a composed image came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub source: SourceKind,
    pub class_id: u32,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedExample {
    pub pixels: Vec<f32>,
    pub label: Label,
    pub provenance: Vec<Provenance>,
}

impl ComposedExample {
    pub fn channels(&self) -> usize {
        self.pixels.len() / PLANE
    }
}

/// Coarse class ids of the first `depth` levels of an example.
pub fn group_key(example: &ComposedExample, depth: usize) -> Result<GroupKey> {
    let levels = example.provenance.len();
    if depth == 0 || depth >= levels {
        return Err(Error::OutOfRange {
            what: "group depth".into(),
            index: depth,
            len: levels,
        });
    }
    Ok(GroupKey(
        example.provenance[..depth]
            .iter()
            .map(|p| p.class_id)
            .collect(),
    ))
}

/// Example counts used when composing. The defaults are the protocol's;
/// smaller values exist for tests and fixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Composition {
    pub train_per_label: usize,
    pub test_per_combination: usize,
}

impl Default for Composition {
    fn default() -> Self {
        Composition {
            train_per_label: TRAIN_PER_LABEL,
            test_per_combination: TEST_PER_COMBINATION,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedDataset {
    pub tree: CouplingTree,
    pub split: Split,
    pub seed: u64,
    images: ImageSet,
    provenance: Vec<Provenance>,
}

impl ComposedDataset {
    pub(crate) fn from_parts(
        tree: CouplingTree,
        split: Split,
        seed: u64,
        images: ImageSet,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if provenance.len() != images.len() * tree.num_levels()
            || images.channels() != tree.channels()
        {
            return Err(Error::data("provenance does not match images"));
        }
        Ok(ComposedDataset {
            tree,
            split,
            seed,
            images,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images, labels and full-depth coarse group keys.
    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    pub fn into_images(self) -> ImageSet {
        self.images
    }

    pub fn provenance(&self, i: usize) -> &[Provenance] {
        let l = self.tree.num_levels();
        &self.provenance[i * l..(i + 1) * l]
    }

    pub fn example(&self, i: usize) -> ComposedExample {
        ComposedExample {
            pixels: self.images.gather_f32(&[i]),
            label: self.images.labels()[i],
            provenance: self.provenance(i).to_vec(),
        }
    }

    pub fn content_hash(&self) -> String {
        let mut bytes = self.images.content_hash().into_bytes();
        bytes.extend(self.tree.hash().into_bytes());
        for p in &self.provenance {
            bytes.push(p.source as u8);
            bytes.extend(p.class_id.to_le_bytes());
            bytes.extend(p.index.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Group keys truncated to `depth` coarse levels.
    pub fn group_keys(&self, depth: usize) -> Result<Vec<GroupKey>> {
        if depth == 0 || depth > self.tree.coarse_depth() {
            return Err(Error::OutOfRange {
                what: "group depth".into(),
                index: depth,
                len: self.tree.num_levels(),
            });
        }
        Ok(self
            .images
            .groups()
            .iter()
            .map(|g| g.prefix(depth))
            .collect())
    }

    /// Position of each example among the examples sharing its coarse group
    /// and label, in dataset order. For test builds this is the example's
    /// index `k` within its Cartesian combination.
    pub fn combination_positions(&self) -> Vec<usize> {
        let mut seen: HashMap<(&GroupKey, Label), usize> = HashMap::new();
        self.images
            .groups()
            .iter()
            .zip(self.images.labels())
            .map(|(g, &l)| {
                let c = seen.entry((g, l)).or_default();
                *c += 1;
                *c - 1
            })
            .collect()
    }
}

struct Assembler<'a> {
    store: &'a SourceStore,
    split: Split,
    tree: &'a CouplingTree,
    pixels: Vec<u8>,
    labels: Vec<Label>,
    groups: Vec<GroupKey>,
    provenance: Vec<Provenance>,
}

impl<'a> Assembler<'a> {
    fn new(store: &'a SourceStore, tree: &'a CouplingTree, split: Split, capacity: usize) -> Self {
        Assembler {
            store,
            split,
            tree,
            pixels: Vec::with_capacity(capacity * tree.channels() * PLANE),
            labels: Vec::with_capacity(capacity),
            groups: Vec::with_capacity(capacity),
            provenance: Vec::with_capacity(capacity * tree.num_levels()),
        }
    }

    fn push(&mut self, label: Label, parts: &[Provenance]) -> Result<()> {
        for p in parts {
            let bank = self.store.bank(p.source, self.split)?;
            // Patches are deterministic; any index maps to the single image.
            let idx = if p.source == SourceKind::Patch {
                0
            } else {
                p.index as usize
            };
            self.pixels.extend_from_slice(bank.image(p.class_id, idx)?);
        }
        self.labels.push(label);
        self.groups.push(GroupKey(
            parts[..self.tree.coarse_depth()]
                .iter()
                .map(|p| p.class_id)
                .collect(),
        ));
        self.provenance.extend_from_slice(parts);
        Ok(())
    }

    fn finish(self, seed: u64) -> Result<ComposedDataset> {
        let images = ImageSet::new(
            self.tree.channels(),
            self.tree.num_labels(),
            self.pixels,
            self.labels,
            self.groups,
        )?;
        ComposedDataset::from_parts(self.tree.clone(), self.split, seed, images, self.provenance)
    }
}

fn class_count(store: &SourceStore, kind: SourceKind, class_id: u32, split: Split) -> Result<usize> {
    if kind == SourceKind::Patch {
        return Ok(usize::MAX);
    }
    store.count(kind, class_id, split)
}

/// Coupled training set with the protocol's 5000 examples per label.
pub fn build_train(store: &SourceStore, tree: &CouplingTree, seed: u64) -> Result<ComposedDataset> {
    build_train_with(store, tree, seed, Composition::default())
}

/// Coupled training set.
///
/// For each label, the fine channels enumerate that fine class's first
/// `train_per_label` training images; each coarse level draws a uniformly
/// random training image (with replacement) of the coupled coarse class. The
/// draw for example `j` of label `y` is seeded from `(seed, y, j)` alone.
pub fn build_train_with(
    store: &SourceStore,
    tree: &CouplingTree,
    seed: u64,
    counts: Composition,
) -> Result<ComposedDataset> {
    let n = counts.train_per_label;
    let levels = tree.levels();
    let fine = levels.len() - 1;
    let mut asm = Assembler::new(store, tree, Split::Train, n * tree.num_labels());
    let mut parts = Vec::with_capacity(levels.len());
    for (label, path) in tree.paths().iter().enumerate() {
        let fine_count = class_count(store, levels[fine].source, path[fine], Split::Train)?;
        if fine_count < n {
            return Err(Error::data(format!(
                "{} class {} has {fine_count} training images, {n} needed",
                levels[fine].source, path[fine]
            )));
        }
        let coarse_counts = (0..fine)
            .map(|lvl| class_count(store, levels[lvl].source, path[lvl], Split::Train))
            .collect::<Result<Vec<_>>>()?;
        if let Some(lvl) = coarse_counts.iter().position(|&c| c == 0) {
            return Err(Error::data(format!(
                "{} class {} has no training images",
                levels[lvl].source, path[lvl]
            )));
        }
        for j in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, label as u64, j as u64]));
            parts.clear();
            for lvl in 0..fine {
                let index = if coarse_counts[lvl] == usize::MAX {
                    0
                } else {
                    rng.random_range(0..coarse_counts[lvl])
                };
                parts.push(Provenance {
                    source: levels[lvl].source,
                    class_id: path[lvl],
                    index: index as u32,
                });
            }
            parts.push(Provenance {
                source: levels[fine].source,
                class_id: path[fine],
                index: j as u32,
            });
            asm.push(label as Label, &parts)?;
        }
    }
    asm.finish(seed)
}

/// Uncoupled test set with the protocol's 1000 examples per combination.
pub fn build_test(store: &SourceStore, tree: &CouplingTree, seed: u64) -> Result<ComposedDataset> {
    build_test_with(store, tree, seed, Composition::default())
}

/// Fully crossed test set.
///
/// Every combination of one selected class per level gets
/// `test_per_combination` examples; the k-th example of a combination uses the
/// k-th test image of each class (modulo that class's test count). The label is
/// the fine class's label. Combinations are emitted in lexicographic order of
/// the levels' class lists.
pub fn build_test_with(
    store: &SourceStore,
    tree: &CouplingTree,
    seed: u64,
    counts: Composition,
) -> Result<ComposedDataset> {
    let n = counts.test_per_combination;
    let levels = tree.levels();
    let combos: usize = levels.iter().map(|l| l.classes.len()).product();
    let class_counts = levels
        .iter()
        .map(|l| {
            l.classes
                .iter()
                .map(|&c| class_count(store, l.source, c, Split::Test))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    for (lvl, cc) in class_counts.iter().enumerate() {
        if let Some(i) = cc.iter().position(|&c| c == 0) {
            return Err(Error::data(format!(
                "{} class {} has no test images",
                levels[lvl].source, levels[lvl].classes[i]
            )));
        }
    }
    let mut asm = Assembler::new(store, tree, Split::Test, n * combos);
    let mut choice = vec![0usize; levels.len()];
    let mut parts = Vec::with_capacity(levels.len());
    for _ in 0..combos {
        let fine_class = levels[levels.len() - 1].classes[*choice.last().unwrap()];
        let label = tree.label_of_fine(fine_class).expect("fine class has a label");
        for k in 0..n {
            parts.clear();
            for (lvl, &ci) in choice.iter().enumerate() {
                let count = class_counts[lvl][ci];
                let index = if count == usize::MAX { k } else { k % count };
                parts.push(Provenance {
                    source: levels[lvl].source,
                    class_id: levels[lvl].classes[ci],
                    index: index as u32,
                });
            }
            asm.push(label, &parts)?;
        }
        // odometer, last level fastest
        for lvl in (0..choice.len()).rev() {
            choice[lvl] += 1;
            if choice[lvl] < levels[lvl].classes.len() {
                break;
            }
            choice[lvl] = 0;
        }
    }
    asm.finish(seed)
}

/// Bundled coupling trees from the experiments.
pub mod presets {
    use super::*;

    /// Digit 1 → {automobile, cat}, digit 2 → {dog, truck}.
    pub fn mnist_cifar() -> CouplingTree {
        CouplingTree::new(
            vec![SourceKind::Mnist, SourceKind::Cifar10],
            vec![vec![1, 1], vec![1, 3], vec![2, 5], vec![2, 9]],
        )
        .unwrap()
    }

    /// Automobile → digits {1, 2}, cat → digits {7, 9}.
    pub fn cifar_mnist() -> CouplingTree {
        CouplingTree::new(
            vec![SourceKind::Cifar10, SourceKind::Mnist],
            vec![vec![1, 1], vec![1, 2], vec![3, 7], vec![3, 9]],
        )
        .unwrap()
    }

    /// Upper-left patch → digits {1, 2}, lower-right patch → digits {7, 9}.
    pub fn patch_mnist() -> CouplingTree {
        CouplingTree::new(
            vec![SourceKind::Patch, SourceKind::Mnist],
            vec![vec![0, 1], vec![0, 2], vec![3, 7], vec![3, 9]],
        )
        .unwrap()
    }

    /// Digit 1 → {upper-left, upper-right}, digit 2 → {lower-left, lower-right}.
    pub fn mnist_patch() -> CouplingTree {
        CouplingTree::new(
            vec![SourceKind::Mnist, SourceKind::Patch],
            vec![vec![1, 0], vec![1, 1], vec![2, 2], vec![2, 3]],
        )
        .unwrap()
    }

    /// Upper-left → digits {1, 2}, lower-right → digits {5, 9}; the digits map
    /// to CIFAR-10 pairs (0,1), (2,3), (4,5), (6,7).
    pub fn patch_mnist_cifar() -> CouplingTree {
        CouplingTree::new(
            vec![SourceKind::Patch, SourceKind::Mnist, SourceKind::Cifar10],
            vec![
                vec![0, 1, 0],
                vec![0, 1, 1],
                vec![0, 2, 2],
                vec![0, 2, 3],
                vec![3, 5, 4],
                vec![3, 5, 5],
                vec![3, 9, 6],
                vec![3, 9, 7],
            ],
        )
        .unwrap()
    }
}
