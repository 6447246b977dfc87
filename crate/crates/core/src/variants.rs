//! Datasets that are not channel concatenations: MNIST whose background colour
//! tracks the label half, and CIFAR-10 whose corruption type tracks a class pair.
//!
//! Corruption parameters are the severity-3 constants of the CIFAR-10-C
//! generator (Hendrycks & Dietterich):
//!
//! | kind        | constant                                                  |
//! |-------------|-----------------------------------------------------------|
//! | gaussian    | additive N(0, 0.08²) noise                                |
//! | defocus     | disk radius 0.5, alias blur σ 0.6 (a 3×3 Gaussian, σ 0.6) |
//! | fog         | strength 0.75, plasma-fractal wibble decay 2.5            |
//! | brightness  | +0.15 on the HSV value channel                            |
//!
//! Corruption is applied once, when the dataset is built.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{quantize, SourceImage, SourceKind, SourceStore, Split, PLANE, SIDE};
use crate::error::{Error, Result};
use crate::evaluation::SubsetTable;
use crate::imageset::{GroupKey, ImageSet, Label};
use crate::util::mix_seed;

/// Severity used throughout; the only one supported.
pub const SEVERITY: u8 = 3;

pub const GAUSSIAN_SIGMA: f64 = 0.08;
pub const DEFOCUS_RADIUS: f64 = 0.5;
pub const DEFOCUS_ALIAS_BLUR: f64 = 0.6;
pub const FOG_STRENGTH: f64 = 0.75;
pub const FOG_WIBBLE_DECAY: f64 = 2.5;
pub const BRIGHTNESS_SHIFT: f64 = 0.15;

// ---------------------------------------------------------------------------
// Half-inverted MNIST

/// Group of an image drawn on the original black background.
pub const BLACK_BACKGROUND: u32 = 0;
/// Group of an image whose colours were inverted (white background).
pub const WHITE_BACKGROUND: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfInvertedSplit {
    /// Training digits 0–4 inverted, 5–9 untouched.
    Train,
    /// The untouched test set.
    TestOriginal,
    /// The whole test set inverted.
    TestInverted,
}

impl HalfInvertedSplit {
    pub const ALL: [HalfInvertedSplit; 3] = [
        HalfInvertedSplit::Train,
        HalfInvertedSplit::TestOriginal,
        HalfInvertedSplit::TestInverted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HalfInvertedSplit::Train => "train",
            HalfInvertedSplit::TestOriginal => "test_original",
            HalfInvertedSplit::TestInverted => "test_inverted",
        }
    }
}

fn inverted(split: HalfInvertedSplit, digit: u32) -> bool {
    match split {
        HalfInvertedSplit::Train => digit < 5,
        HalfInvertedSplit::TestOriginal => false,
        HalfInvertedSplit::TestInverted => true,
    }
}

/// Builds one split of half-inverted MNIST, class-major in source order.
/// Each image's group is its background colour.
pub fn build_half_inverted_mnist(store: &SourceStore, split: HalfInvertedSplit) -> Result<ImageSet> {
    let source_split = match split {
        HalfInvertedSplit::Train => Split::Train,
        _ => Split::Test,
    };
    let bank = store.bank(SourceKind::Mnist, source_split)?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for digit in 0..10u32 {
        let inv = inverted(split, digit);
        for i in 0..bank.count(digit) {
            let img = bank.image(digit, i)?;
            if inv {
                pixels.extend(img.iter().map(|&b| 255 - b));
            } else {
                pixels.extend_from_slice(img);
            }
            labels.push(digit);
            groups.push(GroupKey(vec![if inv { WHITE_BACKGROUND } else { BLACK_BACKGROUND }]));
        }
    }
    ImageSet::new(1, 10, pixels, labels, groups)
}

/// Labels coupled with each background during training.
pub fn half_inverted_hierarchy() -> SubsetTable {
    SubsetTable {
        num_labels: 10,
        subsets: BTreeMap::from([
            (GroupKey(vec![BLACK_BACKGROUND]), (5..10).collect()),
            (GroupKey(vec![WHITE_BACKGROUND]), (0..5).collect()),
        ]),
    }
}

// ---------------------------------------------------------------------------
// Corruptions

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    DefocusBlur,
    Fog,
    Brightness,
    None,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Fog,
        CorruptionKind::Brightness,
        CorruptionKind::None,
    ];

    /// Group id used for images carrying this corruption.
    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::None => "none",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub target_classes: [u32; 2],
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.severity != SEVERITY {
            return Err(Error::spec(format!(
                "severity {} unsupported (only {SEVERITY})",
                self.severity
            )));
        }
        if self.target_classes.iter().any(|&c| c >= 10) || self.target_classes[0] == self.target_classes[1] {
            return Err(Error::spec(format!(
                "target classes {:?} must be two distinct CIFAR-10 classes",
                self.target_classes
            )));
        }
        Ok(())
    }
}

/// The coupling used in the corrupted CIFAR-10 experiment:
/// (0,1) noise, (2,3) defocus, (4,5) fog, (6,7) brightness, (8,9) clean.
pub fn default_corruption_specs() -> Vec<CorruptionSpec> {
    CorruptionKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| CorruptionSpec {
            kind,
            severity: SEVERITY,
            target_classes: [2 * i as u32, 2 * i as u32 + 1],
        })
        .collect()
}

/// Applies one corruption to a 3-channel image; output clipped to `[0, 1]`.
pub fn corrupt(image: &SourceImage, spec: &CorruptionSpec, seed: u64) -> Result<SourceImage> {
    spec.validate()?;
    if image.channels != 3 || image.pixels.len() != 3 * PLANE {
        return Err(Error::spec(format!(
            "corruption needs a 3×32×32 image, got {} channels",
            image.channels
        )));
    }
    let x: Vec<f64> = image.pixels.iter().map(|&p| f64::from(p)).collect();
    let out = match spec.kind {
        CorruptionKind::None => return Ok(image.clone()),
        CorruptionKind::GaussianNoise => gaussian_noise(&x, seed),
        CorruptionKind::DefocusBlur => defocus_blur(&x),
        CorruptionKind::Fog => fog(&x, seed),
        CorruptionKind::Brightness => brightness(&x),
    };
    Ok(SourceImage {
        pixels: out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        ..image.clone()
    })
}

fn gaussian_noise(x: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, GAUSSIAN_SIGMA).expect("valid sigma");
    x.iter().map(|&v| v + n.sample(&mut rng)).collect()
}

/// Reflect-101 border index (`dcb|abcd|cba`).
fn reflect101(i: isize, n: isize) -> usize {
    let i = if i < 0 { -i } else { i };
    (if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

/// The defocus kernel: an aliased disk of the given radius on a 17×17 grid,
/// normalised, then smoothed by a 3×3 Gaussian blur. Returned as the 17×17 array.
pub fn defocus_kernel() -> Vec<Vec<f64>> {
    const L: isize = 8;
    let n = (2 * L + 1) as usize;
    let mut disk = vec![vec![0.0; n]; n];
    let mut mass = 0.0;
    for (r, row) in disk.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (y, x) = (r as f64 - L as f64, c as f64 - L as f64);
            if x * x + y * y <= DEFOCUS_RADIUS * DEFOCUS_RADIUS {
                *v = 1.0;
                mass += 1.0;
            }
        }
    }
    let g: Vec<f64> = {
        let w: Vec<f64> = (-1..=1)
            .map(|i: i32| (-f64::from(i * i) / (2.0 * DEFOCUS_ALIAS_BLUR * DEFOCUS_ALIAS_BLUR)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    };
    let ni = n as isize;
    let mut out = vec![vec![0.0; n]; n];
    for r in 0..ni {
        for c in 0..ni {
            let mut acc = 0.0;
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let v = disk[reflect101(r + dr, ni)][reflect101(c + dc, ni)] / mass;
                    acc += g[(dr + 1) as usize] * g[(dc + 1) as usize] * v;
                }
            }
            out[r as usize][c as usize] = acc;
        }
    }
    out
}

fn defocus_blur(x: &[f64]) -> Vec<f64> {
    let k = defocus_kernel();
    let half = (k.len() / 2) as isize;
    // Only taps with non-zero weight matter.
    let taps: Vec<(isize, isize, f64)> = k
        .iter()
        .enumerate()
        .flat_map(|(r, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(move |(c, &w)| (r as isize - half, c as isize - half, w))
        })
        .collect();
    let side = SIDE as isize;
    let mut out = vec![0.0; x.len()];
    for ch in 0..3 {
        let plane = &x[ch * PLANE..(ch + 1) * PLANE];
        for r in 0..side {
            for c in 0..side {
                let acc: f64 = taps
                    .iter()
                    .map(|&(dr, dc, w)| w * plane[reflect101(r + dr, side) * SIDE + reflect101(c + dc, side)])
                    .sum();
                out[ch * PLANE + (r * side + c) as usize] = acc;
            }
        }
    }
    out
}

/// Diamond-square plasma fractal on a `size`×`size` torus, normalised to `[0, 1]`.
///
/// Follows the reference generator, including its mean step
/// `sum / 4 + wibble · U(−wibble, wibble)`.
pub fn plasma_fractal(size: usize, wibble_decay: f64, rng: &mut impl Rng) -> Vec<f64> {
    assert!(size.is_power_of_two() && size >= 2, "plasma size must be a power of two");
    let mut map = vec![0.0f64; size * size];
    let at = |r: usize, c: usize| r * size + c;
    let mut step = size;
    let mut wibble = 100.0f64;
    fn jitter(sum: f64, wibble: f64, rng: &mut impl Rng) -> f64 {
        sum / 4.0 + wibble * rng.random_range(-wibble..wibble)
    }
    while step >= 2 {
        let half = step / 2;
        let cells = size / step;
        // squares: centre of each cell from its four corners
        let mut centres = Vec::with_capacity(cells * cells);
        for i in 0..cells {
            for j in 0..cells {
                let (i1, j1) = ((i + 1) % cells, (j + 1) % cells);
                let sum = map[at(i * step, j * step)]
                    + map[at(i1 * step, j * step)]
                    + map[at(i * step, j1 * step)]
                    + map[at(i1 * step, j1 * step)];
                centres.push(sum);
            }
        }
        for i in 0..cells {
            for j in 0..cells {
                map[at(i * step + half, j * step + half)] = jitter(centres[i * cells + j], wibble, rng);
            }
        }
        // diamonds: edge midpoints from two corners and two centres
        let mut top = Vec::with_capacity(cells * cells);
        let mut left = Vec::with_capacity(cells * cells);
        for i in 0..cells {
            for j in 0..cells {
                let ip = (i + cells - 1) % cells;
                let jp = (j + cells - 1) % cells;
                let (i1, j1) = ((i + 1) % cells, (j + 1) % cells);
                let centre = map[at(i * step + half, j * step + half)];
                top.push(
                    centre
                        + map[at(ip * step + half, j * step + half)]
                        + map[at(i * step, j * step)]
                        + map[at(i * step, j1 * step)],
                );
                left.push(
                    centre
                        + map[at(i * step + half, jp * step + half)]
                        + map[at(i * step, j * step)]
                        + map[at(i1 * step, j * step)],
                );
            }
        }
        for i in 0..cells {
            for j in 0..cells {
                map[at(i * step, j * step + half)] = jitter(top[i * cells + j], wibble, rng);
            }
        }
        for i in 0..cells {
            for j in 0..cells {
                map[at(i * step + half, j * step)] = jitter(left[i * cells + j], wibble, rng);
            }
        }
        step /= 2;
        wibble /= wibble_decay;
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    map.iter_mut().for_each(|v| *v -= lo);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > 0.0 {
        map.iter_mut().for_each(|v| *v /= hi);
    }
    map
}

fn fog(x: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plasma = plasma_fractal(SIDE, FOG_WIBBLE_DECAY, &mut rng);
    let max = x.iter().copied().fold(0.0, f64::max);
    x.iter()
        .enumerate()
        .map(|(i, &v)| (v + FOG_STRENGTH * plasma[i % PLANE]) * max / (max + FOG_STRENGTH))
        .collect()
}

/// Raises HSV value by the shift while keeping hue and saturation: each
/// pixel's RGB triple is rescaled so its maximum becomes `min(V + c, 1)`.
fn brightness(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for p in 0..PLANE {
        let rgb = [x[p], x[PLANE + p], x[2 * PLANE + p]];
        let v = rgb[0].max(rgb[1]).max(rgb[2]);
        let v2 = (v + BRIGHTNESS_SHIFT).clamp(0.0, 1.0);
        for ch in 0..3 {
            out[ch * PLANE + p] = if v > 0.0 { rgb[ch] * v2 / v } else { v2 };
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Corrupted CIFAR-10

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedCifar {
    /// CIFAR-10 train, each class under its coupled corruption.
    pub train: ImageSet,
    /// The clean test set followed by one fully corrupted copy per corruption.
    pub test: ImageSet,
}

fn check_cover(specs: &[CorruptionSpec]) -> Result<()> {
    let mut seen = [false; 10];
    for s in specs {
        s.validate()?;
        for &c in &s.target_classes {
            if std::mem::replace(&mut seen[c as usize], true) {
                return Err(Error::spec(format!("class {c} coupled to two corruptions")));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::spec(format!("class {missing} has no corruption spec")));
    }
    let mut kinds: Vec<_> = specs.iter().map(|s| s.kind).collect();
    kinds.sort();
    kinds.dedup();
    if kinds.len() != specs.len() {
        return Err(Error::spec("each corruption kind may appear once"));
    }
    Ok(())
}

/// Labels coupled with each corruption group.
pub fn corruption_hierarchy(specs: &[CorruptionSpec]) -> Result<SubsetTable> {
    check_cover(specs)?;
    Ok(SubsetTable {
        num_labels: 10,
        subsets: specs
            .iter()
            .map(|s| (GroupKey(vec![s.kind.id()]), s.target_classes.to_vec()))
            .collect(),
    })
}

fn corruption_seed(seed: u64, split: Split, kind: CorruptionKind, class_id: u32, index: usize) -> u64 {
    mix_seed(&[seed, split as u64, kind.id() as u64, class_id as u64, index as u64])
}

fn corrupted_split(
    store: &SourceStore,
    split: Split,
    seed: u64,
    assign: &dyn Fn(u32) -> CorruptionSpec,
    out: &mut (Vec<u8>, Vec<Label>, Vec<GroupKey>),
) -> Result<()> {
    let bank = store.bank(SourceKind::Cifar10, split)?;
    for class_id in 0..10u32 {
        let spec = assign(class_id);
        for i in 0..bank.count(class_id) {
            let bytes = bank.image(class_id, i)?;
            if spec.kind == CorruptionKind::None {
                out.0.extend_from_slice(bytes);
            } else {
                let img = SourceImage::from_bytes(bytes, SourceKind::Cifar10, class_id, split, i);
                let c = corrupt(&img, &spec, corruption_seed(seed, split, spec.kind, class_id, i))?;
                out.0.extend(c.pixels.iter().map(|&p| quantize(p)));
            }
            out.1.push(class_id);
            out.2.push(GroupKey(vec![spec.kind.id()]));
        }
    }
    Ok(())
}

/// Builds the corruption-coupled train set and the five-copy test set.
/// Corrupted images are re-quantised to bytes by rounding.
pub fn build_corrupted_cifar(store: &SourceStore, specs: &[CorruptionSpec], seed: u64) -> Result<CorruptedCifar> {
    check_cover(specs)?;
    let by_class = |c: u32| {
        *specs
            .iter()
            .find(|s| s.target_classes.contains(&c))
            .expect("cover checked")
    };
    let mut train = (Vec::new(), Vec::new(), Vec::new());
    corrupted_split(store, Split::Train, seed, &by_class, &mut train)?;

    let mut test = (Vec::new(), Vec::new(), Vec::new());
    let clean = CorruptionSpec {
        kind: CorruptionKind::None,
        severity: SEVERITY,
        target_classes: [8, 9],
    };
    corrupted_split(store, Split::Test, seed, &|_| clean, &mut test)?;
    for s in specs.iter().filter(|s| s.kind != CorruptionKind::None) {
        corrupted_split(store, Split::Test, seed, &|_| *s, &mut test)?;
    }
    Ok(CorruptedCifar {
        train: ImageSet::new(3, 10, train.0, train.1, train.2)?,
        test: ImageSet::new(3, 10, test.0, test.1, test.2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::bank::ClassBank;
    use proptest::prelude::*;

    fn image(f: impl Fn(usize) -> f32) -> SourceImage {
        SourceImage {
            pixels: (0..3 * PLANE).map(f).collect(),
            channels: 3,
            source: SourceKind::Cifar10,
            class_id: 0,
            split: Split::Train,
            index: 0,
        }
    }

    fn spec(kind: CorruptionKind) -> CorruptionSpec {
        CorruptionSpec {
            kind,
            severity: 3,
            target_classes: [0, 1],
        }
    }

    fn textured() -> SourceImage {
        image(|i| ((i * 37 % 101) as f32) / 100.0)
    }

    #[test]
    fn none_is_identity() {
        let x = textured();
        assert_eq!(corrupt(&x, &spec(CorruptionKind::None), 5).unwrap(), x);
    }

    #[test]
    fn brightness_on_grey() {
        let x = image(|_| 0.5);
        let y = corrupt(&x, &spec(CorruptionKind::Brightness), 0).unwrap();
        // Grey has zero saturation, so every channel equals V + 0.15.
        let want = (0.5 + BRIGHTNESS_SHIFT) as f32;
        assert!(y.pixels.iter().all(|&p| p == y.pixels[0] && p > 0.5));
        assert!((y.pixels[0] - want).abs() < 1e-6);
    }

    #[test]
    fn brightness_keeps_hue_and_saturation() {
        let x = image(|i| [0.2, 0.4, 0.1][i / PLANE]);
        let y = corrupt(&x, &spec(CorruptionKind::Brightness), 0).unwrap();
        let (r, g, b) = (y.pixels[0], y.pixels[PLANE], y.pixels[2 * PLANE]);
        assert!((g - 0.55).abs() < 1e-6);
        assert!((r / g - 0.5).abs() < 1e-6 && (b / g - 0.25).abs() < 1e-6);
    }

    #[test]
    fn gaussian_noise_magnitude() {
        let x = image(|_| 0.5);
        let y = corrupt(&x, &spec(CorruptionKind::GaussianNoise), 11).unwrap();
        let mad: f64 = y
            .pixels
            .iter()
            .map(|&p| (f64::from(p) - 0.5).abs())
            .sum::<f64>()
            / y.pixels.len() as f64;
        let expect = GAUSSIAN_SIGMA * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mad / expect - 1.0).abs() < 0.05, "{mad} vs {expect}");
    }

    #[test]
    fn defocus_kernel_is_a_normalised_3x3_gaussian() {
        let k = defocus_kernel();
        let total: f64 = k.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let nonzero = k.iter().flatten().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzero, 9);
        let e = (-1.0 / (2.0 * 0.36f64)).exp();
        let centre = 1.0 / (1.0 + 2.0 * e);
        assert!((k[8][8] - centre * centre).abs() < 1e-12);
        assert!((k[7][8] - centre * centre * e).abs() < 1e-12);
    }

    #[test]
    fn defocus_preserves_constants_and_smooths_spikes() {
        let flat = image(|_| 0.3);
        let y = corrupt(&flat, &spec(CorruptionKind::DefocusBlur), 0).unwrap();
        assert!(y.pixels.iter().all(|&p| (p - 0.3).abs() < 1e-6));
        let spike = image(|i| if i == 16 * SIDE + 16 { 1.0 } else { 0.0 });
        let y = corrupt(&spike, &spec(CorruptionKind::DefocusBlur), 0).unwrap();
        let k = defocus_kernel();
        assert!((f64::from(y.pixels[16 * SIDE + 16]) - k[8][8]).abs() < 1e-6);
        assert!((f64::from(y.pixels[15 * SIDE + 17]) - k[7][9]).abs() < 1e-6);
    }

    #[test]
    fn plasma_is_normalised_and_seeded() {
        let a = plasma_fractal(32, 2.5, &mut ChaCha8Rng::seed_from_u64(1));
        let b = plasma_fractal(32, 2.5, &mut ChaCha8Rng::seed_from_u64(1));
        let c = plasma_fractal(32, 2.5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn fog_on_black_stays_black_and_brightens_texture() {
        // max = 0 collapses the blend to zero
        let y = corrupt(&image(|_| 0.0), &spec(CorruptionKind::Fog), 3).unwrap();
        assert!(y.pixels.iter().all(|&p| p == 0.0));
        let x = image(|_| 0.4);
        let y = corrupt(&x, &spec(CorruptionKind::Fog), 3).unwrap();
        // (0.4 + 0.75 p) · 0.4 / 1.15 ranges over [0.139, 0.4]; channels share the haze
        assert!(y.pixels.iter().all(|&p| (0.139..=0.4001).contains(&p)));
        assert_eq!(y.pixels[5], y.pixels[PLANE + 5]);
    }

    #[test]
    fn severity_and_shape_are_checked() {
        let bad = CorruptionSpec {
            severity: 2,
            ..spec(CorruptionKind::Fog)
        };
        assert!(matches!(corrupt(&textured(), &bad, 0), Err(Error::Spec(_))));
        let mut grey = textured();
        grey.channels = 1;
        grey.pixels.truncate(PLANE);
        assert!(corrupt(&grey, &spec(CorruptionKind::Fog), 0).is_err());
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_range(seed: u64, k in 0usize..5, scale in 0.0f32..1.0) {
            let x = image(|i| ((i * 7919 % 257) as f32 / 256.0) * scale);
            let y = corrupt(&x, &spec(CorruptionKind::ALL[k]), seed).unwrap();
            prop_assert!(y.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            let again = corrupt(&x, &spec(CorruptionKind::ALL[k]), seed).unwrap();
            prop_assert_eq!(y, again);
        }
    }

    fn tiny_cifar_store(per_class: usize) -> SourceStore {
        let store = SourceStore::in_memory();
        for split in [Split::Train, Split::Test] {
            let classes = (0..10u8)
                .map(|c| {
                    (0..per_class * 3 * PLANE)
                        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(c * 20))
                        .collect()
                })
                .collect();
            store.insert_bank(SourceKind::Cifar10, split, ClassBank::from_classes(3, classes).unwrap());
        }
        store
    }

    #[test]
    fn corrupted_cifar_layout() {
        let store = tiny_cifar_store(2);
        let specs = default_corruption_specs();
        let d = build_corrupted_cifar(&store, &specs, 0).unwrap();
        assert_eq!(d.train.len(), 20);
        assert_eq!(d.test.len(), 5 * 20);
        // labels preserved and classes 8, 9 untouched in training
        let clean = store.bank(SourceKind::Cifar10, Split::Train).unwrap();
        for i in 0..d.train.len() {
            let label = d.train.labels()[i];
            assert_eq!(label as usize, i / 2);
            if label >= 8 {
                assert_eq!(d.train.image(i), clean.image(label, i % 2).unwrap());
            }
            assert_eq!(d.train.groups()[i], GroupKey(vec![label / 2]));
        }
        // each test image once clean and once per corruption
        let test_clean = store.bank(SourceKind::Cifar10, Split::Test).unwrap();
        for copy in 0..5 {
            for j in 0..20 {
                let i = copy * 20 + j;
                assert_eq!(d.test.labels()[i] as usize, j / 2);
                let kind = if copy == 0 { CorruptionKind::None } else { CorruptionKind::ALL[copy - 1] };
                assert_eq!(d.test.groups()[i], GroupKey(vec![kind.id()]));
            }
        }
        assert_eq!(d.test.image(3), test_clean.image(1, 1).unwrap());
        let again = build_corrupted_cifar(&store, &specs, 0).unwrap();
        assert_eq!(d.test.content_hash(), again.test.content_hash());
    }

    #[test]
    fn incomplete_specs_are_rejected() {
        let store = tiny_cifar_store(1);
        let mut specs = default_corruption_specs();
        specs.pop();
        assert!(matches!(build_corrupted_cifar(&store, &specs, 0), Err(Error::Spec(_))));
        let mut dup = default_corruption_specs();
        dup[1].target_classes = [0, 3];
        assert!(corruption_hierarchy(&dup).is_err());
    }

    fn tiny_mnist_store() -> SourceStore {
        let store = SourceStore::in_memory();
        for split in [Split::Train, Split::Test] {
            let classes = (0..10u8)
                .map(|c| {
                    let mut img = vec![0u8; 2 * PLANE];
                    img[100] = 200 + c;
                    img[PLANE + 7] = 255;
                    img
                })
                .collect();
            store.insert_bank(SourceKind::Mnist, split, ClassBank::from_classes(1, classes).unwrap());
        }
        store
    }

    #[test]
    fn half_inverted_splits() {
        let store = tiny_mnist_store();
        let raw = store.bank(SourceKind::Mnist, Split::Train).unwrap();
        let train = build_half_inverted_mnist(&store, HalfInvertedSplit::Train).unwrap();
        assert_eq!(train.len(), 20);
        for i in 0..train.len() {
            let digit = train.labels()[i];
            let src = raw.image(digit, i % 2).unwrap();
            if digit < 5 {
                assert_eq!(train.image(i)[0], 255, "background of an inverted digit");
                assert!(train.image(i).iter().zip(src).all(|(a, b)| *a == 255 - *b));
                assert_eq!(train.groups()[i], GroupKey(vec![WHITE_BACKGROUND]));
            } else {
                assert_eq!(train.image(i), src);
                assert_eq!(train.groups()[i], GroupKey(vec![BLACK_BACKGROUND]));
            }
        }
        let orig = build_half_inverted_mnist(&store, HalfInvertedSplit::TestOriginal).unwrap();
        let inv = build_half_inverted_mnist(&store, HalfInvertedSplit::TestInverted).unwrap();
        assert!(orig.pixels().iter().zip(inv.pixels()).all(|(a, b)| *a == 255 - *b));
        assert!(inv.groups().iter().all(|g| g.0 == [WHITE_BACKGROUND]));
        let again = build_half_inverted_mnist(&store, HalfInvertedSplit::Train).unwrap();
        assert_eq!(train.content_hash(), again.content_hash());
        let h = half_inverted_hierarchy();
        assert_eq!(h.subsets[&GroupKey(vec![WHITE_BACKGROUND])], vec![0, 1, 2, 3, 4]);
    }
}
