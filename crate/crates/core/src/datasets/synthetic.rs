use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bank::ClassBank, SourceKind, Split, PLANE};
use crate::util::mix_seed;

/// Per-class random template plus per-image noise of amplitude ±48.
pub(super) fn bank(kind: SourceKind, split: Split, seed: u64, per_class: usize) -> ClassBank {
    let channels = kind.channels();
    let classes = (0..kind.num_classes() as u64)
        .map(|class| {
            let mut trng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, kind as u64, class]));
            let template: Vec<i16> = (0..channels * PLANE)
                .map(|_| trng.random_range(40..216))
                .collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[seed, kind as u64, class, split as u64 + 7]));
            let mut out = Vec::with_capacity(per_class * template.len());
            for _ in 0..per_class {
                out.extend(
                    template
                        .iter()
                        .map(|&t| (t + rng.random_range(-48..=48)).clamp(0, 255) as u8),
                );
            }
            out
        })
        .collect();
    ClassBank::from_classes(channels, classes).expect("synthetic geometry")
}
