//! CIFAR-10 binary batches: one label byte followed by 3072 channel-major pixels.

use std::fs;
use std::path::Path;

use super::{bank::ClassBank, Split, PLANE};
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * PLANE;

const HINT: &str = "CIFAR-10 binary batches not found; download cifar-10-binary.tar.gz \
                    from https://www.cs.toronto.edu/~kriz/cifar.html and extract it so that \
                    <data-root>/cifar-10-batches-bin/ exists";

fn batch_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    }
}

pub(super) fn decode(root: &Path, split: Split) -> Result<ClassBank> {
    let dir = root.join("cifar-10-batches-bin");
    let mut classes: Vec<Vec<u8>> = vec![Vec::new(); 10];
    for name in batch_files(split) {
        let path = dir.join(&name);
        if !path.is_file() {
            return Err(Error::DataUnavailable {
                path,
                hint: HINT.into(),
            });
        }
        let bytes = fs::read(&path)?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::data(format!("{name}: truncated record")));
        }
        for rec in bytes.chunks_exact(RECORD) {
            let class = classes
                .get_mut(rec[0] as usize)
                .ok_or_else(|| Error::data(format!("{name}: label {} out of range", rec[0])))?;
            class.extend_from_slice(&rec[1..]);
        }
    }
    ClassBank::from_classes(3, classes)
}
