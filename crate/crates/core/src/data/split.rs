use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

pub const TEST_FRACTION: f64 = 0.2;
/// Fraction of the non-test remainder held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

/// Per-class `(train, val, test)` sizes: 20% test, then 10% of the rest for
/// validation, each rounded and floored at one sample.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = ((n as f64 * TEST_FRACTION).round() as usize).max(1);
    let rest = n.saturating_sub(test);
    let val = ((rest as f64 * VAL_FRACTION).round() as usize).max(1);
    (rest.saturating_sub(val), val, test)
}

/// Stratified train/val/test split, deterministic under `seed`. Samples keep
/// their original relative order inside each split.
pub fn stratified_split(ds: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
    for (i, s) in ds.samples.iter().enumerate() {
        let bucket = by_class.get_mut(s.label).ok_or_else(|| {
            Error::Data(format!(
                "sample '{}' has label {} outside the class list",
                s.name, s.label
            ))
        })?;
        bucket.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Train; ds.len()];
    for (class, indices) in by_class.iter_mut().enumerate() {
        let n = indices.len();
        if n < 3 {
            return Err(Error::ClassTooSmall {
                class: ds.class_names[class].clone(),
                count: n,
            });
        }
        let (_, val, test) = split_sizes(n);
        indices.shuffle(&mut rng);
        for &i in &indices[..test] {
            tags[i] = Split::Test;
        }
        for &i in &indices[test..test + val] {
            tags[i] = Split::Val;
        }
    }
    let pick = |split: Split| LabeledDataset {
        samples: ds
            .samples
            .iter()
            .zip(&tags)
            .filter(|(_, &t)| t == split)
            .map(|(s, _)| s.clone())
            .collect(),
        class_names: ds.class_names.clone(),
        split: Some(split),
    };
    Ok((pick(Split::Train), pick(Split::Val), pick(Split::Test)))
}
