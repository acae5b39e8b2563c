#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbattn::Tensor;
use sbattn_harness::data::{Split, CHANNELS, PIXELS, RECORD_BYTES, SIDE, TEST_FILES, TRAIN_FILES};
use sbattn_harness::Dataset;

/// Random records with labels cycling through the ten classes.
pub fn records(count: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(count * RECORD_BYTES);
    for i in 0..count {
        bytes.push((i % 10) as u8);
        bytes.extend((0..PIXELS).map(|_| rng.gen::<u8>()));
    }
    bytes
}

/// A directory laid out like the binary CIFAR-10 release, with
/// `per_file` records in each batch file.
pub fn write_fake_cifar(dir: &Path, per_file: usize) {
    for (i, name) in TRAIN_FILES.iter().chain(&TEST_FILES).enumerate() {
        fs::write(dir.join(name), records(per_file, i as u64)).unwrap();
    }
}

/// Normalized-looking random images whose label is weakly encoded in the
/// red channel mean, so a model can learn something quickly.
pub fn synthetic_dataset(count: usize, seed: u64, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..count).map(|i| i % 10).collect();
    let mut data = Vec::with_capacity(count * PIXELS);
    for &label in &labels {
        for c in 0..CHANNELS {
            let shift = if c == 0 { label as f64 / 5.0 - 1.0 } else { 0.0 };
            data.extend((0..SIDE * SIDE).map(|_| shift + rng.gen_range(-1.0..1.0)));
        }
    }
    Dataset { images: Tensor::new(vec![count, CHANNELS, SIDE, SIDE], data).unwrap(), labels, split }
}
