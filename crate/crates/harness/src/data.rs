//! CIFAR-10 binary batches and train-time augmentation.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the 32×32
//! red plane, then green, then blue, rows in order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbattn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CLASSES: usize = 10;
pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + PIXELS;
/// Environment variable that overrides the default data directory.
pub const DATA_DIR_ENV: &str = "CIFAR10_DIR";
pub const DEFAULT_DATA_DIR: &str = "/root/data/cifar-10-batches-bin";

pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILES: [&str; 1] = ["test_batch.bin"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_FILES,
            Split::Test => &TEST_FILES,
        }
    }
}

/// The data directory: `CIFAR10_DIR` when set, the built-in default
/// otherwise.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

/// Undecoded records: labels plus raw channel-planar pixels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawRecords {
    pub labels: Vec<usize>,
    pub pixels: Vec<u8>,
}

impl RawRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..][..PIXELS]
    }
}

/// Splits one batch file's bytes into records.
pub fn parse_records(bytes: &[u8], path: &Path) -> Result<RawRecords> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(HarnessError::Format {
            path: path.to_owned(),
            detail: format!("{} bytes is not a positive multiple of {RECORD_BYTES}", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut out = RawRecords { labels: Vec::with_capacity(n), pixels: Vec::with_capacity(n * PIXELS) };
    for (record, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = chunk[0] as usize;
        if label >= CLASSES {
            return Err(HarnessError::Corruption {
                path: path.to_owned(),
                record,
                detail: format!("label byte {label} is not a class index"),
            });
        }
        out.labels.push(label);
        out.pixels.extend_from_slice(&chunk[1..]);
    }
    Ok(out)
}

pub fn read_split(dir: &Path, split: Split) -> Result<RawRecords> {
    let mut all = RawRecords::default();
    for name in split.files() {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        let part = parse_records(&bytes, &path)?;
        all.labels.extend(part.labels);
        all.pixels.extend(part.pixels);
    }
    Ok(all)
}

/// Per-channel mean and population standard deviation of pixel values
/// scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    pub fn of(records: &RawRecords) -> Result<Self> {
        if records.is_empty() {
            return Err(HarnessError::Config("cannot compute statistics of an empty split".into()));
        }
        let plane = SIDE * SIDE;
        let mut sum = [0u64; CHANNELS];
        let mut sum_sq = [0u64; CHANNELS];
        for i in 0..records.len() {
            for (c, values) in records.image(i).chunks_exact(plane).enumerate() {
                for &v in values {
                    sum[c] += v as u64;
                    sum_sq[c] += (v as u64) * (v as u64);
                }
            }
        }
        let count = (records.len() * plane) as f64;
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            let m = sum[c] as f64 / count;
            let var = sum_sq[c] as f64 / count - m * m;
            mean[c] = m / 255.0;
            std[c] = var.max(0.0).sqrt() / 255.0;
        }
        if std.contains(&0.0) {
            return Err(HarnessError::Config("a channel is constant over the training split".into()));
        }
        Ok(Self { mean, std })
    }
}

/// Normalized images with their class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[M, 3, 32, 32]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images.data()[i * PIXELS..][..PIXELS]
    }

    /// Copies the listed samples into one `[len, 3, 32, 32]` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::new(vec![indices.len(), CHANNELS, SIDE, SIDE], data).expect("sizes agree");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut counts = [0; CLASSES];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

/// Indices of a class-balanced sample of `size` records, in file order.
/// When `size` is not a multiple of ten the first classes get one extra.
pub fn balanced_subset(labels: &[usize], size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(HarnessError::Config("subset size must be positive".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(size);
    for (class, members) in by_class.iter_mut().enumerate() {
        let take = size / CLASSES + usize::from(class < size % CLASSES);
        if members.len() < take {
            return Err(HarnessError::Config(format!("class {class} has {} samples, {take} requested", members.len())));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..take]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Converts the selected records to floats in `[0, 1]` and standardizes
/// each channel with `stats`.
pub fn normalize(records: &RawRecords, indices: &[usize], stats: &ChannelStats, split: Split) -> Dataset {
    let plane = SIDE * SIDE;
    let mut data = Vec::with_capacity(indices.len() * PIXELS);
    for &i in indices {
        for (c, values) in records.image(i).chunks_exact(plane).enumerate() {
            let (m, s) = (stats.mean[c], stats.std[c]);
            data.extend(values.iter().map(|&v| (v as f64 / 255.0 - m) / s));
        }
    }
    Dataset {
        images: Tensor::new(vec![indices.len(), CHANNELS, SIDE, SIDE], data).expect("sizes agree"),
        labels: indices.iter().map(|&i| records.labels[i]).collect(),
        split,
    }
}

/// Loads one split. Normalization statistics always come from the full
/// training split; `subset_size` draws a seeded class-balanced sample.
pub fn load_cifar10(dir: &Path, split: Split, subset_size: Option<usize>, seed: u64) -> Result<Dataset> {
    let train = read_split(dir, Split::Train)?;
    let stats = ChannelStats::of(&train)?;
    let records = match split {
        Split::Train => train,
        Split::Test => read_split(dir, Split::Test)?,
    };
    let indices = match subset_size {
        Some(size) => balanced_subset(&records.labels, size, seed)?,
        None => (0..records.len()).collect(),
    };
    Ok(normalize(&records, &indices, &stats, split))
}

/// Zero padding added on every side before cropping.
pub const PAD: usize = 2;

/// Pads `image` (`[3, 32, 32]` flat) with zeros to 36×36, crops the 32×32
/// window whose top-left corner is `(dy, dx)` in padded coordinates, then
/// mirrors it horizontally when `flip` is set.
pub fn augment_with(image: &[f64], dy: usize, dx: usize, flip: bool) -> Vec<f64> {
    assert_eq!(image.len(), PIXELS, "augment expects one 3x32x32 image");
    assert!(dy <= 2 * PAD && dx <= 2 * PAD, "crop offset ({dy}, {dx}) leaves the padded image");
    let mut out = vec![0.0; PIXELS];
    for c in 0..CHANNELS {
        for i in 0..SIDE {
            let src_row = (i + dy).checked_sub(PAD).filter(|&r| r < SIDE);
            let Some(r) = src_row else { continue };
            for j in 0..SIDE {
                let col = if flip { SIDE - 1 - j } else { j };
                if let Some(q) = (col + dx).checked_sub(PAD).filter(|&q| q < SIDE) {
                    out[(c * SIDE + i) * SIDE + j] = image[(c * SIDE + r) * SIDE + q];
                }
            }
        }
    }
    out
}

/// Random crop offsets then a fair coin for the flip.
pub fn augment<R: Rng + ?Sized>(image: &[f64], rng: &mut R) -> Vec<f64> {
    let dy = rng.gen_range(0..=2 * PAD);
    let dx = rng.gen_range(0..=2 * PAD);
    let flip = rng.gen_bool(0.5);
    augment_with(image, dy, dx, flip)
}

/// Applies [`augment`] to every image of an `[N, 3, 32, 32]` batch.
pub fn augment_batch<R: Rng + ?Sized>(images: &Tensor, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(images.numel());
    for image in images.data().chunks_exact(PIXELS) {
        data.extend(augment(image, rng));
    }
    Tensor::new(images.shape().to_vec(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_crop_is_identity() {
        let image: Vec<f64> = (0..PIXELS).map(|i| i as f64).collect();
        assert_eq!(augment_with(&image, PAD, PAD, false), image);
    }

    #[test]
    fn double_flip_is_identity() {
        let image: Vec<f64> = (0..PIXELS).map(|i| (i * 7 % 13) as f64).collect();
        let once = augment_with(&image, PAD, PAD, true);
        assert_ne!(once, image);
        assert_eq!(augment_with(&once, PAD, PAD, true), image);
    }

    #[test]
    fn bad_length_is_a_format_error() {
        let err = parse_records(&[0u8; RECORD_BYTES + 1], Path::new("x.bin")).unwrap_err();
        assert!(matches!(err, HarnessError::Format { .. }));
    }
}
