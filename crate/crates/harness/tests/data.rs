mod common;

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbattn_harness::data::{
    augment, augment_with, balanced_subset, load_cifar10, parse_records, read_split, Split, CHANNELS, DEFAULT_DATA_DIR,
    PAD, PIXELS, RECORD_BYTES, SIDE, TRAIN_FILES,
};
use sbattn_harness::HarnessError;

#[test]
fn truncated_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    common::write_fake_cifar(dir.path(), 20);
    let path = dir.path().join(TRAIN_FILES[2]);
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 1);
    fs::write(&path, bytes).unwrap();
    let err = load_cifar10(dir.path(), Split::Train, None, 0).unwrap_err();
    match err {
        HarnessError::Format { path: p, .. } => assert_eq!(p, path),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn label_out_of_range_is_a_corruption_error() {
    let mut bytes = common::records(5, 1);
    bytes[3 * RECORD_BYTES] = 10;
    match parse_records(&bytes, "b.bin".as_ref()).unwrap_err() {
        HarnessError::Corruption { record, .. } => assert_eq!(record, 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cifar10(&dir.path().join("absent"), Split::Test, None, 0).unwrap_err();
    assert!(matches!(err, HarnessError::Io { .. }));
}

#[test]
fn records_decode_in_planar_order() {
    let mut bytes = vec![7u8];
    bytes.extend((0..PIXELS).map(|i| (i / (SIDE * SIDE)) as u8 * 100 + (i % 3) as u8));
    let records = parse_records(&bytes, "one.bin".as_ref()).unwrap();
    assert_eq!(records.labels, vec![7]);
    let image = records.image(0);
    assert_eq!(&image[..3], &[0, 1, 2]);
    assert_eq!(image[SIDE * SIDE], 100 + (SIDE * SIDE % 3) as u8);
    assert_eq!(image[2 * SIDE * SIDE], 200 + (2 * SIDE * SIDE % 3) as u8);
}

#[test]
fn training_split_is_standardized_per_channel() {
    let dir = tempfile::tempdir().unwrap();
    common::write_fake_cifar(dir.path(), 60);
    let train = load_cifar10(dir.path(), Split::Train, None, 0).unwrap();
    assert_eq!(train.len(), 300);
    let plane = SIDE * SIDE;
    for c in 0..CHANNELS {
        let values: Vec<f64> = (0..train.len()).flat_map(|i| train.image(i)[c * plane..][..plane].to_vec()).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        assert!((std - 1.0).abs() < 1e-4, "channel {c} std {std}");
    }
}

#[test]
fn test_split_uses_training_statistics() {
    let dir = tempfile::tempdir().unwrap();
    common::write_fake_cifar(dir.path(), 30);
    let raw_train = read_split(dir.path(), Split::Train).unwrap();
    let raw_test = read_split(dir.path(), Split::Test).unwrap();
    let test = load_cifar10(dir.path(), Split::Test, None, 0).unwrap();

    let plane = SIDE * SIDE;
    let red: Vec<f64> =
        raw_train.pixels.chunks(PIXELS).flat_map(|p| p[..plane].to_vec()).map(|v| v as f64 / 255.0).collect();
    let mean = red.iter().sum::<f64>() / red.len() as f64;
    let std = (red.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / red.len() as f64).sqrt();
    let expect = (raw_test.image(4)[17] as f64 / 255.0 - mean) / std;
    assert!((test.image(4)[17] - expect).abs() < 1e-12);
    assert_eq!(test.labels, raw_test.labels);
}

#[test]
fn subset_is_class_balanced_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    common::write_fake_cifar(dir.path(), 500);
    let a = load_cifar10(dir.path(), Split::Train, Some(2000), 3).unwrap();
    assert_eq!(a.class_counts(), [200; 10]);
    let b = load_cifar10(dir.path(), Split::Train, Some(2000), 3).unwrap();
    assert_eq!(a, b);
    let c = load_cifar10(dir.path(), Split::Train, Some(2000), 4).unwrap();
    assert_ne!(a.images, c.images);

    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
    let uneven = balanced_subset(&labels, 23, 0).unwrap();
    let mut counts = [0; 10];
    uneven.iter().for_each(|&i| counts[labels[i]] += 1);
    assert_eq!(counts, [3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
    assert!(balanced_subset(&labels, 101, 0).is_err());
}

#[test]
fn real_batch_files_have_the_published_size() {
    let dir = std::path::Path::new(DEFAULT_DATA_DIR);
    if !dir.exists() {
        eprintln!("skipped: no CIFAR-10 at {DEFAULT_DATA_DIR}");
        return;
    }
    for name in TRAIN_FILES {
        assert_eq!(fs::metadata(dir.join(name)).unwrap().len(), 30_730_000);
    }
}

/// Explicit 36×36 zero padding, then a crop and optional mirror.
fn padded_crop_oracle(image: &[f64], dy: usize, dx: usize, flip: bool) -> Vec<f64> {
    let side = SIDE + 2 * PAD;
    let mut padded = vec![0.0; CHANNELS * side * side];
    for c in 0..CHANNELS {
        for i in 0..SIDE {
            for j in 0..SIDE {
                padded[(c * side + i + PAD) * side + j + PAD] = image[(c * SIDE + i) * SIDE + j];
            }
        }
    }
    let mut out = vec![0.0; PIXELS];
    for c in 0..CHANNELS {
        for i in 0..SIDE {
            for j in 0..SIDE {
                let src = if flip { SIDE - 1 - j } else { j };
                out[(c * SIDE + i) * SIDE + j] = padded[(c * side + i + dy) * side + src + dx];
            }
        }
    }
    out
}

#[test]
fn augmentation_matches_index_oracle() {
    let image: Vec<f64> = (0..PIXELS).map(|i| 1.0 + i as f64).collect();
    for dy in 0..=2 * PAD {
        for dx in 0..=2 * PAD {
            for flip in [false, true] {
                assert_eq!(
                    augment_with(&image, dy, dx, flip),
                    padded_crop_oracle(&image, dy, dx, flip),
                    "{dy} {dx} {flip}"
                );
            }
        }
    }
    // Corner crop: the top two rows and left two columns are padding.
    let corner = augment_with(&image, 0, 0, false);
    assert!(corner[..2 * SIDE].iter().all(|&v| v == 0.0));
    assert!((0..SIDE).all(|i| corner[i * SIDE] == 0.0 && corner[i * SIDE + 1] == 0.0));
    assert_eq!(corner[2 * SIDE + 2], image[0]);
    assert_eq!(corner[SIDE * SIDE - 1], image[29 * SIDE + 29]);
}

#[test]
fn augmentation_is_seeded() {
    let image: Vec<f64> = (0..PIXELS).map(|i| i as f64).collect();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..8).map(|_| augment(&image, &mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}
