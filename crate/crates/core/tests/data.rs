use std::path::PathBuf;

use capsib_core::data::*;
use capsib_core::Tensor;
use proptest::prelude::*;

fn idx_images(count: u32, rows: u32, cols: u32) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [IMAGES_MAGIC, count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..count * rows * cols).map(|i| (i * 7 % 256) as u8));
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn data_root() -> PathBuf {
    std::env::var_os("CAPSIB_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/root/data"))
}

#[test]
fn every_header_mutation_is_rejected() {
    let images = idx_images(3, 4, 5);
    let labels = idx_labels(&[1, 2, 3]);
    assert!(parse_idx(&images, Some(&labels), Split::Train).is_ok());
    let mut rejected = 0;
    for byte in 0..16 {
        for mask in (0..8).map(|b| 1u8 << b).chain([0xFF]) {
            let mut m = images.clone();
            m[byte] ^= mask;
            let err = parse_idx(&m, Some(&labels), Split::Train).unwrap_err();
            assert!(matches!(
                err,
                DataError::BadMagic { .. } | DataError::Truncated { .. } | DataError::TrailingBytes { .. }
            ));
            rejected += 1;
        }
    }
    for byte in 0..8 {
        for mask in (0..8).map(|b| 1u8 << b).chain([0xFF]) {
            let mut m = labels.clone();
            m[byte] ^= mask;
            let err = parse_idx(&images, Some(&m), Split::Train).unwrap_err();
            assert!(matches!(
                err,
                DataError::BadMagic { .. } | DataError::Truncated { .. } | DataError::TrailingBytes { .. }
            ));
            rejected += 1;
        }
    }
    assert_eq!(rejected, 24 * 9);
}

#[test]
fn error_kinds_are_distinct() {
    let mut bad = idx_images(1, 2, 2);
    bad[3] = 0x01;
    assert!(matches!(parse_images(&bad), Err(DataError::BadMagic { found: 0x801, .. })));
    let short = &idx_images(2, 2, 2)[..15];
    assert!(matches!(parse_images(short), Err(DataError::Truncated { expected: 16, actual: 15, .. })));
    let err = parse_idx(&idx_images(2, 2, 2), Some(&idx_labels(&[1])), Split::Test).unwrap_err();
    assert!(matches!(err, DataError::CountMismatch { images: 2, labels: 1 }));
    assert!(matches!(parse_labels(&idx_labels(&[3, 10])), Err(DataError::LabelOutOfRange { index: 1, .. })));
}

#[test]
fn truncated_file_on_disk_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("imgs");
    let mut bytes = idx_images(2, 3, 3);
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, &bytes).unwrap();
    let err = load_idx(&path, None, Split::Train).unwrap_err();
    assert!(matches!(err.root(), DataError::Truncated { expected: 34, actual: 30, .. }));
    assert!(err.to_string().contains("imgs"));
    let missing = load_idx(&dir.path().join("nope"), None, Split::Train).unwrap_err();
    assert!(matches!(missing, DataError::Io { .. }));
}

#[test]
fn mnist_files_have_published_sizes() {
    let root = data_root();
    if !mnist_paths(&root, Split::Test).0.exists() {
        eprintln!("MNIST not found under {}; skipping", root.display());
        return;
    }
    let train = load_mnist(&root, Split::Train).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(train.sample_shape(), [1, 28, 28]);
    assert!(train.labels().unwrap().iter().all(|&y| y < 10));
    let test = load_mnist(&root, Split::Test).unwrap();
    assert_eq!(test.len(), 10_000);
}

#[test]
fn crop_takes_the_centre_window() {
    // 3 channels, 218 tall, 178 wide; pixel value encodes its position
    let (h, w) = (218, 178);
    let img = Tensor::from_fn(&[3, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        ((y * w + x) % 251) as f32 / 250.0
    });
    let out = center_crop_resize(&img, 128, 64).unwrap();
    assert_eq!(out.shape(), &[3, 64, 64]);
    let (top, left) = ((218 - 128) / 2, (178 - 128) / 2);
    assert_eq!((top, left), (45, 25));
    let px = |y: usize, x: usize| img.data()[y * w + x];
    let want = (px(top, left) + px(top, left + 1) + px(top + 1, left) + px(top + 1, left + 1)) / 4.0;
    assert!((out.data()[0] - want).abs() < 1e-6);

    let flat = center_crop_resize(&Tensor::full(&[1, 150, 140], 0.3f32), 128, 64).unwrap();
    assert!(flat.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

    let checker = Tensor::from_fn(&[1, 128, 128], |i| ((i / 128 + i % 128) % 2) as f32);
    let half = center_crop_resize(&checker, 128, 64).unwrap();
    assert!(half.data().iter().all(|&v| v == 0.5));

    assert!(matches!(center_crop_resize(&Tensor::zeros(&[1, 100, 200]), 128, 64), Err(DataError::TooSmall { .. })));
}

#[test]
fn pgm_round_trip_is_exact() {
    let bytes = idx_images(3, 6, 5);
    let ds = parse_idx(&bytes, None, Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        let path = dir.path().join(format!("{i}.pgm"));
        write_image_grid(&[ds.image(i)], 1, 1, &path).unwrap();
        assert_eq!(read_pnm(&path).unwrap(), ds.image(i));
    }
    let colour = Tensor::from_fn(&[3, 4, 2], |i| (i * 10) as f32 / 255.0);
    let path = dir.path().join("c.ppm");
    write_image_grid(std::slice::from_ref(&colour), 1, 1, &path).unwrap();
    assert_eq!(read_pnm(&path).unwrap(), colour);
}

#[test]
fn grids_are_byte_identical_across_writes() {
    let imgs: Vec<Tensor<f32>> = (0..6).map(|k| Tensor::from_fn(&[1, 28, 28], |i| ((i + k) % 9) as f32 / 8.0)).collect();
    let a = encode_grid(&imgs, 2, 3).unwrap();
    let b = encode_grid(&imgs, 2, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with(b"P5\n88 58\n255\n"));
    assert!(encode_grid(&imgs, 1, 3).is_err());
    let mixed = vec![Tensor::zeros(&[1, 28, 28]), Tensor::zeros(&[1, 27, 28])];
    assert!(encode_grid(&mixed, 1, 2).is_err());
    assert!(write_image_grid(&imgs, 2, 3, std::path::Path::new("/nonexistent/dir/g.pgm")).is_err());
}

#[test]
fn ppm_directory_loads_sorted_and_cropped() {
    let dir = tempfile::tempdir().unwrap();
    for (name, v) in [("b.ppm", 0.2f32), ("a.ppm", 0.6), ("skip.txt", 0.0)] {
        let img = Tensor::full(&[3, 218, 178], v);
        let path = dir.path().join(name);
        if name.ends_with(".ppm") {
            write_image_grid(&[img], 1, 1, &path).unwrap();
        } else {
            std::fs::write(&path, b"x").unwrap();
        }
    }
    let ds = load_ppm_dir(dir.path(), 128, 64, None).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.sample_shape(), [3, 64, 64]);
    assert!(ds.labels().is_none());
    assert_eq!(ds.image(0).data()[0], (0.6f32 * 255.0).round() / 255.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64), split in 0usize..64) {
        let cut = split.min(bytes.len());
        let _ = parse_idx(&bytes[..cut], Some(&bytes[cut..]), Split::Train);
        let _ = parse_images(&bytes);
        let _ = parse_labels(&bytes);
    }

    #[test]
    fn epoch_batches_partition_the_dataset(count in 0usize..200, size in 1usize..17, seed in any::<u64>(), epoch in 0u64..5) {
        let plan = BatchPlan::new(size, seed);
        let batches = plan.epoch(count, epoch).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..count).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() <= size && !b.is_empty()));
        prop_assert_eq!(plan.epoch(count, epoch).unwrap(), batches);
    }
}

#[test]
fn batches_gather_matching_labels() {
    let ds = parse_idx(&idx_images(10, 2, 2), Some(&idx_labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9])), Split::Train).unwrap();
    let plan = BatchPlan { drop_last: true, ..BatchPlan::new(3, 4) };
    let got: Vec<_> = batches(&ds, &plan, 0).unwrap().collect();
    assert_eq!(got.len(), 3);
    for (x, y) in got {
        let y = y.unwrap();
        assert_eq!(x.shape(), &[3, 1, 2, 2]);
        for (k, &label) in y.iter().enumerate() {
            assert_eq!(&x.data()[k * 4..k * 4 + 4], ds.image(label).data());
        }
    }
}
