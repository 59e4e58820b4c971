use std::io::Write;
use std::path::Path;

use genlayer::data::{gen_cubic_mix, gen_quadratic, mnist_load, randomize_labels, test_grid, Dataset, TargetFn};
use genlayer::Error;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803u32, n, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0801u32, labels.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    b
}

fn gz(path: &Path, bytes: &[u8]) {
    let f = std::fs::File::create(path).unwrap();
    let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap();
}

#[test]
fn two_image_idx_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    let mut pixels = vec![0u8; 2 * 2 * 3];
    pixels[0] = 255;
    pixels[7] = 51;
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab.gz"));
    std::fs::write(&img, idx_images(2, 2, 3, &pixels)).unwrap();
    gz(&lab, &idx_labels(&[7, 0]));
    let ds = mnist_load(&img, &lab).unwrap();
    assert_eq!((ds.len(), ds.dim_in(), ds.dim_out()), (2, 6, 10));
    assert_eq!(ds.inputs.get(0, 0), 1.0);
    assert_eq!(ds.inputs.get(1, 1), 0.2);
    assert_eq!(ds.labels().unwrap(), vec![7, 0]);
}

#[test]
fn empty_and_corrupt_idx_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&img, b"").unwrap();
    std::fs::write(&lab, idx_labels(&[1])).unwrap();
    assert!(matches!(mnist_load(&img, &lab), Err(Error::Idx { .. })));

    // Truncated pixel data.
    std::fs::write(&img, idx_images(1, 2, 2, &[0, 0, 0])).unwrap();
    assert!(matches!(mnist_load(&img, &lab), Err(Error::Idx { .. })));

    // Label count disagrees with image count.
    std::fs::write(&img, idx_images(1, 1, 1, &[9])).unwrap();
    std::fs::write(&lab, idx_labels(&[1, 2])).unwrap();
    assert!(matches!(mnist_load(&img, &lab), Err(Error::Idx { .. })));

    // Label out of range.
    std::fs::write(&lab, idx_labels(&[10])).unwrap();
    assert!(matches!(mnist_load(&img, &lab), Err(Error::Idx { .. })));

    // Swapped files fail the magic check.
    std::fs::write(&lab, idx_labels(&[1])).unwrap();
    assert!(matches!(mnist_load(&lab, &img), Err(Error::Idx { .. })));
}

#[test]
fn bundled_mnist_subset_is_readable() {
    let dir = genlayer::experiments::presets::mnist_dir();
    let ds = mnist_load(&dir.join("images-idx3-ubyte.gz"), &dir.join("labels-idx1-ubyte.gz")).unwrap();
    assert!(ds.len() >= 10_000);
    assert_eq!(ds.dim_in(), 784);
    assert!(ds.inputs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn regression_data_follows_the_grid() {
    let q = gen_quadratic(100, -8.0, 8.0, 10.0, 4).unwrap();
    assert_eq!(q.len(), 100);
    assert_eq!(q.inputs.get(0, 0), -8.0);
    assert_eq!(q.inputs.get(99, 0), 8.0);
    assert!(gen_quadratic(1, -8.0, 8.0, 10.0, 4).is_err());
    assert!(gen_quadratic(10, 1.0, -1.0, 10.0, 4).is_err());

    let clean = gen_cubic_mix(50, -8.0, 8.0, 0.0, 1).unwrap();
    for r in 0..clean.len() {
        let x = clean.inputs.get(r, 0);
        assert_eq!(clean.targets.get(r, 0), TargetFn::Cubic.eval(x));
    }
    let grid = test_grid(TargetFn::Quadratic, -2.0, 2.0, 5).unwrap();
    assert_eq!(grid.targets.get(2, 0), 10.0);
}

#[test]
fn csv_round_trip_preserves_values_and_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_cubic_mix(37, -3.0, 5.0, 2.0, 11).unwrap();
    let path = dir.path().join("d.csv");
    ds.write_csv(&path).unwrap();
    let back = Dataset::read_csv(&path).unwrap();
    assert_eq!(back.inputs, ds.inputs);
    assert_eq!(back.targets, ds.targets);
    assert_eq!(back.checksum(), ds.checksum());
}

#[test]
fn random_labels_keep_inputs_and_change_targets() {
    let dir = genlayer::experiments::presets::mnist_dir();
    let ds = mnist_load(&dir.join("images-idx3-ubyte.gz"), &dir.join("labels-idx1-ubyte.gz"))
        .unwrap()
        .head(2000);
    let r = randomize_labels(&ds, 5).unwrap();
    assert_eq!(r.inputs, ds.inputs);
    let same = ds.labels().unwrap().iter().zip(r.labels().unwrap()).filter(|(a, b)| **a == *b).count();
    // About one in ten agree by chance.
    assert!((100..300).contains(&same), "{same}");
    assert_eq!(randomize_labels(&ds, 5).unwrap(), r);
}
