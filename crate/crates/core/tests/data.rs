use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use ftnn_core::data::{
    batch_indices, load_cifar10, load_cifar10_dir, load_fashion_mnist, load_idx, minibatches, one_hot_batch,
    permutation, synthetic_toy, DataError, Dataset, Split, CIFAR_RECORD,
};
use ftnn_core::Tensor;
use proptest::prelude::*;

fn idx_images(n: usize, rows: usize, cols: usize, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x803u32, n as u32, rows as u32, cols as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..n * rows * cols).map(pixel));
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&0x801u32.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::default());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn idx_pair_decodes_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "i", &idx_images(3, 2, 2, |i| (i * 20) as u8));
    let lab = write(dir.path(), "l", &idx_labels(&[4, 0, 9]));
    let d = load_idx(&img, &lab, Split::Train).unwrap();
    assert_eq!(d.images.shape(), &[3, 1, 2, 2]);
    assert_eq!(d.labels, vec![4, 0, 9]);
    assert_eq!(d.images.data()[0], 0.0);
    assert_eq!(d.images.data()[5], 100.0 / 255.0);
    assert_eq!(d.classes, 10);
}

#[test]
fn gzipped_files_under_standard_names() {
    let dir = tempfile::tempdir().unwrap();
    let images = idx_images(4, 28, 28, |i| (i % 256) as u8);
    write(dir.path(), "t10k-images-idx3-ubyte.gz", &gz(&images));
    write(dir.path(), "t10k-labels-idx1-ubyte.gz", &gz(&idx_labels(&[1, 2, 3, 4])));
    let d = load_fashion_mnist(dir.path(), Split::Test).unwrap();
    assert_eq!(d.len(), 4);
    assert_eq!(d.split, Split::Test);
    assert_eq!(d.images.data()[255], 1.0);

    // plain files win when both exist
    write(dir.path(), "t10k-images-idx3-ubyte", &idx_images(2, 28, 28, |_| 0));
    write(dir.path(), "t10k-labels-idx1-ubyte", &idx_labels(&[5, 6]));
    assert_eq!(load_fashion_mnist(dir.path(), Split::Test).unwrap().labels, vec![5, 6]);
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good_img = write(dir.path(), "img", &idx_images(2, 2, 2, |_| 1));
    let good_lab = write(dir.path(), "lab", &idx_labels(&[0, 1]));

    let swapped = load_idx(&good_lab, &good_img, Split::Train);
    assert!(matches!(swapped, Err(DataError::BadMagic { expected: 0x803, .. })));

    let mut short = idx_images(2, 2, 2, |_| 1);
    short.pop();
    let short = write(dir.path(), "short", &short);
    assert!(matches!(
        load_idx(&short, &good_lab, Split::Train),
        Err(DataError::Truncated { needed: 24, have: 23, .. })
    ));

    let three = write(dir.path(), "three", &idx_labels(&[0, 1, 2]));
    assert!(matches!(
        load_idx(&good_img, &three, Split::Train),
        Err(DataError::CountMismatch { images: 2, labels: 3 })
    ));

    let bad_label = write(dir.path(), "bad", &idx_labels(&[0, 10]));
    assert!(matches!(
        load_idx(&good_img, &bad_label, Split::Train),
        Err(DataError::LabelRange { label: 10, classes: 10 })
    ));

    assert!(matches!(
        load_idx(&dir.path().join("nope"), &good_lab, Split::Train),
        Err(DataError::Io { .. })
    ));
}

fn cifar_record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(fill));
    r
}

#[test]
fn cifar_batches_are_channel_planar() {
    let dir = tempfile::tempdir().unwrap();
    // red plane 255, green 0, blue 51
    let plane = |i: usize| match i / 1024 {
        0 => 255,
        1 => 0,
        _ => 51,
    };
    let mut batch = cifar_record(3, plane);
    batch.extend(cifar_record(7, |_| 0));
    for i in 1..=5 {
        write(dir.path(), &format!("data_batch_{i}.bin"), &batch);
    }
    write(dir.path(), "test_batch.bin", &gz(&cifar_record(9, |_| 255)));

    let train = load_cifar10_dir(dir.path(), Split::Train).unwrap();
    assert_eq!(train.images.shape(), &[10, 3, 32, 32]);
    assert_eq!(train.labels[..2], [3, 7]);
    let first = train.images.row(0);
    assert_eq!(first[0], 1.0);
    assert_eq!(first[1024], 0.0);
    assert_eq!(first[2048], 0.2);

    let test = load_cifar10_dir(dir.path(), Split::Test).unwrap();
    assert_eq!(test.labels, vec![9]);

    let ragged = write(dir.path(), "ragged.bin", &batch[..CIFAR_RECORD + 5]);
    assert!(matches!(
        load_cifar10(&[ragged], Split::Train),
        Err(DataError::RecordLength { .. })
    ));
    let bad = write(dir.path(), "bad.bin", &cifar_record(10, |_| 0));
    assert!(matches!(load_cifar10(&[bad], Split::Train), Err(DataError::LabelRange { .. })));
}

fn labelled(labels: &[usize]) -> Dataset {
    let n = labels.len();
    let images = Tensor::from_fn([n, 2], |i| (i / 2) as f32);
    Dataset::new(images, labels.to_vec(), 3, Split::Train).unwrap()
}

#[test]
fn stratified_subset_takes_first_per_class() {
    let d = labelled(&[0, 0, 1, 2, 0, 1, 1, 2, 2, 0]);
    let s = d.stratified_subset(5);
    // quotas 2, 2, 1 filled in file order
    assert_eq!(s.labels, vec![0, 0, 1, 2, 1]);
    assert_eq!(s.images.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 5.0, 5.0]);
    assert_eq!(d.stratified_subset(100), d);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let images = Tensor::zeros([3, 2]);
    assert!(Dataset::new(images.clone(), vec![0, 1], 2, Split::Train).is_err());
    assert!(Dataset::new(images, vec![0, 1, 2], 2, Split::Train).is_err());
}

#[test]
fn toy_set_is_balanced_and_separable() {
    let d = synthetic_toy(200, 4).unwrap();
    assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), 100);
    for i in 0..d.len() {
        let s: f32 = d.images.row(i).iter().map(|v| v - 0.5).sum();
        assert_eq!(s > 0.0, d.labels[i] == 1);
    }
    assert_eq!(synthetic_toy(200, 4).unwrap(), d);
}

#[test]
fn minibatches_follow_the_seeded_permutation() {
    let d = labelled(&[0, 1, 2, 0, 1, 2, 0]);
    let perm = permutation(7, 11);
    let batches: Vec<_> = minibatches(&d, 3, 11).unwrap().collect();
    assert_eq!(batches.len(), 2);
    for (b, chunk) in batches.iter().zip(perm.chunks_exact(3)) {
        assert_eq!(b.indices, chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| d.labels[i]).collect();
        assert_eq!(b.y, one_hot_batch(&labels, 3).unwrap());
        assert_eq!(b.x, d.images.gather_rows(chunk));
    }
}

proptest! {
    #[test]
    fn permutation_is_a_seeded_bijection(n in 1usize..300, seed in any::<u64>()) {
        let p = permutation(n, seed);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(permutation(n, seed), p);
    }

    #[test]
    fn batches_cover_a_prefix_of_the_permutation(n in 1usize..200, m in 1usize..50, seed in any::<u64>()) {
        prop_assume!(m <= n);
        let b = batch_indices(n, m, seed).unwrap();
        prop_assert_eq!(b.len(), n / m);
        prop_assert!(b.iter().all(|c| c.len() == m));
        let flat: Vec<usize> = b.concat();
        prop_assert_eq!(&flat[..], &permutation(n, seed)[..n / m * m]);
    }

    #[test]
    fn stratified_subset_is_balanced(labels in proptest::collection::vec(0usize..3, 30..60), k in 1usize..12) {
        let d = labelled(&labels);
        let s = d.stratified_subset(k);
        let counts: Vec<usize> = (0..3).map(|c| s.labels.iter().filter(|&&l| l == c).count()).collect();
        let avail: Vec<usize> = (0..3).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        for c in 0..3 {
            let quota = k / 3 + usize::from(c < k % 3);
            prop_assert_eq!(counts[c], quota.min(avail[c]));
        }
    }
}
