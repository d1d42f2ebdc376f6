//! Dataset generation, IDX parsing and batching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nnprat::data::{
    batches, encode_idx, gen_gaussian, gen_gaussian_splits, load_idx, parse_idx, write_idx, GaussianSpec,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use nnprat::Error;
use proptest::prelude::*;

fn idx_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img: Vec<u8> = [IDX_IMAGES_MAGIC, count, rows, cols].iter().flat_map(|v| v.to_be_bytes()).collect();
    img.extend_from_slice(pixels);
    let mut lab: Vec<u8> = [IDX_LABELS_MAGIC, labels.len() as u32].iter().flat_map(|v| v.to_be_bytes()).collect();
    lab.extend_from_slice(labels);
    (img, lab)
}

fn parse(img: &[u8], lab: &[u8]) -> nnprat::Result<nnprat::data::Dataset> {
    parse_idx(img, lab, Path::new("images"), Path::new("labels"))
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist358")
}

#[test]
fn hand_built_fixture() {
    let (img, lab) = idx_bytes(1, 2, 2, &[0, 255, 128, 64], &[4]);
    let ds = parse(&img, &lab).unwrap();
    assert_eq!(ds.inputs.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    assert_eq!(ds.labels, [4]);
}

#[test]
fn format_errors_are_distinct() {
    let (img, lab) = idx_bytes(1, 2, 2, &[0, 255, 128, 64], &[4]);
    assert!(matches!(
        parse(&img, &img),
        Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: IDX_IMAGES_MAGIC, .. })
    ));
    assert!(matches!(parse(&img[..18], &lab), Err(Error::Truncated { needed: 20, actual: 18, .. })));
    let (_, two_labels) = idx_bytes(2, 2, 2, &[], &[1, 2]);
    assert!(matches!(parse(&img, &two_labels), Err(Error::CountMismatch { images: 1, labels: 2 })));
}

#[test]
fn bundled_subset_parses() {
    let dir = mnist_dir();
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!((train.len(), train.input_len()), (1500, 784));
    assert_eq!((test.len(), test.input_len()), (600, 784));
    let mut counts = BTreeMap::new();
    for l in &train.labels {
        *counts.entry(*l).or_insert(0) += 1;
    }
    assert_eq!(counts, BTreeMap::from([(3, 500), (5, 500), (8, 500)]));
    let relabelled = train.select_classes(&[3, 5, 8]).unwrap();
    assert_eq!(relabelled.num_classes, 3);
    assert_eq!(&relabelled.labels[..3], &[0, 1, 2]);
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let src = mnist_dir();
    let (si, sl) = (src.join("t10k-images-idx3-ubyte"), src.join("t10k-labels-idx1-ubyte"));
    let ds = load_idx(&si, &sl).unwrap();
    let (oi, ol) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&ds, &oi, &ol).unwrap();
    assert_eq!(std::fs::read(&oi).unwrap(), std::fs::read(&si).unwrap());
    assert_eq!(std::fs::read(&ol).unwrap(), std::fs::read(&sl).unwrap());
}

#[test]
fn tiny_sigma_collapses_to_means() {
    let spec = GaussianSpec {
        sigma: 1e-9,
        samples_per_class: 50,
        test_per_class: 0,
        ..GaussianSpec::default()
    };
    let ds = gen_gaussian(&spec).unwrap();
    let map = ds.transform.clone().unwrap();
    for (i, &l) in ds.labels.iter().enumerate() {
        let raw = map.invert(ds.inputs.row(i));
        for d in 0..2 {
            assert!((raw[d] - spec.means[l][d]).abs() <= 1e-8, "{raw:?}");
        }
    }
}

#[test]
fn empirical_means_within_clt_bound() {
    let spec = GaussianSpec {
        samples_per_class: 1000,
        test_per_class: 0,
        seed: 9,
        ..GaussianSpec::default()
    };
    let ds = gen_gaussian(&spec).unwrap();
    let map = ds.transform.clone().unwrap();
    let bound = 5.0 * spec.sigma / 1000f64.sqrt();
    for c in 0..2 {
        let rows: Vec<Vec<f64>> = (0..ds.len()).filter(|&i| ds.labels[i] == c).map(|i| map.invert(ds.inputs.row(i))).collect();
        assert_eq!(rows.len(), 1000);
        for d in 0..2 {
            let m = rows.iter().map(|r| r[d]).sum::<f64>() / 1000.0;
            assert!((m - spec.means[c][d]).abs() <= bound, "class {c} dim {d}: {m}");
        }
    }
}

#[test]
fn generation_is_deterministic_and_in_range() {
    let spec = GaussianSpec::default();
    let (a, at) = gen_gaussian_splits(&spec).unwrap();
    let (b, bt) = gen_gaussian_splits(&spec).unwrap();
    assert_eq!((a.clone(), at.clone()), (b, bt));
    assert!(a.inputs.data().iter().chain(at.inputs.data()).all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn csv_dump_has_feature_columns() {
    let ds = gen_gaussian(&GaussianSpec {
        samples_per_class: 2,
        test_per_class: 0,
        ..GaussianSpec::default()
    })
    .unwrap();
    let mut out = Vec::new();
    ds.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x0,x1,label");
    assert_eq!(lines.len(), 5);
}

fn dataset(n: usize) -> nnprat::data::Dataset {
    gen_gaussian(&GaussianSpec {
        samples_per_class: n,
        test_per_class: 0,
        ..GaussianSpec::default()
    })
    .unwrap()
}

#[test]
fn full_batch_is_a_permutation() {
    let ds = dataset(10);
    let b = batches(&ds, 20, 3, 0).unwrap();
    assert_eq!(b.len(), 1);
    let mut idx = b[0].indices.clone();
    idx.sort();
    assert_eq!(idx, (0..20).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_bytes_round_trip(
        rows in 1u32..5,
        cols in 1u32..5,
        count in 1u32..6,
        seed in any::<u64>(),
    ) {
        let n = (rows * cols * count) as usize;
        let pixels: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let labels: Vec<u8> = (0..count).map(|i| ((seed >> i) % 10) as u8).collect();
        let (img, lab) = idx_bytes(count, rows, cols, &pixels, &labels);
        let (img2, lab2) = encode_idx(&parse(&img, &lab).unwrap()).unwrap();
        prop_assert_eq!(img2, img);
        prop_assert_eq!(lab2, lab);
    }

    #[test]
    fn batches_partition_each_epoch(per_class in 1usize..40, bs in 1usize..50, seed in any::<u64>(), epoch in 0u64..5) {
        let ds = dataset(per_class);
        let b = batches(&ds, bs, seed, epoch).unwrap();
        let mut seen: Vec<usize> = b.iter().flat_map(|x| x.indices.clone()).collect();
        seen.sort();
        prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
        prop_assert!(b.iter().all(|x| x.labels.len() <= bs && !x.labels.is_empty()));
        for x in &b {
            for (k, &i) in x.indices.iter().enumerate() {
                prop_assert_eq!(x.labels[k], ds.labels[i]);
                prop_assert_eq!(x.inputs.row(k), ds.inputs.row(i));
            }
        }
        prop_assert_eq!(batches(&ds, bs, seed, epoch).unwrap(), b);
    }
}
