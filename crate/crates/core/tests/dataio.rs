//! PNG roundtrips, the synthetic generator's contracts, and dataset
//! splitting.

mod common;

use std::collections::HashSet;

use ardu::dataio::{
    batch_tensors, gen_synthetic, load_dataset, load_sample, save_dataset, save_image_png,
    save_mask_png, split_dataset, ImageSample, SplitSpec,
};
use common::TestRng;

fn toy_dataset(n: usize) -> Vec<ImageSample> {
    gen_synthetic(n, (32, 32), 42).unwrap()
}

#[test]
fn gen_synthetic_basic_contracts() {
    assert!(gen_synthetic(0, (32, 32), 1).unwrap().is_empty());
    assert!(gen_synthetic(1, (30, 32), 1).is_err(), "extent must divide by 16");

    let samples = toy_dataset(12);
    assert_eq!(samples.len(), 12);
    let mut ids = HashSet::new();
    for s in &samples {
        s.validate().unwrap();
        assert!(ids.insert(s.id.clone()), "duplicate id {}", s.id);
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        let frac = s.foreground_fraction();
        assert!((0.02..=0.40).contains(&frac), "{}: fraction {frac}", s.id);
    }
}

#[test]
fn gen_synthetic_is_deterministic() {
    let a = toy_dataset(5);
    let b = toy_dataset(5);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.id, y.id);
    }
    let c = gen_synthetic(5, (32, 32), 43).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
}

#[test]
fn gen_synthetic_images_are_tinted() {
    // Channel means should differ visibly on most samples (the tint is what
    // the color-constancy ablation exercises).
    let samples = toy_dataset(8);
    let tinted = samples
        .iter()
        .filter(|s| {
            let plane = s.h * s.w;
            let mean = |c: usize| {
                s.image[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32
            };
            let (r, g, b) = (mean(0), mean(1), mean(2));
            let spread = r.max(g).max(b) - r.min(g).min(b);
            spread > 0.03
        })
        .count();
    assert!(tinted >= 4, "only {tinted}/8 samples show a channel tint");
}

#[test]
fn png_roundtrip_stays_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = TestRng::new(1);
    let (h, w) = (9, 7);
    let image = rng.uniform(3 * h * w, 0.0, 1.0);
    let mask: Vec<u8> = rng.uniform(h * w, 0.0, 1.0).iter().map(|v| u8::from(*v > 0.5)).collect();
    let ip = dir.path().join("img.png");
    let mp = dir.path().join("mask.png");
    save_image_png(&ip, &image, h, w).unwrap();
    save_mask_png(&mp, &mask, h, w).unwrap();
    let loaded = load_sample(&ip, &mp, "rt").unwrap();
    assert_eq!((loaded.h, loaded.w), (h, w));
    for (a, b) in loaded.image.iter().zip(&image) {
        assert!((a - b).abs() <= 1.0 / 510.0, "{a} vs {b}");
    }
    assert_eq!(loaded.mask, mask);
}

#[test]
fn white_png_loads_as_ones_and_mask_threshold_is_128() {
    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("white.png");
    save_image_png(&ip, &vec![1.0f32; 3 * 16], 4, 4).unwrap();

    let mut gray = image::GrayImage::new(4, 4);
    for (i, px) in gray.pixels_mut().enumerate() {
        px.0[0] = if i % 2 == 0 { 127 } else { 128 };
    }
    let mp = dir.path().join("edge.png");
    gray.save(&mp).unwrap();

    let s = load_sample(&ip, &mp, "edge").unwrap();
    assert!(s.image.iter().all(|v| *v == 1.0));
    for (i, m) in s.mask.iter().enumerate() {
        assert_eq!(*m, (i % 2 != 0) as u8, "pixel {i}");
    }
}

#[test]
fn load_sample_rejects_extent_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("img.png");
    let mp = dir.path().join("mask.png");
    save_image_png(&ip, &vec![0.5f32; 3 * 64], 8, 8).unwrap();
    save_mask_png(&mp, &vec![0u8; 16], 4, 4).unwrap();
    assert!(load_sample(&ip, &mp, "bad").is_err());
    assert!(load_sample(&dir.path().join("missing.png"), &mp, "gone").is_err());
}

#[test]
fn split_sizes_disjointness_and_determinism() {
    let dataset = toy_dataset(100);
    let spec = SplitSpec { fractions: (0.8, 0.1, 0.1), seed: 3 };
    let s = split_dataset(dataset.clone(), &spec).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));

    let mut seen = HashSet::new();
    for part in [&s.train, &s.val, &s.test] {
        for sample in part {
            assert!(seen.insert(sample.id.clone()), "duplicate across splits");
        }
    }
    assert_eq!(seen.len(), 100);

    let again = split_dataset(dataset.clone(), &spec).unwrap();
    let ids = |v: &[ImageSample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&s.train), ids(&again.train));
    assert_eq!(ids(&s.test), ids(&again.test));

    let other = split_dataset(dataset, &SplitSpec { fractions: (0.8, 0.1, 0.1), seed: 4 }).unwrap();
    assert_ne!(ids(&s.train), ids(&other.train));
}

#[test]
fn split_validation() {
    assert!(split_dataset(toy_dataset(9), &SplitSpec::default()).is_err());
    assert!(split_dataset(
        toy_dataset(10),
        &SplitSpec { fractions: (0.8, 0.3, 0.1), seed: 0 }
    )
    .is_err());
    let odd = split_dataset(toy_dataset(13), &SplitSpec::default()).unwrap();
    assert_eq!((odd.train.len(), odd.val.len(), odd.test.len()), (10, 1, 2));
}

#[test]
fn dataset_directory_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let splits = split_dataset(toy_dataset(12), &SplitSpec::default()).unwrap();
    save_dataset(dir.path(), &splits).unwrap();
    assert!(dir.path().join("manifest.tsv").exists());
    assert!(dir.path().join("images").join(format!("{}.png", splits.train[0].id)).exists());

    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.train.len(), splits.train.len());
    assert_eq!(loaded.val.len(), splits.val.len());
    assert_eq!(loaded.test.len(), splits.test.len());
    for (a, b) in loaded.train.iter().zip(&splits.train) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask, "{}", a.id);
        for (x, y) in a.image.iter().zip(&b.image) {
            assert!((x - y).abs() <= 1.0 / 510.0);
        }
    }
}

#[test]
fn batch_tensors_shapes_and_errors() {
    let samples = toy_dataset(3);
    let refs: Vec<&ImageSample> = samples.iter().collect();
    let (images, masks) = batch_tensors(&refs).unwrap();
    assert_eq!(images.shape(), [3, 3, 32, 32]);
    assert_eq!(masks.shape(), [3, 1, 32, 32]);
    assert!(masks.data().iter().all(|v| *v == 0.0 || *v == 1.0));

    assert!(batch_tensors(&[]).is_err());
    let other = gen_synthetic(1, (64, 64), 1).unwrap();
    assert!(batch_tensors(&[&samples[0], &other[0]]).is_err());
}
