//! Preprocessing (shades-of-gray color constancy, normalization, centering)
//! and data augmentation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{ImageSample, SplitDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ColorConstancyConfig {
    /// Minkowski-norm exponent; 1 recovers gray-world.
    pub p: f64,
    /// Whether color constancy runs at all (ablation switch).
    pub enabled: bool,
}

impl Default for ColorConstancyConfig {
    fn default() -> Self {
        ColorConstancyConfig {
            p: 6.0,
            enabled: true,
        }
    }
}

impl ColorConstancyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 1.0 {
            return Err(Error::Config(format!(
                "color constancy exponent {} must be >= 1",
                self.p
            )));
        }
        Ok(())
    }
}

/// Per-channel Minkowski-mean illuminant estimate, equalized to the mean of
/// the three channel estimates: e_c = (mean f_c^p)^(1/p), then each channel
/// is scaled by mean(e)/e_c and clamped back into [0,1].
pub fn shades_of_gray(image: &[f32], config: &ColorConstancyConfig) -> Result<Vec<f32>> {
    config.validate()?;
    if image.is_empty() || image.len() % 3 != 0 {
        return Err(Error::InvalidArg {
            op: "shades_of_gray",
            msg: format!("expected nonempty 3-plane image, got {} values", image.len()),
        });
    }
    let plane = image.len() / 3;
    let mut illum = [0.0f64; 3];
    for c in 0..3 {
        let sum: f64 = image[c * plane..(c + 1) * plane]
            .iter()
            .map(|v| (*v as f64).powf(config.p))
            .sum();
        illum[c] = (sum / plane as f64).powf(1.0 / config.p);
        if illum[c] <= 0.0 {
            return Err(Error::InvalidArg {
                op: "shades_of_gray",
                msg: format!("channel {c} is all zero; illuminant undefined"),
            });
        }
    }
    let target = (illum[0] + illum[1] + illum[2]) / 3.0;
    let mut out = Vec::with_capacity(image.len());
    for c in 0..3 {
        let scale = (target / illum[c]) as f32;
        out.extend(
            image[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| (v * scale).clamp(0.0, 1.0)),
        );
    }
    Ok(out)
}

/// Subtract the image's own per-channel mean; returns the centered image and
/// the offsets needed to invert it for visual output.
pub fn normalize_center(image: &[f32]) -> (Vec<f32>, [f32; 3]) {
    let plane = image.len() / 3;
    let mut offsets = [0.0f32; 3];
    let mut out = Vec::with_capacity(image.len());
    for c in 0..3 {
        let slice = &image[c * plane..(c + 1) * plane];
        let mean = (slice.iter().map(|v| *v as f64).sum::<f64>() / plane.max(1) as f64) as f32;
        offsets[c] = mean;
        out.extend(slice.iter().map(|v| v - mean));
    }
    (out, offsets)
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentPolicy {
    pub rot90s: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness_contrast: bool,
    /// Maximum absolute brightness shift.
    pub brightness: f32,
    /// Maximum absolute contrast change (fractional).
    pub contrast: f32,
    /// Dataset expansion factor for `augment_expand`.
    pub expansion: usize,
    /// Reserved; ignored.
    pub hsv: bool,
    /// Reserved; ignored.
    pub hist_eq: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rot90s: true,
            hflip: true,
            vflip: true,
            brightness_contrast: true,
            brightness: 0.1,
            contrast: 0.1,
            expansion: 6,
            hsv: false,
            hist_eq: false,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.expansion < 1 {
            return Err(Error::Config("augment expansion factor must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config(
                "brightness/contrast ranges must lie in [0,1)".into(),
            ));
        }
        Ok(())
    }
}

fn rot90_plane<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    // 90 degrees counterclockwise: output is w x h, out[y][x] = src[x][w-1-y].
    let mut out = Vec::with_capacity(src.len());
    for y in 0..w {
        for x in 0..h {
            out.push(src[x * w + (w - 1 - y)]);
        }
    }
    out
}

fn hflip_plane<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            out.push(src[y * w + (w - 1 - x)]);
        }
    }
    out
}

fn vflip_plane<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        out.extend_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
    }
    out
}

fn map_planes<T: Copy>(
    data: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: impl Fn(&[T], usize, usize) -> Vec<T>,
) -> Vec<T> {
    let plane = h * w;
    let mut out = Vec::with_capacity(data.len());
    for c in 0..planes {
        out.extend(f(&data[c * plane..(c + 1) * plane], h, w));
    }
    out
}

/// One random draw: 90-degree rotations and flips hit image and mask
/// identically; brightness/contrast touch the image only.
pub fn augment(sample: &ImageSample, policy: &AugmentPolicy, seed: u64) -> Result<ImageSample> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();

    if policy.rot90s {
        let turns = rng.gen_range(0..4usize);
        for _ in 0..turns {
            out.image = map_planes(&out.image, 3, out.h, out.w, rot90_plane);
            out.mask = map_planes(&out.mask, 1, out.h, out.w, rot90_plane);
            std::mem::swap(&mut out.h, &mut out.w);
        }
    }
    if policy.hflip && rng.gen_bool(0.5) {
        out.image = map_planes(&out.image, 3, out.h, out.w, hflip_plane);
        out.mask = map_planes(&out.mask, 1, out.h, out.w, hflip_plane);
    }
    if policy.vflip && rng.gen_bool(0.5) {
        out.image = map_planes(&out.image, 3, out.h, out.w, vflip_plane);
        out.mask = map_planes(&out.mask, 1, out.h, out.w, vflip_plane);
    }
    if policy.brightness_contrast {
        let shift = rng.gen_range(-policy.brightness..=policy.brightness);
        let gain = 1.0 + rng.gen_range(-policy.contrast..=policy.contrast);
        for v in &mut out.image {
            *v = ((*v - 0.5) * gain + 0.5 + shift).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Color constancy on one sample, in place.
pub fn apply_color_constancy(sample: &mut ImageSample, config: &ColorConstancyConfig) -> Result<()> {
    if config.enabled {
        sample.image = shades_of_gray(&sample.image, config)?;
    }
    Ok(())
}

/// The full training-time preprocessing order: color constancy, augmentation
/// (expansion of the train split only), then per-image normalization and
/// centering of every split.
pub fn preprocess_for_training(
    mut splits: SplitDataset,
    cc: &ColorConstancyConfig,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<SplitDataset> {
    for split in [&mut splits.train, &mut splits.val, &mut splits.test] {
        for sample in split.iter_mut() {
            apply_color_constancy(sample, cc)?;
        }
    }
    splits.train = augment_expand(&splits.train, policy, seed)?;
    for split in [&mut splits.train, &mut splits.val, &mut splits.test] {
        for sample in split.iter_mut() {
            sample.image = normalize_center(&sample.image).0;
        }
    }
    Ok(splits)
}

/// Originals once plus (k-1) augmented copies per sample, each with its own
/// derived seed.
pub fn augment_expand(
    dataset: &[ImageSample],
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    policy.validate()?;
    let mut out = Vec::with_capacity(dataset.len() * policy.expansion);
    for (i, sample) in dataset.iter().enumerate() {
        out.push(sample.clone());
        for copy in 1..policy.expansion {
            let derived = seed
                .wrapping_add((i as u64).wrapping_mul(0x9E3779B97F4A7C15))
                .wrapping_add(copy as u64);
            let mut augmented = augment(sample, policy, derived)?;
            augmented.id = format!("{}_aug{copy}", sample.id);
            out.push(augmented);
        }
    }
    Ok(out)
}
