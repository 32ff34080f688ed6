//! PNG image/mask I/O, dataset splitting, and a synthetic soft-ellipse
//! dataset generator with global illumination tints.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image/mask pair. The image is planar (3,H,W) in [0,1]; the mask is
/// (H,W) with values in {0,1}.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.len() != 3 * self.h * self.w || self.mask.len() != self.h * self.w {
            return Err(Error::Dataset(format!(
                "sample '{}': buffer lengths do not match extent {}x{}",
                self.id, self.h, self.w
            )));
        }
        if self.mask.iter().any(|m| *m > 1) {
            return Err(Error::Dataset(format!("sample '{}': non-binary mask", self.id)));
        }
        Ok(())
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().map(|m| *m as u64).sum::<u64>() as f64 / self.mask.len() as f64
    }
}

/// Stack samples into (N,3,H,W) image and (N,1,H,W) mask tensors.
pub fn batch_tensors(samples: &[&ImageSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (h, w) = (first.h, first.w);
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.h, s.w) != (h, w) {
            return Err(Error::Dataset(format!(
                "sample '{}' extent {}x{} differs from batch extent {h}x{w}",
                s.id, s.h, s.w
            )));
        }
        images.extend_from_slice(&s.image);
        masks.extend(s.mask.iter().map(|m| *m as f32));
    }
    Ok((
        Tensor::from_vec([samples.len(), 3, h, w], images)?,
        Tensor::from_vec([samples.len(), 1, h, w], masks)?,
    ))
}

pub fn load_sample(image_path: &Path, mask_path: &Path, id: &str) -> Result<ImageSample> {
    let image = image::open(image_path)?.to_rgb8();
    let mask = image::open(mask_path)?.to_luma8();
    if image.dimensions() != mask.dimensions() {
        return Err(Error::Dataset(format!(
            "sample '{id}': image {:?} and mask {:?} extents differ",
            image.dimensions(),
            mask.dimensions()
        )));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut planes = vec![0.0f32; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        let at = y as usize * w + x as usize;
        for c in 0..3 {
            planes[c * h * w + at] = px.0[c] as f32 / 255.0;
        }
    }
    let mask = mask.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    Ok(ImageSample {
        id: id.to_string(),
        h,
        w,
        image: planes,
        mask,
    })
}

/// Round-half-up quantization to 8 bits.
pub fn save_image_png(path: &Path, image: &[f32], h: usize, w: usize) -> Result<()> {
    let plane = h * w;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let at = y as usize * w + x as usize;
        for c in 0..3 {
            px.0[c] = (image[c * plane + at].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn save_mask_png(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let mut out = GrayImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        px.0[0] = if mask[y as usize * w + x as usize] != 0 { 255 } else { 0 };
    }
    out.save(path)?;
    Ok(())
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos_t: f64,
    sin_t: f64,
    color: [f32; 3],
}

impl Ellipse {
    /// Normalized elliptical distance: 1.0 on the boundary.
    fn distance(&self, x: f64, y: f64) -> f64 {
        let u = x - self.cx;
        let v = y - self.cy;
        let a = (u * self.cos_t + v * self.sin_t) / self.rx;
        let b = (-u * self.sin_t + v * self.cos_t) / self.ry;
        (a * a + b * b).sqrt()
    }
}

const EDGE_SOFTNESS: f64 = 0.12;

fn ellipse_alpha(d: f64) -> f32 {
    ((1.0 + EDGE_SOFTNESS - d) / (2.0 * EDGE_SOFTNESS)).clamp(0.0, 1.0) as f32
}

fn draw_ellipses(rng: &mut ChaCha8Rng, h: usize, w: usize, base: [f32; 3]) -> Vec<Ellipse> {
    let count = rng.gen_range(1..=3usize);
    let min_dim = h.min(w) as f64;
    (0..count)
        .map(|_| {
            let color = loop {
                let c = [rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                let dist: f32 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
                if dist >= 0.5 {
                    break c;
                }
            };
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: rng.gen_range(0.2..0.8) * w as f64,
                cy: rng.gen_range(0.2..0.8) * h as f64,
                rx: rng.gen_range(0.08..0.28) * min_dim,
                ry: rng.gen_range(0.08..0.28) * min_dim,
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                color,
            }
        })
        .collect()
}

/// One synthetic sample: tinted textured background, 1-3 soft-edged ellipses
/// as foreground, mask = analytic ellipse coverage thresholded at 0.5.
/// Foreground fraction is kept in [2%, 40%] by resampling the ellipse set.
fn gen_sample(index: usize, h: usize, w: usize, seed: u64) -> Result<ImageSample> {
    let derived = seed.wrapping_add((index as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(derived);
    let plane = h * w;

    let base = [
        rng.gen_range(0.25..0.65f32),
        rng.gen_range(0.25..0.65),
        rng.gen_range(0.25..0.65),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(1.0..4.0),
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let chan_weight = [
        rng.gen_range(0.5..1.0f64),
        rng.gen_range(0.5..1.0),
        rng.gen_range(0.5..1.0),
    ];

    let mut ellipses;
    let mut mask;
    let mut attempts = 0;
    loop {
        ellipses = draw_ellipses(&mut rng, h, w, base);
        mask = vec![0u8; plane];
        let mut fg = 0usize;
        for y in 0..h {
            for x in 0..w {
                let inside = ellipses
                    .iter()
                    .any(|e| e.distance(x as f64 + 0.5, y as f64 + 0.5) <= 1.0);
                if inside {
                    mask[y * w + x] = 1;
                    fg += 1;
                }
            }
        }
        let frac = fg as f64 / plane as f64;
        if (0.02..=0.40).contains(&frac) {
            break;
        }
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Dataset(
                "could not satisfy foreground-fraction bounds".into(),
            ));
        }
    }

    let contrast = rng.gen_range(0.6..1.0f32);
    let tint = [
        rng.gen_range(0.55..1.0f32),
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
    ];

    let mut image = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let at = y * w + x;
            let mut texture = 0.0f64;
            for (fx, fy, phase, amp) in &waves {
                texture += amp
                    * (std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                        + phase)
                        .sin();
            }
            for c in 0..3 {
                let mut v = base[c] + (texture * chan_weight[c]) as f32;
                for e in &ellipses {
                    let alpha = ellipse_alpha(e.distance(x as f64 + 0.5, y as f64 + 0.5));
                    v = v * (1.0 - alpha) + e.color[c] * alpha;
                }
                v = (v - 0.5) * contrast + 0.5;
                image[c * plane + at] = (v * tint[c]).clamp(0.0, 1.0);
            }
        }
    }

    Ok(ImageSample {
        id: format!("sample_{index:05}"),
        h,
        w,
        image,
        mask,
    })
}

pub fn gen_synthetic(n: usize, extent: (usize, usize), seed: u64) -> Result<Vec<ImageSample>> {
    let (h, w) = extent;
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Dataset(format!(
            "extent {h}x{w} must be divisible by 16"
        )));
    }
    (0..n).map(|i| gen_sample(i, h, w, seed)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be nonnegative and sum to 1".into()));
        }
        Ok(())
    }
}

pub struct SplitDataset {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Seeded shuffle, then a contiguous partition of sizes
/// floor(f_train * n) / floor(f_val * n) / remainder.
pub fn split_dataset(dataset: Vec<ImageSample>, spec: &SplitSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let n = dataset.len();
    if n < 10 {
        return Err(Error::Dataset(format!(
            "need at least 10 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let n_train = (spec.fractions.0 * n as f64).floor() as usize;
    let n_val = (spec.fractions.1 * n as f64).floor() as usize;
    let mut samples: Vec<Option<ImageSample>> = dataset.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<ImageSample> {
        idx.iter().map(|i| samples[*i].take().expect("index used once")).collect()
    };
    Ok(SplitDataset {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

/// Directory layout: images/<id>.png, masks/<id>.png, manifest.tsv with one
/// "id<TAB>split" line per sample.
pub fn save_dataset(dir: &Path, splits: &SplitDataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for (name, samples) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        for s in samples {
            s.validate()?;
            save_image_png(&dir.join("images").join(format!("{}.png", s.id)), &s.image, s.h, s.w)?;
            save_mask_png(&dir.join("masks").join(format!("{}.png", s.id)), &s.mask, s.h, s.w)?;
            manifest.push_str(&format!("{}\t{name}\n", s.id));
        }
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SplitDataset> {
    let manifest = fs::read_to_string(dir.join("manifest.tsv"))
        .map_err(|e| Error::Dataset(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let mut splits = SplitDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (line_no, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, split) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("manifest line {}: expected 'id<TAB>split'", line_no + 1))
        })?;
        let sample = load_sample(
            &dir.join("images").join(format!("{id}.png")),
            &dir.join("masks").join(format!("{id}.png")),
            id,
        )?;
        match split {
            "train" => splits.train.push(sample),
            "val" => splits.val.push(sample),
            "test" => splits.test.push(sample),
            other => {
                return Err(Error::Dataset(format!(
                    "manifest line {}: unknown split '{other}'",
                    line_no + 1
                )))
            }
        }
    }
    Ok(splits)
}
