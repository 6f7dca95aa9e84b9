//! Image/mask pairs: loading, splitting, cropping and augmentation.
//!
//! Layout on disk is `<root>/images/<stem>.{png,tif,tiff}` paired by exact stem with
//! `<root>/ground_truths/<stem>.png`. Intensities are normalized to `[0, 1]`; any nonzero
//! mask pixel is foreground.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::canonical_hash;

/// Three-channel planar image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Channel-major: `data[c * height * width + r * width + col]`.
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Per-pixel mean over channels.
    pub fn gray(&self) -> Vec<f32> {
        let p = self.plane();
        (0..p)
            .map(|i| (self.data[i] + self.data[p + i] + self.data[2 * p + i]) / 3.0)
            .collect()
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb16();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Self::zeros(h, w);
        let p = h * w;
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out.data[c * p + i] = px.0[c] as f32 / 65535.0;
            }
        }
        out
    }

    /// 16-bit RGB buffer, quantizing each value to the nearest level.
    pub fn to_rgb16(&self) -> ImageBuffer<Rgb<u16>, Vec<u16>> {
        let p = self.plane();
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            Rgb([0, 1, 2].map(|c| (self.data[c * p + i].clamp(0.0, 1.0) * 65535.0).round() as u16))
        })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb16()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = (*v * factor).clamp(0.0, 1.0);
        }
        out
    }
}

/// Binary mask, `1` = cell pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.width + c] = v;
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn transpose(&self) -> Mask {
        let mut t = Mask::zeros(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: Image,
    pub mask: Mask,
    pub source_path: String,
    pub animal_id: Option<String>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }
}

const IMAGE_EXTS: [&str; 3] = ["png", "tif", "tiff"];

fn list_by_stem(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let Some(ext) = ext else { continue };
        if !exts.contains(&ext.as_str()) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb
        .pixels()
        .map(|p| u8::from(p.0.iter().any(|v| *v > 0)))
        .collect();
    Ok(Mask {
        height: h,
        width: w,
        data,
    })
}

/// Loads every image/mask pair under `root`, ordered by image id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images = list_by_stem(&root.join("images"), &IMAGE_EXTS)?;
    let masks = list_by_stem(&root.join("ground_truths"), &["png"])?;
    if images.is_empty() {
        log::warn!("no images found under {}", root.display());
        return Ok(Vec::new());
    }
    for stem in masks.keys().filter(|s| !images.contains_key(*s)) {
        log::warn!("mask `{stem}` has no matching image; ignored");
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let mask_path = masks.get(stem).ok_or_else(|| {
            Error::Dataset(format!(
                "image {} has no ground-truth mask (expected ground_truths/{stem}.png)",
                img_path.display()
            ))
        })?;
        let dynimg = image::open(img_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", img_path.display())))?;
        let image = Image::from_dynamic(&dynimg);
        let mask = load_mask(mask_path)?;
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::Dataset(format!(
                "dimension mismatch: {} is {}x{} but {} is {}x{}",
                img_path.display(),
                image.height,
                image.width,
                mask_path.display(),
                mask.height,
                mask.width
            )));
        }
        samples.push(Sample {
            image_id: stem.clone(),
            image,
            mask,
            source_path: img_path.display().to_string(),
            animal_id: None,
        });
    }
    Ok(samples)
}

/// Writes one sample in the standard layout (16-bit RGB image, 8-bit 0/255 mask).
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    let img_dir = root.join("images");
    let gt_dir = root.join("ground_truths");
    for d in [&img_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let img_path = img_dir.join(format!("{}.png", sample.image_id));
    sample
        .image
        .to_rgb16()
        .save(&img_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", img_path.display())))?;
    let m = &sample.mask;
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(m.width as u32, m.height as u32, |x, y| {
            Luma([m.get(y as usize, x as usize) * 255])
        });
    let mask_path = gt_dir.join(format!("{}.png", sample.image_id));
    buf.save(&mask_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub split_hash: String,
}

impl SplitSpec {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::fsutil::read_json(path)
    }
}

pub fn split_hash(train_ids: &[String], val_ids: &[String]) -> String {
    let mut t = train_ids.to_vec();
    let mut v = val_ids.to_vec();
    t.sort();
    v.sort();
    canonical_hash(&serde_json::json!({ "train": t, "val": v }))
}

/// Number of training items: `floor(fraction × n)`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    // Nudge so products like 0.29 × 100 do not floor to 28.
    ((fraction * n as f64) + 1e-9).floor() as usize
}

pub fn make_split_ids(ids: &[String], fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if ids.len() < 2 {
        return Err(Error::Config(format!(
            "splitting needs at least 2 samples, got {}",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = train_count(order.len(), fraction);
    let val_ids = order.split_off(n_train);
    let train_ids = order;
    let split_hash = split_hash(&train_ids, &val_ids);
    Ok(SplitSpec {
        fraction,
        seed,
        train_ids,
        val_ids,
        split_hash,
    })
}

pub fn make_split(samples: &[Sample], fraction: f64, seed: u64) -> Result<SplitSpec> {
    let ids: Vec<String> = samples.iter().map(|s| s.image_id.clone()).collect();
    make_split_ids(&ids, fraction, seed)
}

/// Copies the window `[top, top + h) × [left, left + w)` out of image and mask.
pub fn crop(sample: &Sample, top: usize, left: usize, h: usize, w: usize) -> Result<Sample> {
    if top + h > sample.height() || left + w > sample.width() || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "crop {h}x{w} at ({top},{left}) exceeds image {}x{}",
            sample.height(),
            sample.width()
        )));
    }
    let mut image = Image::zeros(h, w);
    for c in 0..Image::CHANNELS {
        let src = sample.image.channel(c);
        let dst = image.channel_mut(c);
        for r in 0..h {
            let s = (top + r) * sample.width() + left;
            dst[r * w..(r + 1) * w].copy_from_slice(&src[s..s + w]);
        }
    }
    let mut mask = Mask::zeros(h, w);
    for r in 0..h {
        let s = (top + r) * sample.width() + left;
        mask.data[r * w..(r + 1) * w].copy_from_slice(&sample.mask.data[s..s + w]);
    }
    Ok(Sample {
        image_id: sample.image_id.clone(),
        image,
        mask,
        source_path: sample.source_path.clone(),
        animal_id: sample.animal_id.clone(),
    })
}

/// Crops a window of `size = (h, w)` at a uniformly drawn origin; returns the origin too.
pub fn random_crop<R: Rng>(
    sample: &Sample,
    size: (usize, usize),
    rng: &mut R,
) -> Result<(Sample, (usize, usize))> {
    let (h, w) = size;
    if h > sample.height() || w > sample.width() {
        return Err(Error::Shape(format!(
            "crop {h}x{w} larger than image {}x{}",
            sample.height(),
            sample.width()
        )));
    }
    let top = rng.random_range(0..=sample.height() - h);
    let left = rng.random_range(0..=sample.width() - w);
    Ok((crop(sample, top, left, h, w)?, (top, left)))
}

/// Deterministic centered window, used for validation crops.
pub fn center_crop(sample: &Sample, size: (usize, usize)) -> Result<Sample> {
    let (h, w) = size;
    if h > sample.height() || w > sample.width() {
        return Err(Error::Shape(format!(
            "crop {h}x{w} larger than image {}x{}",
            sample.height(),
            sample.width()
        )));
    }
    crop(sample, (sample.height() - h) / 2, (sample.width() - w) / 2, h, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_size: [usize; 2],
    pub max_rotation_deg: f64,
    pub zoom_range: [f64; 2],
    /// Multiplicative brightness bound: factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Contrast bound: factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    /// Elastic/warp deformation. Always rejected; present so configs say so explicitly.
    pub enable_warp: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: [512, 512],
            max_rotation_deg: 30.0,
            zoom_range: [1.0, 1.3],
            brightness: 0.2,
            contrast: 0.1,
            enable_warp: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enable_warp {
            return Err(Error::Config(
                "image warping is not supported: it distorts cell morphology".into(),
            ));
        }
        if self.crop_size[0] == 0 || self.crop_size[1] == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(Error::Config("max_rotation_deg must lie in [0, 180]".into()));
        }
        if !(self.zoom_range[0] > 0.0 && self.zoom_range[0] <= self.zoom_range[1]) {
            return Err(Error::Config("zoom_range must be a positive interval".into()));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config("lighting bounds must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn sample_params<R: Rng>(&self, rng: &mut R) -> AugmentParams {
        let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        AugmentParams {
            rotation_deg: draw(-self.max_rotation_deg, self.max_rotation_deg),
            zoom: draw(self.zoom_range[0], self.zoom_range[1]),
            brightness: draw(1.0 - self.brightness, 1.0 + self.brightness),
            contrast: draw(1.0 - self.contrast, 1.0 + self.contrast),
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Counter-clockwise as displayed.
    pub rotation_deg: f64,
    pub zoom: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        zoom: 1.0,
        brightness: 1.0,
        contrast: 1.0,
    };
}

fn snap(v: f64) -> f64 {
    for t in [-1.0, 0.0, 1.0] {
        if (v - t).abs() < 1e-12 {
            return t;
        }
    }
    v
}

/// Rotation about the image center followed by zoom; bilinear for the image, nearest for the
/// mask, zero outside the source.
pub fn apply_geometric(sample: &Sample, rotation_deg: f64, zoom: f64) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let theta = rotation_deg.to_radians();
    let (sin, cos) = (snap(theta.sin()), snap(theta.cos()));
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut image = Image::zeros(h, w);
    let mut mask = Mask::zeros(h, w);
    let p = h * w;
    for r in 0..h {
        for c in 0..w {
            let dx = c as f64 - cx;
            let dyu = cy - r as f64;
            let sx = (dx * cos + dyu * sin) / zoom;
            let syu = (-dx * sin + dyu * cos) / zoom;
            let src_r = cy - syu;
            let src_c = cx + sx;
            let o = r * w + c;

            let nr = (src_r + 0.5).floor();
            let nc = (src_c + 0.5).floor();
            if nr >= 0.0 && nc >= 0.0 && (nr as usize) < h && (nc as usize) < w {
                mask.data[o] = sample.mask.get(nr as usize, nc as usize);
            }

            let r0 = src_r.floor();
            let c0 = src_c.floor();
            let fr = src_r - r0;
            let fc = src_c - c0;
            let taps = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c0 + 1.0, (1.0 - fr) * fc),
                (r0 + 1.0, c0, fr * (1.0 - fc)),
                (r0 + 1.0, c0 + 1.0, fr * fc),
            ];
            for ch in 0..Image::CHANNELS {
                let src = sample.image.channel(ch);
                let mut acc = 0.0f64;
                for &(tr, tc, wgt) in &taps {
                    if wgt == 0.0 || tr < 0.0 || tc < 0.0 || tr as usize >= h || tc as usize >= w {
                        continue;
                    }
                    acc += wgt * src[tr as usize * w + tc as usize] as f64;
                }
                image.data[ch * p + o] = acc as f32;
            }
        }
    }
    Sample {
        image,
        mask,
        ..sample.clone()
    }
}

/// Brightness/contrast on the image only, clipped to `[0, 1]`.
pub fn apply_photometric(image: &Image, brightness: f64, contrast: f64) -> Image {
    let mut out = image.clone();
    let (b, k) = (brightness as f32, contrast as f32);
    for ch in 0..Image::CHANNELS {
        let plane = out.channel_mut(ch);
        let mean = (plane.iter().map(|v| *v as f64).sum::<f64>() / plane.len().max(1) as f64) as f32;
        for v in plane.iter_mut() {
            *v = ((k * *v + (1.0 - k) * mean) * b).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn apply_augment(sample: &Sample, params: &AugmentParams) -> Sample {
    let geo = if params.rotation_deg == 0.0 && params.zoom == 1.0 {
        sample.clone()
    } else {
        apply_geometric(sample, params.rotation_deg, params.zoom)
    };
    Sample {
        image: apply_photometric(&geo.image, params.brightness, params.contrast),
        ..geo
    }
}

/// Draws augmentation parameters from `cfg` and applies them.
pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let params = cfg.sample_params(rng);
    Ok(apply_augment(sample, &params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(h: usize, w: usize) -> Sample {
        let mut image = Image::zeros(h, w);
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 255) as f32 / 255.0;
        }
        let mut mask = Mask::zeros(h, w);
        for i in 0..h * w {
            mask.data[i] = u8::from(i % 3 == 0);
        }
        Sample {
            image_id: "fx".into(),
            image,
            mask,
            source_path: String::new(),
            animal_id: None,
        }
    }

    #[test]
    fn split_counts_follow_floor() {
        let ids: Vec<String> = (0..283).map(|i| format!("img{i:03}")).collect();
        let s = make_split_ids(&ids, 0.75, 1).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len()), (212, 71));
        let four: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        for seed in 0..20 {
            let s = make_split_ids(&four, 0.75, seed).unwrap();
            assert_eq!((s.train_ids.len(), s.val_ids.len()), (3, 1));
        }
    }

    #[test]
    fn split_is_deterministic_and_validated() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let a = make_split_ids(&ids, 0.75, 5).unwrap();
        let b = make_split_ids(&ids, 0.75, 5).unwrap();
        assert_eq!(a.split_hash, b.split_hash);
        assert_eq!(a, b);
        for bad in [0.0, 1.0, -0.5, 1.5] {
            assert!(matches!(make_split_ids(&ids, bad, 0), Err(Error::Config(_))));
        }
        assert!(make_split_ids(&ids[..1], 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let s = make_split_ids(&ids, frac, seed).unwrap();
            prop_assert_eq!(s.train_ids.len(), train_count(n, frac));
            let mut all: Vec<String> = s.train_ids.iter().chain(&s.val_ids).cloned().collect();
            all.sort();
            let mut expect = ids.clone();
            expect.sort();
            prop_assert_eq!(all, expect);
        }
    }

    #[test]
    fn crop_shapes_and_identity() {
        let s = fixture(120, 160);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, (top, left)) = random_crop(&s, (64, 64), &mut rng).unwrap();
        assert_eq!((c.height(), c.width()), (64, 64));
        assert_eq!(c.mask.get(5, 7), s.mask.get(top + 5, left + 7));
        assert_eq!(c.image.channel(1)[3 * 64 + 9], s.image.channel(1)[(top + 3) * 160 + left + 9]);
        let (full, origin) = random_crop(&s, (120, 160), &mut rng).unwrap();
        assert_eq!(origin, (0, 0));
        assert_eq!(full, s);
        assert!(random_crop(&s, (121, 10), &mut rng).is_err());
    }

    #[test]
    fn crop_origin_is_reproducible_under_seed() {
        let s = fixture(1200, 1600);
        let o1 = random_crop(&s, (512, 512), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().1;
        let o2 = random_crop(&s, (512, 512), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().1;
        assert_eq!(o1, o2);
        assert!(o1.0 <= 1200 - 512 && o1.1 <= 1600 - 512);
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let s = fixture(9, 11);
        assert_eq!(apply_augment(&s, &AugmentParams::IDENTITY), s);
        assert_eq!(apply_geometric(&s, 0.0, 1.0), s);
    }

    #[test]
    fn quarter_turn_permutes_two_by_two() {
        let mut s = fixture(2, 2);
        // [[a, b], [c, d]]
        s.image.data[..4].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        s.mask.data = vec![1, 0, 0, 0];
        let r = apply_geometric(&s, 90.0, 1.0);
        // Counter-clockwise: [[b, d], [a, c]].
        assert_eq!(&r.image.data[..4], &[0.2, 0.4, 0.1, 0.3]);
        assert_eq!(r.mask.data, vec![0, 0, 1, 0]);
    }

    #[test]
    fn warp_is_rejected() {
        let cfg = AugmentConfig {
            enable_warp: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let s = fixture(8, 8);
        assert!(augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn augmented_masks_stay_binary_and_images_in_range() {
        let s = fixture(40, 40);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = augment(&s, &cfg, &mut rng).unwrap();
            assert!(a.mask.data.iter().all(|v| *v <= 1));
            assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rotation_of_centered_blob_preserves_area() {
        let (h, w) = (101, 101);
        let mut s = fixture(h, w);
        s.mask = Mask::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = (r as f64 - 50.0, c as f64 - 50.0);
                if (dy / 20.0).powi(2) + (dx / 12.0).powi(2) <= 1.0 {
                    s.mask.set(r, c, 1);
                }
            }
        }
        let before = s.mask.foreground() as f64;
        let cfg = AugmentConfig {
            zoom_range: [1.0, 1.0],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..25 {
            let p = cfg.sample_params(&mut rng);
            let a = apply_geometric(&s, p.rotation_deg, 1.0);
            let after = a.mask.foreground() as f64;
            assert!((after - before).abs() / before <= 0.05, "{before} -> {after}");
        }
    }

    #[test]
    fn rotation_draws_cover_symmetric_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<f64> = (0..2000).map(|_| cfg.sample_params(&mut rng).rotation_deg).collect();
        assert!(draws.iter().all(|d| d.abs() <= 30.0));
        assert!(draws.iter().any(|d| *d < -27.0) && draws.iter().any(|d| *d > 27.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 1.5);
    }

    #[test]
    fn load_reports_orphans_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());

        let mut samples = Vec::new();
        for (i, (h, w)) in [(8, 12), (8, 12), (10, 6)].into_iter().enumerate() {
            let mut s = fixture(h, w);
            s.image_id = format!("p{i}");
            samples.push(s);
        }
        for s in &samples {
            save_sample(dir.path(), s).unwrap();
        }
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].image_id, "p0");

        // Replace one mask with a transposed (flipped-dims) one.
        let mut bad = samples[2].clone();
        bad.mask = bad.mask.transpose();
        bad.image = Image::zeros(6, 10);
        save_sample(dir.path(), &bad).unwrap();
        save_sample(dir.path(), &samples[2]).unwrap();
        let mask_only = dir.path().join("ground_truths/p2.png");
        let t = bad.mask.clone();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_fn(t.width as u32, t.height as u32, |x, y| {
                Luma([t.get(y as usize, x as usize) * 255])
            });
        buf.save(&mask_only).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("p2.png") && err.contains("ground_truths"), "{err}");

        fs::remove_file(&mask_only).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("p2"), "{err}");
    }

    #[test]
    fn load_save_load_is_bit_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut s = fixture(16, 20);
        s.image_id = "x".into();
        save_sample(a.path(), &s).unwrap();
        let first = load_dataset(a.path()).unwrap();
        for s in &first {
            save_sample(b.path(), s).unwrap();
        }
        let second = load_dataset(b.path()).unwrap();
        assert_eq!(first.len(), second.len());
        for (x, y) in first.iter().zip(&second) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }
}
