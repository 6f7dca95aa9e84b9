//! Synthetic fluorescence-like images with exact ground truth.
//!
//! Each "cell" is an elliptical Gaussian blob on a dim noisy background. The mask holds the
//! pixels where a blob's noiseless intensity exceeds half of its peak, i.e. the interior of
//! the ellipse with the sampled semi-axes.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_sample, Image, Mask, Sample};
use crate::error::{Error, Result};

/// Yellow-ish emission: strong red/green, weak blue.
const CHANNEL_GAIN: [f32; 3] = [1.0, 0.85, 0.25];
const MAX_PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// `[height, width]`.
    pub image_size: [usize; 2],
    /// Poisson mean of the number of cells per image.
    pub mean_count: f64,
    pub radius_range: [f64; 2],
    pub intensity_range: [f64; 2],
    pub background_level: f64,
    pub background_noise_sigma: f64,
    pub non_overlapping: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: [256, 256],
            mean_count: 12.0,
            radius_range: [8.0, 25.0],
            intensity_range: [0.4, 1.0],
            background_level: 0.08,
            background_noise_sigma: 0.03,
            non_overlapping: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.radius_range;
        if !(lo >= 2.0 && hi >= lo) {
            return Err(Error::Config("radius_range must satisfy 2 <= min <= max".into()));
        }
        if !(self.mean_count >= 0.0 && self.mean_count.is_finite()) {
            return Err(Error::Config("mean_count must be a finite non-negative mean".into()));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        let [ilo, ihi] = self.intensity_range;
        if !(0.0..=1.0).contains(&ilo) || !(ilo..=1.0).contains(&ihi) {
            return Err(Error::Config("intensity_range must lie within [0, 1]".into()));
        }
        Ok(())
    }

    /// Minimum center distance in non-overlapping mode. Two max-radius masks at exactly
    /// `2 × max_radius` can still touch diagonally on the pixel grid, hence the margin.
    pub fn min_separation(&self) -> f64 {
        2.0 * self.radius_range[1] + 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// `(row, col)` of the center.
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Blob {
    /// Normalized squared elliptical radius of pixel `(r, c)`; `< 1` inside the half-max contour.
    fn q(&self, r: f64, c: f64) -> f64 {
        let dy = r - self.center.0;
        let dx = c - self.center.1;
        let (s, co) = self.angle.sin_cos();
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub true_count: usize,
    pub true_centroids: Vec<(f64, f64)>,
    pub blobs: Vec<Blob>,
}

fn place_blobs(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let [h, w] = cfg.image_size;
    let wanted = if cfg.mean_count > 0.0 {
        Poisson::new(cfg.mean_count)
            .expect("positive mean")
            .sample(rng) as usize
    } else {
        0
    };
    let sep = cfg.min_separation();
    let mut blobs: Vec<Blob> = Vec::with_capacity(wanted);
    'outer: for _ in 0..wanted {
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let center = (
                rng.random_range(0.0..(h as f64 - 1.0).max(f64::MIN_POSITIVE)),
                rng.random_range(0.0..(w as f64 - 1.0).max(f64::MIN_POSITIVE)),
            );
            let semi_major = if cfg.radius_range[1] > cfg.radius_range[0] {
                rng.random_range(cfg.radius_range[0]..=cfg.radius_range[1])
            } else {
                cfg.radius_range[0]
            };
            let aspect = rng.random_range(0.7..=1.0);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let intensity = rng.random_range(cfg.intensity_range[0]..=cfg.intensity_range[1]);
            // Draw all attributes before the rejection test so the stream stays aligned.
            let clear = !cfg.non_overlapping
                || blobs.iter().all(|b| {
                    let d = ((b.center.0 - center.0).powi(2) + (b.center.1 - center.1).powi(2)).sqrt();
                    d >= sep
                });
            if clear {
                blobs.push(Blob {
                    center,
                    semi_major,
                    semi_minor: semi_major * aspect,
                    angle,
                    intensity,
                });
                continue 'outer;
            }
        }
        log::debug!("could not place another non-overlapping blob; stopping at {}", blobs.len());
        break;
    }
    blobs
}

fn render(cfg: &SynthConfig, blobs: &[Blob], rng: &mut ChaCha8Rng, image_id: String) -> Sample {
    let [h, w] = cfg.image_size;
    let mut signal = vec![0.0f64; h * w];
    let mut mask = Mask::zeros(h, w);
    for b in blobs {
        let reach = 3.0 * b.semi_major;
        let r0 = (b.center.0 - reach).floor().max(0.0) as usize;
        let r1 = ((b.center.0 + reach).ceil() as usize).min(h - 1);
        let c0 = (b.center.1 - reach).floor().max(0.0) as usize;
        let c1 = ((b.center.1 + reach).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let q = b.q(r as f64, c as f64);
                signal[r * w + c] += b.intensity * (-std::f64::consts::LN_2 * q).exp();
                if q < 1.0 {
                    mask.set(r, c, 1);
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.background_noise_sigma.max(0.0)).expect("finite sigma");
    let mut image = Image::zeros(h, w);
    for (ch, gain) in CHANNEL_GAIN.iter().enumerate() {
        let plane = image.channel_mut(ch);
        for (i, v) in plane.iter_mut().enumerate() {
            let n: f64 = noise.sample(rng);
            let x = cfg.background_level + signal[i] * *gain as f64 + n;
            *v = x.clamp(0.0, 1.0) as f32;
        }
    }
    Sample {
        image_id,
        image,
        mask,
        source_path: "synthetic".into(),
        animal_id: None,
    }
}

/// Generates `n` samples. Output is a pure function of `(cfg, n)`.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        let blobs = place_blobs(cfg, &mut rng);
        let sample = render(cfg, &blobs, &mut rng, format!("synth_{i:05}"));
        out.push(SynthSample {
            sample,
            true_count: blobs.len(),
            true_centroids: blobs.iter().map(|b| b.center).collect(),
            blobs,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthEntry {
    pub image_id: String,
    pub count: usize,
    pub centroids: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub config: SynthConfig,
    pub images: Vec<TruthEntry>,
}

/// Writes the standard dataset layout plus `truth.json`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, samples: &[SynthSample]) -> Result<()> {
    for s in samples {
        save_sample(dir, &s.sample)?;
    }
    let truth = TruthFile {
        config: cfg.clone(),
        images: samples
            .iter()
            .map(|s| TruthEntry {
                image_id: s.sample.image_id.clone(),
                count: s.true_count,
                centroids: s.true_centroids.clone(),
            })
            .collect(),
    };
    crate::fsutil::write_json(&dir.join("truth.json"), &truth)
}
