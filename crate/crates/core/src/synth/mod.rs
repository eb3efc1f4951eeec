//! Synthetic multi-region ordinal dataset.
//!
//! A single latent maturity `t ~ U(0,1)` drives every region's label, with
//! independent Gaussian jitter per region. Each region is drawn as its own
//! glyph whose radius and brightness grow with the label.

mod augment;
mod io;

pub use augment::{augment, augment_region, hflip, rotate, shift, AugmentConfig, RegionTransform};
pub use io::{read_dataset, write_dataset, FORMAT_VERSION, SAMPLE_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SatError};
use crate::tensor::Tensor;

pub const DEFAULT_CLASS_COUNTS: [usize; 5] = [9, 5, 6, 7, 6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub image_size: usize,
    pub class_counts: Vec<usize>,
    pub label_noise_sigma: f64,
    pub pixel_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_samples: 2000,
            image_size: 32,
            class_counts: DEFAULT_CLASS_COUNTS.to_vec(),
            label_noise_sigma: 0.08,
            pixel_noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_counts.is_empty() || self.class_counts.iter().any(|&k| k < 2) {
            return Err(SatError::Config(format!(
                "every region needs at least 2 classes, got {:?}",
                self.class_counts
            )));
        }
        if !(self.label_noise_sigma >= 0.0) || !(self.pixel_noise_sigma >= 0.0) {
            return Err(SatError::Config("noise sigmas must be non-negative".into()));
        }
        if self.image_size < 8 {
            return Err(SatError::Config(format!("image_size {} is too small", self.image_size)));
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.class_counts.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSample {
    /// `[R, 1, H, W]`
    pub images: Tensor<f32>,
    /// 1-indexed ordinal labels, one per region.
    pub labels: Vec<u32>,
    pub latent_t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_counts: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
    pub samples: Vec<RegionSample>,
}

impl Dataset {
    pub fn num_regions(&self) -> usize {
        self.class_counts.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Labels as `[sample][region]`.
    pub fn labels(&self) -> Vec<Vec<u32>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    /// Stacks the chosen samples into `[B, R, 1, H, W]`.
    pub fn batch_images(&self, indices: &[usize]) -> Tensor<f32> {
        stack(indices.iter().map(|&i| &self.samples[i].images))
    }
}

pub(crate) fn stack<'a>(images: impl Iterator<Item = &'a Tensor<f32>>) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut inner: Option<Vec<usize>> = None;
    let mut count = 0;
    for img in images {
        inner.get_or_insert_with(|| img.shape().to_vec());
        data.extend_from_slice(img.data());
        count += 1;
    }
    let mut shape = vec![count];
    shape.extend(inner.expect("at least one image"));
    Tensor::new(shape, data).expect("stacked shapes agree")
}

/// Distinct base pattern per region; cycles when there are more than five regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Disc,
    Square,
    Diamond,
    Ring,
    Cross,
}

impl Glyph {
    pub fn for_region(r: usize) -> Glyph {
        [Glyph::Disc, Glyph::Square, Glyph::Diamond, Glyph::Ring, Glyph::Cross][r % 5]
    }

    /// Signed distance-like value: negative inside, positive outside (pixels).
    fn distance(self, dx: f64, dy: f64, radius: f64) -> f64 {
        match self {
            Glyph::Disc => dx.hypot(dy) - radius,
            Glyph::Square => dx.abs().max(dy.abs()) - radius * 0.85,
            Glyph::Diamond => (dx.abs() + dy.abs()) - radius * 1.25,
            Glyph::Ring => {
                let thickness = (radius * 0.3).max(1.0);
                (dx.hypot(dy) - radius).abs() - thickness
            }
            Glyph::Cross => {
                let arm = (radius * 0.3).max(1.0);
                let along = dx.abs().max(dy.abs()) - radius;
                let across = dx.abs().min(dy.abs()) - arm;
                along.max(across)
            }
        }
    }
}

/// Noise-free rendering of one region's glyph at label `y` of `k` classes.
pub fn render_glyph(glyph: Glyph, label: u32, classes: usize, size: usize) -> Vec<f32> {
    let frac = (label as f64 - 1.0) / (classes as f64 - 1.0);
    let radius = size as f64 * (0.10 + 0.15 * frac);
    let intensity = 0.45 + 0.55 * frac;
    let centre = (size as f64 - 1.0) / 2.0;
    let mut out = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let d = glyph.distance(x as f64 - centre, y as f64 - centre, radius);
            let coverage = (0.5 - d).clamp(0.0, 1.0);
            out[y * size + x] = (intensity * coverage) as f32;
        }
    }
    out
}

/// Label of one region from the shared latent plus jitter.
pub fn label_from_latent(t: f64, jitter: f64, classes: usize) -> u32 {
    let raw = (1.0 + (classes as f64 - 1.0) * (t + jitter)).round();
    raw.clamp(1.0, classes as f64) as u32
}

/// Sample `index` of the dataset described by `cfg`; independent of every other index.
pub fn generate_sample(cfg: &SynthConfig, index: u64) -> Result<RegionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let label_noise = Normal::new(0.0, cfg.label_noise_sigma).map_err(|e| SatError::Config(e.to_string()))?;
    let pixel_noise = Normal::new(0.0, cfg.pixel_noise_sigma).map_err(|e| SatError::Config(e.to_string()))?;
    let t: f64 = rng.random();
    let labels: Vec<u32> =
        cfg.class_counts.iter().map(|&k| label_from_latent(t, label_noise.sample(&mut rng), k)).collect();
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(labels.len() * s * s);
    for (r, (&y, &k)) in labels.iter().zip(&cfg.class_counts).enumerate() {
        let mut img = render_glyph(Glyph::for_region(r), y, k, s);
        if cfg.pixel_noise_sigma > 0.0 {
            for px in img.iter_mut() {
                *px += pixel_noise.sample(&mut rng) as f32;
            }
        }
        data.extend(img);
    }
    let images = Tensor::new(vec![labels.len(), 1, s, s], data)?;
    Ok(RegionSample { images, labels, latent_t: t })
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.num_samples as u64).map(|i| generate_sample(cfg, i)).collect::<Result<_>>()?;
    Ok(Dataset { class_counts: cfg.class_counts.clone(), image_size: cfg.image_size, seed: cfg.seed, samples })
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Correlation {
    Pearson,
    Spearman,
}

/// `R × R` inter-region label correlation matrix.
pub fn label_correlations(samples: &[RegionSample], method: Correlation) -> Vec<Vec<f64>> {
    let r = samples.first().map_or(0, |s| s.labels.len());
    let columns: Vec<Vec<f64>> = (0..r).map(|j| samples.iter().map(|s| s.labels[j] as f64).collect()).collect();
    let f = match method {
        Correlation::Pearson => pearson,
        Correlation::Spearman => spearman,
    };
    (0..r).map(|a| (0..r).map(|b| if a == b { 1.0 } else { f(&columns[a], &columns[b]) }).collect()).collect()
}
