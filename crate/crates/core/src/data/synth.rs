use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{sha256_hex, standardize, Dataset, Split};
use crate::{Error, Result, Tensor};

/// Parameters of the synthetic Gaussian-blob image generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobConfig {
    pub n: usize,
    pub classes: usize,
    /// Square image side; images have three channels.
    pub size: usize,
    /// Standard deviation of the per-pixel noise added to each template.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            n: 512,
            classes: 2,
            size: 8,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Class-conditional images: every class owns a Gaussian intensity bump at a
/// seeded position with seeded per-channel gains; samples are the template
/// plus white noise. Labels cycle through the classes; the result is
/// standardised per channel.
pub fn synth_blobs(cfg: &BlobConfig) -> Result<Dataset<f32>> {
    if cfg.classes == 0 || cfg.n < cfg.classes || cfg.size == 0 {
        return Err(Error::config(format!(
            "synthetic blobs need n ≥ classes ≥ 1 and size ≥ 1 (n={}, classes={}, size={})",
            cfg.n, cfg.classes, cfg.size
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::config(format!("blob noise {} must be non-negative", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.size;
    let plane = s * s;
    let width = (s as f64 / 4.0).max(0.5);
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let cy = rng.random_range(0.0..s as f64);
            let cx = rng.random_range(0.0..s as f64);
            let gains: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut t = vec![0.0; 3 * plane];
            for (ch, g) in gains.iter().enumerate() {
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        t[ch * plane + y * s + x] = g * (-d2 / (2.0 * width * width)).exp();
                    }
                }
            }
            t
        })
        .collect();
    let mut data = Vec::with_capacity(cfg.n * 3 * plane);
    let labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.classes).collect();
    for &label in &labels {
        for &v in &templates[label] {
            let z: f64 = rng.sample(StandardNormal);
            data.push((v + cfg.noise * z) as f32);
        }
    }
    let images = Tensor::new(vec![cfg.n, 3, s, s], data)?;
    let tag = format!(
        "synth n={} classes={} size={} noise={} seed={}",
        cfg.n, cfg.classes, cfg.size, cfg.noise, cfg.seed
    );
    let mut ds = Dataset::new(images, labels, cfg.classes, Split::Train, sha256_hex(tag.as_bytes()))?;
    standardize(&mut ds, &mut [])?;
    Ok(ds)
}
