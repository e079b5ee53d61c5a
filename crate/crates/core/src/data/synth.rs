//! Deterministic synthetic patches for desk-scale experiments.
//!
//! Each class has a fixed spectral signature. A patch is a background class
//! overlaid with random rectangles of other classes; pixel values are the
//! class signature plus Gaussian noise. A random subset of labels is then
//! replaced by the ignore value to mimic sparse annotation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::format::{write_image, write_mask, Mask};
use super::manifest::{Manifest, PatchEntry, PatchSample, Split};
use super::stats::compute_band_stats;
use super::{default_class_names, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patches: usize,
    pub size: usize,
    pub classes: usize,
    pub bands: usize,
    pub noise_sigma: f64,
    /// Probability that a pixel's label is replaced by the ignore value.
    pub ignore_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_patches: 8,
            size: 32,
            classes: 4,
            bands: 4,
            noise_sigma: 0.0,
            ignore_fraction: 0.7,
            val_fraction: 0.0,
            test_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ignore_fraction) {
            return Err(Error::Config(format!(
                "ignore_fraction must be in [0, 1), got {} (no trainable pixels otherwise)",
                self.ignore_fraction
            )));
        }
        if self.n_patches == 0 || self.size == 0 || self.bands == 0 {
            return Err(Error::Config("n_patches, size and bands must be positive".into()));
        }
        if self.classes == 0 || self.classes > u8::MAX as usize {
            return Err(Error::Config(format!("classes must be in 1..=255, got {}", self.classes)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        let held_out = self.val_fraction + self.test_fraction;
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || held_out >= 1.0 {
            return Err(Error::Config("val_fraction + test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Split of the `i`-th generated patch: train first, then val, then test.
    pub fn split_of(&self, i: usize) -> Split {
        let n = self.n_patches as f64;
        let n_test = (self.test_fraction * n).round() as usize;
        let n_val = (self.val_fraction * n).round() as usize;
        let n_train = self.n_patches.saturating_sub(n_val + n_test).max(1);
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Spectral signature of every class, `signatures[c − 1][band]`.
pub fn class_signatures(cfg: &SynthConfig) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_4e41_5455_5245);
    (0..cfg.classes)
        .map(|_| (0..cfg.bands).map(|_| rng.gen_range(0.05f32..0.95)).collect())
        .collect()
}

/// Generates the patches in memory.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<PatchSample>> {
    cfg.validate()?;
    let signatures = class_signatures(cfg);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (size, k) = (cfg.size, cfg.classes);
    (0..cfg.n_patches)
        .map(|i| {
            let mut labels = vec![rng.gen_range(1..=k) as u8; size * size];
            let rects = 1 + k;
            for _ in 0..rects {
                let class = rng.gen_range(1..=k) as u8;
                let max_side = (size / 2).max(1);
                let min_side = (size / 8).max(1);
                let rh = rng.gen_range(min_side..=max_side);
                let rw = rng.gen_range(min_side..=max_side);
                let y0 = rng.gen_range(0..=size - rh);
                let x0 = rng.gen_range(0..=size - rw);
                for y in y0..y0 + rh {
                    labels[y * size + x0..y * size + x0 + rw].fill(class);
                }
            }
            let plane = size * size;
            let mut image = vec![0.0f32; cfg.bands * plane];
            for (px, &c) in labels.iter().enumerate() {
                for b in 0..cfg.bands {
                    let n: f64 = noise.sample(&mut rng);
                    image[b * plane + px] = signatures[c as usize - 1][b] + n as f32;
                }
            }
            for l in labels.iter_mut() {
                if rng.gen::<f64>() < cfg.ignore_fraction {
                    *l = 0;
                }
            }
            PatchSample::new(
                format!("patch_{i:04}"),
                Tensor::new(vec![cfg.bands, size, size], image)?,
                Mask::new(size, size, labels)?,
                k,
            )
        })
        .collect()
}

/// Writes the synthetic dataset and its manifest into `out_dir`. Training
/// split band statistics are stored in the manifest.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let samples = synth_samples(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("{}.msp", s.id));
        let mask = PathBuf::from(format!("{}.msk", s.id));
        write_image(out_dir.join(&image), &s.image)?;
        write_mask(out_dir.join(&mask), &s.mask)?;
        entries.push(PatchEntry {
            id: s.id.clone(),
            image,
            mask,
            split: cfg.split_of(i),
        });
    }
    let train: Vec<PatchSample> = samples
        .into_iter()
        .enumerate()
        .filter(|(i, _)| cfg.split_of(*i) == Split::Train)
        .map(|(_, s)| s)
        .collect();
    let mut manifest = Manifest::new(default_class_names(cfg.classes), cfg.bands, entries)?;
    manifest.stats = Some(compute_band_stats(&train)?);
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    manifest.set_root(out_dir);
    Ok(manifest)
}
