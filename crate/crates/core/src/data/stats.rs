use serde::{Deserialize, Serialize};

use super::format::Mask;
use super::manifest::{Manifest, PatchSample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-band population mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn identity(bands: usize) -> Self {
        BandStats {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }

    /// Standardization divides by `std`, so every band needs a positive one.
    pub fn check_usable(&self) -> Result<()> {
        match self.std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            None => Ok(()),
            Some(b) => Err(Error::InvalidArgument(format!(
                "band {b} has non-positive standard deviation {}",
                self.std[b]
            ))),
        }
    }
}

/// Pooled mean and std over every pixel of every sample, two-pass in f64.
pub fn compute_band_stats(samples: &[PatchSample]) -> Result<BandStats> {
    let first = samples.first().ok_or_else(|| Error::Empty("sample set".into()))?;
    let bands = first.bands();
    let mut sum = vec![0.0f64; bands];
    let mut count = 0usize;
    for s in samples {
        if s.bands() != bands {
            return Err(Error::shape("band_stats", format!("{} has {} bands, expected {bands}", s.id, s.bands())));
        }
        let plane = s.mask.height * s.mask.width;
        for (b, chunk) in s.image.data().chunks(plane).enumerate() {
            sum[b] += chunk.iter().map(|&x| x as f64).sum::<f64>();
        }
        count += plane;
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0f64; bands];
    for s in samples {
        let plane = s.mask.height * s.mask.width;
        for (b, chunk) in s.image.data().chunks(plane).enumerate() {
            sq[b] += chunk.iter().map(|&x| (x as f64 - mean[b]).powi(2)).sum::<f64>();
        }
    }
    Ok(BandStats {
        mean,
        std: sq.iter().map(|s| (s / n).sqrt()).collect(),
    })
}

pub fn compute_split_stats(manifest: &Manifest, split: Split) -> Result<BandStats> {
    compute_band_stats(&manifest.load_split(split)?)
}

/// `(x − mean_b) / std_b` per band; the mask is untouched.
pub fn standardize(sample: &PatchSample, stats: &BandStats) -> Result<PatchSample> {
    let bands = sample.bands();
    if stats.mean.len() != bands || stats.std.len() != bands {
        return Err(Error::shape(
            "standardize",
            format!("stats for {} bands, sample has {bands}", stats.mean.len()),
        ));
    }
    stats.check_usable()?;
    let plane = sample.mask.height * sample.mask.width;
    let data = sample
        .image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let b = i / plane;
            ((x as f64 - stats.mean[b]) / stats.std[b]) as f32
        })
        .collect();
    Ok(PatchSample {
        id: sample.id.clone(),
        image: Tensor::new(sample.image.shape().to_vec(), data)?,
        mask: sample.mask.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    /// Pixels of class `c` at index `c − 1`; ignored pixels excluded.
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
}

pub fn label_distribution<'a>(masks: impl IntoIterator<Item = &'a Mask>, num_classes: usize) -> Result<LabelDistribution> {
    let mut counts = vec![0u64; num_classes];
    for m in masks {
        m.validate(num_classes)?;
        for &v in &m.data {
            if v != 0 {
                counts[v as usize - 1] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoValidPixels);
    }
    let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(LabelDistribution { counts, fractions })
}

/// Mirrors a sample horizontally and/or vertically.
pub fn flip(sample: &PatchSample, horizontal: bool, vertical: bool) -> PatchSample {
    let (h, w) = (sample.mask.height, sample.mask.width);
    let src = |y: usize, x: usize| {
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        sy * w + sx
    };
    let bands = sample.bands();
    let img = sample.image.data();
    let mut data = Vec::with_capacity(img.len());
    for b in 0..bands {
        for y in 0..h {
            for x in 0..w {
                data.push(img[b * h * w + src(y, x)]);
            }
        }
    }
    let mask = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| sample.mask.data[src(y, x)]).collect();
    PatchSample {
        id: sample.id.clone(),
        image: Tensor::new(sample.image.shape().to_vec(), data).expect("same shape"),
        mask: Mask { height: h, width: w, data: mask },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, bands: usize, f: impl Fn(usize) -> f32) -> PatchSample {
        PatchSample::new(id, Tensor::from_fn(&[bands, 2, 2], f), Mask::new(2, 2, vec![1, 1, 0, 2]).unwrap(), 2).unwrap()
    }

    #[test]
    fn constant_band_has_zero_std_and_is_flagged() {
        let stats = compute_band_stats(&[sample("a", 1, |_| 3.0)]).unwrap();
        assert_eq!(stats.mean, [3.0]);
        assert_eq!(stats.std, [0.0]);
        assert!(stats.check_usable().is_err());
        assert!(standardize(&sample("a", 1, |_| 3.0), &stats).is_err());
    }

    #[test]
    fn pooled_mean_of_two_patches() {
        let stats = compute_band_stats(&[sample("a", 1, |_| 1.0), sample("b", 1, |_| 3.0)]).unwrap();
        assert_eq!(stats.mean, [2.0]);
        assert_eq!(stats.std, [1.0]);
    }

    #[test]
    fn identity_standardization() {
        let s = sample("a", 2, |i| i as f32 * 0.5 - 1.0);
        assert_eq!(standardize(&s, &BandStats::identity(2)).unwrap(), s);
    }

    #[test]
    fn band_equal_to_mean_becomes_zero() {
        let s = sample("a", 1, |_| 4.0);
        let stats = BandStats { mean: vec![4.0], std: vec![2.0] };
        assert!(standardize(&s, &stats).unwrap().image.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample("a", 2, |i| i as f32);
        let f = flip(&s, true, false);
        assert_eq!(f.image.data()[..4], [1.0, 0.0, 3.0, 2.0]);
        assert_eq!(f.mask.data, [1, 1, 2, 0]);
        assert_eq!(flip(&flip(&s, true, true), true, true), s);
    }
}
