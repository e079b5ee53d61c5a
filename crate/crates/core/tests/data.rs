use std::fs;

use proptest::prelude::*;

use resattunet::data::{
    class_signatures, compute_band_stats, compute_split_stats, decode_image, decode_mask, encode_image, encode_mask,
    label_distribution, marida_counts, read_patch, standardize, synth_dataset, synth_samples, Manifest, Mask,
    PatchSample, Split, SynthConfig, MANIFEST_FILE,
};
use resattunet::metrics::{ConfusionMatrix, MetricReport};
use resattunet::Tensor;

fn small_cfg() -> SynthConfig {
    SynthConfig {
        n_patches: 5,
        size: 16,
        val_fraction: 0.2,
        test_fraction: 0.2,
        ..SynthConfig::default()
    }
}

#[test]
fn synthetic_dataset_is_byte_for_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_dataset(&small_cfg(), a.path()).unwrap();
    synth_dataset(&small_cfg(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2 * 5 + 1);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
    let other = SynthConfig { seed: 1, ..small_cfg() };
    assert_ne!(synth_samples(&other).unwrap(), synth_samples(&small_cfg()).unwrap());
}

#[test]
fn written_dataset_reloads_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    synth_dataset(&cfg, dir.path()).unwrap();
    let m = Manifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    let expected = synth_samples(&cfg).unwrap();
    let train = m.load_split(Split::Train).unwrap();
    assert_eq!(train, expected[..3]);
    assert_eq!(m.load_split(Split::Val).unwrap(), expected[3..4]);
    assert_eq!(m.load_split(Split::Test).unwrap(), expected[4..]);
    // Stored stats are the training split's.
    assert_eq!(m.stats.clone().unwrap(), compute_band_stats(&train).unwrap());
    assert_eq!(compute_split_stats(&m, Split::Train).unwrap(), m.stats.unwrap());
}

#[test]
fn iteration_follows_manifest_order_for_any_prefetch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_patches: 6,
        size: 8,
        ..SynthConfig::default()
    };
    let mut m = synth_dataset(&cfg, dir.path()).unwrap();
    m.patches.reverse();
    let want: Vec<String> = m.patches.iter().map(|p| p.id.clone()).collect();
    for prefetch in [0, 1, 3, 16] {
        let got: Vec<String> = m.iter_split(Split::Train, prefetch).map(|s| s.unwrap().id).collect();
        assert_eq!(got, want, "prefetch {prefetch}");
    }
}

#[test]
fn nearest_signature_classifier_is_perfect_on_noiseless_data() {
    let cfg = SynthConfig::default();
    let sigs = class_signatures(&cfg);
    let mut cm = ConfusionMatrix::new(cfg.classes);
    for s in synth_samples(&cfg).unwrap() {
        let px = cfg.size * cfg.size;
        let pred: Vec<u8> = (0..px)
            .map(|p| {
                let dist = |sig: &Vec<f32>| -> f32 {
                    (0..cfg.bands).map(|b| (s.image.data()[b * px + p] - sig[b]).powi(2)).sum()
                };
                let best = (0..cfg.classes).min_by(|&a, &b| dist(&sigs[a]).total_cmp(&dist(&sigs[b]))).unwrap();
                best as u8 + 1
            })
            .collect();
        cm.accumulate(&s.mask.data, &pred).unwrap();
    }
    let r = MetricReport::from_confusion(&cm).unwrap();
    assert_eq!(r.iou, 1.0);
    assert_eq!(r.subset_accuracy, 1.0);
}

#[test]
fn ignore_fraction_is_roughly_honored() {
    let samples = synth_samples(&SynthConfig::default()).unwrap();
    let (ignored, total) = samples.iter().fold((0, 0), |(i, t), s| {
        (i + s.mask.data.iter().filter(|&&v| v == 0).count(), t + s.mask.data.len())
    });
    let frac = ignored as f64 / total as f64;
    assert!((frac - 0.7).abs() < 0.03, "{frac}");
}

#[test]
fn band_stats_match_a_flat_oracle() {
    let samples = synth_samples(&SynthConfig {
        noise_sigma: 0.1,
        ..small_cfg()
    })
    .unwrap();
    let stats = compute_band_stats(&samples).unwrap();
    let px = 16 * 16;
    for b in 0..4 {
        let vals: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.image.data()[b * px..(b + 1) * px].iter().map(|&v| v as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((stats.mean[b] - mean).abs() < 1e-9);
        assert!((stats.std[b] - var.sqrt()).abs() < 1e-9);
    }
    let standardized: Vec<PatchSample> = samples.iter().map(|s| standardize(s, &stats).unwrap()).collect();
    let restats = compute_band_stats(&standardized).unwrap();
    for b in 0..4 {
        assert!(restats.mean[b].abs() < 1e-5, "{}", restats.mean[b]);
        assert!((restats.std[b] - 1.0).abs() < 1e-5);
    }
}

#[test]
fn table_shaped_label_distribution_is_exact() {
    let counts = marida_counts();
    let total: u64 = counts.iter().sum();
    assert_eq!(total, 837_377);
    let data: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u8 + 1, n as usize))
        .chain(std::iter::repeat_n(0, 1000))
        .collect();
    let mask = Mask::new(1, data.len(), data).unwrap();
    let dist = label_distribution([&mask], 15).unwrap();
    assert_eq!(dist.counts, counts);
    for (f, &c) in dist.fractions.iter().zip(&counts) {
        assert_eq!(*f, c as f64 / total as f64);
    }
    assert!((dist.fractions[0] - 0.004059103606).abs() < 1e-12);
}

#[test]
fn patch_files_round_trip_through_read_patch() {
    let dir = tempfile::tempdir().unwrap();
    let s = &synth_samples(&small_cfg()).unwrap()[0];
    let (ip, mp) = (dir.path().join("a.msp"), dir.path().join("a.msk"));
    fs::write(&ip, encode_image(&s.image).unwrap()).unwrap();
    fs::write(&mp, encode_mask(&s.mask).unwrap()).unwrap();
    let back = read_patch(&ip, &mp, 4).unwrap();
    assert_eq!((back.image, back.mask), (s.image.clone(), s.mask.clone()));
    // Labels beyond K are rejected.
    assert!(read_patch(&ip, &mp, 2).is_err());
}

proptest! {
    #[test]
    fn image_encoding_round_trips(bands in 1usize..4, h in 1usize..6, w in 1usize..6, bits in prop::collection::vec(any::<u32>(), 75)) {
        let n = bands * h * w;
        let data: Vec<f32> = bits[..n].iter().map(|&b| f32::from_bits(b)).collect();
        let image = Tensor::new(vec![bands, h, w], data).unwrap();
        let back = decode_image(&encode_image(&image).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), image.shape());
        let (a, b): (Vec<u32>, Vec<u32>) = (
            back.data().iter().map(|v| v.to_bits()).collect(),
            image.data().iter().map(|v| v.to_bits()).collect(),
        );
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mask_encoding_round_trips(h in 1usize..10, w in 1usize..10, labels in prop::collection::vec(any::<u8>(), 100)) {
        let mask = Mask::new(h, w, labels[..h * w].to_vec()).unwrap();
        prop_assert_eq!(decode_mask(&encode_mask(&mask).unwrap()).unwrap(), mask);
    }
}
