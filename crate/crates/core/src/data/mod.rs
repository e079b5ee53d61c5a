//! Patch I/O, dataset manifests, band statistics and synthetic data.

pub mod format;
pub mod manifest;
pub mod stats;
pub mod synth;

pub use format::{decode_image, decode_mask, encode_image, encode_mask, read_image, read_mask, write_image, write_mask, Mask};
pub use manifest::{read_patch, Manifest, PatchEntry, PatchSample, Split};
pub use stats::{compute_band_stats, compute_split_stats, flip, label_distribution, standardize, BandStats, LabelDistribution};
pub use synth::{class_signatures, synth_dataset, synth_samples, SynthConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

/// MARIDA classes in table order: `(name, acronym, labeled pixels)`.
/// Class index `i + 1` corresponds to entry `i`.
pub const MARIDA_CLASSES: [(&str, &str, u64); 15] = [
    ("Marine Debris", "MD", 3399),
    ("Dense Sargassum", "DenS", 2797),
    ("Sparse Sargassum", "Sps", 2357),
    ("Natural Organic Material", "NatM", 864),
    ("Ship", "Ship", 5803),
    ("Clouds", "Cloud", 117400),
    ("Marine Water", "MWater", 129159),
    ("Sediment-Laden Water", "SLWater", 372937),
    ("Foam", "Foam", 1225),
    ("Turbid Water", "TWater", 157612),
    ("Shallow Water", "SWater", 17369),
    ("Waves", "Waves", 5827),
    ("Cloud Shadows", "CloudS", 11728),
    ("Wakes", "Wakes", 8490),
    ("Mixed Water", "MixWater", 410),
];

pub fn marida_counts() -> Vec<u64> {
    MARIDA_CLASSES.iter().map(|c| c.2).collect()
}

pub fn marida_acronyms() -> Vec<String> {
    MARIDA_CLASSES.iter().map(|c| c.1.to_string()).collect()
}

/// The first `k` MARIDA acronyms, or `class1..classK` beyond fifteen.
pub fn default_class_names(k: usize) -> Vec<String> {
    if k <= MARIDA_CLASSES.len() {
        MARIDA_CLASSES[..k].iter().map(|c| c.1.to_string()).collect()
    } else {
        (1..=k).map(|i| format!("class{i}")).collect()
    }
}
