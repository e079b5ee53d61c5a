//! Three interactive views over the core crate, exported to JavaScript.

use wasm_bindgen::prelude::*;

use resattunet::attention::{Cbam, CbamConfig};
use resattunet::data::{synth_samples, PatchSample, SynthConfig};
use resattunet::nn::{init_rng, Builder, ParameterStore};
use resattunet::train::{lr_schedule, TrainConfig};
use resattunet::{Tape, Tensor};

/// Label colors, index 0 (ignored) first.
const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

const BANDS: usize = 4;
const CLASSES: usize = 4;

fn patch(seed: u32, size: usize, noise: f64, ignore: f64) -> Result<PatchSample, String> {
    let cfg = SynthConfig {
        seed: seed as u64,
        n_patches: 1,
        size,
        classes: CLASSES,
        bands: BANDS,
        noise_sigma: noise,
        ignore_fraction: ignore,
        ..SynthConfig::default()
    };
    let mut samples = synth_samples(&cfg).map_err(|e| e.to_string())?;
    Ok(samples.remove(0))
}

/// RGBA pixels of a `2·size × size` canvas: bands 1–3 as false color on
/// the left, the label raster on the right.
#[wasm_bindgen]
pub fn render_patch(seed: u32, size: usize, noise: f64, ignore: f64) -> Result<Vec<u8>, String> {
    let p = patch(seed, size, noise, ignore)?;
    let plane = size * size;
    let data = p.image.data();
    let scaled: Vec<Vec<u8>> = (0..3)
        .map(|b| {
            let band = &data[b * plane..(b + 1) * plane];
            let lo = band.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = band.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            band.iter().map(|&v| (255.0 * (v - lo) / span).round() as u8).collect()
        })
        .collect();
    let mut rgba = Vec::with_capacity(8 * plane);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            rgba.extend([scaled[0][i], scaled[1][i], scaled[2][i], 255]);
        }
        for x in 0..size {
            let [r, g, b] = PALETTE[p.mask.data[y * size + x] as usize % PALETTE.len()];
            rgba.extend([r, g, b, 255]);
        }
    }
    Ok(rgba)
}

/// Gates of a freshly initialized CBAM applied to a synthetic patch.
#[wasm_bindgen(getter_with_clone)]
pub struct GateMaps {
    /// One weight per band.
    pub channel: Vec<f64>,
    /// `size × size`, row-major.
    pub spatial: Vec<f64>,
    /// Largest `|output| / |input|` over all elements; never above 1.
    pub max_ratio: f64,
}

#[wasm_bindgen]
pub fn cbam_gates(seed: u32, size: usize, noise: f64, init_seed: u32) -> Result<GateMaps, String> {
    let p = patch(seed, size, noise, 0.0)?;
    let mut store = ParameterStore::<f64>::new();
    let mut rng = init_rng(init_seed as u64);
    let cbam = Cbam::new(&mut Builder::new(&mut store, &mut rng), BANDS, &CbamConfig::default()).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let x: Tensor<f64> = p.image.cast();
    let x = tape.leaf(x.reshape(&[1, BANDS, size, size]).map_err(|e| e.to_string())?);
    let t = cbam.trace(&mut tape, &params, x).map_err(|e| e.to_string())?;
    let max_ratio = tape
        .value(x)
        .data()
        .iter()
        .zip(tape.value(t.output).data())
        .filter(|(a, _)| **a != 0.0)
        .map(|(a, b)| (b / a).abs())
        .fold(0.0, f64::max);
    Ok(GateMaps {
        channel: tape.value(t.channel_gate).data().to_vec(),
        spatial: tape.value(t.spatial_gate).data().to_vec(),
        max_ratio,
    })
}

/// Learning rate of every epoch under step decay.
#[wasm_bindgen]
pub fn lr_curve(initial_lr: f64, decay_factor: f64, interval: usize, epochs: usize) -> Result<Vec<f64>, String> {
    let cfg = TrainConfig {
        epochs,
        initial_lr,
        decay_factor,
        decay_interval_epochs: interval,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((0..epochs).map(|e| lr_schedule(&cfg, e)).collect())
}
