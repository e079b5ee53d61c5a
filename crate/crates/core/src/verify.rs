//! Finite-difference self-check over every differentiable op, the CBAM and
//! residual blocks, the losses and the composed miniature network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{Cbam, CbamConfig};
use crate::error::Result;
use crate::loss::{dice_loss, focal_loss, weighted_cross_entropy, ClassWeights, LossOutput};
use crate::model::{ModelConfig, ResAttUNet, ResidualBlock};
use crate::nn::{init_rng, Builder, ParameterStore, DEFAULT_SLOPE};
use crate::tensor::kernels::Conv2dParams;
use crate::tensor::{gradient_check, GradCheckReport, Tape, Tensor, Var};

/// Name of every check run by [`gradcheck_suite`], in order.
pub const CHECKS: [&str; 21] = [
    "conv2d_3x3",
    "conv2d_1x1",
    "conv2d_7x7",
    "maxpool2d",
    "upsample_bilinear2x",
    "channel_stats",
    "spatial_stats",
    "leaky_relu",
    "sigmoid",
    "add",
    "mul",
    "mul_channel",
    "mul_spatial",
    "concat_channels",
    "linear",
    "cbam",
    "residual_block",
    "weighted_cross_entropy",
    "focal_loss",
    "dice_loss",
    "model",
];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Stencils that needed a smaller step to stay off a kink.
    pub refined: usize,
    pub one_sided: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Worst error per check name, in [`CHECKS`] order.
    pub fn worst_per_check(&self) -> Vec<(&'static str, f64)> {
        CHECKS
            .iter()
            .filter_map(|&name| {
                self.results
                    .iter()
                    .filter(|r| r.name == name)
                    .map(|r| r.max_rel_error)
                    .max_by(f64::total_cmp)
                    .map(|e| (name, e))
            })
            .collect()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u8> {
    // Keep at least one labeled pixel so the losses are defined.
    let mut l: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=k) as u8).collect();
    l[0] = rng.gen_range(1..=k) as u8;
    l
}

fn loss_node(tape: &mut Tape<f64>, logits: Var, out: LossOutput<f64>) -> Result<Var> {
    tape.precomputed(logits, out.loss.value, out.grad)
}

/// Flattens a store into gradient-check inputs after `leading`.
fn with_params(leading: Vec<Tensor<f64>>, store: &ParameterStore<f64>) -> Vec<Tensor<f64>> {
    let mut inputs = leading;
    inputs.extend(store.iter().map(|p| p.value.clone()));
    inputs
}

/// Randomizes every parameter, including biases, so no branch is trivial.
fn randomize(store: &mut ParameterStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
}

/// Runs the named check with inputs drawn from `seed`.
pub fn run_check(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let slope = DEFAULT_SLOPE;
    match name {
        "conv2d_3x3" | "conv2d_1x1" | "conv2d_7x7" => {
            let (k, x_shape, c_out) = match name {
                "conv2d_3x3" => (3, [1, 2, 5, 5], 3),
                "conv2d_1x1" => (1, [2, 3, 4, 4], 2),
                _ => (7, [1, 2, 6, 6], 1),
            };
            let inputs = vec![random(r, &x_shape), random(r, &[c_out, x_shape[1], k, k]), random(r, &[c_out])];
            gradient_check(|t, v| t.conv2d(v[0], v[1], v[2], Conv2dParams::same(k)), &inputs, seed)
        }
        "maxpool2d" => gradient_check(|t, v| t.maxpool2d(v[0]), &[random(r, &[1, 2, 4, 6])], seed),
        "upsample_bilinear2x" => gradient_check(|t, v| t.upsample_bilinear2x(v[0]), &[random(r, &[2, 2, 3, 4])], seed),
        "channel_stats" => gradient_check(
            |t, v| {
                let (mean, max) = t.reduce_channel_stats(v[0])?;
                t.add(mean, max)
            },
            &[random(r, &[2, 3, 3, 3])],
            seed,
        ),
        "spatial_stats" => gradient_check(|t, v| t.reduce_spatial_stats(v[0]), &[random(r, &[2, 3, 3, 4])], seed),
        "leaky_relu" => gradient_check(|t, v| Ok(t.leaky_relu(v[0], slope)), &[random(r, &[2, 3, 3, 3])], seed),
        "sigmoid" => gradient_check(|t, v| Ok(t.sigmoid(v[0])), &[random(r, &[2, 3, 3, 3])], seed),
        "add" => gradient_check(|t, v| t.add(v[0], v[1]), &[random(r, &[1, 2, 3, 3]), random(r, &[1, 2, 3, 3])], seed),
        "mul" => gradient_check(|t, v| t.mul(v[0], v[1]), &[random(r, &[1, 2, 3, 3]), random(r, &[1, 2, 3, 3])], seed),
        "mul_channel" => gradient_check(|t, v| t.mul(v[0], v[1]), &[random(r, &[2, 3]), random(r, &[2, 3, 2, 3])], seed),
        "mul_spatial" => gradient_check(|t, v| t.mul(v[0], v[1]), &[random(r, &[2, 1, 3, 2]), random(r, &[2, 3, 3, 2])], seed),
        "concat_channels" => gradient_check(
            |t, v| t.concat_channels(v[0], v[1]),
            &[random(r, &[2, 1, 3, 3]), random(r, &[2, 3, 3, 3])],
            seed,
        ),
        "linear" => gradient_check(|t, v| t.linear(v[0], v[1], v[2]), &[random(r, &[2, 3]), random(r, &[4, 3]), random(r, &[4])], seed),
        "cbam" => {
            let mut store = ParameterStore::new();
            let mut init = init_rng(seed);
            let cfg = CbamConfig {
                ratio: 2,
                spatial_kernel: 3,
                slope,
            };
            let cbam = Cbam::new(&mut Builder::new(&mut store, &mut init), 4, &cfg)?;
            randomize(&mut store, r);
            let inputs = with_params(vec![random(r, &[1, 4, 4, 4])], &store);
            gradient_check(|t, v| cbam.forward(t, &v[1..], v[0]), &inputs, seed)
        }
        "residual_block" => {
            let mut store = ParameterStore::new();
            let mut init = init_rng(seed);
            let cfg = ModelConfig {
                cbam_ratio: 2,
                spatial_kernel: 3,
                ..ModelConfig::miniature(1, 2)
            };
            let block = ResidualBlock::new(&mut Builder::new(&mut store, &mut init), 4, &cfg)?;
            randomize(&mut store, r);
            let inputs = with_params(vec![random(r, &[1, 4, 4, 4])], &store);
            gradient_check(|t, v| block.forward(t, &v[1..], v[0]), &inputs, seed)
        }
        "weighted_cross_entropy" | "focal_loss" | "dice_loss" => {
            let (b, k, h, w) = (2, 3, 3, 3);
            let y = labels(r, b * h * w, k);
            let weights = ClassWeights::new((0..k).map(|_| r.gen_range(0.5..3.0)).collect())?;
            let inputs = [random(r, &[b, k, h, w]).map(|x| 3.0 * x)];
            gradient_check(
                |t, v| {
                    let logits = t.value(v[0]).clone();
                    let out = match name {
                        "weighted_cross_entropy" => weighted_cross_entropy(&logits, &y, &weights)?,
                        "focal_loss" => focal_loss(&logits, &y, 2.0)?,
                        _ => dice_loss(&logits, &y, 1.0)?,
                    };
                    loss_node(t, v[0], out)
                },
                &inputs,
                seed,
            )
        }
        "model" => {
            let cfg = ModelConfig::miniature(3, 4);
            let model = ResAttUNet::<f64>::new(cfg, seed)?;
            let y = labels(r, 16 * 16, 4);
            let weights = ClassWeights::new((0..4).map(|_| r.gen_range(0.5..3.0)).collect())?;
            let inputs = with_params(vec![random(r, &[1, 3, 16, 16])], model.params());
            gradient_check(
                |t, v| {
                    let logits = model.forward_with(t, &v[1..], v[0])?;
                    let out = weighted_cross_entropy(t.value(logits), &y, &weights)?;
                    loss_node(t, logits, out)
                },
                &inputs,
                seed,
            )
        }
        other => Err(crate::Error::InvalidArgument(format!("unknown gradient check {other:?}"))),
    }
}

/// Runs every check in [`CHECKS`] for each seed.
pub fn gradcheck_suite(seeds: impl IntoIterator<Item = u64>) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for seed in seeds {
        for name in CHECKS {
            let r = run_check(name, seed)?;
            log::debug!("{name} seed {seed}: {:.3e}", r.max_rel_error);
            report.results.push(CheckResult {
                name,
                seed,
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                refined: r.refined,
                one_sided: r.one_sided,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_small_check_passes_for_one_seed() {
        for name in CHECKS.iter().filter(|&&n| n != "model") {
            let r = run_check(name, 7).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn unknown_check_is_an_error() {
        assert!(run_check("softmax", 0).is_err());
    }
}
