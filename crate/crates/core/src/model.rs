//! The residual attention UNet.
//!
//! Layout for `stage_widths = [w0, w1, …, wn]`:
//!
//! ```text
//! stem      ConvBlock in_bands → w0                        H
//! down0     w0 → w0,  skip w0 @ H,      pooled @ H/2
//! down i    w(i-1) → wi, skip wi @ H/2^i, pooled @ H/2^(i+1)   (i < n)
//! bridge    ConvBlock w(n-1) → wn                          H/2^n
//! residual  `residual_blocks` × (x + CBAM(ConvBlock(ConvBlock(x))))
//! up i      deep w(i+1) @ H/2^(i+1) + skip wi @ H/2^i → wi      (i = n-1 … 0)
//! head      1×1 conv w0 → num_classes, raw logits
//! ```
//!
//! Every down and up stage ends in a CBAM; the skip is tapped after the
//! CBAM and before pooling.

use serde::{Deserialize, Serialize};

use crate::attention::{Cbam, CbamConfig};
use crate::error::{Error, Result};
use crate::nn::{init_rng, Builder, Conv, ConvBlock, ParameterStore, DEFAULT_SLOPE};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_bands: usize,
    pub num_classes: usize,
    pub stage_widths: Vec<usize>,
    pub cbam_ratio: usize,
    pub spatial_kernel: usize,
    pub leaky_slope: f64,
    pub residual_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_bands: 11,
            num_classes: 15,
            stage_widths: vec![32, 64, 128, 256, 512],
            cbam_ratio: 16,
            spatial_kernel: 7,
            leaky_slope: DEFAULT_SLOPE,
            residual_blocks: 3,
        }
    }
}

impl ModelConfig {
    /// Small network used for gradient checks and desk-scale training.
    pub fn miniature(in_bands: usize, num_classes: usize) -> Self {
        ModelConfig {
            in_bands,
            num_classes,
            stage_widths: vec![4, 8],
            ..Self::default()
        }
    }

    pub fn cbam(&self) -> CbamConfig {
        CbamConfig {
            ratio: self.cbam_ratio,
            spatial_kernel: self.spatial_kernel,
            slope: self.leaky_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 {
            return Err(Error::Config("in_bands must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > u8::MAX as usize {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=255, got {}",
                self.num_classes
            )));
        }
        if self.stage_widths.is_empty() {
            return Err(Error::Config("stage_widths must not be empty".into()));
        }
        if self.stage_widths[0] == 0 || self.stage_widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage_widths must be positive and strictly increasing, got {:?}",
                self.stage_widths
            )));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spatial_kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        let cbam = self.cbam();
        for &w in &self.stage_widths {
            cbam.hidden(w)?;
        }
        Ok(())
    }

    /// Number of 2× poolings.
    pub fn depth(&self) -> usize {
        self.stage_widths.len() - 1
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth()
    }

    fn down_channels(&self, i: usize) -> (usize, usize) {
        let w = &self.stage_widths;
        (w[i.saturating_sub(1)], w[i])
    }

    /// Closed-form trainable scalar count.
    pub fn parameter_count(&self) -> Result<usize> {
        self.validate()?;
        let w = &self.stage_widths;
        let n = self.depth();
        let cbam = self.cbam();
        let mut total = ConvBlock::param_count(self.in_bands, w[0]);
        for i in 0..n {
            let (c_in, c_out) = self.down_channels(i);
            total += ConvBlock::param_count(c_in, c_out)
                + ConvBlock::param_count(c_out, c_out)
                + cbam.param_count(c_out)?;
        }
        let deep = w[n];
        if n > 0 {
            total += ConvBlock::param_count(w[n - 1], deep);
        }
        total += self.residual_blocks * (2 * ConvBlock::param_count(deep, deep) + cbam.param_count(deep)?);
        for i in 0..n {
            let (skip, deeper) = (w[i], w[i + 1]);
            total += Conv::param_count(deeper, skip, 1)
                + ConvBlock::param_count(2 * skip, skip)
                + ConvBlock::param_count(skip, skip)
                + cbam.param_count(skip)?;
        }
        total += Conv::param_count(w[0], self.num_classes, 1);
        Ok(total)
    }

    /// Rejects an input shape before any compute is spent on it.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::shape("forward", format!("expected B×C×H×W input, got {shape:?}")));
        };
        if c != self.in_bands {
            return Err(Error::shape(
                "forward",
                format!("input has {c} bands, model expects {}", self.in_bands),
            ));
        }
        let m = self.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "forward",
                format!("spatial extents {h}×{w} must be divisible by {m}"),
            ));
        }
        if self.depth() > 0 && (h / m < 2 || w / m < 2) {
            return Err(Error::shape(
                "forward",
                format!("spatial extents {h}×{w} leave less than 2×2 at the deepest stage"),
            ));
        }
        Ok(())
    }
}

/// Two ConvBlocks and a CBAM, then 2× max pooling.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub cbam: Cbam,
}

impl DownBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, c_in: usize, c_out: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(DownBlock {
            conv1: ConvBlock::new(&mut b.scope("conv1"), c_in, c_out, cfg.leaky_slope)?,
            conv2: ConvBlock::new(&mut b.scope("conv2"), c_out, c_out, cfg.leaky_slope)?,
            cbam: Cbam::new(&mut b.scope("cbam"), c_out, &cfg.cbam())?,
        })
    }

    /// Returns `(skip, pooled)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<(Var, Var)> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("down_block", format!("spatial extents {h}×{w} must be even")));
        }
        let y = self.conv1.forward(tape, params, x)?;
        let y = self.conv2.forward(tape, params, y)?;
        let skip = self.cbam.forward(tape, params, y)?;
        let pooled = tape.maxpool2d(skip)?;
        Ok((skip, pooled))
    }
}

/// `x + CBAM(ConvBlock(ConvBlock(x)))`, no activation after the sum.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub cbam: Cbam,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(ResidualBlock {
            conv1: ConvBlock::new(&mut b.scope("conv1"), channels, channels, cfg.leaky_slope)?,
            conv2: ConvBlock::new(&mut b.scope("conv2"), channels, channels, cfg.leaky_slope)?,
            cbam: Cbam::new(&mut b.scope("cbam"), channels, &cfg.cbam())?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, params, x)?;
        let y = self.conv2.forward(tape, params, y)?;
        let y = self.cbam.forward(tape, params, y)?;
        tape.add(x, y)
    }
}

/// Upsample, 1×1 channel reduction, concat with the skip, two ConvBlocks
/// and a CBAM.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub reduce: Conv,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub cbam: Cbam,
}

impl UpBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        deep_channels: usize,
        skip_channels: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        Ok(UpBlock {
            reduce: Conv::new(&mut b.scope("reduce"), deep_channels, skip_channels, 1)?,
            conv1: ConvBlock::new(&mut b.scope("conv1"), 2 * skip_channels, skip_channels, cfg.leaky_slope)?,
            conv2: ConvBlock::new(&mut b.scope("conv2"), skip_channels, skip_channels, cfg.leaky_slope)?,
            cbam: Cbam::new(&mut b.scope("cbam"), skip_channels, &cfg.cbam())?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], deep: Var, skip: Var) -> Result<Var> {
        let (db, dc, dh, dw) = tape.value(deep).dims4()?;
        let (sb, sc, sh, sw) = tape.value(skip).dims4()?;
        if db != sb || sh != 2 * dh || sw != 2 * dw || dc != self.reduce.in_channels || sc != self.reduce.out_channels {
            return Err(Error::shape(
                "up_block",
                format!(
                    "deep {:?} and skip {:?} incompatible (block maps {} → {} channels at double resolution)",
                    tape.value(deep).shape(),
                    tape.value(skip).shape(),
                    self.reduce.in_channels,
                    self.reduce.out_channels
                ),
            ));
        }
        let up = tape.upsample_bilinear2x(deep)?;
        let up = self.reduce.forward(tape, params, up)?;
        let cat = tape.concat_channels(skip, up)?;
        let y = self.conv1.forward(tape, params, cat)?;
        let y = self.conv2.forward(tape, params, y)?;
        self.cbam.forward(tape, params, y)
    }
}

#[derive(Clone, Debug)]
pub struct ResAttUNet<T = f32> {
    cfg: ModelConfig,
    stem: ConvBlock,
    downs: Vec<DownBlock>,
    bridge: Option<ConvBlock>,
    residuals: Vec<ResidualBlock>,
    ups: Vec<UpBlock>,
    head: Conv,
    params: ParameterStore<T>,
}

impl<T: Scalar> ResAttUNet<T> {
    /// Builds the network with He-initialized weights drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParameterStore::new();
        let mut rng = init_rng(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let w = &cfg.stage_widths;
        let n = cfg.depth();

        let stem = ConvBlock::new(&mut b.scope("stem"), cfg.in_bands, w[0], cfg.leaky_slope)?;
        let downs = (0..n)
            .map(|i| {
                let (c_in, c_out) = cfg.down_channels(i);
                DownBlock::new(&mut b.scope(&format!("down{i}")), c_in, c_out, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let bridge = if n > 0 {
            Some(ConvBlock::new(&mut b.scope("bridge"), w[n - 1], w[n], cfg.leaky_slope)?)
        } else {
            None
        };
        let residuals = (0..cfg.residual_blocks)
            .map(|i| ResidualBlock::new(&mut b.scope(&format!("residual{i}")), w[n], &cfg))
            .collect::<Result<Vec<_>>>()?;
        let ups = (0..n)
            .rev()
            .map(|i| UpBlock::new(&mut b.scope(&format!("up{i}")), w[i + 1], w[i], &cfg))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv::new(&mut b.scope("head"), w[0], cfg.num_classes, 1)?;

        Ok(ResAttUNet {
            cfg,
            stem,
            downs,
            bridge,
            residuals,
            ups,
            head,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore<T> {
        self.params
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ResAttUNet<U> {
        ResAttUNet {
            cfg: self.cfg.clone(),
            stem: self.stem.clone(),
            downs: self.downs.clone(),
            bridge: self.bridge.clone(),
            residuals: self.residuals.clone(),
            ups: self.ups.clone(),
            head: self.head.clone(),
            params: self.params.cast(),
        }
    }

    /// Runs the network with externally bound parameter vars (one per store
    /// entry, in store order).
    pub fn forward_with(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        self.cfg.check_input(tape.value(x).shape())?;
        let mut h = self.stem.forward(tape, params, x)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        for down in &self.downs {
            let (skip, pooled) = down.forward(tape, params, h)?;
            skips.push(skip);
            h = pooled;
        }
        if let Some(bridge) = &self.bridge {
            h = bridge.forward(tape, params, h)?;
        }
        for block in &self.residuals {
            h = block.forward(tape, params, h)?;
        }
        for (up, skip) in self.ups.iter().zip(skips.iter().rev()) {
            h = up.forward(tape, params, h, *skip)?;
        }
        self.head.forward(tape, params, h)
    }

    /// Binds the model's own parameters and runs the network. Returns the
    /// logits var and the bound parameter vars.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        self.cfg.check_input(tape.value(x).shape())?;
        let params = self.params.bind(tape);
        let logits = self.forward_with(tape, &params, x)?;
        Ok((logits, params))
    }

    /// Inference convenience: `B×in_bands×H×W → B×num_classes×H×W` logits.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.cfg.check_input(input.shape())?;
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let (y, _) = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            stage_widths: vec![8, 8],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            stage_widths: vec![],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            spatial_kernel: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn indivisible_input_is_rejected_before_compute() {
        let cfg = ModelConfig::default();
        assert!(cfg.check_input(&[1, 11, 64, 64]).is_ok());
        assert!(cfg.check_input(&[1, 11, 72, 64]).is_err());
        assert!(cfg.check_input(&[1, 10, 64, 64]).is_err());
        assert!(cfg.check_input(&[1, 11, 16, 16]).is_err());
    }

    #[test]
    fn config_json_has_exactly_the_model_fields() {
        let v = serde_json::to_value(ModelConfig::default()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "cbam_ratio",
                "in_bands",
                "leaky_slope",
                "num_classes",
                "residual_blocks",
                "spatial_kernel",
                "stage_widths"
            ]
        );
        let back: ModelConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, ModelConfig::default());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn single_stage_network_has_no_pooling() {
        let cfg = ModelConfig {
            stage_widths: vec![4],
            ..ModelConfig::miniature(2, 3)
        };
        let net = ResAttUNet::<f64>::new(cfg.clone(), 0).unwrap();
        assert_eq!(net.params().num_scalars(), cfg.parameter_count().unwrap());
        let y = net.logits(&Tensor::full(&[1, 2, 5, 3], 0.5)).unwrap();
        assert_eq!(y.shape(), [1, 3, 5, 3]);
    }
}
