//! Convolutional block attention: a channel gate followed by a spatial gate,
//! each applied multiplicatively.
//!
//! ```text
//! F'  = Mc(F)  ⊗ F       Mc = σ(MLP(avg(F)) + MLP(max(F)))      B×C
//! F'' = Ms(F') ⊗ F'      Ms = σ(conv_k([mean_c(F'); max_c(F')]))  B×1×H×W
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, Linear};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbamConfig {
    /// Channel reduction ratio of the shared MLP.
    pub ratio: usize,
    /// Side of the spatial-attention convolution kernel (odd).
    pub spatial_kernel: usize,
    pub slope: f64,
}

impl Default for CbamConfig {
    fn default() -> Self {
        CbamConfig {
            ratio: 16,
            spatial_kernel: 7,
            slope: crate::nn::DEFAULT_SLOPE,
        }
    }
}

impl CbamConfig {
    /// Hidden width of the channel MLP for `channels` inputs. The ratio is
    /// clamped to `channels` so narrow stages keep at least one unit.
    pub fn hidden(&self, channels: usize) -> Result<usize> {
        if self.ratio == 0 {
            return Err(Error::Config("attention ratio must be positive".into()));
        }
        let r = self.ratio.min(channels);
        if !channels.is_multiple_of(r) {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by attention ratio {r}"
            )));
        }
        Ok(channels / r)
    }

    pub fn param_count(&self, channels: usize) -> Result<usize> {
        let hidden = self.hidden(channels)?;
        Ok(Linear::param_count(channels, hidden)
            + Linear::param_count(hidden, channels)
            + Conv::param_count(2, 1, self.spatial_kernel))
    }
}

/// Shared two-layer perceptron `C → C/r → C` applied to both pooled
/// descriptors.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub reduce: Linear,
    pub expand: Linear,
    pub slope: f64,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, cfg: &CbamConfig) -> Result<Self> {
        let hidden = cfg.hidden(channels)?;
        Ok(ChannelAttention {
            reduce: Linear::new(&mut b.scope("fc1"), channels, hidden)?,
            expand: Linear::new(&mut b.scope("fc2"), hidden, channels)?,
            slope: cfg.slope,
            channels,
        })
    }

    fn mlp<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], d: Var) -> Result<Var> {
        let h = self.reduce.forward(tape, params, d)?;
        let h = tape.leaky_relu(h, T::lit(self.slope));
        self.expand.forward(tape, params, h)
    }

    /// The `B×C` gate `Mc`.
    pub fn gate<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], f: Var) -> Result<Var> {
        let c = tape.value(f).dims4()?.1;
        if c != self.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("input has {c} channels, module built for {}", self.channels),
            ));
        }
        let (avg, max) = tape.reduce_channel_stats(f)?;
        let a = self.mlp(tape, params, avg)?;
        let m = self.mlp(tape, params, max)?;
        let sum = tape.add(a, m)?;
        Ok(tape.sigmoid(sum))
    }
}

/// Convolution over the stacked cross-channel mean and max planes.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &CbamConfig) -> Result<Self> {
        Ok(SpatialAttention {
            conv: Conv::new(&mut b.scope("conv"), 2, 1, cfg.spatial_kernel)?,
        })
    }

    /// The `B×1×H×W` gate `Ms`.
    pub fn gate<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], f: Var) -> Result<Var> {
        let stats = tape.reduce_spatial_stats(f)?;
        let logits = self.conv.forward(tape, params, stats)?;
        Ok(tape.sigmoid(logits))
    }
}

#[derive(Clone, Debug)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

/// Intermediate values of one CBAM application, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CbamTrace {
    pub channel_gate: Var,
    pub refined: Var,
    pub spatial_gate: Var,
    pub output: Var,
}

impl Cbam {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, cfg: &CbamConfig) -> Result<Self> {
        Ok(Cbam {
            channel: ChannelAttention::new(&mut b.scope("channel"), channels, cfg)?,
            spatial: SpatialAttention::new(&mut b.scope("spatial"), cfg)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], f: Var) -> Result<Var> {
        Ok(self.trace(tape, params, f)?.output)
    }

    /// Channel gate first, then spatial gate on the channel-refined map.
    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], f: Var) -> Result<CbamTrace> {
        let channel_gate = self.channel.gate(tape, params, f)?;
        let refined = tape.mul(channel_gate, f)?;
        let spatial_gate = self.spatial.gate(tape, params, refined)?;
        let output = tape.mul(spatial_gate, refined)?;
        Ok(CbamTrace {
            channel_gate,
            refined,
            spatial_gate,
            output,
        })
    }
}
