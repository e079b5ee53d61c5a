use crate::error::{Error, Result};
use crate::nn::init::{he_normal, zero_bias, InitRng};
use crate::nn::store::{ParamId, ParameterStore};
use crate::tensor::kernels::Conv2dParams;
use crate::tensor::{Scalar, Tape, Var};

/// Registers parameters under a dotted name prefix while drawing their
/// initial values from one seeded generator.
pub struct Builder<'a, T> {
    store: &'a mut ParameterStore<T>,
    rng: &'a mut InitRng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParameterStore<T>, rng: &'a mut InitRng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn he_weight(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let value = he_normal(shape, fan_in, self.rng);
        let name = self.name(leaf);
        self.store.add(name, value)
    }

    pub fn bias(&mut self, leaf: &str, len: usize) -> Result<ParamId> {
        let name = self.name(leaf);
        self.store.add(name, zero_bias(len))
    }
}

/// Plain 2-D convolution, stride 1 with same padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        let fan_in = c_in * kernel * kernel;
        Ok(Conv {
            weight: b.he_weight("weight", &[c_out, c_in, kernel, kernel], fan_in)?,
            bias: b.bias("bias", c_out)?,
            in_channels: c_in,
            out_channels: c_out,
            kernel,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel * kernel + c_out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(Error::shape(
                "conv",
                format!("input has {c} channels, layer expects {}", self.in_channels),
            ));
        }
        tape.conv2d(
            x,
            params[self.weight.0],
            params[self.bias.0],
            Conv2dParams::same(self.kernel),
        )
    }
}

/// 3×3 same-padded convolution followed by LeakyReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub slope: f64,
}

impl ConvBlock {
    pub const KERNEL: usize = 3;

    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, c_in: usize, c_out: usize, slope: f64) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv::new(b, c_in, c_out, Self::KERNEL)?,
            slope,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        Conv::param_count(c_in, c_out, Self::KERNEL)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, params, x)?;
        Ok(tape.leaky_relu(y, T::lit(self.slope)))
    }
}

/// Fully connected layer on `B×Cin` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: b.he_weight("weight", &[c_out, c_in], c_in)?,
            bias: b.bias("bias", c_out)?,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        c_out * c_in + c_out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, params[self.weight.0], params[self.bias.0])
    }
}
