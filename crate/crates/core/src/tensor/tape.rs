//! Reverse-mode recording of kernel invocations.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Calling
//! [`Tape::backward`] walks the recorded ops in exact reverse order and
//! accumulates vector-Jacobian products, summing contributions when a value
//! feeds several consumers.

use std::sync::Arc;

use super::kernels::{self, Broadcast, Conv2dParams};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        params: Conv2dParams,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    ChannelMean {
        input: Var,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
    SpatialStats {
        input: Var,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        gate: Var,
        x: Var,
        mode: Broadcast,
    },
    Concat {
        a: Var,
        b: Var,
        split: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    /// Scalar whose gradient w.r.t. `input` was computed eagerly.
    Precomputed {
        input: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

impl<T> Op<T> {
    fn inputs(&self) -> [Option<Var>; 3] {
        match *self {
            Op::Leaf => [None; 3],
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                [Some(input), Some(weight), Some(bias)]
            }
            Op::MaxPool2d { input, .. }
            | Op::Upsample { input }
            | Op::ChannelMean { input }
            | Op::ChannelMax { input, .. }
            | Op::SpatialStats { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::Precomputed { input, .. } => [Some(input), None, None],
            Op::Add { a, b } | Op::Concat { a, b, .. } => [Some(a), Some(b), None],
            Op::Mul { gate, x, .. } => [Some(gate), Some(x), None],
        }
    }
}

pub struct Tape<T = f32> {
    nodes: Vec<Arc<Node<T>>>,
    /// Recording being replayed: a node whose inputs are unchanged from it
    /// is shared instead of recomputed.
    base: Vec<Arc<Node<T>>>,
    /// Per node, whether its value may differ from `base`.
    changed: Vec<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            base: Vec::new(),
            changed: Vec::new(),
        }
    }

    /// Empty tape that re-records the same graph as `base`, sharing every
    /// value that does not depend on a leaf whose contents changed. The
    /// caller must record ops in the same order as `base` did; a divergent
    /// op ends sharing for the rest of the recording.
    pub fn replaying(base: &Tape<T>) -> Self {
        Tape {
            nodes: Vec::with_capacity(base.nodes.len()),
            base: base.nodes.clone(),
            changed: Vec::with_capacity(base.nodes.len()),
        }
    }

    /// Shares the next base node when it records the same op over
    /// unchanged inputs.
    fn reuse(&mut self, inputs: &[Var]) -> Option<Var> {
        let idx = self.nodes.len();
        let node = self.base.get(idx)?;
        let expected = node.op.inputs();
        let same = inputs.iter().enumerate().all(|(k, v)| expected[k] == Some(*v))
            && expected[inputs.len()..].iter().all(Option::is_none)
            && !matches!(node.op, Op::Leaf);
        if !same {
            self.base.clear();
            return None;
        }
        if inputs.iter().any(|v| self.changed[v.0]) {
            return None;
        }
        self.nodes.push(Arc::clone(node));
        self.changed.push(false);
        Some(Var(idx))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete choice made by piecewise ops: the selected
    /// element of each max and the branch of each leaky ReLU input. Two
    /// recordings of the same graph with equal signatures lie on the same
    /// smooth piece.
    pub fn branch_signature(&self) -> u64 {
        // FNV-1a over 64-bit words; sign bits are packed 64 to a word.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| h = (h ^ x).wrapping_mul(0x0000_0100_0000_01b3);
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::MaxPool2d { argmax, .. } | Op::ChannelMax { argmax, .. } | Op::SpatialStats { argmax, .. } => {
                    mix(i as u64);
                    argmax.iter().for_each(|&a| mix(a as u64));
                }
                Op::LeakyRelu { input, .. } => {
                    mix(i as u64);
                    for chunk in self.value(*input).data().chunks(64) {
                        mix(chunk.iter().fold(0u64, |w, x| (w << 1) | (*x >= T::zero()) as u64));
                    }
                }
                _ => {}
            }
        }
        h
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        value.debug_assert_finite("tape value");
        self.nodes.push(Arc::new(Node { value, op }));
        self.changed.push(true);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        if let Some(node) = self.base.get(self.nodes.len()) {
            if matches!(node.op, Op::Leaf) && same_bits(&node.value, &value) {
                self.nodes.push(Arc::clone(node));
                self.changed.push(false);
                return Var(self.nodes.len() - 1);
            }
        }
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, params: Conv2dParams) -> Result<Var> {
        if let Some(v) = self.reuse(&[input, weight, bias]) {
            return Ok(v);
        }
        let out = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), params)?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, params }))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[input]) {
            return Ok(v);
        }
        let (out, argmax) = kernels::maxpool2d(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[input]) {
            return Ok(v);
        }
        let out = kernels::upsample_bilinear2x(self.value(input))?;
        Ok(self.push(out, Op::Upsample { input }))
    }

    /// Per-channel `(mean, max)` descriptors, each `B×C`.
    pub fn reduce_channel_stats(&mut self, input: Var) -> Result<(Var, Var)> {
        if let Some(mean) = self.reuse(&[input]) {
            let max = self.reuse(&[input]).expect("channel max follows its mean");
            return Ok((mean, max));
        }
        let mean = kernels::channel_mean(self.value(input))?;
        let (max, argmax) = kernels::channel_max(self.value(input))?;
        let mean = self.push(mean, Op::ChannelMean { input });
        let max = self.push(max, Op::ChannelMax { input, argmax });
        Ok((mean, max))
    }

    /// Cross-channel mean and max planes, `B×2×H×W`.
    pub fn reduce_spatial_stats(&mut self, input: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[input]) {
            return Ok(v);
        }
        let (out, argmax) = kernels::spatial_stats(self.value(input))?;
        Ok(self.push(out, Op::SpatialStats { input, argmax }))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        if let Some(v) = self.reuse(&[input]) {
            return v;
        }
        let out = kernels::leaky_relu(self.value(input), slope);
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        if let Some(v) = self.reuse(&[input]) {
            return v;
        }
        let out = kernels::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[a, b]) {
            return Ok(v);
        }
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// `gate ⊗ x`, broadcasting a `B×C` or `B×1×H×W` gate over `x`.
    pub fn mul(&mut self, gate: Var, x: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[gate, x]) {
            return Ok(v);
        }
        let (out, mode) = kernels::mul(self.value(gate), self.value(x))?;
        Ok(self.push(out, Op::Mul { gate, x, mode }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[a, b]) {
            return Ok(v);
        }
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        let split = self.value(a).shape()[1];
        Ok(self.push(out, Op::Concat { a, b, split }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[input, weight, bias]) {
            return Ok(v);
        }
        let out = kernels::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    /// Records a scalar objective computed outside the tape together with its
    /// gradient w.r.t. `input`.
    pub fn precomputed(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "precomputed",
                format!("gradient {:?} for input {:?}", grad.shape(), self.value(input).shape()),
            ));
        }
        if let Some(v) = self.reuse(&[input]) {
            return Ok(v);
        }
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { input, grad }))
    }

    /// Back-propagates `seed` (the gradient of the objective w.r.t. `output`)
    /// through every op recorded up to and including `output`.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (var, contribution) in self.vjp(idx, &g)? {
                accumulate(&mut grads[var.0], contribution);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias, params } => {
                let gr = kernels::conv2d_backward(self.value(*input), self.value(*weight), g, *params)?;
                vec![(*input, gr.input), (*weight, gr.weight), (*bias, gr.bias)]
            }
            Op::MaxPool2d { input, argmax } | Op::ChannelMax { input, argmax } => {
                vec![(*input, kernels::scatter_argmax(self.value(*input).shape(), argmax, g)?)]
            }
            Op::Upsample { input } => {
                vec![(*input, kernels::upsample_bilinear2x_backward(self.value(*input).shape(), g)?)]
            }
            Op::ChannelMean { input } => {
                vec![(*input, kernels::channel_mean_backward(self.value(*input).shape(), g)?)]
            }
            Op::SpatialStats { input, argmax } => {
                vec![(*input, kernels::spatial_stats_backward(self.value(*input).shape(), argmax, g)?)]
            }
            Op::LeakyRelu { input, slope } => {
                vec![(*input, kernels::leaky_relu_backward(self.value(*input), *slope, g))]
            }
            Op::Sigmoid { input } => vec![(*input, kernels::sigmoid_backward(&node.value, g))],
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { gate, x, mode } => {
                let (gg, gx) = kernels::mul_backward(self.value(*gate), self.value(*x), *mode, g);
                vec![(*gate, gg), (*x, gx)]
            }
            Op::Concat { a, b, split } => {
                let (ga, gb) = kernels::split_channels(g, *split)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { input, weight, bias } => {
                let gr = kernels::linear_backward(self.value(*input), self.value(*weight), g)?;
                vec![(*input, gr.input), (*weight, gr.weight), (*bias, gr.bias)]
            }
            Op::Precomputed { input, grad } => {
                let scale = g.data()[0];
                vec![(*input, grad.map(|x| x * scale))]
            }
        };
        Ok(out)
    }
}

fn same_bits<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = x + x  =>  dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y, Tensor::full(&[1, 3], 1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unrelated_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 2], 1.0));
        let unused = tape.leaf(Tensor::full(&[1, 2], 3.0));
        let y = tape.sigmoid(x);
        let grads = tape.backward(y, Tensor::full(&[1, 2], 1.0)).unwrap();
        assert!(grads.get(unused).is_none());
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((grads.get(x).unwrap().data()[0] - s * (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        // z = sigmoid(leaky(x)) · x : x feeds two consumers at different depths.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        let a = tape.leaky_relu(x, 0.01);
        let s = tape.sigmoid(a);
        let z = tape.mul(s, x).unwrap();
        let grads = tape.backward(z, Tensor::full(&[1, 1], 1.0)).unwrap();
        let sig = 1.0 / (1.0 + (-0.3f64).exp());
        let want = sig + 0.3 * sig * (1.0 - sig);
        assert!((grads.get(x).unwrap().data()[0] - want).abs() < 1e-15);
    }

    fn record(tape: &mut Tape<f64>, a: f64, b: f64) -> Var {
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![a, -a]).unwrap());
        let y = tape.leaf(Tensor::new(vec![1, 2], vec![b, 2.0]).unwrap());
        let lx = tape.leaky_relu(x, 0.1);
        let sy = tape.sigmoid(y);
        tape.mul(lx, sy).unwrap()
    }

    #[test]
    fn replay_shares_exactly_the_unaffected_nodes() {
        let mut base = Tape::new();
        record(&mut base, 0.5, 1.0);
        let mut replay = Tape::replaying(&base);
        let out = record(&mut replay, 0.5, 3.0);
        let mut fresh = Tape::new();
        let want = record(&mut fresh, 0.5, 3.0);
        assert_eq!(replay.value(out), fresh.value(want));
        let shared: Vec<bool> = (0..base.len()).map(|i| Arc::ptr_eq(&base.nodes[i], &replay.nodes[i])).collect();
        assert_eq!(shared, [true, false, true, false, false]);
        assert_eq!(replay.branch_signature(), fresh.branch_signature());
        let grads = replay.backward(out, Tensor::full(&[1, 2], 1.0)).unwrap();
        let fresh_grads = fresh.backward(want, Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(grads.get(Var(0)), fresh_grads.get(Var(0)));
    }

    #[test]
    fn replay_of_a_different_graph_stops_sharing() {
        let mut base = Tape::<f64>::new();
        record(&mut base, 0.5, 1.0);
        let mut other = Tape::replaying(&base);
        let x = other.leaf(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
        let s = other.sigmoid(x);
        let mut fresh = Tape::new();
        let fx = fresh.leaf(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
        let fs = fresh.sigmoid(fx);
        assert_eq!(other.value(s), fresh.value(fs));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x, Tensor::zeros(&[4])).is_err());
    }
}
