//! Forward and vector-Jacobian kernels over `B×C×H×W` tensors.
//!
//! Each `*_backward` takes the upstream gradient and returns gradients for
//! the inputs of the matching forward call. All kernels are single-threaded
//! and deterministic.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn same(kernel: usize) -> Self {
        Conv2dParams {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<Self> {
        let [batch, c_in, h, w] = *input else {
            return Err(Error::shape("conv2d", format!("input must be B×C×H×W, got {input:?}")));
        };
        let [c_out, wc_in, kh, kw] = *weight else {
            return Err(Error::shape("conv2d", format!("weight must be Cout×Cin×kH×kW, got {weight:?}")));
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but weight {weight:?} expects {wc_in}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}×{kw} must be odd")));
        }
        if p.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let extent = |n: usize, k: usize, axis: &str| -> Result<usize> {
            let padded = n + 2 * p.padding;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("{axis} {n} with padding {} smaller than kernel {k}", p.padding),
                ));
            }
            if !(padded - k).is_multiple_of(p.stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "non-integer output {axis}: ({n} + 2·{} − {k}) / {}",
                        p.padding, p.stride
                    ),
                ));
            }
            Ok((padded - k) / p.stride + 1)
        };
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            h_out: extent(h, kh, "height")?,
            w_out: extent(w, kw, "width")?,
            stride: p.stride,
            pad: p.padding,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// With a single output channel the unfolded column matrix is used only
    /// once, so row-slice updates are cheaper than building it.
    fn is_direct(&self) -> bool {
        self.stride == 1 && !self.is_pointwise() && self.c_out == 1
    }

    /// Visits every overlapping row pair of a stride-1 convolution as
    /// `(weight index, output row range, input row range)` for one
    /// `(co, ci)` channel pair.
    fn for_each_row<F: FnMut(usize, std::ops::Range<usize>, std::ops::Range<usize>)>(&self, co: usize, ci: usize, mut f: F) {
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let wi = ((co * self.c_in + ci) * self.kh + ky) * self.kw + kx;
                let (lo, hi) = self.valid_cols(kx);
                if lo == hi {
                    continue;
                }
                let shift = lo + kx - self.pad;
                for oy in 0..self.h_out {
                    if let Some(iy) = self.source(oy, ky, self.h) {
                        let o = oy * self.w_out;
                        let i = iy * self.w + shift;
                        f(wi, o + lo..o + hi, i..i + hi - lo);
                    }
                }
            }
        }
    }

    /// Adds the convolution of one sample into `out` (`Cout×H'×W'`).
    fn direct_forward<T: Scalar>(&self, sample: &[T], weight: &[T], out: &mut [T]) {
        let (p, hw) = (self.out_pixels(), self.h * self.w);
        for co in 0..self.c_out {
            let dst = &mut out[co * p..(co + 1) * p];
            for ci in 0..self.c_in {
                let src = &sample[ci * hw..(ci + 1) * hw];
                self.for_each_row(co, ci, |wi, o, i| {
                    let wv = weight[wi];
                    for (d, &x) in dst[o].iter_mut().zip(&src[i]) {
                        *d = *d + wv * x;
                    }
                });
            }
        }
    }

    /// Accumulates input and weight gradients of one sample.
    fn direct_backward<T: Scalar>(&self, sample: &[T], weight: &[T], go: &[T], g_in: &mut [T], g_w: &mut [T]) {
        let (p, hw) = (self.out_pixels(), self.h * self.w);
        for co in 0..self.c_out {
            let gout = &go[co * p..(co + 1) * p];
            for ci in 0..self.c_in {
                let src = &sample[ci * hw..(ci + 1) * hw];
                let gin = &mut g_in[ci * hw..(ci + 1) * hw];
                self.for_each_row(co, ci, |wi, o, i| {
                    let wv = weight[wi];
                    let mut dot = T::zero();
                    for ((gi, &x), &g) in gin[i.clone()].iter_mut().zip(&src[i]).zip(&gout[o]) {
                        *gi = *gi + wv * g;
                        dot = dot + g * x;
                    }
                    g_w[wi] = g_w[wi] + dot;
                });
            }
        }
    }

    fn source(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }

    /// Output columns `lo..hi` whose source column `ox·stride + kx − pad`
    /// lies inside the input, for stride 1.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.w_out);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.w_out).max(lo);
        (lo, hi)
    }

    /// Unfolds one sample (`C×H×W`) into a `(C·kH·kW) × (H'·W')` matrix,
    /// replacing the contents of `col`. Rows are produced in storage order.
    fn im2col<T: Scalar>(&self, sample: &[T], col: &mut Vec<T>) {
        col.clear();
        let zeros = |col: &mut Vec<T>, n: usize| col.extend(std::iter::repeat_n(T::zero(), n));
        for ci in 0..self.c_in {
            let plane = &sample[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.h_out {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            zeros(col, self.w_out);
                            continue;
                        };
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            zeros(col, lo);
                            let start = lo + kx - self.pad;
                            col.extend_from_slice(&src[start..start + hi - lo]);
                            zeros(col, self.w_out - hi);
                        } else {
                            col.extend((0..self.w_out).map(|ox| self.source(ox, kx, self.w).map_or(T::zero(), |ix| src[ix])));
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back into one sample's gradient.
    fn col2im<T: Scalar>(&self, col: &[T], sample: &mut [T]) {
        let p = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &mut sample[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.h_out {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        let src = &col[row + oy * self.w_out..row + (oy + 1) * self.w_out];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_cols(kx);
                            let start = lo + kx - self.pad;
                            for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d = *d + v;
                            }
                        } else {
                            for (ox, &v) in src.iter().enumerate() {
                                if let Some(ix) = self.source(ox, kx, self.w) {
                                    dst[ix] = dst[ix] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), params)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} does not match {} output channels", bias.shape(), g.c_out),
        ));
    }
    let p = g.out_pixels();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut out = Vec::with_capacity(g.batch * out_len);
    for _ in 0..g.batch {
        for &b in bias.data() {
            out.extend(std::iter::repeat_n(b, p));
        }
    }
    let mut col = Vec::with_capacity(if g.is_pointwise() || g.is_direct() { 0 } else { g.patch_len() * p });
    for b in 0..g.batch {
        let sample = &input.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        if g.is_direct() {
            g.direct_forward(sample, weight.data(), dst);
            continue;
        }
        let cols: &[T] = if g.is_pointwise() {
            sample
        } else {
            g.im2col(sample, &mut col);
            &col
        };
        T::gemm(g.c_out, g.patch_len(), p, weight.data(), false, cols, false, dst, true);
    }
    Tensor::new(vec![g.batch, g.c_out, g.h_out, g.w_out], out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    params: Conv2dParams,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), params)?;
    let expect = [g.batch, g.c_out, g.h_out, g.w_out];
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {:?} does not match output {expect:?}", grad_out.shape()),
        ));
    }
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut g_in = vec![T::zero(); input.numel()];
    let mut g_w = vec![T::zero(); weight.numel()];
    let mut g_b = vec![T::zero(); g.c_out];
    let unfold = !g.is_pointwise() && !g.is_direct();
    let mut col = Vec::with_capacity(if unfold { k * p } else { 0 });
    let mut g_col = if unfold { vec![T::zero(); k * p] } else { Vec::new() };
    for b in 0..g.batch {
        let sample = &input.data()[b * in_len..(b + 1) * in_len];
        let go = &grad_out.data()[b * out_len..(b + 1) * out_len];
        for (co, row) in go.chunks(p).enumerate() {
            g_b[co] = g_b[co] + row.iter().copied().sum::<T>();
        }
        if g.is_direct() {
            let dst = &mut g_in[b * in_len..(b + 1) * in_len];
            g.direct_backward(sample, weight.data(), go, dst, &mut g_w);
            continue;
        }
        let cols: &[T] = if g.is_pointwise() {
            sample
        } else {
            g.im2col(sample, &mut col);
            &col
        };
        T::gemm(g.c_out, p, k, go, false, cols, true, &mut g_w, true);
        let dst = &mut g_in[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            T::gemm(k, g.c_out, p, weight.data(), true, go, false, dst, true);
        } else {
            T::gemm(k, g.c_out, p, weight.data(), true, go, false, &mut g_col, false);
            g.col2im(&g_col, dst);
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), g_in)?,
        weight: Tensor::new(weight.shape().to_vec(), g_w)?,
        bias: Tensor::new(vec![g.c_out], g_b)?,
    })
}

/// 2×2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index that produced it (first maximum in
/// row-major window order).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial extents {h}×{w} must both be even"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let at = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[at] > x[best] {
                        best = at;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, ho, wo], out)?, argmax))
}

/// Routes each upstream gradient to its recorded argmax position.
pub fn scatter_argmax<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::shape(
            "scatter_argmax",
            format!("{} indices for {} gradients", argmax.len(), grad_out.numel()),
        ));
    }
    let mut g = Tensor::zeros(input_shape);
    let data = g.data_mut();
    for (&at, &v) in argmax.iter().zip(grad_out.data()) {
        data[at] = data[at] + v;
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Corner-aligned sampling positions for doubling an axis of length `n`.
fn upsample_taps(n: usize) -> Vec<Tap> {
    let out = 2 * n;
    (0..out)
        .map(|i| {
            let src = (i * (n - 1)) as f64 / (out - 1) as f64;
            let lo = src.floor() as usize;
            if lo >= n - 1 {
                Tap { lo: n - 1, hi: n - 1, frac: 0.0 }
            } else {
                Tap { lo, hi: lo + 1, frac: src - lo as f64 }
            }
        })
        .collect()
}

fn check_upsample_input(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let [b, c, h, w] = *shape else {
        return Err(Error::shape("upsample_bilinear2x", format!("expected B×C×H×W, got {shape:?}")));
    };
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "upsample_bilinear2x",
            format!("spatial extents {h}×{w} must both be at least 2"),
        ));
    }
    Ok((b, c, h, w))
}

/// Bilinear 2× upsampling with aligned corners.
pub fn upsample_bilinear2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = check_upsample_input(input.shape())?;
    let ys = upsample_taps(h);
    let xs = upsample_taps(w);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * 4 * h * w);
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for ty in &ys {
            let fy = T::lit(ty.frac);
            for tx in &xs {
                let fx = T::lit(tx.frac);
                let (a, bb) = (src[ty.lo * w + tx.lo], src[ty.lo * w + tx.hi]);
                let (cc, d) = (src[ty.hi * w + tx.lo], src[ty.hi * w + tx.hi]);
                // Lerp form keeps constant planes exactly constant.
                let top = a + fx * (bb - a);
                let bottom = cc + fx * (d - cc);
                out.push(top + fy * (bottom - top));
            }
        }
    }
    Tensor::new(vec![b, c, 2 * h, 2 * w], out)
}

pub fn upsample_bilinear2x_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = check_upsample_input(input_shape)?;
    if grad_out.shape() != [b, c, 2 * h, 2 * w] {
        return Err(Error::shape(
            "upsample_bilinear2x_backward",
            format!("grad {:?} for input {input_shape:?}", grad_out.shape()),
        ));
    }
    let ys = upsample_taps(h);
    let xs = upsample_taps(w);
    let mut g = vec![T::zero(); b * c * h * w];
    let go = grad_out.data();
    let ow = 2 * w;
    for plane in 0..b * c {
        let dst = &mut g[plane * h * w..(plane + 1) * h * w];
        let src = &go[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for (oy, ty) in ys.iter().enumerate() {
            let fy = T::lit(ty.frac);
            for (ox, tx) in xs.iter().enumerate() {
                let fx = T::lit(tx.frac);
                let v = src[oy * ow + ox];
                let one = T::one();
                let top = v * (one - fy);
                let bottom = v * fy;
                let at = |y: usize, x: usize| y * w + x;
                dst[at(ty.lo, tx.lo)] = dst[at(ty.lo, tx.lo)] + top * (one - fx);
                dst[at(ty.lo, tx.hi)] = dst[at(ty.lo, tx.hi)] + top * fx;
                dst[at(ty.hi, tx.lo)] = dst[at(ty.hi, tx.lo)] + bottom * (one - fx);
                dst[at(ty.hi, tx.hi)] = dst[at(ty.hi, tx.hi)] + bottom * fx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), g)
}

/// Per-channel spatial mean, `B×C×H×W → B×C`.
pub fn channel_mean<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    let n = T::from_usize(h * w).expect("pixel count");
    let out = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::new(vec![b, c], out)
}

pub fn channel_mean_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = *input_shape else {
        return Err(Error::shape("channel_mean_backward", format!("{input_shape:?}")));
    };
    if grad_out.shape() != [b, c] {
        return Err(Error::shape("channel_mean_backward", format!("grad {:?}", grad_out.shape())));
    }
    let n = T::from_usize(h * w).expect("pixel count");
    let mut g = Vec::with_capacity(b * c * h * w);
    for &v in grad_out.data() {
        g.extend(std::iter::repeat_n(v / n, h * w));
    }
    Tensor::new(input_shape.to_vec(), g)
}

/// Per-channel spatial max, `B×C×H×W → B×C`, with argmax indices.
pub fn channel_max<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = input.dims4()?;
    let mut out = Vec::with_capacity(b * c);
    let mut argmax = Vec::with_capacity(b * c);
    for (p, plane) in input.data().chunks(h * w).enumerate() {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate().skip(1) {
            if v > plane[best] {
                best = i;
            }
        }
        out.push(plane[best]);
        argmax.push(p * h * w + best);
    }
    Ok((Tensor::new(vec![b, c], out)?, argmax))
}

/// Per-pixel statistics across channels, `B×C×H×W → B×2×H×W`: plane 0 is
/// the channel mean, plane 1 the channel max. Also returns, per pixel, the
/// flat input index of the max.
pub fn spatial_stats<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = input.dims4()?;
    let hw = h * w;
    let n = T::from_usize(c).expect("channel count");
    let x = input.data();
    let mut out = vec![T::zero(); b * 2 * hw];
    let mut argmax = vec![0; b * hw];
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let mut sum = T::zero();
            let mut best = base + px;
            for ci in 0..c {
                let at = base + ci * hw + px;
                sum = sum + x[at];
                if x[at] > x[best] {
                    best = at;
                }
            }
            out[bi * 2 * hw + px] = sum / n;
            out[bi * 2 * hw + hw + px] = x[best];
            argmax[bi * hw + px] = best;
        }
    }
    Ok((Tensor::new(vec![b, 2, h, w], out)?, argmax))
}

pub fn spatial_stats_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = *input_shape else {
        return Err(Error::shape("spatial_stats_backward", format!("{input_shape:?}")));
    };
    if grad_out.shape() != [b, 2, h, w] || argmax.len() != b * h * w {
        return Err(Error::shape("spatial_stats_backward", format!("grad {:?}", grad_out.shape())));
    }
    let hw = h * w;
    let n = T::from_usize(c).expect("channel count");
    let go = grad_out.data();
    let mut g = vec![T::zero(); b * c * hw];
    for bi in 0..b {
        for px in 0..hw {
            let share = go[bi * 2 * hw + px] / n;
            for ci in 0..c {
                let at = bi * c * hw + ci * hw + px;
                g[at] = g[at] + share;
            }
            let at = argmax[bi * hw + px];
            g[at] = g[at] + go[bi * 2 * hw + hw + px];
        }
    }
    Tensor::new(input_shape.to_vec(), g)
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

pub fn leaky_relu_backward<T: Scalar>(input: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x >= T::zero() { g } else { slope * g })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Uses the forward output `y`: dσ/dx = y(1 − y).
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("same shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// How the left operand of [`mul`] is broadcast against the right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    None,
    /// `B×C` gate over `B×C×H×W`.
    Channel,
    /// `B×1×H×W` gate over `B×C×H×W`.
    Spatial,
}

impl Broadcast {
    pub fn infer(lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast::None);
        }
        match (lhs, rhs) {
            ([b, c], [rb, rc, _, _]) if b == rb && c == rc => Ok(Broadcast::Channel),
            ([b, 1, h, w], [rb, _, rh, rw]) if b == rb && h == rh && w == rw => Ok(Broadcast::Spatial),
            _ => Err(Error::shape(
                "mul",
                format!("cannot broadcast {lhs:?} against {rhs:?}"),
            )),
        }
    }
}

/// Calls `f(plane, gate)` for every `H×W` plane of the `B×C×H×W` right
/// operand in storage order, with the gate values that apply to it: one
/// scalar per plane (channel) or one plane per sample (spatial).
fn for_each_gated_plane<T: Scalar>(mode: Broadcast, rhs: &[usize], mut f: impl FnMut(usize, GateSlice<'_, T>), g: &[T]) {
    let hw = rhs[2] * rhs[3];
    for k in 0..rhs[0] * rhs[1] {
        match mode {
            Broadcast::Channel => f(k, GateSlice::Scalar(k)),
            Broadcast::Spatial => {
                let b = k / rhs[1];
                f(k, GateSlice::Plane(&g[b * hw..(b + 1) * hw], b))
            }
            Broadcast::None => unreachable!("elementwise case handled by callers"),
        }
    }
}

enum GateSlice<'a, T> {
    /// Index of the single gate value.
    Scalar(usize),
    /// Gate plane and the sample it belongs to.
    Plane(&'a [T], usize),
}

/// Elementwise product; `gate` may be broadcast per [`Broadcast`].
pub fn mul<T: Scalar>(gate: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Broadcast)> {
    let mode = Broadcast::infer(gate.shape(), x.shape())?;
    let (g, xd) = (gate.data(), x.data());
    let data = if mode == Broadcast::None {
        g.iter().zip(xd).map(|(&a, &v)| a * v).collect()
    } else {
        let hw = x.shape()[2] * x.shape()[3];
        let mut data = Vec::with_capacity(xd.len());
        for_each_gated_plane(
            mode,
            x.shape(),
            |k, gs| {
                let plane = &xd[k * hw..(k + 1) * hw];
                match gs {
                    GateSlice::Scalar(j) => data.extend(plane.iter().map(|&v| g[j] * v)),
                    GateSlice::Plane(gp, _) => data.extend(gp.iter().zip(plane).map(|(&a, &v)| a * v)),
                }
            },
            g,
        );
        data
    };
    Ok((Tensor::new(x.shape().to_vec(), data)?, mode))
}

pub fn mul_backward<T: Scalar>(
    gate: &Tensor<T>,
    x: &Tensor<T>,
    mode: Broadcast,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (g, xd, go) = (gate.data(), x.data(), grad_out.data());
    if mode == Broadcast::None {
        let g_gate = go.iter().zip(xd).map(|(&o, &v)| o * v).collect();
        let g_x = go.iter().zip(g).map(|(&o, &a)| o * a).collect();
        return (
            Tensor::new(gate.shape().to_vec(), g_gate).expect("gate shape"),
            Tensor::new(x.shape().to_vec(), g_x).expect("input shape"),
        );
    }
    let hw = x.shape()[2] * x.shape()[3];
    let mut g_gate = vec![T::zero(); g.len()];
    let mut g_x = Vec::with_capacity(xd.len());
    for_each_gated_plane(
        mode,
        x.shape(),
        |k, gs| {
            let (plane, o) = (&xd[k * hw..(k + 1) * hw], &go[k * hw..(k + 1) * hw]);
            match gs {
                GateSlice::Scalar(j) => {
                    let mut acc = g_gate[j];
                    for (&v, &oi) in plane.iter().zip(o) {
                        acc = acc + oi * v;
                    }
                    g_gate[j] = acc;
                    g_x.extend(o.iter().map(|&oi| oi * g[j]));
                }
                GateSlice::Plane(gp, b) => {
                    let acc = &mut g_gate[b * hw..(b + 1) * hw];
                    for ((a, &v), &oi) in acc.iter_mut().zip(plane).zip(o) {
                        *a = *a + oi * v;
                    }
                    g_x.extend(o.iter().zip(gp).map(|(&oi, &a)| oi * a));
                }
            }
        },
        g,
    );
    (
        Tensor::new(gate.shape().to_vec(), g_gate).expect("gate shape"),
        Tensor::new(x.shape().to_vec(), g_x).expect("input shape"),
    )
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("operands {:?} and {:?} disagree outside the channel axis", a.shape(), b.shape()),
        ));
    }
    let (la, lb) = (ca * ha * wa, cb * hb * wb);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..ba {
        data.extend_from_slice(&a.data()[i * la..(i + 1) * la]);
        data.extend_from_slice(&b.data()[i * lb..(i + 1) * lb]);
    }
    Tensor::new(vec![ba, ca + cb, ha, wa], data)
}

/// Inverse of [`concat_channels`]: first `at` channels, then the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    if at == 0 || at >= c {
        return Err(Error::shape(
            "split_channels",
            format!("split point {at} must lie strictly inside 0..{c}"),
        ));
    }
    let hw = h * w;
    let mut first = Vec::with_capacity(b * at * hw);
    let mut second = Vec::with_capacity(b * (c - at) * hw);
    for sample in x.data().chunks(c * hw) {
        first.extend_from_slice(&sample[..at * hw]);
        second.extend_from_slice(&sample[at * hw..]);
    }
    Ok((
        Tensor::new(vec![b, at, h, w], first)?,
        Tensor::new(vec![b, c - at, h, w], second)?,
    ))
}

/// Affine map `x·Wᵀ + b` for `x: B×Cin`, `W: Cout×Cin`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c_in) = input.dims2()?;
    let (c_out, w_in) = weight.dims2()?;
    if w_in != c_in || bias.shape() != [c_out] {
        return Err(Error::shape(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?} are inconsistent",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(b * c_out);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    T::gemm(b, c_in, c_out, input.data(), false, weight.data(), true, &mut out, true);
    Tensor::new(vec![b, c_out], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (b, c_in) = input.dims2()?;
    let (c_out, _) = weight.dims2()?;
    if grad_out.shape() != [b, c_out] {
        return Err(Error::shape("linear_backward", format!("grad {:?}", grad_out.shape())));
    }
    let go = grad_out.data();
    let mut g_in = vec![T::zero(); b * c_in];
    T::gemm(b, c_out, c_in, go, false, weight.data(), false, &mut g_in, false);
    let mut g_w = vec![T::zero(); c_out * c_in];
    T::gemm(c_out, b, c_in, go, true, input.data(), false, &mut g_w, false);
    let mut g_b = vec![T::zero(); c_out];
    for row in go.chunks(c_out) {
        for (acc, &v) in g_b.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![b, c_in], g_in)?,
        weight: Tensor::new(vec![c_out, c_in], g_w)?,
        bias: Tensor::new(vec![c_out], g_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Sextuple-loop convolution returning output and all three gradients
    /// for upstream gradient `go`.
    #[allow(clippy::type_complexity)]
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &Tensor<f64>,
        p: Conv2dParams,
        go: Option<&Tensor<f64>>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (b, ci, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = w.dims4().unwrap();
        let ho = (h + 2 * p.padding - kh) / p.stride + 1;
        let wo = (wd + 2 * p.padding - kw) / p.stride + 1;
        let (xd, wdat) = (x.data(), w.data());
        let mut out = vec![0.0; b * co * ho * wo];
        let mut g_in = vec![0.0; xd.len()];
        let mut g_w = vec![0.0; wdat.len()];
        let mut g_b = vec![0.0; co];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let oi = ((bi * co + o) * ho + oy) * wo + ox;
                        let g = go.map_or(0.0, |g| g.data()[oi]);
                        let mut acc = bias.data()[o];
                        g_b[o] += g;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((bi * ci + c) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((o * ci + c) * kh + ky) * kw + kx;
                                    acc += xd[xi] * wdat[wi];
                                    g_in[xi] += wdat[wi] * g;
                                    g_w[wi] += xd[xi] * g;
                                }
                            }
                        }
                        out[oi] = acc;
                    }
                }
            }
        }
        (out, g_in, g_w, g_b)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), Conv2dParams::same(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_center_sums_everything() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let y = conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), Conv2dParams::same(3)).unwrap();
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 1. + 2. + 4. + 5.);
    }

    #[test]
    fn conv_matches_naive_oracle_on_every_path() {
        let cases = [
            // im2col + GEMM
            ([2, 3, 8, 8], [4, 3, 3, 3], Conv2dParams::same(3)),
            // direct single-output-channel path
            ([2, 2, 7, 7], [1, 2, 7, 7], Conv2dParams::same(7)),
            ([1, 2, 4, 5], [1, 2, 3, 3], Conv2dParams::same(3)),
            // pointwise
            ([1, 3, 5, 5], [2, 3, 1, 1], Conv2dParams::same(1)),
            // padded 1×1 and strided
            ([1, 2, 4, 4], [2, 2, 1, 1], Conv2dParams { stride: 1, padding: 1 }),
            ([1, 2, 7, 7], [3, 2, 3, 3], Conv2dParams { stride: 2, padding: 1 }),
            ([1, 2, 7, 7], [1, 2, 3, 3], Conv2dParams { stride: 2, padding: 1 }),
        ];
        for (seed, (xs, ws, p)) in cases.into_iter().enumerate() {
            let seed = seed as u64 * 3;
            let x = random(seed, &xs);
            let w = random(seed + 1, &ws);
            let b = random(seed + 2, &[ws[0]]);
            let y = conv2d(&x, &w, &b, p).unwrap();
            let go = random(seed + 3, y.shape());
            let (out, g_in, g_w, g_b) = naive_conv(&x, &w, &b, p, Some(&go));
            assert_close(y.data(), &out, 1e-12);
            let grads = conv2d_backward(&x, &w, &go, p).unwrap();
            assert_close(grads.input.data(), &g_in, 1e-12);
            assert_close(grads.weight.data(), &g_w, 1e-12);
            assert_close(grads.bias.data(), &g_b, 1e-12);
        }
    }

    #[test]
    fn conv_f32_matches_f64_oracle() {
        let x = random(11, &[2, 3, 8, 8]);
        let w = random(12, &[4, 3, 3, 3]);
        let b = random(13, &[4]);
        let (out, ..) = naive_conv(&x, &w, &b, Conv2dParams::same(3), None);
        let y = conv2d(&x.cast::<f32>(), &w.cast(), &b.cast(), Conv2dParams::same(3)).unwrap();
        let y: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        assert_close(&y, &out, 1e-6);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &b, Conv2dParams::same(3)).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &b, Conv2dParams::same(3)).is_err());
        // (4 + 0 − 3) / 2 is not an integer.
        let p = Conv2dParams { stride: 2, padding: 0 };
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &b, p).is_err());
    }

    #[test]
    fn maxpool_examples_and_tie_rule() {
        let (y, arg) = maxpool2d(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!((y.data(), arg.as_slice()), (&[4.0][..], &[3][..]));
        let (y, arg) = maxpool2d(&Tensor::full(&[1, 1, 2, 4], 7.0f64)).unwrap();
        assert_eq!(y.data(), [7.0, 7.0]);
        assert_eq!(arg, [0, 2]);
        let g = scatter_argmax(&[1, 1, 2, 4], &arg, &t(&[1, 1, 1, 2], &[1.0, 2.0])).unwrap();
        assert_eq!(g.data(), [1., 0., 2., 0., 0., 0., 0., 0.]);
        assert!(maxpool2d(&Tensor::<f64>::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let x = random(5, &[1, 2, 6, 6]);
        let (y, _) = maxpool2d(&x).unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let want = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| x.data()[(c * 6 + 2 * oy + dy) * 6 + 2 * ox + dx])
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.data()[(c * 3 + oy) * 3 + ox], want);
                }
            }
        }
    }

    #[test]
    fn upsample_corners_and_interpolation() {
        let y = upsample_bilinear2x(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        let d = y.data();
        assert_eq!([d[0], d[3], d[12], d[15]], [1., 2., 3., 4.]);
        assert!((d[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!(upsample_bilinear2x(&Tensor::<f64>::zeros(&[1, 1, 1, 3])).is_err());
    }

    #[test]
    fn upsample_backward_is_the_adjoint() {
        // ⟨g, U x⟩ = ⟨Uᵀ g, x⟩ for random x, g.
        let x = random(21, &[2, 3, 3, 5]);
        let y = upsample_bilinear2x(&x).unwrap();
        let g = random(22, y.shape());
        let gt = upsample_bilinear2x_backward(x.shape(), &g).unwrap();
        let lhs: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = gt.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn channel_stats_examples_and_oracle() {
        let x = t(&[1, 2, 2, 2], &[5., 5., 5., 5., 1., 3., 2., 4.]);
        assert_eq!(channel_mean(&x).unwrap().data(), [5.0, 2.5]);
        let (max, arg) = channel_max(&x).unwrap();
        assert_eq!(max.data(), [5.0, 4.0]);
        assert_eq!(arg, [0, 7]);

        let x = random(31, &[2, 4, 5, 5]);
        let mean = channel_mean(&x).unwrap();
        let (max, _) = channel_max(&x).unwrap();
        for (i, plane) in x.data().chunks(25).enumerate() {
            let m: f64 = plane.iter().sum::<f64>() / 25.0;
            assert!((mean.data()[i] - m).abs() < 1e-15);
            assert_eq!(max.data()[i], plane.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }

    #[test]
    fn spatial_stats_examples_and_oracle() {
        let x = random(41, &[1, 1, 3, 3]);
        let (s, _) = spatial_stats(&x).unwrap();
        assert_eq!(&s.data()[..9], x.data());
        assert_eq!(&s.data()[9..], x.data());
        let (s, _) = spatial_stats(&t(&[1, 2, 1, 1], &[2., 4.])).unwrap();
        assert_eq!(s.data(), [3.0, 4.0]);

        let x = random(42, &[1, 6, 4, 4]);
        let (s, _) = spatial_stats(&x).unwrap();
        for px in 0..16 {
            let vals: Vec<f64> = (0..6).map(|c| x.data()[c * 16 + px]).collect();
            let mean = vals.iter().sum::<f64>() / 6.0;
            assert!((s.data()[px] - mean).abs() < 1e-15);
            assert_eq!(s.data()[16 + px], vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(sigmoid(&t(&[1], &[0.0])).data(), [0.5]);
        assert_eq!(leaky_relu(&t(&[2], &[-1.0, 2.0]), 0.01).data(), [-0.01, 2.0]);
        // Saturated inputs stay finite and inside [0, 1].
        let s = sigmoid(&t(&[2], &[-800.0, 800.0]));
        assert_eq!(s.data(), [0.0, 1.0]);
        let cat = concat_channels(&Tensor::<f64>::zeros(&[2, 32, 3, 3]), &Tensor::zeros(&[2, 32, 3, 3])).unwrap();
        assert_eq!(cat.shape(), [2, 64, 3, 3]);
        assert!(concat_channels(&Tensor::<f64>::zeros(&[2, 1, 3, 3]), &Tensor::zeros(&[2, 1, 3, 4])).is_err());
    }

    #[test]
    fn mul_rejects_unsanctioned_broadcasts() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]);
        assert!(mul(&Tensor::zeros(&[2, 3]), &x).is_ok());
        assert!(mul(&Tensor::zeros(&[2, 1, 4, 4]), &x).is_ok());
        assert!(mul(&Tensor::zeros(&[2, 3, 1, 1]), &x).is_err());
        assert!(mul(&Tensor::zeros(&[1, 3]), &x).is_err());
        assert!(add(&Tensor::zeros(&[2, 3]), &x).is_err());
    }

    #[test]
    fn linear_examples_and_oracle() {
        let x = random(51, &[3, 5]);
        let eye = Tensor::from_fn(&[5, 5], |i| if i % 6 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[5])).unwrap(), x);
        let b = t(&[2], &[0.5, -1.5]);
        let y = linear(&x, &Tensor::zeros(&[2, 5]), &b).unwrap();
        assert_eq!(y.data(), [0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

        let w = random(52, &[4, 5]);
        let b = random(53, &[4]);
        let y = linear(&x, &w, &b).unwrap();
        for i in 0..3 {
            for o in 0..4 {
                let want = b.data()[o] + (0..5).map(|k| x.data()[i * 5 + k] * w.data()[o * 5 + k]).sum::<f64>();
                assert!((y.data()[i * 4 + o] - want).abs() < 1e-14);
            }
        }
        assert!(linear(&x, &Tensor::zeros(&[4, 4]), &b).is_err());
    }

    proptest! {
        #[test]
        fn dirac_identity_for_any_input(seed in any::<u64>(), c in 1usize..3, h in 1usize..6, w in 1usize..6) {
            let x = random(seed, &[1, c, h, w]);
            let wt = Tensor::from_fn(&[c, c, 3, 3], |i| {
                let (o, rest) = (i / (c * 9), i % (c * 9));
                if rest / 9 == o && rest % 9 == 4 { 1.0 } else { 0.0 }
            });
            let y = conv2d(&x, &wt, &Tensor::zeros(&[c]), Conv2dParams::same(3)).unwrap();
            prop_assert_eq!(y, x);
        }

        #[test]
        fn constants_survive_pool_and_upsample(v in -1e3f64..1e3, h in 1usize..4, w in 1usize..4) {
            let x = Tensor::full(&[1, 2, 2 * h, 2 * w], v);
            prop_assert!(maxpool2d(&x).unwrap().0.data().iter().all(|&y| y == v));
            prop_assert!(upsample_bilinear2x(&x).unwrap().data().iter().all(|&y| y == v));
        }

        #[test]
        fn concat_then_split_is_bitwise(seed in any::<u64>(), ca in 1usize..4, cb in 1usize..4) {
            let a = random(seed, &[2, ca, 3, 2]);
            let b = random(seed ^ 1, &[2, cb, 3, 2]);
            let (a2, b2) = split_channels(&concat_channels(&a, &b).unwrap(), ca).unwrap();
            prop_assert_eq!(a2, a);
            prop_assert_eq!(b2, b);
        }

        #[test]
        fn forward_ops_are_pure(seed in any::<u64>()) {
            let x = random(seed, &[1, 2, 4, 4]);
            let w = random(seed ^ 7, &[3, 2, 3, 3]);
            let b = random(seed ^ 9, &[3]);
            let once = conv2d(&x, &w, &b, Conv2dParams::same(3)).unwrap();
            let twice = conv2d(&x, &w, &b, Conv2dParams::same(3)).unwrap();
            prop_assert_eq!(once.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            twice.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
