//! Class-imbalance-aware segmentation objectives.
//!
//! Every loss takes `B×K×H×W` logits and a flat `B·H·W` label raster whose
//! values are `0` (ignored) or a class index `1..=K`, and returns the scalar
//! together with its gradient w.r.t. the logits. Softmax is evaluated
//! internally via log-sum-exp in 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 0;

/// Offset inside the logarithm of the inverse-log-frequency weight.
pub const WEIGHT_OFFSET: f64 = 1.02;

/// Positive weight per class `1..=K` (stored at index `c − 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("class weights must not be empty".into()));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "weight of class {} must be finite and positive, got {w}",
                i + 1
            )));
        }
        Ok(ClassWeights { weights })
    }

    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Weight of class `class` in `1..=K`.
    pub fn weight(&self, class: u8) -> f64 {
        self.weights[class as usize - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.iter().all(|&w| w == self.weights[0])
    }

    /// `{"name": weight, …}` in class order.
    pub fn to_json(&self, class_names: &[String]) -> Result<serde_json::Value> {
        if class_names.len() != self.weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} weights",
                class_names.len(),
                self.weights.len()
            )));
        }
        let map = class_names
            .iter()
            .zip(&self.weights)
            .map(|(n, &w)| (n.clone(), serde_json::Value::from(w)))
            .collect();
        Ok(serde_json::Value::Object(map))
    }

    /// Inverse of [`ClassWeights::to_json`]; every name must be present.
    pub fn from_json(value: &serde_json::Value, class_names: &[String]) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::InvalidArgument("class weights must be a JSON object".into()))?;
        if map.len() != class_names.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} classes",
                map.len(),
                class_names.len()
            )));
        }
        let weights = class_names
            .iter()
            .map(|n| {
                map.get(n)
                    .and_then(serde_json::Value::as_f64)
                    .ok_or_else(|| Error::InvalidArgument(format!("missing weight for class {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights)
    }
}

/// Inverse-log-frequency weights `w_c = 1 / ln(1.02 + count_c / total)`.
///
/// `counts[i]` is the pixel count of class `i + 1`. Absent classes get the
/// ceiling weight `1 / ln(1.02)`.
pub fn class_weights_from_counts(counts: &[u64]) -> Result<ClassWeights> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("class counts sum to zero".into()));
    }
    let total = total as f64;
    ClassWeights::new(
        counts
            .iter()
            .map(|&c| 1.0 / (WEIGHT_OFFSET + c as f64 / total).ln())
            .collect(),
    )
}

/// Binary positive-class weight `ω = (N − Σp) / Σp` over `N` predictions.
pub fn omega_weight(predictions: &[f64]) -> Result<f64> {
    let sum: f64 = predictions.iter().sum();
    if sum == 0.0 {
        return Err(Error::InvalidArgument("sum of predictions is zero".into()));
    }
    Ok((predictions.len() as f64 - sum) / sum)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub valid_pixels: usize,
    /// Normalizer of the mean: the summed class weight for weighted
    /// cross-entropy, the valid pixel count otherwise. Batch losses combine
    /// as a mean weighted by this.
    pub weight_mass: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: LossValue,
    pub grad: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum LossKind {
    #[default]
    WeightedXent,
    Focal { gamma: f64 },
    Dice { eps: f64 },
    XentPlusDice { eps: f64 },
}


impl LossKind {
    pub fn compute<T: Scalar>(&self, logits: &Tensor<T>, labels: &[u8], weights: &ClassWeights) -> Result<LossOutput<T>> {
        match *self {
            LossKind::WeightedXent => weighted_cross_entropy(logits, labels, weights),
            LossKind::Focal { gamma } => focal_loss(logits, labels, gamma),
            LossKind::Dice { eps } => dice_loss(logits, labels, eps),
            LossKind::XentPlusDice { eps } => {
                let mut xent = weighted_cross_entropy(logits, labels, weights)?;
                let dice = dice_loss(logits, labels, eps)?;
                xent.loss.value += dice.loss.value;
                xent.grad.add_assign(&dice.grad);
                Ok(xent)
            }
        }
    }
}

struct Layout {
    batch: usize,
    classes: usize,
    pixels: usize,
}

impl Layout {
    fn logit(&self, b: usize, j: usize, px: usize) -> usize {
        (b * self.classes + j) * self.pixels + px
    }
}

fn layout<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<Layout> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.len() != b * h * w {
        return Err(Error::shape(
            "loss",
            format!("{} labels for logits {:?}", labels.len(), logits.shape()),
        ));
    }
    if let Some(i) = labels.iter().position(|&l| l as usize > k) {
        let px = i % (h * w);
        return Err(Error::LabelOutOfRange {
            value: labels[i],
            max: k,
            row: px / w,
            col: px % w,
        });
    }
    if labels.iter().all(|&l| l == IGNORE) {
        return Err(Error::NoValidPixels);
    }
    Ok(Layout {
        batch: b,
        classes: k,
        pixels: h * w,
    })
}

/// Log-softmax of the logits at one pixel, written into `out`.
fn log_softmax_at<T: Scalar>(logits: &Tensor<T>, l: &Layout, b: usize, px: usize, out: &mut [f64]) {
    let x = logits.data();
    let mut m = f64::NEG_INFINITY;
    for (j, o) in out.iter_mut().enumerate() {
        *o = x[l.logit(b, j, px)].as_f64();
        m = m.max(*o);
    }
    let lse = m + out.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

/// Visits every valid pixel with `(batch, pixel, class, log_softmax)`.
fn for_each_valid<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    l: &Layout,
    mut f: impl FnMut(usize, usize, u8, &[f64]),
) {
    let mut logp = vec![0.0; l.classes];
    for b in 0..l.batch {
        for px in 0..l.pixels {
            let c = labels[b * l.pixels + px];
            if c == IGNORE {
                continue;
            }
            log_softmax_at(logits, l, b, px, &mut logp);
            f(b, px, c, &logp);
        }
    }
}

fn scale_grad<T: Scalar>(grad: Vec<f64>, shape: &[usize], norm: f64) -> Tensor<T> {
    let data = grad.into_iter().map(|g| T::lit(g / norm)).collect();
    Tensor::new(shape.to_vec(), data).expect("logit-shaped gradient")
}

/// Cross-entropy weighted per true class, normalized by the summed weight
/// of the valid pixels.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    weights: &ClassWeights,
) -> Result<LossOutput<T>> {
    let l = layout(logits, labels)?;
    if weights.num_classes() != l.classes {
        return Err(Error::InvalidArgument(format!(
            "{} class weights for {} logit channels",
            weights.num_classes(),
            l.classes
        )));
    }
    // Equal weights cancel between numerator and normalizer.
    let uniform = weights.is_uniform();
    let mut total = 0.0;
    let mut mass = 0.0;
    let mut count = 0;
    let mut grad = vec![0.0; logits.numel()];
    for_each_valid(logits, labels, &l, |b, px, c, logp| {
        let w = if uniform { 1.0 } else { weights.weight(c) };
        total += w * -logp[c as usize - 1];
        mass += w;
        count += 1;
        for (j, &lp) in logp.iter().enumerate() {
            let target = if j == c as usize - 1 { 1.0 } else { 0.0 };
            grad[l.logit(b, j, px)] = w * (lp.exp() - target);
        }
    });
    Ok(LossOutput {
        loss: LossValue {
            value: total / mass,
            valid_pixels: count,
            weight_mass: mass,
        },
        grad: scale_grad(grad, logits.shape(), mass),
    })
}

/// Unweighted mean cross-entropy over valid pixels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<LossOutput<T>> {
    let k = logits.shape().get(1).copied().unwrap_or(0);
    weighted_cross_entropy(logits, labels, &ClassWeights::uniform(k))
}

/// `−(1 − p_t)^γ · log p_t`, averaged over valid pixels.
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], gamma: f64) -> Result<LossOutput<T>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("focal gamma must be ≥ 0, got {gamma}")));
    }
    let l = layout(logits, labels)?;
    let mut total = 0.0;
    let mut mass = 0.0;
    let mut count = 0;
    let mut grad = vec![0.0; logits.numel()];
    for_each_valid(logits, labels, &l, |b, px, c, logp| {
        let t = c as usize - 1;
        let log_pt = logp[t];
        let pt = log_pt.exp();
        let one_minus = -log_pt.exp_m1();
        let modulation = one_minus.powf(gamma);
        total += modulation * -log_pt;
        mass += 1.0;
        count += 1;
        // d/dp_t of −(1−p)^γ log p, times p_t (chain through softmax).
        let curvature = if gamma == 0.0 || one_minus <= 0.0 {
            0.0
        } else {
            gamma * one_minus.powf(gamma - 1.0) * pt * log_pt
        };
        let factor = curvature - modulation;
        for (j, &lp) in logp.iter().enumerate() {
            let target = if j == t { 1.0 } else { 0.0 };
            grad[l.logit(b, j, px)] = factor * (target - lp.exp());
        }
    });
    Ok(LossOutput {
        loss: LossValue {
            value: total / mass,
            valid_pixels: count,
            weight_mass: mass,
        },
        grad: scale_grad(grad, logits.shape(), mass),
    })
}

/// Soft Dice loss averaged over the classes present among valid labels:
/// `d_c = 1 − (2Σp·y + ε) / (Σp + Σy + ε)`.
pub fn dice_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], eps: f64) -> Result<LossOutput<T>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("dice epsilon must be > 0, got {eps}")));
    }
    let l = layout(logits, labels)?;
    let k = l.classes;
    let mut inter = vec![0.0; k];
    let mut pred = vec![0.0; k];
    let mut truth = vec![0.0; k];
    let mut count = 0;
    for_each_valid(logits, labels, &l, |_, _, c, logp| {
        let t = c as usize - 1;
        for (j, &lp) in logp.iter().enumerate() {
            pred[j] += lp.exp();
        }
        inter[t] += logp[t].exp();
        truth[t] += 1.0;
        count += 1;
    });
    let present: Vec<usize> = (0..k).filter(|&j| truth[j] > 0.0).collect();
    let n_present = present.len() as f64;
    let denom: Vec<f64> = (0..k).map(|j| pred[j] + truth[j] + eps).collect();
    let value = present
        .iter()
        .map(|&j| 1.0 - (2.0 * inter[j] + eps) / denom[j])
        .sum::<f64>()
        / n_present;

    // ∂L/∂p_{n,j} for present classes, then through the pixel softmax.
    let mut grad = vec![0.0; logits.numel()];
    let mut dp = vec![0.0; k];
    for_each_valid(logits, labels, &l, |b, px, c, logp| {
        let t = c as usize - 1;
        for (j, d) in dp.iter_mut().enumerate() {
            *d = if truth[j] > 0.0 {
                let y = if j == t { 1.0 } else { 0.0 };
                -(2.0 * y * denom[j] - (2.0 * inter[j] + eps)) / (denom[j] * denom[j] * n_present)
            } else {
                0.0
            };
        }
        let dot: f64 = logp.iter().zip(&dp).map(|(lp, d)| lp.exp() * d).sum();
        for (j, &lp) in logp.iter().enumerate() {
            grad[l.logit(b, j, px)] = lp.exp() * (dp[j] - dot);
        }
    });
    Ok(LossOutput {
        loss: LossValue {
            value,
            valid_pixels: count,
            weight_mass: count as f64,
        },
        grad: scale_grad(grad, logits.shape(), 1.0),
    })
}
