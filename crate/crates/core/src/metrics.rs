//! Confusion-matrix based segmentation scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::IGNORE;
use crate::tensor::{Scalar, Tensor};

/// `K×K` counts; entry `(i, j)` holds pixels of true class `i + 1`
/// predicted as class `j + 1`. Ignored pixels are never counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Accumulates a label raster and a same-length prediction raster.
    pub fn from_labels(labels: &[u8], predictions: &[u8], classes: usize) -> Result<Self> {
        let mut cm = Self::new(classes);
        cm.accumulate(labels, predictions)?;
        Ok(cm)
    }

    pub fn accumulate(&mut self, labels: &[u8], predictions: &[u8]) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} labels vs {} predictions", labels.len(), predictions.len()),
            ));
        }
        let k = self.classes;
        if let Some(&p) = predictions.iter().find(|&&p| p == 0 || p as usize > k) {
            return Err(Error::InvalidArgument(format!("prediction {p} outside 1..={k}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize > k) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..={k}")));
        }
        for (&l, &p) in labels.iter().zip(predictions) {
            if l != IGNORE {
                self.counts[(l as usize - 1) * k + p as usize - 1] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum; the result is independent of merge order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "confusion_matrix",
                format!("cannot merge {} with {} classes", other.classes, self.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count for true class `truth` and predicted class `pred`, both 1-based.
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[(truth - 1) * self.classes + pred - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i * self.classes + i]).sum()
    }

    /// Per class `(tp, fp, fn)`, 0-based.
    fn outcomes(&self, c: usize) -> (u64, u64, u64) {
        let k = self.classes;
        let tp = self.counts[c * k + c];
        let row: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
        let col: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
        (tp, col - tp, row - tp)
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::Empty("confusion matrix".into()))
        } else {
            Ok(())
        }
    }

    pub fn to_csv(&self) -> String {
        let k = self.classes;
        let mut out = String::from("truth\\pred");
        for j in 1..=k {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for i in 0..k {
            out.push_str(&(i + 1).to_string());
            for j in 0..k {
                out.push_str(&format!(",{}", self.counts[i * k + j]));
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    Micro,
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Per-class scores with 0/0 defined as 0.
pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.classes)
        .map(|c| {
            let (tp, fp, fn_) = cm.outcomes(c);
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassScores {
                support: tp + fn_,
                precision,
                recall,
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
                iou: ratio(tp, tp + fp + fn_),
            }
        })
        .collect()
}

pub fn precision_recall_f1(cm: &ConfusionMatrix, averaging: Averaging) -> Result<Prf> {
    cm.nonempty()?;
    let scores = per_class(cm);
    let supported: Vec<&ClassScores> = scores.iter().filter(|s| s.support > 0).collect();
    Ok(match averaging {
        Averaging::Micro => {
            // Every valid pixel is exactly one TP or one (FP, FN) pair.
            let (tp, total) = (cm.trace(), cm.total());
            Prf {
                precision: ratio(tp, total),
                recall: ratio(tp, total),
                f1: ratio(2 * tp, 2 * total),
            }
        }
        Averaging::Macro => {
            let n = supported.len() as f64;
            Prf {
                precision: supported.iter().map(|s| s.precision).sum::<f64>() / n,
                recall: supported.iter().map(|s| s.recall).sum::<f64>() / n,
                f1: supported.iter().map(|s| s.f1).sum::<f64>() / n,
            }
        }
        Averaging::Weighted => {
            // Each term is support·num/den with the product taken in integers,
            // so the recall terms are exactly tp and weighted recall equals
            // micro recall bitwise.
            let total = cm.total() as f64;
            let avg = |f: fn(u64, u64, u64) -> (u64, u64)| {
                (0..cm.classes)
                    .map(|c| {
                        let (tp, fp, fn_) = cm.outcomes(c);
                        let (num, den) = f(tp, fp, fn_);
                        ratio(num * (tp + fn_), den)
                    })
                    .sum::<f64>()
                    / total
            };
            Prf {
                precision: avg(|tp, fp, _| (tp, tp + fp)),
                recall: avg(|tp, _, fn_| (tp, tp + fn_)),
                f1: avg(|tp, fp, fn_| (2 * tp, 2 * tp + fp + fn_)),
            }
        }
    })
}

/// Mean IoU over classes that occur in the labels or the predictions.
pub fn iou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..cm.classes {
        let (tp, fp, fn_) = cm.outcomes(c);
        if tp + fp + fn_ > 0 {
            sum += ratio(tp, tp + fp + fn_);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

pub fn subset_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    Ok(ratio(cm.trace(), cm.total()))
}

/// Per-pixel argmax over the class axis of `B×K×H×W` logits, as 1-based
/// class labels. Ties go to the lowest class index.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (b, k, h, w) = logits.dims4()?;
    if k > u8::MAX as usize {
        return Err(Error::shape("argmax", format!("{k} classes do not fit in u8 labels")));
    }
    let hw = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for px in 0..hw {
            let mut best = 0;
            for j in 1..k {
                if x[(bi * k + j) * hw + px] > x[(bi * k + best) * hw + px] {
                    best = j;
                }
            }
            out.push(best as u8 + 1);
        }
    }
    Ok(out)
}

/// The eleven reported scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_precision: f64,
    pub micro_precision: f64,
    pub weighted_precision: f64,
    pub macro_recall: f64,
    pub micro_recall: f64,
    pub weighted_recall: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub weighted_f1: f64,
    pub subset_accuracy: f64,
    pub iou: f64,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let ma = precision_recall_f1(cm, Averaging::Macro)?;
        let mi = precision_recall_f1(cm, Averaging::Micro)?;
        let we = precision_recall_f1(cm, Averaging::Weighted)?;
        Ok(MetricReport {
            macro_precision: ma.precision,
            micro_precision: mi.precision,
            weighted_precision: we.precision,
            macro_recall: ma.recall,
            micro_recall: mi.recall,
            weighted_recall: we.recall,
            macro_f1: ma.f1,
            micro_f1: mi.f1,
            weighted_f1: we.f1,
            subset_accuracy: subset_accuracy(cm)?,
            iou: iou(cm)?,
        })
    }

    pub fn rows(&self) -> [(&'static str, f64); 11] {
        [
            ("macro_precision", self.macro_precision),
            ("micro_precision", self.micro_precision),
            ("weighted_precision", self.weighted_precision),
            ("macro_recall", self.macro_recall),
            ("micro_recall", self.micro_recall),
            ("weighted_recall", self.weighted_recall),
            ("macro_f1", self.macro_f1),
            ("micro_f1", self.micro_f1),
            ("weighted_f1", self.weighted_f1),
            ("subset_accuracy", self.subset_accuracy),
            ("iou", self.iou),
        ]
    }

    /// One `metric,value` row per score.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.rows() {
            out.push_str(&format!("{name},{v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example() -> ConfusionMatrix {
        ConfusionMatrix::from_labels(&[1, 1, 2, 2], &[1, 2, 2, 2], 2).unwrap()
    }

    #[test]
    fn worked_example_scores() {
        let cm = worked_example();
        let pc = per_class(&cm);
        assert_eq!((pc[0].precision, pc[0].recall), (1.0, 0.5));
        assert_eq!((pc[1].precision, pc[1].recall), (2.0 / 3.0, 1.0));
        let ma = precision_recall_f1(&cm, Averaging::Macro).unwrap();
        assert!((ma.f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        let mi = precision_recall_f1(&cm, Averaging::Micro).unwrap();
        assert_eq!(mi.f1, 0.75);
        assert!((iou(&cm).unwrap() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(subset_accuracy(&cm).unwrap(), 0.75);
    }

    #[test]
    fn ignored_pixels_are_not_counted() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 0], &[1, 2, 1], 2).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(iou(&cm), Err(Error::Empty(_))));
        assert!(precision_recall_f1(&cm, Averaging::Macro).is_err());
        assert!(subset_accuracy(&cm).is_err());
    }

    #[test]
    fn out_of_range_prediction_is_rejected() {
        assert!(ConfusionMatrix::from_labels(&[1], &[3], 2).is_err());
        assert!(ConfusionMatrix::from_labels(&[1], &[0], 2).is_err());
    }

    #[test]
    fn swapped_classes_score_zero_iou() {
        let cm = ConfusionMatrix::from_labels(&[1, 2, 1, 2], &[2, 1, 2, 1], 2).unwrap();
        assert_eq!(iou(&cm).unwrap(), 0.0);
    }

    #[test]
    fn single_class_macro_equals_weighted() {
        let cm = ConfusionMatrix::from_labels(&[2, 2, 2, 2], &[2, 1, 2, 2], 3).unwrap();
        let ma = precision_recall_f1(&cm, Averaging::Macro).unwrap();
        let we = precision_recall_f1(&cm, Averaging::Weighted).unwrap();
        assert_eq!(ma, we);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let z = Tensor::new(vec![1, 3, 1, 2], vec![1.0f32, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes(&z).unwrap(), vec![1, 2]);
    }

    #[test]
    fn csv_layouts() {
        let cm = worked_example();
        assert_eq!(cm.to_csv(), "truth\\pred,1,2\n1,1,1\n2,0,2\n");
        let report = MetricReport::from_confusion(&cm).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.contains("subset_accuracy,0.75\n"));
    }
}
