//! Smoothed Dice loss and the four confusion-matrix evaluation metrics.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct DiceConfig {
    pub lambda: f32,
    pub threshold: f32,
}

impl Default for DiceConfig {
    fn default() -> Self {
        DiceConfig {
            lambda: 1.0,
            threshold: 0.5,
        }
    }
}

impl DiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::Config("dice lambda must be > 0".into()));
        }
        if self.threshold <= 0.0 || self.threshold >= 1.0 {
            return Err(Error::Config("threshold must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// 1 - (2 sum(pred*target) + lambda) / (sum(pred) + sum(target) + lambda),
/// summed over the whole batch, differentiable with respect to `pred`.
pub fn dice_loss(pred: &Tensor, target: &Tensor, lambda: f32) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            axis: "batch",
            expected: pred.shape()[0],
            got: target.shape()[0],
        });
    }
    let intersection = tensor::sum_all(&tensor::mul(pred, target)?);
    let pred_sum = tensor::sum_all(pred);
    let target_sum = tensor::sum_all(target);
    let numerator = tensor::affine(&intersection, 2.0, lambda);
    let denominator = tensor::affine(&tensor::add(&pred_sum, &target_sum)?, 1.0, lambda);
    Ok(tensor::affine(
        &tensor::div(&numerator, &denominator)?,
        -1.0,
        1.0,
    ))
}

/// Binarize at `t`: pixel >= t maps to 1.
pub fn threshold(pred: &Tensor, t: f32) -> Result<Tensor> {
    if t <= 0.0 || t >= 1.0 {
        return Err(Error::InvalidArg {
            op: "threshold",
            msg: format!("cutoff {t} must lie in (0,1)"),
        });
    }
    let data = pred
        .data()
        .iter()
        .map(|v| if *v >= t { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion_counts(pred_bin: &Tensor, target: &Tensor) -> Result<ConfusionCounts> {
    if pred_bin.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "confusion_counts",
            axis: "batch",
            expected: pred_bin.shape()[0],
            got: target.shape()[0],
        });
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (p, t) in pred_bin.data().iter().zip(target.data().iter()) {
        if (*p != 0.0 && *p != 1.0) || (*t != 0.0 && *t != 1.0) {
            return Err(Error::InvalidArg {
                op: "confusion_counts",
                msg: format!("non-binary value (pred {p}, target {t})"),
            });
        }
        match (*p == 1.0, *t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Zero-denominator convention: an empty target scored against an empty
/// prediction is perfect (1); against a nonempty prediction it is 0, and
/// symmetrically for precision.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: u64, den: u64, other_errors: u64| -> f64 {
        if den == 0 {
            if other_errors == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    Metrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 0),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, 0),
        recall: ratio(c.tp, c.tp + c.fn_, c.fp),
        precision: ratio(c.tp, c.tp + c.fp, c.fn_),
    }
}

/// Dataset-level scores are means of per-image scores.
pub fn mean_metrics(per_image: &[Metrics]) -> Metrics {
    let n = per_image.len().max(1) as f64;
    Metrics {
        dsc: per_image.iter().map(|m| m.dsc).sum::<f64>() / n,
        iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
        recall: per_image.iter().map(|m| m.recall).sum::<f64>() / n,
        precision: per_image.iter().map(|m| m.precision).sum::<f64>() / n,
    }
}

impl Metrics {
    /// Percentages with two decimals.
    pub fn as_percent_row(&self) -> String {
        format!(
            "{:.2}\t{:.2}\t{:.2}\t{:.2}",
            self.dsc * 100.0,
            self.iou * 100.0,
            self.recall * 100.0,
            self.precision * 100.0
        )
    }
}
