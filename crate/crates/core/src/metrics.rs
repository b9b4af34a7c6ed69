//! Per-image segmentation quality: Dice similarity, sensitivity, and
//! specificity (all as percentages), plus the CSV report they are
//! collected into.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Pixel-level confusion counts for one image (foreground = positive).
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// The three per-image scores, in percent.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Threshold a probability plane into a boolean mask. A probability equal
/// to the threshold counts as foreground.
pub fn binarize<T: Scalar>(probs: &[T], threshold: T) -> Result<Vec<bool>> {
    if !(threshold >= T::zero() && threshold <= T::one()) {
        return Err(Error::Validation(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    if let Some(bad) = probs.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "probabilities must be finite, found {bad}"
        )));
    }
    Ok(probs.iter().map(|&p| p >= threshold).collect())
}

/// Count the confusion matrix between a predicted and a reference mask.
pub fn confusion(pred: &[bool], reference: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, reference has {}",
            pred.len(),
            reference.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Validation("masks must not be empty".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &r) in pred.iter().zip(reference) {
        match (p, r) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Scores from confusion counts. When a class is absent from the
/// reference, the affected score is 100 if the prediction agrees the
/// class is absent and 0 otherwise:
/// * no foreground anywhere -> DSC 100; foreground predicted where the
///   reference has none still scores DSC 0 through the formula;
/// * sensitivity with an empty reference foreground: 100 iff `fp == 0`;
/// * specificity with an empty reference background: 100 iff `fn == 0`.
pub fn metrics_from_counts(c: &ConfusionCounts) -> ImageMetrics {
    let dsc = if 2 * c.tp + c.fp + c.fn_ == 0 {
        100.0
    } else {
        100.0 * (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    let sensitivity = if c.tp + c.fn_ == 0 {
        if c.fp == 0 {
            100.0
        } else {
            0.0
        }
    } else {
        100.0 * c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let specificity = if c.tn + c.fp == 0 {
        if c.fn_ == 0 {
            100.0
        } else {
            0.0
        }
    } else {
        100.0 * c.tn as f64 / (c.tn + c.fp) as f64
    };
    ImageMetrics {
        dsc,
        sensitivity,
        specificity,
    }
}

/// Convenience: confusion + scores in one call.
pub fn segmentation_metrics(pred: &[bool], reference: &[bool]) -> Result<ImageMetrics> {
    Ok(metrics_from_counts(&confusion(pred, reference)?))
}

/// Mean and sample standard deviation (n-1; zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-image metrics for a whole evaluation split.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    rows: Vec<(String, ImageMetrics)>,
}

impl MetricsReport {
    pub fn new(rows: Vec<(String, ImageMetrics)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("metrics report needs at least one row".into()));
        }
        Ok(MetricsReport { rows })
    }

    pub fn rows(&self) -> &[(String, ImageMetrics)] {
        &self.rows
    }

    pub fn dsc_values(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, m)| m.dsc).collect()
    }

    pub fn sensitivity_values(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, m)| m.sensitivity).collect()
    }

    pub fn specificity_values(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, m)| m.specificity).collect()
    }

    /// `((dsc mean, sd), (sens mean, sd), (spec mean, sd))`.
    pub fn aggregates(&self) -> ((f64, f64), (f64, f64), (f64, f64)) {
        (
            mean_sd(&self.dsc_values()),
            mean_sd(&self.sensitivity_values()),
            mean_sd(&self.specificity_values()),
        )
    }

    /// Render as CSV: a header, one row per image, and an `aggregate`
    /// footer with mean and standard deviation per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dsc,sensitivity,specificity\n");
        for (id, m) in &self.rows {
            out.push_str(&format!(
                "{id},{:.4},{:.4},{:.4}\n",
                m.dsc, m.sensitivity, m.specificity
            ));
        }
        let ((dm, ds), (sm, ss), (pm, ps)) = self.aggregates();
        out.push_str(&format!(
            "aggregate,{dm:.4},{ds:.4},{sm:.4},{ss:.4},{pm:.4},{ps:.4}\n"
        ));
        out
    }
}
