//! Evaluation metrics and the `mean±std` report format.

use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;

/// Support-weighted mean of per-class F1.
///
/// Per-class F1 is `2PR/(P+R)`, taken as 0 when `P+R = 0`. Classes that never
/// occur in `labels` carry zero weight.
pub fn weighted_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("weighted F1 of an empty set".into()));
    }
    if let Some(bad) = predictions
        .iter()
        .chain(labels)
        .find(|&&c| c >= NUM_CLASSES)
    {
        return Err(Error::Argument(format!("class {bad} outside 0..{NUM_CLASSES}")));
    }

    let mut tp = [0usize; NUM_CLASSES];
    let mut pred_count = [0usize; NUM_CLASSES];
    let mut support = [0usize; NUM_CLASSES];
    for (&p, &y) in predictions.iter().zip(labels) {
        pred_count[p] += 1;
        support[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }

    let mut total = 0.0;
    for c in 0..NUM_CLASSES {
        if support[c] == 0 {
            continue;
        }
        let precision = if pred_count[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / pred_count[c] as f64
        };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        total += support[c] as f64 * f1;
    }
    Ok(total / labels.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Formats fractional scores as percent `mean±std` with two decimals.
pub fn format_mean_std_pct(scores: &[f64]) -> String {
    let (mean, std) = mean_std(scores);
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}
