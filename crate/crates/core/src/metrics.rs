//! Evaluation quantities: accuracy, confusion-matrix estimation error,
//! annotator skill, majority vote, and the empirical prediction-confusion
//! matrix.

use serde::{Deserialize, Serialize};

use crate::annotator_sim::ConfusionMatrix;
use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

/// Mean over annotators of the summed squared elementwise differences,
/// divided by the class count:
///   (1 / (R * L)) * sum_r sum_{i,j} (a_{ij} - a_hat_{ij})^2
/// Squared differences, no square root.
pub fn cm_error(truth: &[ConfusionMatrix], estimate: &[ConfusionMatrix]) -> Result<f64> {
    if truth.is_empty() || truth.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "cm_error: {} true matrices vs {} estimates",
            truth.len(),
            estimate.len()
        )));
    }
    let l = truth[0].num_classes();
    let mut total = 0.0;
    for (a, b) in truth.iter().zip(estimate) {
        if a.num_classes() != l || b.num_classes() != l {
            return Err(Error::invalid(
                "cm_error: matrices disagree on class count",
            ));
        }
        total += a
            .matrix()
            .data()
            .iter()
            .zip(b.matrix().data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(total / (truth.len() as f64 * l as f64))
}

/// Mean diagonal of the CM: 1 for a perfect annotator, 1/L for a uniform one.
pub fn skill_level(cm: &ConfusionMatrix) -> f64 {
    cm.trace() / cm.num_classes() as f64
}

/// Modal non-missing label; ties go to the lowest class index.
pub fn majority_vote(labels: &[Option<usize>], num_classes: usize) -> Result<usize> {
    let mut counts = vec![0usize; num_classes];
    let mut any = false;
    for &l in labels.iter().flatten() {
        if l >= num_classes {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        counts[l] += 1;
        any = true;
    }
    if !any {
        return Err(Error::invalid("majority vote over all-missing labels"));
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Fraction of predictions equal to ground truth.
pub fn accuracy(predictions: &[usize], gt: &[usize]) -> Result<f64> {
    if predictions.len() != gt.len() || gt.is_empty() {
        return Err(Error::invalid(format!(
            "accuracy: {} predictions vs {} labels",
            predictions.len(),
            gt.len()
        )));
    }
    let hits = predictions.iter().zip(gt).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Empirical prediction-confusion matrix: entry (j, i) is the fraction of
/// class-i examples predicted as j. Every class must appear in `gt`.
pub fn compute_prediction_confusion(
    predictions: &[usize],
    gt: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if predictions.len() != gt.len() || gt.is_empty() {
        return Err(Error::invalid(format!(
            "prediction confusion: {} predictions vs {} labels",
            predictions.len(),
            gt.len()
        )));
    }
    let mut counts = DenseMatrix::zeros(num_classes, num_classes);
    let mut per_class = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(gt) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::invalid(format!(
                "class out of range: prediction {p}, label {y}, L={num_classes}"
            )));
        }
        counts.set(p, y, counts.get(p, y) + 1.0);
        per_class[y] += 1;
    }
    if let Some(absent) = per_class.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "class {absent} absent from ground truth; confusion column undefined"
        )));
    }
    ConfusionMatrix::new(DenseMatrix::from_fn(num_classes, num_classes, |j, i| {
        counts.get(j, i) / per_class[i] as f64
    }))
}

pub const EVAL_REPORT_SCHEMA_VERSION: u32 = 1;

/// Flat evaluation summary for one trained model on one simulated population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub accuracy: f64,
    pub cm_error: f64,
    /// (true skill, estimated skill) per annotator, index-aligned.
    pub annotator_skills: Vec<(f64, f64)>,
    pub mean_cm_dominant: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report parse: {e}")))
    }
}
