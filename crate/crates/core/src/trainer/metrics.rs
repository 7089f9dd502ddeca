//! Ensembling and the evaluation table.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{argmax_label, Prediction, NUM_CLASSES};
use crate::AD;

/// Combines per-model predictions sample by sample: probabilities are summed
/// in ascending order (so the result does not depend on model order) and
/// divided by the number of models. Time activations come from the first
/// model.
fn combine(models: &[&[Prediction]]) -> Result<Vec<Prediction>> {
    let Some(first) = models.first() else {
        return Err(Error::Argument("no predictions to combine".into()));
    };
    if let Some(m) = models.iter().find(|m| m.len() != first.len()) {
        return Err(Error::Shape(format!(
            "prediction lists of length {} and {} cannot be combined",
            first.len(),
            m.len()
        )));
    }
    let k = models.len() as f64;
    Ok((0..first.len())
        .map(|s| {
            let mut probs = [0.0; NUM_CLASSES];
            for (c, p) in probs.iter_mut().enumerate() {
                let mut v: Vec<f64> = models.iter().map(|m| m[s].probs[c]).collect();
                v.sort_by(f64::total_cmp);
                *p = v.iter().sum::<f64>() / k;
            }
            Prediction {
                label: argmax_label(&probs),
                probs,
                time_activations: first[s].time_activations.clone(),
            }
        })
        .collect())
}

/// M1+2: the mean of two models' probabilities.
pub fn ensemble_average(m1: &[Prediction], m2: &[Prediction]) -> Result<Vec<Prediction>> {
    combine(&[m1, m2])
}

/// M1+2+3: the sum of three models' probabilities, reported divided by 3.
pub fn ensemble_sum(m1: &[Prediction], m2: &[Prediction], m3: &[Prediction]) -> Result<Vec<Prediction>> {
    combine(&[m1, m2, m3])
}

/// One model passes through; two are averaged; three are summed.
pub fn ensemble(models: &[&[Prediction]]) -> Result<Vec<Prediction>> {
    match models {
        [m] => Ok(m.to_vec()),
        [a, b] => ensemble_average(a, b),
        [a, b, c] => ensemble_sum(a, b, c),
        _ => Err(Error::Argument(format!(
            "ensembles take 1 to 3 models, got {}",
            models.len()
        ))),
    }
}

/// Confusion counts with AD as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with the other class taken as positive.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

pub fn confusion(predicted: &[usize], truth: &[usize]) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(Error::Argument(format!("labels must be 0 or 1, got {p} and {t}")));
        }
        match (p == AD, t == AD) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision, recall and F1 for one class taken as positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any of the three hit a zero denominator and was reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Indexed by class: `[non-AD, AD]`.
    pub classes: [ClassMetrics; NUM_CLASSES],
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall).0
}

fn class_metrics(c: &ConfusionCounts) -> ClassMetrics {
    let (precision, dp) = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let (recall, dr) = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    let (f1, df) = ratio(2.0 * precision * recall, precision + recall);
    ClassMetrics {
        precision,
        recall,
        f1,
        degenerate: dp || dr || df,
    }
}

pub fn metrics(counts: &ConfusionCounts) -> Metrics {
    let (accuracy, _) = ratio((counts.tp + counts.tn) as f64, counts.total() as f64);
    Metrics {
        accuracy,
        classes: [class_metrics(&counts.swapped()), class_metrics(counts)],
    }
}
