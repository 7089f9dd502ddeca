//! Exhaustive Otsu: try every cut between consecutive distinct values.

pub struct Exhaustive {
    pub bits: Vec<u8>,
    /// Best and runner-up between-class variances (0 when there is no cut).
    pub best: f64,
    pub runner_up: f64,
}

impl Exhaustive {
    /// Whether the best cut wins by a margin no rounding can close.
    pub fn is_clear(&self) -> bool {
        self.best - self.runner_up > 1e-9 * self.best.max(1e-300)
    }
}

pub fn exhaustive_otsu(values: &[f64]) -> Exhaustive {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let n = values.len() as f64;
    let mut scores: Vec<(f64, f64)> = distinct[..distinct.len().saturating_sub(1)]
        .iter()
        .map(|&cut| {
            let low: Vec<f64> = values.iter().copied().filter(|&v| v <= cut).collect();
            let high: Vec<f64> = values.iter().copied().filter(|&v| v > cut).collect();
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let (w0, w1) = (low.len() as f64 / n, high.len() as f64 / n);
            let d = mean(&low) - mean(&high);
            (w0 * w1 * d * d, cut)
        })
        .collect();
    let Some(&(best, cut)) = scores
        .iter()
        .fold(None, |acc: Option<&(f64, f64)>, s| match acc {
            Some(a) if a.0 >= s.0 => Some(a),
            _ => Some(s),
        })
    else {
        return Exhaustive {
            bits: vec![0; values.len()],
            best: 0.0,
            runner_up: 0.0,
        };
    };
    scores.sort_by(|a, b| b.0.total_cmp(&a.0));
    Exhaustive {
        bits: values.iter().map(|&v| (v > cut) as u8).collect(),
        best,
        runner_up: scores.get(1).map_or(0.0, |s| s.0),
    }
}

/// Between-class variance of an arbitrary 0/1 partition.
pub fn between_class_variance(values: &[f64], bits: &[u8]) -> f64 {
    let n = values.len() as f64;
    let pick = |b: u8| -> Vec<f64> {
        values.iter().zip(bits).filter(|(_, &x)| x == b).map(|(&v, _)| v).collect()
    };
    let (low, high) = (pick(0), pick(1));
    if low.is_empty() || high.is_empty() {
        return 0.0;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let d = mean(&low) - mean(&high);
    (low.len() as f64 / n) * (high.len() as f64 / n) * d * d
}
