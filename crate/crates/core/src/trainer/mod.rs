//! Two-fold training, epoch selection, ensembling and evaluation.
//!
//! The five models are built from three training runs: M1 trains on fold A and
//! selects its epoch on fold B, M2 does the reverse, M3 trains on everything
//! and keeps the epoch with the lowest training loss. M1+2 averages the
//! probabilities of M1 and M2; M1+2+3 sums all three.

mod manifest;
mod metrics;

use std::borrow::Cow;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{split_two_fold, DatasetManifest, Fold, ManifestEntry, Sample, TwoFold};
pub use metrics::{
    confusion, ensemble, ensemble_average, ensemble_sum, f1_score, metrics, ClassMetrics,
    ConfusionCounts, Metrics,
};

use crate::dsp::FeatureMap;
use crate::error::{Error, Result};
use crate::model::{pad_batch, FcnModel, Prediction};
use crate::nncore::ops::Mode;
use crate::nncore::{rmsprop_step, round_to_f32, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest validation accuracy among epochs at or after `converge_epoch`.
    MaxValAccuracy,
    /// Lowest training loss over all epochs.
    MinTrainLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub selection: Selection,
    pub augment_mask: bool,
    /// Inclusive range of mask lengths, in frames.
    pub mask_len_range: (usize, usize),
    /// First epoch (0-based) considered by `MaxValAccuracy`. Clamped to the
    /// last epoch when training is shorter.
    pub converge_epoch: usize,
    /// Mask padded columns inside the network instead of letting the zero
    /// padding flow through.
    pub masked_gap: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            max_epochs: 1000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            selection: Selection::MaxValAccuracy,
            augment_mask: false,
            mask_len_range: (200, 400),
            converge_epoch: 50,
            masked_gap: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        let (lo, hi) = self.mask_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "mask_len_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The model as it was at the end of `best_epoch`.
    pub model: FcnModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// The column span zeroed by one augmentation draw.
///
/// For `t` above the range's upper end the length is uniform over the range;
/// otherwise it is `t / 2`. The start is uniform over all positions that fit.
pub fn random_mask_span(t: usize, len_range: (usize, usize), rng: &mut impl Rng) -> Range<usize> {
    let len = if t > len_range.1 {
        rng.random_range(len_range.0..=len_range.1)
    } else {
        t / 2
    };
    let start = rng.random_range(0..=t - len);
    start..start + len
}

/// Zeroes one random contiguous span of columns.
pub fn random_mask_augment(
    map: &FeatureMap,
    len_range: (usize, usize),
    rng: &mut impl Rng,
) -> FeatureMap {
    let span = random_mask_span(map.t(), len_range, rng);
    let mut out = map.clone();
    for row in 0..map.p() {
        for col in span.clone() {
            out.set(row, col, 0.0);
        }
    }
    out
}

/// Batch-of-one inference over every sample.
pub fn predict_all(model: &FcnModel, samples: &[Sample], masked_gap: bool) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| model.predict_with(&s.map, masked_gap))
        .collect()
}

pub fn accuracy(predictions: &[Prediction], samples: &[Sample]) -> f64 {
    let hits = predictions
        .iter()
        .zip(samples)
        .filter(|(p, s)| p.label == s.label)
        .count();
    hits as f64 / samples.len().max(1) as f64
}

/// Trains `model` on `train_set`, returning the snapshot picked by
/// `cfg.selection` together with the full history.
///
/// Each epoch shuffles with a generator seeded by `seed + epoch`, so a run is
/// reproducible and augmentation masks move between epochs. The last partial
/// batch is kept. A non-finite loss, logit or updated parameter stops training
/// with [`Error::Diverged`].
pub fn train(
    mut model: FcnModel,
    train_set: &[Sample],
    val_set: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let val_set = match (cfg.selection, val_set) {
        (Selection::MaxValAccuracy, None) | (Selection::MaxValAccuracy, Some([])) => {
            return Err(Error::Argument(
                "max_val_accuracy selection needs a validation set".into(),
            ))
        }
        (_, v) => v.filter(|v| !v.is_empty()),
    };
    let first_eligible = match cfg.selection {
        Selection::MaxValAccuracy => cfg.converge_epoch.min(cfg.max_epochs - 1),
        Selection::MinTrainLoss => 0,
    };

    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, FcnModel)> = None;
    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let maps: Vec<Cow<FeatureMap>> = chunk
                .iter()
                .map(|&i| {
                    let m = &train_set[i].map;
                    if cfg.augment_mask {
                        Cow::Owned(random_mask_augment(m, cfg.mask_len_range, &mut rng))
                    } else {
                        Cow::Borrowed(m)
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].label).collect();
            let refs: Vec<&FeatureMap> = maps.iter().map(|m| m.as_ref()).collect();
            let (batch, valid) = pad_batch(&refs)?;

            let mut trace = model.forward_trace(&batch, &valid, Mode::Train, cfg.masked_gap, true)?;
            let loss = trace.tape.softmax_cross_entropy(trace.logits, &labels)?;
            let loss_value = trace.tape.value(loss).data()[0];
            let diverged = Error::Diverged {
                epoch,
                batch: batch_index,
            };
            // The probability floor keeps the loss finite even for infinite
            // logits, so those count as divergence too.
            if !loss_value.is_finite() || !trace.tape.value(trace.logits).is_finite() {
                return Err(diverged);
            }
            loss_sum += loss_value * chunk.len() as f64;
            if let Some(probs) = trace.tape.probs(loss) {
                for (row, &label) in probs.data().chunks(2).zip(&labels) {
                    hits += (crate::model::argmax_label(&[row[0], row[1]]) == label) as usize;
                }
            }

            let mut grads = trace.tape.backward(loss)?;
            for (param, &id) in model.parameters_mut().into_iter().zip(&trace.param_ids) {
                match grads.take(id) {
                    Some(g) => param.set_gradient(g)?,
                    None => param.zero_grad(),
                }
                rmsprop_step(param, &cfg.optimizer);
                round_to_f32(&mut param.value);
                if !param.value.is_finite() {
                    return Err(diverged);
                }
            }
            model.update_running_stats(&trace);
        }

        let n = train_set.len() as f64;
        let val_accuracy = match val_set {
            Some(v) => Some(accuracy(&predict_all(&model, v, cfg.masked_gap)?, v)),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: hits as f64 / n,
            val_accuracy,
        };
        if epoch >= first_eligible {
            // Higher is better for both keys after negating the loss.
            let key = match cfg.selection {
                Selection::MaxValAccuracy => record.val_accuracy.unwrap_or(0.0),
                Selection::MinTrainLoss => -record.train_loss,
            };
            if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
                best = Some((key, epoch, model.clone()));
            }
        }
        history.push(record);
    }

    let (_, best_epoch, model) = best.expect("the last epoch is always eligible");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes `epoch,train_loss,train_acc,val_acc`; `val_acc` is blank when there
/// was no validation set.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "train_loss", "train_acc", "val_acc"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            fmt_f64(r.train_loss),
            fmt_f64(r.train_accuracy),
            r.val_accuracy.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Schema(format!("{}: {s:?} is not a number", path.display())))
    };
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::Schema(format!("{}: expected 4 columns", path.display())));
            }
            Ok(EpochRecord {
                epoch: parse(&rec[0])? as usize,
                train_loss: parse(&rec[1])?,
                train_accuracy: parse(&rec[2])?,
                val_accuracy: match &rec[3] {
                    "" => None,
                    s => Some(parse(s)?),
                },
            })
        })
        .collect()
}

/// Writes `run_<name>_best.fcnw` (with its config sidecar) and
/// `run_<name>_history.csv` into `dir`, returning the weight path.
pub fn save_run(dir: impl AsRef<Path>, name: &str, outcome: &TrainOutcome) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let weights = dir.join(format!("run_{name}_best.fcnw"));
    outcome.model.save(&weights)?;
    write_history(dir.join(format!("run_{name}_history.csv")), &outcome.history)?;
    Ok(weights)
}

/// One of the three training runs behind the five models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    M1,
    M2,
    M3,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::M1 => "m1",
            Strategy::M2 => "m2",
            Strategy::M3 => "m3",
        }
    }

    /// Training and validation indices for this run, and its selection rule.
    pub fn plan(&self, folds: &TwoFold) -> (Vec<usize>, Option<Vec<usize>>, Selection) {
        match self {
            Strategy::M1 => (folds.a.clone(), Some(folds.b.clone()), Selection::MaxValAccuracy),
            Strategy::M2 => (folds.b.clone(), Some(folds.a.clone()), Selection::MaxValAccuracy),
            Strategy::M3 => {
                let mut all: Vec<usize> = folds.a.iter().chain(&folds.b).copied().collect();
                all.sort_unstable();
                (all, None, Selection::MinTrainLoss)
            }
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Strategy::M1),
            "m2" => Ok(Strategy::M2),
            "m3" => Ok(Strategy::M3),
            _ => Err(Error::Argument(format!("unknown strategy {s:?}; use m1, m2 or m3"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_maps_mask_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(random_mask_span(100, (200, 400), &mut rng).len(), 50);
        }
    }

    #[test]
    fn long_maps_mask_within_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = random_mask_span(1000, (200, 400), &mut rng);
            assert!((200..=400).contains(&s.len()));
            assert!(s.end <= 1000);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_uses_field_names() {
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(v["selection"], "max_val_accuracy");
        assert_eq!(v["batch_size"], 8);
        let back: TrainConfig = serde_json::from_str(r#"{"max_epochs": 3}"#).unwrap();
        assert_eq!(back.max_epochs, 3);
        assert_eq!(back.batch_size, 8);
    }

    #[test]
    fn strategies_cover_the_folds() {
        let folds = TwoFold {
            a: vec![0, 3],
            b: vec![1, 2],
            stratified: true,
        };
        let (t1, v1, _) = Strategy::M1.plan(&folds);
        let (t2, v2, _) = Strategy::M2.plan(&folds);
        assert_eq!((t1.clone(), v2.unwrap()), (vec![0, 3], vec![0, 3]));
        assert_eq!((t2, v1.unwrap()), (vec![1, 2], vec![1, 2]));
        let (t3, v3, sel) = Strategy::M3.plan(&folds);
        assert_eq!((t3, v3, sel), (vec![0, 1, 2, 3], None, Selection::MinTrainLoss));
    }
}
