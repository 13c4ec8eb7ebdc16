//! Minibatch training of the head on cached backbone features.
//!
//! The backbone is frozen, so its output for a given image never changes; it
//! is computed once per sample and the head is trained on the cached rows.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::config::TrainConfig;
use super::history::{EpochRecord, TrainingHistory};
use super::math::{batch_loss_and_gradient, cross_entropy_lsr};
use crate::dataset::{ImageBatch, ImageSource};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ModelHandle};

/// Images fed through the backbone per extraction step.
const EXTRACT_CHUNK: usize = 64;

/// Flattened backbone features `(n, h*w*c)` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl FeatureSet {
    pub fn extract<S: ImageSource + ?Sized>(model: &ModelHandle, source: &S) -> Result<Self> {
        let n = source.len();
        let width = model.backbone().output_shape().len();
        let mut features = Array2::zeros((n, width));
        let mut labels = Vec::with_capacity(n);
        let ids: Vec<usize> = (0..n).collect();
        for (chunk_no, chunk) in ids.chunks(EXTRACT_CHUNK).enumerate() {
            let batch = ImageBatch::gather(source, chunk)?;
            let f = model.features(batch.data.view())?;
            let start = chunk_no * EXTRACT_CHUNK;
            features
                .slice_mut(ndarray::s![start..start + chunk.len(), ..])
                .assign(&f);
            labels.extend(batch.labels);
            log::debug!("extracted features for {}/{n} images", start + chunk.len());
        }
        Ok(Self {
            features,
            labels,
            classes: source.class_count(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct Trainer<'a> {
    model: &'a mut ModelHandle,
    cfg: TrainConfig,
    adam: Adam,
    train: &'a FeatureSet,
    val: Option<&'a FeatureSet>,
    history: TrainingHistory,
}

fn check_set(model: &ModelHandle, set: &FeatureSet, what: &str) -> Result<()> {
    if set.classes != model.classes() {
        return Err(Error::Contract(format!(
            "{what} data has {} classes but the head predicts {}",
            set.classes,
            model.classes()
        )));
    }
    if let Some(&bad) = set.labels.iter().find(|&&y| y >= set.classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: set.classes,
        });
    }
    if set.features.ncols() != model.head().input_shape().len() {
        return Err(Error::Shape(format!(
            "{what} features have width {}, head expects {}",
            set.features.ncols(),
            model.head().input_shape().len()
        )));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a mut ModelHandle,
        train: &'a FeatureSet,
        val: Option<&'a FeatureSet>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        check_set(model, train, "training")?;
        if let Some(v) = val {
            check_set(model, v, "validation")?;
        }
        model.head_mut().set_dropout_rate(cfg.dropout_rate)?;
        let adam = Adam::new(model.head(), cfg.learning_rate, cfg.adam());
        Ok(Self {
            model,
            cfg,
            adam,
            train,
            val,
            history: TrainingHistory::default(),
        })
    }

    pub fn history(&self) -> &TrainingHistory {
        &self.history
    }

    pub fn model(&self) -> &ModelHandle {
        self.model
    }

    /// Runs one pass over the shuffled training set.
    pub fn epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.history.len();
        let started = Instant::now();
        // stream 0 of the seed is left to head initialization
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_no, ids) in order.chunks(self.cfg.batch_size).enumerate() {
            let x = self.train.features.select(Axis(0), ids);
            let y: Vec<usize> = ids.iter().map(|&i| self.train.labels[i]).collect();
            let non_finite = || Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: batch_no,
            };
            let cache = self
                .model
                .head()
                .forward_cached(x.view(), Some(&mut rng))
                .map_err(|e| match e {
                    Error::Numeric(_) => non_finite(),
                    other => other,
                })?;
            let (loss, grad) = batch_loss_and_gradient(&cache.probs, &y, self.cfg.label_smoothing)?;
            if !loss.is_finite() {
                return Err(non_finite());
            }
            loss_sum += loss * ids.len() as f64;
            correct += argmax_rows(&cache.probs).iter().zip(&y).filter(|(p, t)| p == t).count();
            let (grads, _) = self.model.head().backward(&cache, &grad, false);
            self.adam.step(self.model.head_mut(), &grads);
        }

        let n = self.train.len() as f64;
        let (val_loss, val_accuracy) = match self.val {
            Some(v) if !v.is_empty() => {
                let (l, a) = self.evaluate(v)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        self.history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        let record = self.history.last().expect("just pushed");
        log::info!(
            "epoch {}: loss {:.4} acc {:.4}{}",
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            record
                .val_accuracy
                .map(|a| format!(" val_acc {a:.4}"))
                .unwrap_or_default()
        );
        Ok(record)
    }

    /// Inference-mode mean loss and accuracy on `set`.
    pub fn evaluate(&self, set: &FeatureSet) -> Result<(f64, f64)> {
        evaluate_features(self.model, set, self.cfg.label_smoothing, self.cfg.batch_size)
    }

    pub fn finish(self) -> TrainingHistory {
        self.history
    }
}

pub fn evaluate_features(
    model: &ModelHandle,
    set: &FeatureSet,
    label_smoothing: f64,
    chunk: usize,
) -> Result<(f64, f64)> {
    check_set(model, set, "evaluation")?;
    if set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for (rows, labels) in set
        .features
        .axis_chunks_iter(Axis(0), chunk.max(1))
        .zip(set.labels.chunks(chunk.max(1)))
    {
        let probs = model.head().probabilities(rows)?;
        for (p, &y) in probs.rows().into_iter().zip(labels) {
            loss += cross_entropy_lsr(p, y, label_smoothing, set.classes)?;
        }
        correct += argmax_rows(&probs).iter().zip(labels).filter(|(p, t)| p == t).count();
    }
    let n = set.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains for `cfg.epochs` epochs on precomputed features.
pub fn train_features(
    model: &mut ModelHandle,
    train: &FeatureSet,
    val: Option<&FeatureSet>,
    cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    let mut trainer = Trainer::new(model, train, val, cfg.clone())?;
    for _ in 0..cfg.epochs {
        trainer.epoch()?;
    }
    Ok(trainer.finish())
}

/// Extracts features once and trains the head. Zero epochs leaves the model
/// untouched and skips extraction.
pub fn train<S, V>(model: &mut ModelHandle, train: &S, val: Option<&V>, cfg: &TrainConfig) -> Result<TrainingHistory>
where
    S: ImageSource + ?Sized,
    V: ImageSource + ?Sized,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if train.class_count() != model.classes() {
        return Err(Error::Contract(format!(
            "training data has {} classes but the head predicts {}",
            train.class_count(),
            model.classes()
        )));
    }
    if cfg.epochs == 0 {
        return Ok(TrainingHistory::default());
    }
    let train_set = FeatureSet::extract(model, train)?;
    let val_set = val.map(|v| FeatureSet::extract(model, v)).transpose()?;
    train_features(model, &train_set, val_set.as_ref(), cfg)
}

/// The dropout rates compared in the original experiments.
pub const DROPOUT_GRID: [f64; 3] = [0.4, 0.5, 0.6];

/// Trains one copy of `model` per dropout rate from the same initial head.
pub fn dropout_sweep(
    model: &ModelHandle,
    train: &FeatureSet,
    val: Option<&FeatureSet>,
    cfg: &TrainConfig,
    rates: &[f64],
) -> Result<Vec<(f64, ModelHandle, TrainingHistory)>> {
    rates
        .iter()
        .map(|&rate| {
            let mut m = model.clone();
            let cfg = TrainConfig {
                dropout_rate: rate,
                ..cfg.clone()
            };
            let h = train_features(&mut m, train, val, &cfg)?;
            Ok((rate, m, h))
        })
        .collect()
}
