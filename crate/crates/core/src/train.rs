//! Training loop: Adam on the head parameters only, mean binary
//! cross-entropy, per-epoch loss and accuracy history.
//!
//! Backbone weights never change, so each distinct image is pushed through the
//! backbone once and its features are reused by every epoch.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::imaging::{ImageError, ImageSource, TripletBatch};
use crate::model::{view_label, BuiltModel, ModelDescriptor, ModelError};
use crate::nn::head::bce_from_logits;
use crate::samples::SampleSet;
use crate::shuffle;
use crate::vocab::NUM_LABELS;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NumericalError { epoch: usize, batch: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed training log: {reason}")]
    Log { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// Run feature extraction on a single thread. Results are identical
    /// either way; this only removes scheduling from the picture.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 100,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            seed: 0,
            shuffle_each_epoch: true,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.check(false)
    }

    /// `learning_rate = 0` is tolerated by [`train`] (it is a useful optimizer
    /// sanity check) but rejected by [`TrainConfig::validate`].
    fn check(&self, allow_zero_lr: bool) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        let lr_ok = self.learning_rate.is_finite()
            && (self.learning_rate > 0.0 || (allow_zero_lr && self.learning_rate == 0.0));
        if !lr_ok {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return fail("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        Ok(())
    }
}

/// Adam with the bias correction folded into the step size:
/// `p -= lr·√(1−β2ᵗ)/(1−β1ᵗ) · m / (√v + ε)`.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, shapes: &[usize]) -> Adam {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.t += 1;
        let lr_t = self.lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr_t * m[i] / (v[i].sqrt() + self.epsilon);
            }
        }
    }
}

/// Backbone features for every distinct image referenced by a set of samples.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureBank {
    pub fn build<'a>(
        model: &BuiltModel,
        samples: impl IntoIterator<Item = &'a SampleSet>,
        source: &dyn ImageSource,
    ) -> Result<FeatureBank, ImageError> {
        let positions = model.positions();
        let mut refs: Vec<(u64, &str)> = Vec::new();
        let mut index = HashMap::new();
        for s in samples {
            for &p in positions {
                let r = s.images[p].as_str();
                if !index.contains_key(r) {
                    index.insert(r.to_string(), refs.len());
                    refs.push((s.sample_id, r));
                }
            }
        }
        let (size, channels) = (model.config.input_size, model.config.channels);
        let rows: Vec<Vec<f32>> = refs
            .par_iter()
            .map(|&(sample_id, r)| {
                let t = source.load(r).map_err(|e| ImageError::Sample {
                    sample_id,
                    source: Box::new(e),
                })?;
                if t.size != size || t.channels != channels {
                    return Err(ImageError::Shape {
                        source_ref: r.to_string(),
                        got: t.size,
                        want: size,
                        channels: t.channels,
                    });
                }
                Ok(model.backbone.extract(&t))
            })
            .collect::<Result<_, _>>()?;
        let dim = model.backbone.feature_dim();
        Ok(FeatureBank {
            index,
            dim,
            data: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, image_ref: &str) -> Option<&[f32]> {
        self.index.get(image_ref).map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Head inputs (one matrix per branch) for the given samples.
    ///
    /// Panics if a sample's image is not in the bank.
    pub fn branch_matrices(&self, model: &BuiltModel, samples: &[&SampleSet]) -> Vec<Array2<f64>> {
        model
            .positions()
            .iter()
            .map(|&p| {
                let mut m = Array2::<f64>::zeros((samples.len(), self.dim));
                for (mut row, s) in m.rows_mut().into_iter().zip(samples) {
                    let f = self.get(&s.images[p]).expect("image missing from feature bank");
                    row.iter_mut().zip(f).for_each(|(d, &v)| *d = f64::from(v));
                }
                m
            })
            .collect()
    }
}

/// One-hot targets at each sample's label index.
pub fn one_hot_targets(samples: &[&SampleSet]) -> Array2<f64> {
    let mut t = Array2::zeros((samples.len(), NUM_LABELS));
    for (i, s) in samples.iter().enumerate() {
        t[[i, s.target_label.index()]] = 1.0;
    }
    t
}

/// Per-label binary accuracy at threshold 0.5, for each label column.
pub fn per_label_accuracy(probs: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> Vec<f64> {
    let n = probs.nrows() as f64;
    probs
        .columns()
        .into_iter()
        .zip(targets.columns())
        .map(|(p, t)| p.iter().zip(t).filter(|(&p, &t)| (p >= 0.5) == (t >= 0.5)).count() as f64 / n)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Macro average of the per-label accuracies.
    pub train_accuracy: f64,
    pub train_per_label_accuracy: Vec<f64>,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
    pub validation_per_label_accuracy: Option<Vec<f64>>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub descriptor: ModelDescriptor,
    pub epochs: Vec<EpochRecord>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn validation_losses(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.validation_loss).collect()
    }

    pub fn log_records(&self) -> Vec<LogRecord> {
        let mut out = Vec::new();
        for e in &self.epochs {
            out.push(LogRecord {
                epoch: e.epoch,
                split: "train".into(),
                loss: e.train_loss,
                accuracy: e.train_accuracy,
            });
            if let (Some(loss), Some(accuracy)) = (e.validation_loss, e.validation_accuracy) {
                out.push(LogRecord {
                    epoch: e.epoch,
                    split: "validation".into(),
                    loss,
                    accuracy,
                });
            }
        }
        out
    }

    /// Line-delimited JSON, one record per (epoch, split).
    pub fn write_log(&self, path: &Path) -> Result<(), TrainError> {
        let io_err = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
        for r in self.log_records() {
            serde_json::to_writer(&mut w, &r).map_err(|e| io_err(e.into()))?;
            w.write_all(b"\n").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
        let f = fs::File::open(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut out = Vec::new();
        for (i, line) in io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|source| TrainError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| TrainError::Log {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(self).expect("history serializes");
        fs::write(path, json + "\n").map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<TrainHistory, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Log {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn run_in_pool<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> T {
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    } else {
        f()
    }
}

/// Loss and per-label accuracy of the model in inference mode.
fn evaluate_split(model: &BuiltModel, bank: &FeatureBank, samples: &[&SampleSet], batch_size: usize) -> (f64, Vec<f64>) {
    let mut loss_sum = 0.0;
    let mut correct = vec![0.0; NUM_LABELS];
    for chunk in samples.chunks(batch_size) {
        let feats = bank.branch_matrices(model, chunk);
        let targets = one_hot_targets(chunk);
        let pass = model.head.forward(&feats, None);
        loss_sum += bce_from_logits(&pass.logits.view(), &targets.view()) * chunk.len() as f64;
        let acc = per_label_accuracy(&pass.probabilities().view(), &targets.view());
        correct.iter_mut().zip(acc).for_each(|(c, a)| *c += a * chunk.len() as f64);
    }
    let n = samples.len() as f64;
    (loss_sum / n, correct.into_iter().map(|c| c / n).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains the head of `model` in place. Backbone parameters are never touched.
///
/// Training loss and accuracy are averaged over the epoch's batches (with
/// dropout active); validation metrics use inference mode after the epoch.
pub fn train(
    model: &mut BuiltModel,
    train_split: &[SampleSet],
    validation_split: &[SampleSet],
    source: &dyn ImageSource,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    config.check(true)?;
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let bank = run_in_pool(config.deterministic, || {
        FeatureBank::build(model, train_split.iter().chain(validation_split), source)
    })?;
    train_with_bank(model, &bank, train_split, validation_split, config)
}

/// Like [`train`], with features already extracted.
pub fn train_with_bank(
    model: &mut BuiltModel,
    bank: &FeatureBank,
    train_split: &[SampleSet],
    validation_split: &[SampleSet],
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    config.check(true)?;
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let view = view_label(train_split.iter().map(|s| &s.view));
    let sizes: Vec<usize> = model.head.param_slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::new(config, &sizes);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD809_0D7A_5EED_0001);
    let validation: Vec<&SampleSet> = validation_split.iter().collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order: Vec<usize> = if config.shuffle_each_epoch {
            shuffle::shuffled_indices(train_split.len(), config.seed.wrapping_add(epoch as u64))
        } else {
            (0..train_split.len()).collect()
        };
        let mut loss_sum = 0.0;
        let mut correct = vec![0.0; NUM_LABELS];
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SampleSet> = idx.iter().map(|&i| &train_split[i]).collect();
            let feats = bank.branch_matrices(model, &batch);
            let targets = one_hot_targets(&batch);
            let mask = model.head.dropout_mask(&mut dropout_rng, batch.len());
            let pass = model.head.forward(&feats, mask.as_ref());
            let (loss, grads) = model.head.backward(&pass, &targets.view());
            if !loss.is_finite() {
                return Err(TrainError::NumericalError { epoch, batch: b + 1 });
            }
            loss_sum += loss * batch.len() as f64;
            let acc = per_label_accuracy(&pass.probabilities().view(), &targets.view());
            correct.iter_mut().zip(acc).for_each(|(c, a)| *c += a * batch.len() as f64);
            adam.step(model.head.param_slices_mut(), grads.slices());
        }
        let n = train_split.len() as f64;
        let train_per_label: Vec<f64> = correct.into_iter().map(|c| c / n).collect();
        let (validation_loss, validation_per_label) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_split(model, bank, &validation, config.batch_size);
            if !l.is_finite() {
                return Err(TrainError::NumericalError { epoch, batch: 0 });
            }
            (Some(l), Some(a))
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: mean(&train_per_label),
            train_per_label_accuracy: train_per_label,
            validation_loss,
            validation_accuracy: validation_per_label.as_deref().map(mean),
            validation_per_label_accuracy: validation_per_label,
            wall_clock: start.elapsed(),
        });
    }
    model.trained_view = Some(view.clone());
    Ok(TrainHistory {
        descriptor: model.descriptor(view),
        epochs,
    })
}

/// [`train`], then the final checkpoint, the history and its log written next
/// to `checkpoint` (`.history.json`, `.log.jsonl`).
pub fn train_and_save(
    model: &mut BuiltModel,
    train_split: &[SampleSet],
    validation_split: &[SampleSet],
    source: &dyn ImageSource,
    config: &TrainConfig,
    checkpoint: &Path,
) -> Result<TrainHistory, TrainError> {
    let history = train(model, train_split, validation_split, source, config)?;
    save_checkpoint(model, checkpoint)?;
    history.save(&checkpoint.with_extension("history.json"))?;
    history.write_log(&checkpoint.with_extension("log.jsonl"))?;
    Ok(history)
}

/// Inference-mode probabilities, shape (batch, 15).
pub fn predict_batch(model: &BuiltModel, batch: &TripletBatch) -> Result<Array2<f64>, ModelError> {
    let feats = model.batch_features(batch)?;
    Ok(model.head.predict(&feats))
}

/// Inference-mode probabilities for samples, in input order.
pub fn predict_samples(
    model: &BuiltModel,
    samples: &[SampleSet],
    source: &dyn ImageSource,
    batch_size: usize,
) -> Result<Array2<f64>, ImageError> {
    let bank = FeatureBank::build(model, samples, source)?;
    Ok(predict_with_bank(model, &bank, samples, batch_size))
}

pub fn predict_with_bank(model: &BuiltModel, bank: &FeatureBank, samples: &[SampleSet], batch_size: usize) -> Array2<f64> {
    let refs: Vec<&SampleSet> = samples.iter().collect();
    let mut out = Array2::zeros((samples.len(), NUM_LABELS));
    for (c, chunk) in refs.chunks(batch_size.max(1)).enumerate() {
        let probs = model.head.predict(&bank.branch_matrices(model, chunk));
        let start = c * batch_size.max(1);
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&probs);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{ImageTensor, MemoryImageSource};
    use crate::metadata::ViewPosition;
    use crate::model::{build_model, ModelConfig};
    use crate::nn::BackboneKind;
    use crate::samples::fixtures;
    use crate::vocab::Label;
    use rand::Rng;

    const SIZE: usize = 16;

    /// Two classes whose images differ in brightness ramp direction.
    fn dataset(n: usize, seed: u64) -> (Vec<SampleSet>, MemoryImageSource) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut src = MemoryImageSource {
            images: HashMap::new(),
            channels: 1,
        };
        let mut samples = Vec::new();
        for i in 0..n {
            let label = if i % 2 == 0 { "Mass" } else { "Nodule" };
            let mut s = fixtures::sample(i as u64, i as u32 + 1, label, ViewPosition::PA);
            for k in 0..3 {
                let name = format!("{i}_{k}.png");
                let level = if i % 2 == 0 { k as f32 } else { 2.0 - k as f32 } / 2.0;
                let data = (0..SIZE * SIZE).map(|_| (level * 0.8 + rng.random::<f32>() * 0.2).min(1.0)).collect();
                src.images.insert(
                    name.clone(),
                    ImageTensor {
                        size: SIZE,
                        channels: 1,
                        data,
                        source: name.clone(),
                    },
                );
                s.images[k] = name;
            }
            samples.push(s);
        }
        (samples, src)
    }

    fn model(use_lstm: bool) -> BuiltModel {
        let config = ModelConfig {
            input_size: SIZE,
            ..ModelConfig::new(BackboneKind::Tiny, use_lstm, 3)
        };
        build_model(&config, 11).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn frozen_parameters_never_change() {
        let (samples, src) = dataset(40, 1);
        let mut m = model(true);
        let digest = m.backbone.digest();
        let head_before = m.head.clone();
        let h = train(&mut m, &samples[..32], &samples[32..], &src, &quick(3)).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(m.backbone.digest(), digest);
        assert_ne!(m.head, head_before);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (samples, src) = dataset(20, 2);
        let mut m = model(true);
        let head_before = m.head.clone();
        let config = TrainConfig {
            learning_rate: 0.0,
            ..quick(2)
        };
        train(&mut m, &samples, &[], &src, &config).unwrap();
        assert_eq!(m.head, head_before);
        assert!(config.validate().is_err());
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let (samples, src) = dataset(200, 4);
        let mut m = model(false);
        let h = train(&mut m, &samples, &[], &src, &quick(10)).unwrap();
        let losses = h.train_losses();
        assert_eq!(losses.len(), 10);
        assert!(losses[9] < losses[0], "{losses:?}");
        assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn training_is_reproducible() {
        let (samples, src) = dataset(30, 5);
        let run = |deterministic| {
            let mut m = model(true);
            let config = TrainConfig {
                deterministic,
                ..quick(3)
            };
            let h = train(&mut m, &samples[..24], &samples[24..], &src, &config).unwrap();
            (h.log_records(), m.head)
        };
        let (a, head_a) = run(true);
        let (b, head_b) = run(true);
        assert_eq!(a, b);
        assert_eq!(head_a, head_b);
        assert_eq!(run(false).0, a);
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let (samples, src) = dataset(8, 6);
        let m = model(false);
        let bank = FeatureBank::build(&m, &samples, &src).unwrap();
        let refs: Vec<&SampleSet> = samples.iter().collect();
        let feats = bank.branch_matrices(&m, &refs);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let t1 = m.head.forward(&feats, m.head.dropout_mask(&mut r1, 8).as_ref()).logits;
        let t2 = m.head.forward(&feats, m.head.dropout_mask(&mut r2, 8).as_ref()).logits;
        assert_ne!(t1, t2);
        assert_eq!(m.head.predict(&feats), m.head.predict(&feats));
    }

    #[test]
    fn predict_batch_shapes_and_duplicates() {
        let (samples, src) = dataset(2, 7);
        let m = model(true);
        let one = crate::imaging::assemble_batch(&samples[..1], &src).unwrap();
        assert_eq!(predict_batch(&m, &one).unwrap().dim(), (1, NUM_LABELS));

        let dup = vec![samples[0].clone(), samples[0].clone()];
        let p = predict_batch(&m, &crate::imaging::assemble_batch(&dup, &src).unwrap()).unwrap();
        assert_eq!(p.row(0), p.row(1));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));

        let via_bank = predict_samples(&m, &dup, &src, 1).unwrap();
        assert!(via_bank.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-12));

        let wrong = model_sized(SIZE * 2);
        assert!(matches!(predict_batch(&wrong, &one), Err(ModelError::ShapeMismatch(_))));
    }

    fn model_sized(size: usize) -> BuiltModel {
        let config = ModelConfig {
            input_size: size,
            ..ModelConfig::new(BackboneKind::Tiny, false, 3)
        };
        build_model(&config, 0).unwrap()
    }

    #[test]
    fn diverging_loss_aborts_with_location() {
        let (samples, src) = dataset(40, 8);
        let mut m = model(false);
        let config = TrainConfig {
            learning_rate: 1e307,
            ..quick(2)
        };
        let err = train(&mut m, &samples, &[], &src, &config).unwrap_err();
        assert!(matches!(err, TrainError::NumericalError { epoch: 1, batch } if batch >= 2), "{err}");
    }

    #[test]
    fn log_round_trips_and_history_excludes_wall_clock() {
        let (samples, src) = dataset(12, 9);
        let mut m = model(false);
        let h = train(&mut m, &samples[..10], &samples[10..], &src, &quick(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("h.log.jsonl");
        h.write_log(&log).unwrap();
        assert_eq!(TrainHistory::read_log(&log).unwrap(), h.log_records());
        assert_eq!(h.log_records().len(), 4);
        let json = serde_json::to_string(&h).unwrap();
        assert!(!json.contains("wall_clock"));
        assert_eq!(h.descriptor.view, "PA");
    }

    #[test]
    fn accuracy_counts_each_label_column() {
        let probs = ndarray::arr2(&[[0.9, 0.2], [0.4, 0.6]]);
        let targets = ndarray::arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(per_label_accuracy(&probs.view(), &targets.view()), vec![0.5, 0.5]);
        let t = one_hot_targets(&[&fixtures::sample(0, 1, "Hernia", ViewPosition::AP)]);
        assert_eq!(t.sum(), 1.0);
        assert_eq!(t[[0, Label::parse("Hernia").unwrap().index()]], 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With bias correction, the first step is lr·g/(|g|+ε') ≈ lr·sign(g).
        let config = TrainConfig::default();
        let mut adam = Adam::new(&config, &[2]);
        let mut p = vec![1.0, -1.0];
        adam.step(vec![&mut p], vec![&[0.5, -3.0]]);
        assert!((p[0] - (1.0 - 1e-2)).abs() < 1e-6);
        assert!((p[1] - (-1.0 + 1e-2)).abs() < 1e-6);
    }
}
