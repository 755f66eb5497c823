//! Training loop: seeded shuffling, batched gradient computation (samples
//! of a batch run in parallel on independent tapes, reduced in fixed
//! order), Adam updates with a static learning rate, per-epoch history and
//! best-validation checkpointing.

use crate::data::{ClipSample, Dataset, LoadedClip};
use crate::error::{Error, Result};
use crate::model::{
    argmax, insert_model_params, predict_clip, window_forward, ModelBundle, ModelConfig,
    ModelParams,
};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug)]
pub struct EarlyStop {
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub sequence_length: usize,
    /// Stop once both thresholds are reached (checked after each epoch).
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 7,
            sequence_length: 16,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        for (name, beta) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0 < beta && beta < 1.0) {
                return Err(Error::config(format!("adam {name} must be in (0,1)")));
            }
        }
        if self.sequence_length == 0 {
            return Err(Error::config("sequence_length must be positive"));
        }
        Ok(())
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of one flat parameter slice.
/// `step` is the 1-based step count after this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    config: &TrainConfig,
) {
    debug_assert_eq!(param.len(), grad.len());
    let lr = T::from_f64(config.learning_rate);
    let b1 = T::from_f64(config.adam_beta1);
    let b2 = T::from_f64(config.adam_beta2);
    let eps = T::from_f64(config.adam_epsilon);
    let one = T::one();
    let b1c = one - T::from_f64(config.adam_beta1.powi(step as i32));
    let b2c = one - T::from_f64(config.adam_beta2.powi(step as i32));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / b1c;
        let v_hat = v[i] / b2c;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One optimizer step over every model parameter.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() {
        return Err(Error::shape(format!(
            "adam_step: {} gradients for {} parameter tensors",
            grads.len(),
            tensors.len()
        )));
    }
    state.step += 1;
    for (i, (t, g)) in tensors.iter_mut().zip(grads).enumerate() {
        if t.shape() != g.shape() {
            return Err(Error::shape(format!(
                "adam_step: gradient shape {:?} vs parameter {:?}",
                g.shape(),
                t.shape()
            )));
        }
        adam_update(
            t.data_mut(),
            g.data(),
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            config,
        );
    }
    Ok(())
}

// ── gradients ────────────────────────────────────────────────────────

/// Forward + backward for one sample on a private tape. Returns the loss,
/// whether the argmax prediction was correct, and per-tensor gradients.
pub fn sample_gradients<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    sample: &ClipSample<T>,
) -> Result<(f64, bool, Vec<Tensor<T>>)> {
    if sample.label >= config.num_classes() {
        return Err(Error::data(format!(
            "label {} outside the {}-class set",
            sample.label,
            config.num_classes()
        )));
    }
    let mut tape = Tape::new();
    let nodes = insert_model_params(&mut tape, params);
    let probs = window_forward(&mut tape, &sample.frames, &nodes, config)?;
    let loss = tape.cross_entropy(probs, sample.label)?;
    tape.backward(loss)?;
    let correct = argmax(tape.value(probs).data()) == sample.label;
    let grads = nodes
        .leaf_ids()
        .iter()
        .map(|&id| {
            tape.grad_tensor(id)
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
        })
        .collect();
    Ok((tape.value(loss).data()[0].as_f64(), correct, grads))
}

/// Mean loss, correct-prediction count and mean gradients over a batch.
/// Samples run in parallel; the reduction order is fixed, so results are
/// independent of thread count.
pub fn batch_gradients<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &[ClipSample<T>],
) -> Result<(f64, usize, Vec<Tensor<T>>)> {
    let per_sample: Vec<(f64, bool, Vec<Tensor<T>>)> = batch
        .par_iter()
        .map(|sample| sample_gradients(params, config, sample))
        .collect::<Result<_>>()?;

    let inv = T::from_f64(1.0 / batch.len() as f64);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut grads: Vec<Tensor<T>> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for (loss, ok, sample_grads) in per_sample {
        loss_sum += loss;
        correct += ok as usize;
        for (acc, g) in grads.iter_mut().zip(&sample_grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v = *v * inv;
        }
    }
    Ok((loss_sum / batch.len() as f64, correct, grads))
}

// ── history ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Comma-separated history with a header row, one line per epoch.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "epoch,train_loss,train_acc,val_acc")?;
        for r in &self.records {
            writeln!(
                file,
                "{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, r.val_acc
            )?;
        }
        Ok(())
    }
}

// ── evaluation ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true_class][predicted_class]` clip counts.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

/// Clip-level evaluation: window probabilities are averaged per clip, the
/// argmax is compared against the label.
pub fn evaluate_clips<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    clips: &[LoadedClip<T>],
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::data("evaluate: no clips"));
    }
    let k = config.num_classes();
    let predictions: Vec<usize> = clips
        .par_iter()
        .map(|clip| {
            if clip.label >= k {
                return Err(Error::data(format!(
                    "label {} outside the {k}-class set",
                    clip.label
                )));
            }
            Ok(argmax(&predict_clip(params, config, &clip.windows)?))
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for (clip, &pred) in clips.iter().zip(&predictions) {
        confusion[clip.label][pred] += 1;
        correct += (pred == clip.label) as usize;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / clips.len() as f64,
        confusion,
        total: clips.len(),
    })
}

// ── training loop ────────────────────────────────────────────────────

pub struct TrainOutcome<T> {
    /// Parameters at the best validation accuracy (first epoch on ties).
    pub best_params: ModelParams<T>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub final_params: ModelParams<T>,
    pub history: TrainHistory,
}

/// Run the epoch loop on an already-loaded dataset.
///
/// Each epoch shuffles the training windows with the seeded generator,
/// walks them in batches (the trailing partial batch is trained on), and
/// appends one history record. Fully deterministic in (seed, data, config).
pub fn train_loop<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    dataset: &Dataset<T>,
    train_config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_config.validate()?;
    config.validate()?;
    if train_config.sequence_length != config.recurrent.sequence_length {
        return Err(Error::config(format!(
            "training sequence_length {} does not match the model's {}",
            train_config.sequence_length, config.recurrent.sequence_length
        )));
    }
    let samples = dataset.train_windows();
    if samples.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    if dataset.val.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    for s in &samples {
        if s.frames.len() != train_config.sequence_length {
            return Err(Error::data(format!(
                "sample has {} frames, expected {}",
                s.frames.len(),
                train_config.sequence_length
            )));
        }
    }

    let mut params = params.clone();
    let mut state = AdamState::new(&params);
    let mut rng = Rng::new(train_config.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;

    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=train_config.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<ClipSample<T>> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let (mean_loss, batch_correct, grads) = batch_gradients(&params, config, &batch)?;
            adam_step(&mut params, &grads, &mut state, train_config)?;
            loss_sum += mean_loss * batch.len() as f64;
            correct += batch_correct;
        }
        let val = evaluate_clips(&params, config, &dataset.val)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc: val.accuracy,
        };
        history.records.push(record);
        if best.as_ref().is_none_or(|(acc, _, _)| val.accuracy > *acc) {
            best = Some((val.accuracy, epoch, params.clone()));
        }
        if let Some(stop) = train_config.early_stop {
            if record.train_acc >= stop.train_acc && record.val_acc >= stop.val_acc {
                break;
            }
        }
    }
    let (best_val_acc, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_params,
        best_val_acc,
        best_epoch,
        final_params: params,
        history,
    })
}

/// Manifest-level entry point: loads the dataset, trains, and returns the
/// best-validation bundle plus the history.
pub fn train(
    bundle: &ModelBundle,
    manifest: &Path,
    train_config: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory)> {
    let dataset = crate::data::load_dataset::<f32>(
        manifest,
        bundle.config.backbone.input_height,
        bundle.config.backbone.input_width,
        train_config.sequence_length,
    )?;
    if dataset.labels != bundle.config.labels {
        return Err(Error::config(format!(
            "manifest classes {:?} do not match the model's {:?}",
            dataset.labels, bundle.config.labels
        )));
    }
    let outcome = train_loop(&bundle.params, &bundle.config, &dataset, train_config)?;
    Ok((
        ModelBundle {
            config: bundle.config.clone(),
            params: outcome.best_params,
        },
        outcome.history,
    ))
}

/// Manifest-level evaluation over one split.
pub fn evaluate(
    bundle: &ModelBundle,
    manifest: &Path,
    split: crate::data::Split,
) -> Result<EvalReport> {
    let dataset = crate::data::load_dataset::<f32>(
        manifest,
        bundle.config.backbone.input_height,
        bundle.config.backbone.input_width,
        bundle.config.recurrent.sequence_length,
    )?;
    if dataset.labels != bundle.config.labels {
        return Err(Error::config(format!(
            "manifest classes {:?} do not match the model's {:?}",
            dataset.labels, bundle.config.labels
        )));
    }
    let clips = match split {
        crate::data::Split::Train => &dataset.train,
        crate::data::Split::Val => &dataset.val,
        crate::data::Split::Test => &dataset.test,
    };
    evaluate_clips(&bundle.params, &bundle.config, clips)
}
