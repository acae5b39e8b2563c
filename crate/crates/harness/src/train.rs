//! SGD with momentum, learning-rate schedules and the train/evaluate loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbattn::{Graph, Mode, Model, ParamStore};
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, Dataset};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    #[default]
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Linear => "linear",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(HarnessError::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Learning rate for `epoch` (0-based) out of `total_epochs`.
pub fn lr_at(schedule: Schedule, epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(HarnessError::Config(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    let progress = epoch as f64 / total_epochs as f64;
    Ok(match schedule {
        Schedule::Linear => lr0 * (1.0 - progress),
        Schedule::Cosine => lr0 * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0,
    })
}

/// One momentum-SGD update over every parameter, then clears the
/// gradients. Weight decay is not applied to decay-exempt parameters.
pub fn sgd_step(store: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) {
    for p in store.iter_mut() {
        let decay = if p.decay_exempt { 0.0 } else { weight_decay };
        let value = p.value.data_mut();
        let buf = p.momentum_buffer.data_mut();
        for ((v, b), g) in value.iter_mut().zip(buf.iter_mut()).zip(p.grad.data()) {
            let step = g + decay * *v;
            *b = momentum * *b + step;
            *v -= lr * *b;
        }
    }
    store.zero_grads();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Class-balanced training subset; the full split when absent.
    pub subset_size: Option<usize>,
    /// Class-balanced test subset; the full split when absent.
    pub test_subset: Option<usize>,
    /// Dropout rate on the attention branch's hidden layer.
    pub attention_dropout: f64,
    /// Pad-crop-flip augmentation of training batches.
    pub augment: bool,
    /// Batch size for evaluation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 10,
            schedule: Schedule::Cosine,
            seed: 0,
            subset_size: None,
            test_subset: None,
            attention_dropout: 0.0,
            augment: false,
            eval_batch_size: 250,
        }
    }
}

impl TrainConfig {
    /// Checks the invariants of a runnable configuration. A zero learning
    /// rate is accepted here so that frozen runs remain expressible;
    /// [`validate`](Self::validate) rejects it.
    pub fn check_runnable(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be finite and non-negative", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 for batch statistics".into());
        }
        if self.epochs == 0 || self.eval_batch_size == 0 {
            return bad("epochs and eval batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return bad(format!("attention dropout {} outside [0, 1)", self.attention_dropout));
        }
        if self.subset_size == Some(0) || self.test_subset == Some(0) {
            return bad("subset sizes must be positive".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_runnable()?;
        if self.lr0 <= 0.0 {
            return Err(HarnessError::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        Ok(())
    }
}

/// λ summary over one attention site, or over all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub site: String,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl LambdaStats {
    fn of(site: impl Into<String>, values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self { site: site.into(), min, mean, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Over every λ entry of the model; absent without SB sites.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaStats>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub lambda_sites: Vec<LambdaStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub model: sbattn::ModelConfig,
    pub param_count: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub initial_test_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }

    /// The report with timing removed; two runs of one configuration and
    /// seed agree on this exactly.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_seconds: 0.0, ..self.clone() }
    }
}

/// λ statistics per SB site plus the pooled summary.
pub fn lambda_stats(model: &Model) -> (Option<LambdaStats>, Vec<LambdaStats>) {
    let sites = model.lambda_sites();
    if sites.is_empty() {
        return (None, Vec::new());
    }
    let mut all = Vec::new();
    let per_site = sites
        .iter()
        .map(|(name, id)| {
            let values = model.store.value(*id).data();
            all.extend_from_slice(values);
            LambdaStats::of(name.as_str(), values)
        })
        .collect();
    (Some(LambdaStats::of("all", &all)), per_site)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy over a dataset.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(HarnessError::Config("cannot evaluate on an empty dataset".into()));
    }
    let classes = model.config.num_classes;
    let mut correct = 0;
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (images, labels) = data.gather(chunk);
        let logits = model.predict(&images)?;
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            correct += usize::from(argmax(row) == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `model` in place for `config.epochs` epochs of shuffled
/// mini-batches and evaluates after each one.
///
/// A trailing batch of a single sample is skipped, since batch statistics
/// need at least two.
pub fn train_eval(model: &mut Model, train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<RunReport> {
    config.check_runnable()?;
    if train.len() < 2 {
        return Err(HarnessError::Config("training needs at least two samples".into()));
    }
    let expected = model.input_shape(1);
    if expected[2] != crate::data::SIDE || expected[3] != crate::data::SIDE {
        return Err(HarnessError::Config(format!("model expects {expected:?} inputs, data is 3x32x32")));
    }
    let start = Instant::now();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(config.seed);
    augment_rng.set_stream(1);

    let initial_test_accuracy = evaluate(model, test, config.eval_batch_size)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(config.schedule, epoch, config.epochs, config.lr0)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let (mut images, labels) = train.gather(batch);
            if config.augment {
                images = augment_batch(&images, &mut augment_rng);
            }
            let diverged = |source| HarnessError::Diverged { epoch, step, source };
            let mut g = Graph::new();
            let x = g.input(images);
            let logits = model.forward(&mut g, x, Mode::Train).map_err(diverged)?;
            let loss = g.cross_entropy(logits, &labels).map_err(diverged)?;
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss).map_err(diverged)?;
            model.store.accumulate_grads(&g, &grads);
            drop(grads);
            drop(g);
            if let Some(p) = model.store.iter().find(|p| !p.grad.is_finite()) {
                let source = sbattn::Error::NonFinite { op: "backward", scope: p.name.clone() };
                return Err(HarnessError::Diverged { epoch, step, source });
            }
            sgd_step(&mut model.store, lr, config.momentum, config.weight_decay);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let test_accuracy = evaluate(model, test, config.eval_batch_size)?;
        let (lambda, lambda_sites) = lambda_stats(model);
        epochs.push(EpochRecord { epoch, lr, train_loss: loss_sum / seen as f64, test_accuracy, lambda, lambda_sites });
    }
    Ok(RunReport {
        config: config.clone(),
        model: model.config.clone(),
        param_count: model.param_count(),
        train_samples: train.len(),
        test_samples: test.len(),
        initial_test_accuracy,
        epochs,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
