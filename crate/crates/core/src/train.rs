//! KL-divergence objective, Adam, and the between-class training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::sample_bc_batch;
use crate::dsp::SpectroImage;
use crate::error::{Error, Result};
use crate::label::LabelDistribution;
use crate::layers::{update_running_stats, ModelKind, ParamStore};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{clamp_prob, Graph, Tensor, KL_CLAMP};

/// `sum_c y_c log(y_c / max(p_c, 1e-12))`, with `0 log 0 = 0`.
pub fn kl_loss<T: Scalar>(y: &LabelDistribution<T>, p: &LabelDistribution<T>) -> f64 {
    y.probs()
        .iter()
        .zip(p.probs())
        .filter(|(y, _)| **y > T::zero())
        .map(|(&y, &p)| {
            let (y, p) = (y.as_f64(), clamp_prob(p.as_f64(), KL_CLAMP));
            y * (y / p).ln()
        })
        .sum()
}

/// `-sum_c y_c log(max(p_c, 1e-12))`.
pub fn cross_entropy<T: Scalar>(y: &LabelDistribution<T>, p: &LabelDistribution<T>) -> f64 {
    -y.probs()
        .iter()
        .zip(p.probs())
        .filter(|(y, _)| **y > T::zero())
        .map(|(&y, &p)| y.as_f64() * clamp_prob(p.as_f64(), KL_CLAMP).ln())
        .sum::<f64>()
}

pub fn entropy<T: Scalar>(y: &LabelDistribution<T>) -> f64 {
    -y.probs()
        .iter()
        .filter(|y| **y > T::zero())
        .map(|&y| y.as_f64() * y.as_f64().ln())
        .sum::<f64>()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update from named gradients; parameters without a gradient are
    /// left alone.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let lr_t = T::lit(self.lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(self.eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!("{name}: {} values, gradient {}", p.len(), g.len()),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                // lr * mhat / (sqrt(vhat) + eps)
                *p -= lr_t * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Segment images with class labels and the recording each came from.
#[derive(Clone, Debug, Default)]
pub struct SegmentSet {
    pub images: Vec<SpectroImage>,
    pub labels: Vec<usize>,
    pub recordings: Vec<usize>,
    pub classes: usize,
}

impl SegmentSet {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            ..Self::default()
        }
    }

    pub fn push_recording(&mut self, recording: usize, label: usize, images: Vec<SpectroImage>) {
        for img in images {
            self.images.push(img);
            self.labels.push(label);
            self.recordings.push(recording);
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub conv_dropout: f64,
    pub rnn_dropout: f64,
    pub kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 100,
            learning_rate: 1e-4,
            seed: 0,
            conv_dropout: 0.25,
            rnn_dropout: 0.1,
            kind: ModelKind::AttCrnn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        for r in [self.conv_dropout, self.rnn_dropout] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Segment accuracy on the evaluation set.
    pub seg_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "seg_accuracy"])?;
        for r in &self.records {
            out.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.seg_accuracy.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub struct TrainOutcome<T> {
    /// Parameters at the epoch with the best evaluation accuracy.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub last: Model<T>,
    pub history: History,
}

/// Fraction of segments whose argmax matches the label.
pub fn segment_accuracy<T: Scalar>(model: &Model<T>, set: &SegmentSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let out = model.infer(&set.images, false)?;
    let hits = out.iter().zip(&set.labels).filter(|(o, &l)| o.probs.argmax() == l).count();
    Ok(hits as f64 / set.len() as f64)
}

/// One optimizer step on a between-class batch; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    set: &SegmentSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch = sample_bc_batch::<T, _>(&set.images, &set.labels, set.classes, batch_size, rng)?;
    let c = &model.config;
    let n = batch.len();
    let mut x = Vec::with_capacity(n * c.channels * c.bands * c.frames);
    let mut y = Vec::with_capacity(n * c.classes);
    for s in &batch {
        x.extend_from_slice(s.image.data());
        y.extend_from_slice(s.label.probs());
    }
    let x = Tensor::new([n, c.channels, c.bands, c.frames], x)?;
    let y = Tensor::new([n, c.classes], y)?;
    optimize_batch(model, adam, x, &y, rng)
}

/// Forward/backward on an `N x K x M x T` batch against `N x C` targets in
/// training mode, then an Adam update and a running-statistics update.
/// Returns the loss; a non-finite loss leaves the model untouched.
pub fn optimize_batch<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    x: Tensor<T>,
    y: &Tensor<T>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let s = g.constant(x);
    let (out, stats) = model.forward(&mut g, &bound, s, Some(rng as &mut dyn rand::RngCore))?;
    let loss = g.kl_div(out.probs, y)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward(loss)?;
    let named = bound
        .iter()
        .filter_map(|(name, v)| grads.take(v).map(|gv| (name.to_string(), gv)))
        .collect();
    adam.update(&mut model.params, &named)?;
    let momentum = model.config.bn_momentum;
    update_running_stats(&mut model.params, &stats, momentum)?;
    Ok(value)
}

/// Trains with between-class batches; an epoch is `ceil(n / batch)`
/// batches. After each epoch the segment accuracy on `eval` (or on the
/// training set when `eval` is `None`) is recorded and `on_epoch` called.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train_set: &SegmentSet,
    eval: Option<&SegmentSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.classes != model.config.classes {
        return Err(Error::Config(format!(
            "training set has {} classes, model has {}",
            train_set.classes, model.config.classes
        )));
    }
    model.config.conv_dropout = cfg.conv_dropout;
    model.config.rnn_dropout = cfg.rnn_dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut adam = Adam::new(cfg.learning_rate);
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let mut history = History::default();
    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for b in 0..batches {
            let loss = train_step(&mut model, &mut adam, train_set, cfg.batch_size, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            total += loss;
        }
        let acc = segment_accuracy(&model, eval.unwrap_or(train_set))?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            seg_accuracy: acc,
        };
        on_epoch(&rec);
        if acc > best.2 {
            best = (model.clone(), epoch, acc);
        }
        history.records.push(rec);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        last: model,
        history,
    })
}

#[cfg(test)]
mod tests;
