//! Segment posteriors, recording-level multiplicative fusion and
//! classification metrics.

use std::io::Write;
use std::path::Path;

use crate::calibrate::SvmModel;
use crate::dsp::{AudioClip, FeatureExtractor, SpectroImage};
use crate::error::{Error, Result};
use crate::label::LabelDistribution;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::KL_CLAMP;

/// `fused[c] ∝ prod_i p_i[c]`, accumulated as log probabilities clamped at
/// 1e-12 and renormalized.
pub fn fuse_multiplicative<T: Scalar>(posteriors: &[LabelDistribution<T>]) -> Result<LabelDistribution<f64>> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot fuse an empty list of posteriors".into()))?;
    let c = first.classes();
    let mut log = vec![0.0f64; c];
    for p in posteriors {
        if p.classes() != c {
            return Err(Error::InvalidArgument(format!(
                "posteriors over {} and {} classes",
                c,
                p.classes()
            )));
        }
        for (l, v) in log.iter_mut().zip(p.probs()) {
            *l += v.as_f64().max(KL_CLAMP).ln();
        }
    }
    let top = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    LabelDistribution::from_weights(log.iter().map(|l| (l - top).exp()).collect())
}

/// Multiplicative combination of two models' posteriors for one recording.
pub fn fuse_models(a: &LabelDistribution<f64>, b: &LabelDistribution<f64>) -> Result<LabelDistribution<f64>> {
    if a.classes() != b.classes() {
        return Err(Error::InvalidArgument(format!(
            "models disagree on the class set ({} vs {} classes)",
            a.classes(),
            b.classes()
        )));
    }
    fuse_multiplicative(&[a.clone(), b.clone()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingPrediction {
    pub segments: Vec<LabelDistribution<f64>>,
    pub fused: LabelDistribution<f64>,
    pub label: usize,
}

impl RecordingPrediction {
    pub fn from_segments(segments: Vec<LabelDistribution<f64>>) -> Result<Self> {
        let fused = fuse_multiplicative(&segments)?;
        Ok(Self {
            label: fused.argmax(),
            segments,
            fused,
        })
    }
}

/// Posterior per segment image: the network softmax, or the calibrated SVM
/// on the pooled features when `svm` is given.
pub fn segment_posteriors<T: Scalar>(
    model: &Model<T>,
    svm: Option<&SvmModel>,
    images: &[SpectroImage],
) -> Result<Vec<LabelDistribution<f64>>> {
    model
        .infer(images, false)?
        .into_iter()
        .map(|o| match svm {
            Some(svm) => svm.predict_proba(&o.features.iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
            None => LabelDistribution::from_weights(o.probs.probs().iter().map(|v| v.as_f64()).collect()),
        })
        .collect()
}

/// Splits a recording into segments, classifies each and fuses them.
pub fn classify_recording<T: Scalar>(
    model: &Model<T>,
    svm: Option<&SvmModel>,
    extractor: &FeatureExtractor,
    recording: &AudioClip,
) -> Result<RecordingPrediction> {
    let images = extractor.recording_inputs(recording)?;
    RecordingPrediction::from_segments(segment_posteriors(model, svm, &images)?)
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || predicted >= c {
            return Err(Error::InvalidArgument(format!(
                "class pair ({truth}, {predicted}) outside {c} classes"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let hits = (0..self.classes()).map(|c| self.counts[c][c]).sum();
        Self::ratio(hits, self.total())
    }

    pub fn precision(&self, c: usize) -> f64 {
        Self::ratio(self.counts[c][c], self.counts.iter().map(|row| row[c]).sum())
    }

    pub fn recall(&self, c: usize) -> f64 {
        Self::ratio(self.counts[c][c], self.counts[c].iter().sum())
    }

    pub fn f1(&self, c: usize) -> f64 {
        let (p, r) = (self.precision(c), self.recall(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn macro_avg(&self, f: impl Fn(usize) -> f64) -> f64 {
        if self.classes() == 0 {
            return 0.0;
        }
        (0..self.classes()).map(f).sum::<f64>() / self.classes() as f64
    }

    pub fn macro_precision(&self) -> f64 {
        self.macro_avg(|c| self.precision(c))
    }

    pub fn macro_f1(&self) -> f64 {
        self.macro_avg(|c| self.f1(c))
    }
}

/// `recording_id, predicted_class, p_<class>...` per recording.
pub fn write_predictions<W: Write>(
    w: W,
    class_names: &[String],
    rows: &[(String, RecordingPrediction)],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["recording_id".to_string(), "predicted_class".to_string()];
    header.extend(class_names.iter().map(|n| format!("p_{n}")));
    out.write_record(&header)?;
    for (id, pred) in rows {
        if pred.fused.classes() != class_names.len() {
            return Err(Error::InvalidArgument(format!(
                "prediction for {id} has {} classes, expected {}",
                pred.fused.classes(),
                class_names.len()
            )));
        }
        let mut rec = vec![id.clone(), class_names[pred.label].clone()];
        rec.extend(pred.fused.probs().iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_predictions(path: impl AsRef<Path>, class_names: &[String], rows: &[(String, RecordingPrediction)]) -> Result<()> {
    write_predictions(std::fs::File::create(path)?, class_names, rows)
}
