//! Linear one-vs-rest SVM on pooled network features, with Platt scaling
//! to turn decision scores into class posteriors.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::SpectroImage;
use crate::error::{Error, Result};
use crate::label::LabelDistribution;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::io::{load_tensors, save_tensors};
use crate::tensor::Tensor;

pub const DEFAULT_C: f64 = 0.1;
pub const DEFAULT_EPOCHS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SvmConfig {
    /// Hinge-loss trade-off.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
        }
    }
}

/// `P(y = 1 | s) = 1 / (1 + exp(a s + b))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    pub fn prob(&self, s: f64) -> f64 {
        (-softplus(self.a * s + self.b)).exp()
    }

    fn log_prob(&self, s: f64) -> f64 {
        -softplus(self.a * s + self.b)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    /// One weight vector per class.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub platt: Vec<Platt>,
}

/// Objective of the averaged iterate after each epoch, per class.
#[derive(Clone, Debug, Default)]
pub struct SvmReport {
    pub objective: Vec<Vec<f64>>,
}

impl SvmModel {
    pub fn classes(&self) -> usize {
        self.w.len()
    }

    pub fn dim(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.b).map(|(w, b)| dot(w, x) + b).collect()
    }

    /// Per-class Platt probabilities normalized to sum to one.
    pub fn predict_proba(&self, x: &[f64]) -> Result<LabelDistribution<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                op: "svm_predict_proba",
                detail: format!("feature length {}, model expects {}", x.len(), self.dim()),
            });
        }
        let logp: Vec<f64> = self.scores(x).iter().zip(&self.platt).map(|(&s, p)| p.log_prob(s)).collect();
        let top = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        LabelDistribution::from_weights(logp.iter().map(|l| (l - top).exp()).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba(x)?.argmax())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::new();
        for c in 0..self.classes() {
            out.push((format!("svm.w.{c}"), Tensor::from_vec(self.w[c].clone())));
            out.push((format!("svm.b.{c}"), Tensor::from_vec(vec![self.b[c]])));
            out.push((format!("platt.a.{c}"), Tensor::from_vec(vec![self.platt[c].a])));
            out.push((format!("platt.b.{c}"), Tensor::from_vec(vec![self.platt[c].b])));
        }
        out
    }

    pub fn from_named(named: Vec<(String, Tensor<f64>)>) -> Result<Self> {
        let map: std::collections::BTreeMap<_, _> = named.into_iter().collect();
        let fmt = |detail: String| Error::Format { what: "svm model", detail };
        let classes = (0..).take_while(|c| map.contains_key(&format!("svm.w.{c}"))).count();
        if classes < 2 || map.len() != 4 * classes {
            return Err(fmt(format!("{} tensors for {classes} classes", map.len())));
        }
        let get = |name: String| map.get(&name).ok_or_else(|| fmt(format!("missing {name}")));
        let scalar = |name: String| -> Result<f64> {
            let t = get(name.clone())?;
            match t.data() {
                [v] => Ok(*v),
                _ => Err(fmt(format!("{name} must hold one value"))),
            }
        };
        let mut m = SvmModel {
            w: Vec::new(),
            b: Vec::new(),
            platt: Vec::new(),
        };
        for c in 0..classes {
            m.w.push(get(format!("svm.w.{c}"))?.data().to_vec());
            m.b.push(scalar(format!("svm.b.{c}"))?);
            m.platt.push(Platt {
                a: scalar(format!("platt.a.{c}"))?,
                b: scalar(format!("platt.b.{c}"))?,
            });
        }
        if m.w.iter().any(|w| w.len() != m.dim()) {
            return Err(fmt("weight vectors differ in length".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tensors(path, &self.to_named())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named(load_tensors(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pooled feature vectors of `images` in inference mode.
pub fn extract_features<T: Scalar>(model: &Model<T>, images: &[SpectroImage]) -> Result<Vec<Vec<f64>>> {
    Ok(model
        .infer(images, false)?
        .into_iter()
        .map(|o| o.features.iter().map(|v| v.as_f64()).collect())
        .collect())
}

/// `lambda/2 |w|^2 + 1/n sum max(0, 1 - y (w.x + b))`, with the bias
/// regularized as the weight of a constant feature.
fn objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> f64 {
    let hinge: f64 = xs.iter().zip(ys).map(|(x, y)| (1.0 - y * (dot(w, x) + b)).max(0.0)).sum();
    0.5 * lambda * (dot(w, w) + b * b) + hinge / xs.len() as f64
}

/// Averaged stochastic sub-gradient descent on the primal hinge objective
/// with `lambda = 1 / (C n)` and step `1 / (lambda t)`. The objective of the
/// averaged iterate is evaluated after every epoch and the lowest one kept.
fn fit_binary(xs: &[Vec<f64>], ys: &[f64], cfg: &SvmConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, Vec<f64>) {
    let (n, d) = (xs.len(), xs[0].len());
    let lambda = 1.0 / (cfg.c * n as f64);
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let (mut avg_w, mut avg_b) = (vec![0.0; d], 0.0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, Vec::new(), 0.0);
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let margin = ys[i] * (dot(&w, &xs[i]) + b);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            b *= shrink;
            if margin < 1.0 {
                for (v, x) in w.iter_mut().zip(&xs[i]) {
                    *v += eta * ys[i] * x;
                }
                b += eta * ys[i];
            }
            let k = 1.0 / t as f64;
            for (a, v) in avg_w.iter_mut().zip(&w) {
                *a += (v - *a) * k;
            }
            avg_b += (b - avg_b) * k;
        }
        let obj = objective(&avg_w, avg_b, xs, ys, lambda);
        if obj < best.0 {
            best = (obj, avg_w.clone(), avg_b);
        }
        history.push(obj);
    }
    (best.1, best.2, history)
}

/// Platt sigmoid by Newton's method with backtracking on smoothed targets
/// `(N+ + 1) / (N+ + 2)` and `1 / (N- + 2)`.
pub fn fit_platt(scores: &[f64], positive: &[bool]) -> Result<Platt> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let targets: Vec<f64> = positive.iter().map(|&p| if p { hi } else { lo }).collect();
    // negative log-likelihood; f = a s + b, p = 1 / (1 + e^f)
    let nll = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(&targets)
            .map(|(&s, &t)| {
                let f = a * s + b;
                t * softplus(f) + (1.0 - t) * softplus(-f)
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((n_neg + 1.0) / (n_pos + 1.0)).ln());
    let mut fval = nll(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
        for (&s, &t) in scores.iter().zip(&targets) {
            let f = a * s + b;
            let p = (-softplus(f)).exp();
            let q = (-softplus(-f)).exp();
            let d2 = p * q;
            h11 += s * s * d2;
            h22 += d2;
            h21 += s * d2;
            let d1 = t - p;
            g1 += s * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = nll(na, nb);
            if nf < fval + 1e-4 * step * gd {
                (a, b, fval) = (na, nb, nf);
                break;
            }
            step /= 2.0;
        }
        if step < 1e-10 {
            break;
        }
    }
    if !(a < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Platt slope {a} is not negative: scores do not rank the class"
        )));
    }
    Ok(Platt { a, b })
}

/// One-vs-rest linear SVMs on `features`, then a Platt fit per class on
/// its training scores.
pub fn train_svm(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &SvmConfig) -> Result<(SvmModel, SvmReport)> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("an SVM needs at least two classes".into()));
    }
    if !(cfg.c > 0.0 && cfg.c.is_finite()) || cfg.epochs == 0 {
        return Err(Error::Config(format!("invalid SVM settings C = {}, epochs = {}", cfg.c, cfg.epochs)));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} outside {classes} classes")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!("class {c} has {} samples, need at least 2", counts[c])));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("features must be non-empty, equally long and finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SvmModel {
        w: Vec::new(),
        b: Vec::new(),
        platt: Vec::new(),
    };
    let mut report = SvmReport::default();
    for c in 0..classes {
        let ys: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
        let (w, b, history) = fit_binary(features, &ys, cfg, &mut rng);
        let scores: Vec<f64> = features.iter().map(|x| dot(&w, x) + b).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        model.platt.push(fit_platt(&scores, &positive)?);
        model.w.push(w);
        model.b.push(b);
        report.objective.push(history);
    }
    Ok((model, report))
}
