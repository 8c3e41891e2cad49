//! Between-class examples: energy-normalized mixtures of two samples from
//! different classes, labelled with the mixing ratio.

use rand::Rng;

use crate::dsp::SpectroImage;
use crate::error::{Error, Result};
use crate::label::LabelDistribution;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BetweenClassSample<T> {
    /// `K x M x T` mixed image.
    pub image: Tensor<T>,
    pub label: LabelDistribution<T>,
    pub r: T,
    /// Indices of the two mixed samples.
    pub sources: (usize, usize),
}

/// Weights `(r, 1 - r)`, computed so that swapping the operands together
/// with `r -> 1 - r` swaps the weights bit for bit: the weight below one
/// half is always derived from the one above it, where `1 - w` is exact.
fn mix_weights<T: Scalar>(r: T) -> (T, T) {
    let half = T::lit(0.5);
    if r >= half {
        (r, T::one() - r)
    } else {
        let w2 = T::one() - r;
        (T::one() - w2, w2)
    }
}

/// `(r S1 + (1 - r) S2) / sqrt(r^2 + (1 - r)^2)` and `r y1 + (1 - r) y2`.
pub fn mix_between_class<T: Scalar>(
    s1: &Tensor<T>,
    y1: &LabelDistribution<T>,
    s2: &Tensor<T>,
    y2: &LabelDistribution<T>,
    r: T,
) -> Result<(Tensor<T>, LabelDistribution<T>)> {
    if !(r >= T::zero() && r <= T::one()) {
        return Err(Error::InvalidArgument(format!("mixing ratio {r} outside [0, 1]")));
    }
    if s1.shape() != s2.shape() {
        return Err(Error::Shape {
            op: "mix_between_class",
            detail: format!("{:?} vs {:?}", s1.shape(), s2.shape()),
        });
    }
    if y1.classes() != y2.classes() {
        return Err(Error::InvalidArgument("labels have different class counts".into()));
    }
    match (y1.hard_class(), y2.hard_class()) {
        (Some(a), Some(b)) if a != b => {}
        (Some(_), Some(_)) => return Err(Error::InvalidArgument("between-class mixing needs two different classes".into())),
        _ => return Err(Error::InvalidArgument("between-class mixing needs one-hot labels".into())),
    }
    let (w1, w2) = mix_weights(r);
    let norm = (w1 * w1 + w2 * w2).sqrt();
    let data = s1
        .data()
        .iter()
        .zip(s2.data())
        .map(|(&a, &b)| (w1 * a + w2 * b) / norm)
        .collect();
    let label = y1
        .probs()
        .iter()
        .zip(y2.probs())
        .map(|(&a, &b)| w1 * a + w2 * b)
        .collect();
    Ok((Tensor::new(s1.shape().to_vec(), data)?, LabelDistribution::new(label)?))
}

/// `batch` mixtures of uniformly drawn sample pairs with distinct classes
/// and fresh `r ~ U(0, 1)`.
pub fn sample_bc_batch<T: Scalar, R: Rng + ?Sized>(
    images: &[SpectroImage],
    labels: &[usize],
    classes: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<BetweenClassSample<T>>> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
    }
    let first = labels.first().copied();
    if first.is_none() || labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::InvalidArgument("between-class batches need at least two classes".into()));
    }
    let n = images.len();
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.random_range(0..n);
        let j = loop {
            let j = rng.random_range(0..n);
            if labels[j] != labels[i] {
                break j;
            }
        };
        let r = T::lit(rng.random::<f64>());
        let (image, label) = mix_between_class(
            &images[i].to_tensor(),
            &LabelDistribution::one_hot(labels[i], classes),
            &images[j].to_tensor(),
            &LabelDistribution::one_hot(labels[j], classes),
            r,
        )?;
        out.push(BetweenClassSample {
            image,
            label,
            r,
            sources: (i, j),
        });
    }
    Ok(out)
}
