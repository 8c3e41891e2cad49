use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A probability vector over `C` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution<T>(Vec<T>);

impl<T: Scalar> LabelDistribution<T> {
    /// Validates non-negativity and unit mass (within `1e-4`).
    pub fn new(p: Vec<T>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidArgument("empty label distribution".into()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidArgument("label distribution has negative or non-finite entries".into()));
        }
        let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidArgument(format!("label distribution sums to {sum}")));
        }
        Ok(Self(p))
    }

    /// Normalizes non-negative weights to unit mass.
    pub fn from_weights(w: Vec<T>) -> Result<Self> {
        let sum: T = w.iter().copied().sum();
        if !(sum > T::zero()) || !sum.is_finite() {
            return Err(Error::InvalidArgument("weights must have positive finite mass".into()));
        }
        Self::new(w.into_iter().map(|v| v / sum).collect())
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut v = vec![T::zero(); classes];
        v[class] = T::one();
        Self(v)
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![T::one() / T::lit(classes as f64); classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    /// Index of the largest probability (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// `Some(c)` when the distribution puts all its mass on class `c`.
    pub fn hard_class(&self) -> Option<usize> {
        let c = self.argmax();
        (self.0[c] == T::one()).then_some(c)
    }
}

impl<T> std::ops::Index<usize> for LabelDistribution<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(LabelDistribution::new(vec![0.3f64, 0.7]).is_ok());
        assert!(LabelDistribution::new(vec![0.3f64, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![-0.1f64, 1.1]).is_err());
        assert!(LabelDistribution::<f64>::new(vec![]).is_err());
        assert!(LabelDistribution::from_weights(vec![0.0f64, 0.0]).is_err());
        let d = LabelDistribution::from_weights(vec![1.0f64, 3.0]).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
        assert_eq!(d.argmax(), 1);
    }

    #[test]
    fn one_hot_and_uniform() {
        let d = LabelDistribution::<f32>::one_hot(2, 4);
        assert_eq!(d.hard_class(), Some(2));
        assert_eq!(LabelDistribution::<f32>::uniform(4).probs(), &[0.25; 4]);
        assert_eq!(LabelDistribution::<f32>::uniform(4).hard_class(), None);
    }
}
