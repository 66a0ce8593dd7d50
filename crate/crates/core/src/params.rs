//! Flat parameter vectors with a named segment layout.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named block of parameters, e.g. `layer0.weight` with shape `[256, 784]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable parameters of a model, flattened in layout order.
///
/// The layout is shared between clones, so copying a vector only copies the
/// values.
#[derive(Clone, Debug)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<[Segment]>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && self.same_layout(other)
    }
}

impl ParamVector {
    pub fn zeros(layout: &[Segment]) -> Self {
        let len = layout.iter().map(Segment::size).sum();
        Self {
            values: vec![0.0; len],
            layout: layout.into(),
        }
    }

    pub fn from_values(layout: &[Segment], values: Vec<f64>) -> Result<Self> {
        let expected: usize = layout.iter().map(Segment::size).sum();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                segment: "<all>".into(),
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: layout.into(),
        })
    }

    /// A vector with the same layout and the given values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                segment: "<all>".into(),
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: Arc::clone(&self.layout),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: Arc::clone(&self.layout),
        }
    }

    /// Standard normal draw rescaled to unit Euclidean norm.
    pub fn random_unit<R: Rng + ?Sized>(layout: &[Segment], rng: &mut R) -> Self {
        let mut v = Self::zeros(layout);
        for x in v.values.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let n = v.norm();
        v.scale(1.0 / n);
        v
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn offset_of(&self, name: &str) -> Option<(usize, &Segment)> {
        let mut offset = 0;
        for seg in self.layout.iter() {
            if seg.name == name {
                return Some((offset, seg));
            }
            offset += seg.size();
        }
        None
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.offset_of(name)
            .map(|(off, seg)| &self.values[off..off + seg.size()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (off, size) = self.offset_of(name).map(|(o, s)| (o, s.size()))?;
        Some(&mut self.values[off..off + size])
    }

    /// Splits the vector into `(segment, values)` pairs in layout order.
    pub fn unflatten(&self) -> Vec<(Segment, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.layout.len());
        let mut offset = 0;
        for seg in self.layout.iter() {
            let size = seg.size();
            out.push((seg.clone(), self.values[offset..offset + size].to_vec()));
            offset += size;
        }
        out
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(parts: Vec<(Segment, Vec<f64>)>) -> Result<Self> {
        let mut layout = Vec::with_capacity(parts.len());
        let mut values = Vec::new();
        for (seg, vals) in parts {
            if vals.len() != seg.size() {
                return Err(Error::DimensionMismatch {
                    expected: seg.size(),
                    segment: seg.name,
                    actual: vals.len(),
                });
            }
            values.extend_from_slice(&vals);
            layout.push(seg);
        }
        Ok(Self {
            values,
            layout: layout.into(),
        })
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.values.len() != other.values.len() || !self.same_layout(other) {
            return Err(Error::DimensionMismatch {
                segment: "<layout>".into(),
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `self + alpha * other` as a new vector.
    pub fn offset(&self, alpha: f64, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(alpha, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.offset(-1.0, other)
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Cosine similarity; `None` when either vector is zero.
    pub fn cosine(&self, other: &Self) -> Option<f64> {
        let denom = self.norm() * other.norm();
        (denom > 0.0).then(|| self.dot(other) / denom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Vec<Segment> {
        vec![Segment::new("w", vec![2, 3]), Segment::new("b", vec![2])]
    }

    #[test]
    fn segments_address_the_right_slices() {
        let v = ParamVector::from_values(&layout(), (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(v.segment("w").unwrap(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(v.segment("b").unwrap(), &[6.0, 7.0]);
        assert!(v.segment("nope").is_none());
    }

    #[test]
    fn wrong_length_is_rejected() {
        let err = ParamVector::from_values(&layout(), vec![0.0; 7]).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 8,
                actual: 7,
                ..
            }
        ));
        let mut parts = ParamVector::zeros(&layout()).unflatten();
        parts[1].1.push(1.0);
        match ParamVector::flatten(parts).unwrap_err() {
            Error::DimensionMismatch { segment, .. } => assert_eq!(segment, "b"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn algebra() {
        let a = ParamVector::from_values(&layout(), vec![1.0; 8]).unwrap();
        let b = ParamVector::from_values(&layout(), vec![2.0; 8]).unwrap();
        assert_eq!(a.dot(&b), 16.0);
        assert_eq!(a.offset(0.5, &b).unwrap().values(), &[2.0; 8]);
        assert_eq!(b.sub(&a).unwrap(), a);
        assert!((a.distance(&b).unwrap() - 8f64.sqrt()).abs() < 1e-15);
        assert!((a.cosine(&b).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(a.cosine(&a.zeros_like()), None);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_bit_exact(vals in prop::collection::vec(-1e6f64..1e6, 8)) {
            let v = ParamVector::from_values(&layout(), vals).unwrap();
            let back = ParamVector::flatten(v.unflatten()).unwrap();
            prop_assert_eq!(back.values(), v.values());
            prop_assert_eq!(back.layout(), v.layout());
        }
    }
}
