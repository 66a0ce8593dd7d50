//! Labelled datasets and the synthetic separable-blob generator.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Box `[lo, hi]` applied to every input coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: f64,
    pub hi: f64,
}

impl Domain {
    pub const UNIT: Domain = Domain { lo: 0.0, hi: 1.0 };

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    domain: Option<Domain>,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        domain: Option<Domain>,
    ) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != inputs.nrows() {
            return Err(Error::DimensionMismatch {
                segment: "labels".into(),
                expected: inputs.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        if let Some(d) = domain {
            if d.lo > d.hi {
                return Err(Error::invalid(format!("empty domain [{}, {}]", d.lo, d.hi)));
            }
            if let Some(v) = inputs.iter().find(|v| !d.contains(**v)) {
                return Err(Error::invalid(format!(
                    "input value {v} outside domain [{}, {}]",
                    d.lo, d.hi
                )));
            }
        }
        let inputs = if inputs.is_standard_layout() {
            inputs
        } else {
            inputs.as_standard_layout().into_owned()
        };
        Ok(Self {
            inputs,
            labels,
            num_classes,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Option<Domain> {
        self.domain
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let m = self.dim();
        &self.inputs.as_slice().expect("standard layout")[i * m..(i + 1) * m]
    }

    /// Copies the given rows into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let m = self.dim();
        let mut xs = Array2::zeros((indices.len(), m));
        for (mut row, &i) in xs.rows_mut().into_iter().zip(indices) {
            row.as_slice_mut()
                .expect("fresh array")
                .copy_from_slice(self.input(i));
        }
        (xs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for {} examples",
                self.len()
            )));
        }
        let (inputs, labels) = self.gather(indices);
        Self::new(inputs, labels, self.num_classes, self.domain)
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Output of [`make_blobs_with_centers`]: the data and the hypercube vertex
/// (a `+-1` vector) each class was placed around.
#[derive(Clone, Debug)]
pub struct Blobs {
    pub dataset: Dataset,
    pub centers: Vec<Vec<f64>>,
}

/// Noise half-width of every blob; centres sit at `(1 + margin + BLOB_GAP) * c`.
const BLOB_GAP: f64 = 0.1;

/// Linearly separable blobs with an l_inf margin of at least `margin`.
///
/// Class `k` is centred on a distinct hypercube vertex `c_k` scaled by
/// `1 + margin + 0.1` and filled uniformly within l_inf radius 1. For every
/// pair of classes, `(c_k - c_j) . x >= margin * ||c_k - c_j||_1` holds on
/// class `k`, so the centres themselves certify the margin.
pub fn make_blobs(seed: u64, n: usize, m: usize, k: usize, margin: f64) -> Result<Dataset> {
    Ok(make_blobs_with_centers(seed, n, m, k, margin)?.dataset)
}

pub fn make_blobs_with_centers(
    seed: u64,
    n: usize,
    m: usize,
    k: usize,
    margin: f64,
) -> Result<Blobs> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::invalid(format!("margin must be >= 0, got {margin}")));
    }
    if n == 0 || m == 0 || k < 2 {
        return Err(Error::invalid("blobs need n >= 1, m >= 1 and k >= 2"));
    }
    if m < 64 && (k as u128) > (1u128 << m) {
        return Err(Error::Infeasible(format!(
            "{k} classes cannot be placed on the 2^{m} hypercube vertices"
        )));
    }
    let stream = RngStream::new(seed).child("blobs");
    let mut rng = stream.child("centers").rng();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centers.len() < k {
        let c: Vec<f64> = (0..m)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        if !centers.contains(&c) {
            centers.push(c);
        }
    }
    let scale = 1.0 + margin + BLOB_GAP;
    let mut rng = stream.child("points").rng();
    let mut inputs = Array2::zeros((n, m));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in inputs.rows_mut().into_iter().enumerate() {
        let class = i % k;
        for (v, c) in row.iter_mut().zip(&centers[class]) {
            *v = scale * c + rng.random_range(-1.0..=1.0);
        }
        labels.push(class);
    }
    let dataset = Dataset::new(inputs, labels, k, None)?;
    Ok(Blobs { dataset, centers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validation() {
        let x = Array2::zeros((2, 3));
        assert!(matches!(
            Dataset::new(Array2::zeros((0, 3)), vec![], 2, None),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            Dataset::new(x.clone(), vec![0, 2], 2, None),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
        let mut y = x.clone();
        y[[1, 2]] = 1.5;
        assert!(Dataset::new(y, vec![0, 1], 2, Some(Domain::UNIT)).is_err());
        let d = Dataset::new(x, vec![0, 1], 2, Some(Domain::UNIT)).unwrap();
        assert_eq!(d.subset(&[1]).unwrap().labels(), &[1]);
    }

    #[test]
    fn blobs_are_reproducible() {
        let a = make_blobs(1, 50, 3, 3, 0.2).unwrap();
        let b = make_blobs(1, 50, 3, 3, 0.2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_blobs(2, 50, 3, 3, 0.2).unwrap());
    }

    #[test]
    fn too_many_classes_for_the_cube() {
        assert!(matches!(
            make_blobs(1, 10, 2, 5, 0.0),
            Err(Error::Infeasible(_))
        ));
        assert!(make_blobs(1, 10, 2, 4, 0.0).is_ok());
    }

    #[test]
    fn centres_certify_the_margin() {
        let margin = 0.7;
        let blobs = make_blobs_with_centers(3, 200, 4, 4, margin).unwrap();
        let d = &blobs.dataset;
        for i in 0..d.len() {
            let x = d.input(i);
            let ck = &blobs.centers[d.labels()[i]];
            for cj in &blobs.centers {
                if cj == ck {
                    continue;
                }
                let diff: Vec<f64> = ck.iter().zip(cj).map(|(a, b)| a - b).collect();
                let score: f64 = diff.iter().zip(x).map(|(a, b)| a * b).sum();
                let l1: f64 = diff.iter().map(|v| v.abs()).sum();
                assert!(score >= margin * l1);
            }
        }
    }
}
