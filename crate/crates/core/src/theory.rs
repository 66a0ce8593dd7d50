//! Closed forms for linear models: the adversarial logistic loss with its
//! derivatives and Hessian spectrum, the version space, the analytic lower
//! bound on `g_eps`, the threshold `eps_bar`, and `T_eps` membership.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::{bruteforce_adv_loss, AdvBudget, Norm};
use crate::data::{make_blobs_with_centers, Dataset};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, sigmoid, softplus, Arch, Model};
use crate::objective::LossOracle;
use crate::params::{ParamVector, Segment};
use crate::rng::RngStream;

/// `sigma'(z) = sigma(z) sigma(-z)`, symmetric in `z` and at most 1/4.
pub fn sigmoid_slope(z: f64) -> f64 {
    sigmoid(z) * sigmoid(-z)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Binary data with `+1/-1` labels and the norm of the attack budget.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProblem {
    inputs: Array2<f64>,
    labels: Vec<f64>,
    norm: Norm,
}

impl LogisticProblem {
    pub fn new(inputs: Array2<f64>, labels: Vec<f64>, norm: Norm) -> Result<Self> {
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
        if let Some(bad) = labels.iter().find(|y| **y != 1.0 && **y != -1.0) {
            return Err(Error::invalid(format!(
                "logistic labels must be +1 or -1, got {bad}"
            )));
        }
        Ok(Self {
            inputs: inputs.as_standard_layout().into_owned(),
            labels,
            norm,
        })
    }

    /// Class 0 maps to `+1`, class 1 to `-1`.
    pub fn from_dataset(data: &Dataset, norm: Norm) -> Result<Self> {
        if data.num_classes() != 2 {
            return Err(Error::invalid(
                "a logistic problem needs exactly two classes",
            ));
        }
        let labels = data
            .labels()
            .iter()
            .map(|&y| if y == 0 { 1.0 } else { -1.0 })
            .collect();
        Self::new(data.inputs().to_owned(), labels, norm)
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

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let m = self.dim();
        &self.inputs.as_slice().expect("standard layout")[i * m..(i + 1) * m]
    }

    /// `||w||_q` for the dual `q` of the budget norm.
    pub fn dual_norm(&self, w: &[f64]) -> f64 {
        self.norm.dual_of(w)
    }

    /// `w / ||w||_q`.
    pub fn normalize(&self, w: &[f64]) -> Result<Vec<f64>> {
        let n = self.dual_norm(w);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(
                "cannot normalise a zero weight vector".into(),
            ));
        }
        Ok(w.iter().map(|v| v / n).collect())
    }

    fn check_w(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                segment: "weight".into(),
                expected: self.dim(),
                actual: w.len(),
            });
        }
        let n = self.dual_norm(w);
        if (n - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!(
                "weights must have unit dual norm, got {n}"
            )));
        }
        Ok(())
    }

    /// `y_i w^T x_i - eps` for every example.
    fn margins(&self, w: &[f64], eps: f64) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.labels[i] * dot(w, self.input(i)) - eps)
            .collect()
    }
}

/// `(1/N) sum log(1 + exp(-y w^T x + eps))` without the norm check.
pub fn adv_logistic_loss_raw(prob: &LogisticProblem, w: &[f64], eps: f64) -> f64 {
    let z = prob.margins(w, eps);
    z.iter().map(|z| softplus(-z)).sum::<f64>() / prob.len() as f64
}

/// Gradient and Hessian of [`adv_logistic_loss_raw`] in `w`.
pub fn adv_logistic_grad_hessian_raw(
    prob: &LogisticProblem,
    w: &[f64],
    eps: f64,
) -> (Vec<f64>, DMatrix<f64>) {
    let m = prob.dim();
    let n = prob.len() as f64;
    let z = prob.margins(w, eps);
    let mut grad = vec![0.0; m];
    let mut hess = DMatrix::zeros(m, m);
    for (i, zi) in z.iter().enumerate() {
        let x = prob.input(i);
        let y = prob.labels[i];
        let c = sigmoid(-zi);
        for (g, xj) in grad.iter_mut().zip(x) {
            *g -= c * y * xj / n;
        }
        let s = sigmoid_slope(*zi) / n;
        let xv = DVector::from_column_slice(x);
        hess.ger(s, &xv, &xv, 1.0);
    }
    (grad, hess)
}

/// The adversarial logistic loss for unit-dual-norm `w`.
pub fn adv_logistic_loss(prob: &LogisticProblem, w: &[f64], eps: f64) -> Result<f64> {
    prob.check_w(w)?;
    Ok(adv_logistic_loss_raw(prob, w, eps))
}

pub fn adv_logistic_grad_hessian(
    prob: &LogisticProblem,
    w: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    prob.check_w(w)?;
    Ok(adv_logistic_grad_hessian_raw(prob, w, eps))
}

/// The closed-form loss as a [`LossOracle`] over a single `weight` segment,
/// with `eps` held fixed.
#[derive(Clone, Debug)]
pub struct LogisticClosedForm<'a> {
    pub prob: &'a LogisticProblem,
    pub eps: f64,
}

impl LogisticClosedForm<'_> {
    pub fn layout(&self) -> Vec<Segment> {
        vec![Segment::new("weight", vec![self.prob.dim()])]
    }

    pub fn params(&self, w: &[f64]) -> Result<ParamVector> {
        ParamVector::from_values(&self.layout(), w.to_vec())
    }

    pub fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        adv_logistic_grad_hessian_raw(self.prob, w, self.eps).1
    }
}

impl LossOracle for LogisticClosedForm<'_> {
    fn loss(&self, theta: &ParamVector, _stream: &RngStream) -> Result<f64> {
        Ok(adv_logistic_loss_raw(self.prob, theta.values(), self.eps))
    }

    fn loss_grad(&self, theta: &ParamVector, _stream: &RngStream) -> Result<(f64, ParamVector)> {
        let (g, _) = adv_logistic_grad_hessian_raw(self.prob, theta.values(), self.eps);
        Ok((
            adv_logistic_loss_raw(self.prob, theta.values(), self.eps),
            theta.with_values(g)?,
        ))
    }
}

/// A direction `w` with `||w||_q = 1` and `y_i w^T x_i >= margin` for all `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginCertificate {
    pub margin: f64,
    pub direction: Vec<f64>,
}

impl MarginCertificate {
    /// The largest margin `direction` certifies (after normalisation).
    pub fn of(prob: &LogisticProblem, direction: &[f64]) -> Result<Self> {
        let w = prob.normalize(direction)?;
        let margin = prob
            .margins(&w, 0.0)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            margin,
            direction: w,
        })
    }

    /// Checks the certificate on `prob`, naming the first violating example.
    pub fn verify(&self, prob: &LogisticProblem) -> Result<()> {
        prob.check_w(&self.direction)?;
        for (i, z) in prob.margins(&self.direction, 0.0).into_iter().enumerate() {
            if z < self.margin - 1e-12 {
                return Err(Error::CertificateViolated {
                    index: i,
                    margin: z,
                    required: self.margin,
                });
            }
        }
        Ok(())
    }
}

/// Two-class blobs with a certified margin of at least `margin` under `norm`.
pub fn separable_logistic(
    seed: u64,
    n: usize,
    m: usize,
    margin: f64,
    norm: Norm,
) -> Result<(LogisticProblem, MarginCertificate)> {
    let blobs = make_blobs_with_centers(seed, n, m, 2, margin)?;
    let prob = LogisticProblem::from_dataset(&blobs.dataset, norm)?;
    let d: Vec<f64> = blobs.centers[0]
        .iter()
        .zip(&blobs.centers[1])
        .map(|(a, b)| a - b)
        .collect();
    let cert = MarginCertificate::of(&prob, &d)?;
    if cert.margin < margin {
        return Err(Error::Infeasible(format!(
            "generated margin {} below requested {margin}",
            cert.margin
        )));
    }
    Ok((prob, cert))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub eps: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Smallest eigenvalue above `1e-12`, if any.
    pub lambda_min_pos: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub rows: Vec<SpectrumRow>,
    /// Largest decrease of `lambda_max` or `lambda_min` between neighbouring
    /// grid points (0 when monotone).
    pub worst_drop: f64,
    /// Largest decrease of `m^T H m` over the sampled directions.
    pub worst_directional_drop: f64,
    pub pass: bool,
}

/// Dense spectrum of the adversarial logistic Hessian at `w` across a budget
/// grid, checking that curvature never decreases.
///
/// Requires `cert` to hold for `w` on `prob` with a margin at least the largest
/// grid value. `directions` random unit vectors from `stream` are used for the
/// directional check.
pub fn eig_monotonicity_check(
    prob: &LogisticProblem,
    cert: &MarginCertificate,
    eps_grid: &[f64],
    directions: usize,
    slack: f64,
    stream: &RngStream,
) -> Result<MonotonicityReport> {
    cert.verify(prob)?;
    if eps_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("eps grid must be sorted"));
    }
    if let Some(&top) = eps_grid.last() {
        if top > cert.margin {
            let (index, margin) = prob
                .margins(&cert.direction, 0.0)
                .into_iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty");
            return Err(Error::CertificateViolated {
                index,
                margin,
                required: top,
            });
        }
    }
    let w = &cert.direction;
    let m = prob.dim();
    let mut rng = stream.rng();
    let dirs: Vec<DVector<f64>> = (0..directions)
        .map(|_| {
            let v = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            v / n
        })
        .collect();
    let mut rows = Vec::with_capacity(eps_grid.len());
    let mut curv: Vec<Vec<f64>> = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let (_, h) = adv_logistic_grad_hessian(prob, w, eps)?;
        curv.push(dirs.iter().map(|d| d.dot(&(&h * d))).collect());
        let eig = SymmetricEigen::new(h);
        let vals = eig.eigenvalues;
        let lambda_max = vals.max();
        let lambda_min = vals.min();
        let lambda_min_pos = vals.iter().copied().filter(|v| *v > 1e-12).reduce(f64::min);
        rows.push(SpectrumRow {
            eps,
            lambda_max,
            lambda_min,
            lambda_min_pos,
        });
    }
    let mut worst_drop: f64 = 0.0;
    let mut worst_directional_drop: f64 = 0.0;
    for k in 1..rows.len() {
        worst_drop = worst_drop
            .max(rows[k - 1].lambda_max - rows[k].lambda_max)
            .max(rows[k - 1].lambda_min - rows[k].lambda_min);
        for (a, b) in curv[k - 1].iter().zip(&curv[k]) {
            worst_directional_drop = worst_directional_drop.max(a - b);
        }
    }
    Ok(MonotonicityReport {
        pass: worst_drop <= slack && worst_directional_drop <= slack,
        rows,
        worst_drop,
        worst_directional_drop,
    })
}

fn linear_rows(model: &Model) -> Result<(usize, usize, &[f64])> {
    match *model.arch() {
        Arch::LinearMulticlass { inputs, classes } => {
            Ok((inputs, classes, model.params().values()))
        }
        _ => Err(Error::UnsupportedArch {
            op: "linear theory",
            expected: "a linear multiclass model",
        }),
    }
}

fn check_point(inputs: usize, classes: usize, x: &[f64], y: usize) -> Result<()> {
    if x.len() != inputs {
        return Err(Error::DimensionMismatch {
            segment: "input".into(),
            expected: inputs,
            actual: x.len(),
        });
    }
    if y >= classes {
        return Err(Error::LabelOutOfRange { label: y, classes });
    }
    Ok(())
}

/// Row differences `w_j - w_y` for every class `j`.
fn gaps(model: &Model, x: &[f64], y: usize) -> Result<Vec<Vec<f64>>> {
    let (m, k, w) = linear_rows(model)?;
    check_point(m, k, x, y)?;
    let wy = &w[y * m..(y + 1) * m];
    Ok((0..k)
        .map(|j| {
            w[j * m..(j + 1) * m]
                .iter()
                .zip(wy)
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect())
}

/// Whether every point of the l_inf ball of radius `eps` around `x` is
/// classified as `y` (ties count as correct).
pub fn version_space_member(model: &Model, x: &[f64], y: usize, eps: f64) -> Result<bool> {
    let d = gaps(model, x, y)?;
    Ok(d.iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .all(|(_, dj)| dot(dj, x) + eps * Norm::Inf.dual_of(dj) <= 0.0))
}

pub fn version_space_member_dataset(model: &Model, data: &Dataset, eps: f64) -> Result<bool> {
    for i in 0..data.len() {
        if !version_space_member(model, data.input(i), data.labels()[i], eps)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Unit-p-norm direction `u` with `d . u = ||d||_q`.
fn dual_direction(d: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Inf => d.iter().map(|v| crate::attack::sign(*v)).collect(),
        Norm::Two => {
            let n = Norm::Two.of(d);
            d.iter().map(|v| v / n).collect()
        }
    }
}

/// The class `m` maximising `||w_m - w_y||_q` and its gap vector.
fn widest_gap(model: &Model, x: &[f64], y: usize, norm: Norm) -> Result<Option<(usize, Vec<f64>)>> {
    let d = gaps(model, x, y)?;
    let mut best: Option<(usize, f64)> = None;
    for (j, dj) in d.iter().enumerate() {
        let n = norm.dual_of(dj);
        if n > 0.0 && best.is_none_or(|(_, b)| n > b) {
            best = Some((j, n));
        }
    }
    Ok(best.map(|(j, _)| (j, d[j].clone())))
}

/// Larger of the clean loss and the loss at `x + eps u`, where `u` pushes
/// hardest along the widest gap `w_m - w_y`. Both points lie in the ball, so
/// this stays below `g_eps(x, W)`; it is exact at `eps = 0`.
/// Falls back to the clean loss when every row equals `w_y`.
pub fn g_lower_bound(model: &Model, x: &[f64], y: usize, eps: f64, norm: Norm) -> Result<f64> {
    let Some((_, dm)) = widest_gap(model, x, y, norm)? else {
        return model.loss(x, y);
    };
    if eps == 0.0 {
        return model.loss(x, y);
    }
    let u = dual_direction(&dm, norm);
    let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
    let logits = model.forward_logits(&xp)?;
    Ok(cross_entropy(&logits, y).max(model.loss(x, y)?))
}

/// `(log(K - 1) - (w_m - w_y) . x) / ||w_m - w_y||_q`: beyond this budget the
/// lower bound reaches `log K`.
pub fn eps_bar(model: &Model, x: &[f64], y: usize, norm: Norm) -> Result<f64> {
    let (_, k, _) = linear_rows(model)?;
    let Some((_, dm)) = widest_gap(model, x, y, norm)? else {
        return Err(Error::Degenerate(
            "every class row equals the label row".into(),
        ));
    };
    Ok(((k as f64 - 1.0).ln() - dot(&dm, x)) / norm.dual_of(&dm))
}

/// Scaled copy `gamma W`.
pub fn scaled(model: &Model, gamma: f64) -> Result<Model> {
    let mut p = model.params().clone();
    p.scale(gamma);
    model.with_params(p)
}

/// Largest [`eps_bar`] over the nonzero scalings `gamma W` of a grid. Above it
/// the lower bound is at least `log K` at every grid point.
pub fn eps_bar_over_grid(
    model: &Model,
    x: &[f64],
    y: usize,
    norm: Norm,
    gammas: &[f64],
) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for &g in gammas.iter().filter(|g| **g != 0.0) {
        worst = worst.max(eps_bar(&scaled(model, g)?, x, y, norm)?);
    }
    Ok(worst)
}

/// Default symmetric scaling grid for [`t_set_member`].
pub const GAMMA_GRID: [f64; 11] = [-4.0, -2.0, -1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0, 2.0, 4.0];

fn check_gamma_grid(gammas: &[f64]) -> Result<()> {
    let symmetric = gammas.iter().all(|g| gammas.contains(&-g));
    if !gammas.contains(&0.0) || !symmetric {
        return Err(Error::invalid("gamma grid must be symmetric and contain 0"));
    }
    Ok(())
}

/// Exact `g_eps(x, gamma W)` for each `gamma`, from the vertex oracle.
pub fn g_along_ray(
    model: &Model,
    x: &[f64],
    y: usize,
    eps: f64,
    gammas: &[f64],
) -> Result<Vec<f64>> {
    let budget = AdvBudget::linf(eps);
    gammas
        .iter()
        .map(|&g| Ok(bruteforce_adv_loss(&scaled(model, g)?, x, y, &budget)?.0))
        .collect()
}

/// Whether `gamma = 0` minimises `g_eps(x, gamma W)` over the grid within
/// `tol`. By convexity in `gamma` this decides membership of `W` in `T_eps`
/// up to grid resolution.
pub fn t_set_member(
    model: &Model,
    x: &[f64],
    y: usize,
    eps: f64,
    gammas: &[f64],
    tol: f64,
) -> Result<bool> {
    check_gamma_grid(gammas)?;
    let g = g_along_ray(model, x, y, eps, gammas)?;
    let at_zero = g[gammas.iter().position(|v| *v == 0.0).expect("checked")];
    Ok(g.iter().all(|v| *v >= at_zero - tol))
}

/// [`t_set_member`] for the dataset-level loss `L_eps`.
pub fn t_set_member_dataset(
    model: &Model,
    data: &Dataset,
    eps: f64,
    gammas: &[f64],
    tol: f64,
) -> Result<bool> {
    check_gamma_grid(gammas)?;
    let mut totals = vec![0.0; gammas.len()];
    for i in 0..data.len() {
        let g = g_along_ray(model, data.input(i), data.labels()[i], eps, gammas)?;
        for (t, v) in totals.iter_mut().zip(g) {
            *t += v / data.len() as f64;
        }
    }
    let at_zero = totals[gammas.iter().position(|v| *v == 0.0).expect("checked")];
    Ok(totals.iter().all(|v| *v >= at_zero - tol))
}
