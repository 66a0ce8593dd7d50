//! Landscape probes: finite-difference Hessian-vector products, top
//! eigenpairs by deflated power iteration, eigenvalue normalisation, 2-D loss
//! grids and the perturbation-similarity probe.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{adversarial_eval, pgd_rows, AdvBudget, PgdConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Arch, Model};
use crate::objective::{AdversarialObjective, LossOracle};
use crate::params::ParamVector;
use crate::rng::RngStream;

pub const DEFAULT_FD_RADIUS: f64 = 1e-3;

fn check_unit(v: &ParamVector, what: &str) -> Result<()> {
    let n = v.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "{what} must have unit norm, got {n}"
        )));
    }
    Ok(())
}

/// `(grad L(theta + r v) - grad L(theta - r v)) / (2 r)`.
///
/// Both gradients use the same `stream`, so a PGD-based oracle sees the same
/// random starts on either side.
pub fn hvp(
    oracle: &dyn LossOracle,
    theta: &ParamVector,
    v: &ParamVector,
    r: f64,
    stream: &RngStream,
) -> Result<ParamVector> {
    check_unit(v, "hvp direction")?;
    if !(r > 0.0) {
        return Err(Error::invalid(format!(
            "fd radius must be positive, got {r}"
        )));
    }
    let (_, gp) = oracle.loss_grad(&theta.offset(r, v)?, stream)?;
    let (_, gm) = oracle.loss_grad(&theta.offset(-r, v)?, stream)?;
    let mut out = gp.sub(&gm)?;
    out.scale(1.0 / (2.0 * r));
    if !out.is_finite() {
        return Err(Error::NonFiniteGradient { batch: 0 });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerConfig {
    pub k: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
}

fn default_tol() -> f64 {
    1e-6
}
fn default_iters() -> usize {
    200
}

impl PowerConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            tol: default_tol(),
            max_iters: default_iters(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenReport {
    /// Signed Rayleigh quotients, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<ParamVector>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
    pub normalization: Option<f64>,
}

impl EigenReport {
    pub fn normalized(&self) -> Option<Vec<f64>> {
        self.normalization
            .map(|c| self.eigenvalues.iter().map(|l| l / c).collect())
    }

    pub fn with_normalization(mut self, c: f64) -> Self {
        self.normalization = Some(c);
        self
    }
}

fn deflate(w: &mut ParamVector, basis: &[ParamVector]) -> Result<()> {
    for b in basis {
        let c = w.dot(b);
        w.axpy(-c, b)?;
    }
    Ok(())
}

/// Top-`k` eigenpairs of a symmetric operator by power iteration.
///
/// After every matvec the iterate is orthogonalised against the accepted
/// eigenvectors. An eigenpair converges when the Rayleigh quotient's relative
/// change drops below `tol`; otherwise it is reported after `max_iters` with
/// `converged = false`. Power iteration finds the largest-magnitude
/// eigenvalue of the deflated operator, so a dominant negative eigenvalue is
/// reported before smaller positive ones would be; the final list is sorted.
pub fn top_eigenpairs<F>(
    mut matvec: F,
    template: &ParamVector,
    cfg: &PowerConfig,
    stream: &RngStream,
) -> Result<EigenReport>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    if cfg.k == 0 || cfg.k > template.len() {
        return Err(Error::invalid(format!(
            "k must be in 1..={}, got {}",
            template.len(),
            cfg.k
        )));
    }
    let mut vectors: Vec<ParamVector> = Vec::with_capacity(cfg.k);
    let mut pairs: Vec<(f64, ParamVector, bool, usize)> = Vec::with_capacity(cfg.k);
    for j in 0..cfg.k {
        let mut v = ParamVector::random_unit(
            template.layout(),
            &mut stream.child(format!("eig-{j}")).rng(),
        );
        deflate(&mut v, &vectors)?;
        let n = v.norm();
        v.scale(1.0 / n);
        let mut lambda = f64::NAN;
        let mut converged = false;
        let mut iters = 0;
        let mut accepted = v.clone();
        while iters < cfg.max_iters {
            iters += 1;
            let mut w = matvec(&v)?;
            if !w.is_finite() {
                return Err(Error::NonFiniteGradient { batch: iters });
            }
            let rq = v.dot(&w);
            accepted = v.clone();
            let prev = lambda;
            lambda = rq;
            deflate(&mut w, &vectors)?;
            let wn = w.norm();
            if (lambda - prev).abs() <= cfg.tol * lambda.abs() || wn == 0.0 {
                converged = true;
                break;
            }
            w.scale(1.0 / wn);
            v = w;
        }
        vectors.push(accepted.clone());
        pairs.push((lambda, accepted, converged, iters));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut report = EigenReport {
        eigenvalues: Vec::with_capacity(cfg.k),
        eigenvectors: Vec::with_capacity(cfg.k),
        converged: Vec::with_capacity(cfg.k),
        iterations: Vec::with_capacity(cfg.k),
        normalization: None,
    };
    for (l, v, c, i) in pairs {
        report.eigenvalues.push(l);
        report.eigenvectors.push(v);
        report.converged.push(c);
        report.iterations.push(i);
    }
    Ok(report)
}

/// Top eigenpairs of the Hessian of `oracle` at `theta` via [`hvp`]. Every
/// matvec reuses one stream, so the operator is the same across iterations.
pub fn hessian_eigenpairs(
    oracle: &dyn LossOracle,
    theta: &ParamVector,
    cfg: &PowerConfig,
    fd_radius: f64,
    stream: &RngStream,
) -> Result<EigenReport> {
    let hvp_stream = stream.child("hvp");
    top_eigenpairs(
        |v| hvp(oracle, theta, v, fd_radius, &hvp_stream),
        theta,
        cfg,
        &stream.child("power"),
    )
}

/// Mean PGD adversarial loss over `n_samples` freshly initialised parameter
/// draws. `init_scale` multiplies the default initialisation bounds.
pub fn normalization_constant(
    arch: &Arch,
    data: &Dataset,
    budget: &AdvBudget,
    pgd: &PgdConfig,
    n_samples: usize,
    init_scale: f64,
    stream: &RngStream,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("normalization needs at least one sample"));
    }
    let obj = AdversarialObjective::new(arch.clone(), data, *budget, *pgd);
    let mut total = 0.0;
    for s in 0..n_samples {
        let draw = stream.child(format!("sample-{s}"));
        let model = Model::init_scaled(arch.clone(), init_scale, &mut draw.child("init").rng())?;
        total += obj.loss(model.params(), &draw.child("attack"))?;
    }
    Ok(total / n_samples as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    /// Offsets along both axes (the grid is square).
    pub axis: Vec<f64>,
    /// `values[i][j] = L(theta + axis[i] v1 + axis[j] v2)`.
    pub values: Vec<Vec<f64>>,
    pub v1: ParamVector,
    pub v2: ParamVector,
}

impl LandscapeGrid {
    pub const CSV_HEADER: &'static str = "a1,a2,loss";

    pub fn csv_rows(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.axis.len() * self.axis.len());
        for (i, a1) in self.axis.iter().enumerate() {
            for (j, a2) in self.axis.iter().enumerate() {
                out.push(format!("{a1:e},{a2:e},{:e}", self.values[i][j]));
            }
        }
        out
    }
}

/// Evenly spaced offsets in `[-half_width, half_width]`.
pub fn grid_axis(half_width: f64, resolution: usize) -> Vec<f64> {
    (0..resolution)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / (resolution - 1) as f64)
        .collect()
}

/// Loss on the plane `theta + a1 v1 + a2 v2`. Cell `(i, j)` uses
/// `stream.child("cell-i-j")`; cells run in parallel.
pub fn landscape_grid(
    oracle: &dyn LossOracle,
    theta: &ParamVector,
    v1: &ParamVector,
    v2: &ParamVector,
    half_width: f64,
    resolution: usize,
    stream: &RngStream,
) -> Result<LandscapeGrid> {
    check_unit(v1, "v1")?;
    check_unit(v2, "v2")?;
    if v1.dot(v2).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "grid directions must be orthogonal, dot = {}",
            v1.dot(v2)
        )));
    }
    if resolution < 2 {
        return Err(Error::invalid("grid resolution must be at least 2"));
    }
    let axis = grid_axis(half_width, resolution);
    let cells: Vec<(usize, usize)> = (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| (i, j)))
        .collect();
    let losses: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let p = theta.offset(axis[i], v1)?.offset(axis[j], v2)?;
            oracle.loss(&p, &stream.child(format!("cell-{i}-{j}")))
        })
        .collect();
    let mut values = vec![vec![0.0; resolution]; resolution];
    for ((i, j), l) in cells.into_iter().zip(losses) {
        values[i][j] = l?;
    }
    Ok(LandscapeGrid {
        axis,
        values,
        v1: v1.clone(),
        v2: v2.clone(),
    })
}

/// Orthonormalises `v2` against `v1` (both returned with unit norm).
pub fn orthonormal_pair(v1: &ParamVector, v2: &ParamVector) -> Result<(ParamVector, ParamVector)> {
    let mut a = v1.clone();
    a.scale(1.0 / a.norm());
    let mut b = v2.clone();
    deflate(&mut b, std::slice::from_ref(&a))?;
    let n = b.norm();
    if n == 0.0 {
        return Err(Error::Degenerate("directions are parallel".into()));
    }
    b.scale(1.0 / n);
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Mean over repeats of the per-repeat mean cosine similarity.
    pub mean: f64,
    pub per_repeat: Vec<f64>,
    /// Population variance of `per_repeat`.
    pub variance: f64,
    /// Example pairs skipped because a perturbation was zero (over all repeats).
    pub excluded: usize,
    /// Robust training error at `theta + a v` and `theta - a v`, averaged over repeats.
    pub train_error_plus: f64,
    pub train_error_minus: f64,
    pub test_error_plus: Option<f64>,
    pub test_error_minus: Option<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity between the PGD perturbations found at `theta + a v` and
/// `theta - a v`, averaged over `train` and `repeats` independent runs.
#[allow(clippy::too_many_arguments)]
pub fn perturb_similarity(
    model: &Model,
    train: &Dataset,
    test: Option<&Dataset>,
    v: &ParamVector,
    a: f64,
    budget: &AdvBudget,
    pgd: &PgdConfig,
    repeats: usize,
    stream: &RngStream,
) -> Result<SimilarityReport> {
    check_unit(v, "perturbation direction")?;
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let plus = model.with_params(model.params().offset(a, v)?)?;
    let minus = model.with_params(model.params().offset(-a, v)?)?;
    let xs = train.inputs();
    let ys = train.labels();
    let mut per_repeat = Vec::with_capacity(repeats);
    let mut excluded = 0;
    let (mut err_p, mut err_m) = (0.0, 0.0);
    for r in 0..repeats {
        let rs = stream.child(format!("repeat-{r}"));
        let ap = pgd_rows(&plus, xs, ys, budget, pgd, &rs.child("plus"))?;
        let am = pgd_rows(&minus, xs, ys, budget, pgd, &rs.child("minus"))?;
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..train.len() {
            let x = train.input(i);
            let dp: Vec<f64> = ap.adv.row(i).iter().zip(x).map(|(a, b)| a - b).collect();
            let dm: Vec<f64> = am.adv.row(i).iter().zip(x).map(|(a, b)| a - b).collect();
            match cosine(&dp, &dm) {
                Some(c) => {
                    sum += c;
                    count += 1;
                }
                None => excluded += 1,
            }
        }
        per_repeat.push(if count > 0 {
            sum / count as f64
        } else {
            f64::NAN
        });
        err_p += error_of(&plus, &ap.adv, ys)?;
        err_m += error_of(&minus, &am.adv, ys)?;
    }
    let valid: Vec<f64> = per_repeat
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    if valid.is_empty() {
        return Err(Error::Degenerate("every perturbation pair was zero".into()));
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    let variance = valid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / valid.len() as f64;
    let (test_error_plus, test_error_minus) = match test {
        Some(t) => {
            let ts = stream.child("test");
            (
                Some(adversarial_eval(&plus, t, budget, pgd, &ts.child("plus"))?.error),
                Some(adversarial_eval(&minus, t, budget, pgd, &ts.child("minus"))?.error),
            )
        }
        None => (None, None),
    };
    Ok(SimilarityReport {
        mean,
        per_repeat,
        variance,
        excluded,
        train_error_plus: err_p / repeats as f64,
        train_error_minus: err_m / repeats as f64,
        test_error_plus,
        test_error_minus,
    })
}

fn error_of(model: &Model, xs: &ndarray::Array2<f64>, ys: &[usize]) -> Result<f64> {
    let preds = model.predict_batch(xs.view())?;
    Ok(preds.iter().zip(ys).filter(|(p, y)| p != y).count() as f64 / ys.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Segment;

    fn layout(n: usize) -> Vec<Segment> {
        vec![Segment::new("w", vec![n])]
    }

    fn dense(a: &[Vec<f64>]) -> impl Fn(&ParamVector) -> Result<ParamVector> + '_ {
        move |v: &ParamVector| {
            let out = a
                .iter()
                .map(|row| row.iter().zip(v.values()).map(|(x, y)| x * y).sum())
                .collect();
            v.with_values(out)
        }
    }

    #[test]
    fn diagonal_and_two_by_two() {
        let t = ParamVector::zeros(&layout(2));
        let d = vec![vec![3.0, 0.0], vec![0.0, 1.0]];
        let cfg = PowerConfig {
            k: 2,
            tol: 1e-14,
            max_iters: 10_000,
        };
        let r = top_eigenpairs(dense(&d), &t, &cfg, &RngStream::new(1)).unwrap();
        assert!((r.eigenvalues[0] - 3.0).abs() < 1e-10);
        assert!((r.eigenvectors[0].values()[0].abs() - 1.0).abs() < 1e-6);
        let m = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let r = top_eigenpairs(dense(&m), &t, &cfg, &RngStream::new(1)).unwrap();
        assert!((r.eigenvalues[0] - 3.0).abs() < 1e-10);
        assert!((r.eigenvalues[1] - 1.0).abs() < 1e-10);
        assert!(r.converged.iter().all(|c| *c));
        assert!(r.eigenvectors[0].dot(&r.eigenvectors[1]).abs() < 1e-6);
    }

    #[test]
    fn capped_iterations_are_flagged() {
        let t = ParamVector::zeros(&layout(3));
        let m = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.999, 0.0],
            vec![0.0, 0.0, 0.5],
        ];
        let cfg = PowerConfig {
            k: 1,
            tol: 1e-15,
            max_iters: 3,
        };
        let r = top_eigenpairs(dense(&m), &t, &cfg, &RngStream::new(2)).unwrap();
        assert_eq!(r.converged, vec![false]);
        assert_eq!(r.iterations, vec![3]);
    }

    struct Quadratic(Vec<Vec<f64>>);

    impl LossOracle for Quadratic {
        fn loss(&self, theta: &ParamVector, s: &RngStream) -> Result<f64> {
            let (_, g) = self.loss_grad(theta, s)?;
            Ok(0.5 * g.dot(theta))
        }
        fn loss_grad(&self, theta: &ParamVector, s: &RngStream) -> Result<(f64, ParamVector)> {
            let g = dense(&self.0)(theta)?;
            let _ = s;
            Ok((0.5 * g.dot(theta), g))
        }
    }

    #[test]
    fn quadratic_hvp_is_exact_and_odd() {
        let a = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let q = Quadratic(a.clone());
        let t = ParamVector::from_values(&layout(2), vec![0.3, -0.7]).unwrap();
        let v = ParamVector::from_values(&layout(2), vec![0.6, 0.8]).unwrap();
        let s = RngStream::new(0);
        let h = hvp(&q, &t, &v, 1e-3, &s).unwrap();
        let exact = dense(&a)(&v).unwrap();
        assert!(h.distance(&exact).unwrap() < 1e-12);
        let mut neg = v.clone();
        neg.scale(-1.0);
        let hn = hvp(&q, &t, &neg, 1e-3, &s).unwrap();
        for (x, y) in h.values().iter().zip(hn.values()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn quadratic_bowl_grid() {
        let q = Quadratic(vec![vec![4.0, 0.0], vec![0.0, 1.0]]);
        let t = ParamVector::zeros(&layout(2));
        let e1 = ParamVector::from_values(&layout(2), vec![1.0, 0.0]).unwrap();
        let e2 = ParamVector::from_values(&layout(2), vec![0.0, 1.0]).unwrap();
        let g = landscape_grid(&q, &t, &e1, &e2, 1.0, 5, &RngStream::new(0)).unwrap();
        for (i, a1) in g.axis.iter().enumerate() {
            for (j, a2) in g.axis.iter().enumerate() {
                let want = 2.0 * a1 * a1 + 0.5 * a2 * a2;
                assert!((g.values[i][j] - want).abs() < 1e-12);
            }
        }
        assert!(landscape_grid(&q, &t, &e1, &e1, 1.0, 5, &RngStream::new(0)).is_err());
    }
}
