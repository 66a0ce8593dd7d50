//! Inner maximisation: FGSM, PGD, the exact vertex oracle for linear models
//! and robust-error evaluation.

use std::fmt;

use ndarray::{Array2, ArrayView2, ArrayViewMut1};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, Arch, BatchEval, Model, Want};
use crate::rng::RngStream;

/// Largest input dimension the vertex oracle will enumerate (2^20 vertices).
pub const MAX_ENUMERATION_DIM: usize = 20;

/// Rows per work item when a dataset is split for parallel evaluation. The
/// split does not depend on the thread count, so reductions are reproducible.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "inf")]
    Inf,
    #[serde(rename = "2")]
    Two,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::Inf => f.write_str("inf"),
            Norm::Two => f.write_str("2"),
        }
    }
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// The dual norm's value: l_1 for l_inf, l_2 for l_2.
    pub fn dual_of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Inf => v.iter().map(|x| x.abs()).sum(),
            Norm::Two => Norm::Two.of(v),
        }
    }
}

#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The l_p ball of radius `eps` around an input, optionally intersected with
/// the input domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvBudget {
    pub norm: Norm,
    pub eps: f64,
    pub domain: Option<Domain>,
}

impl AdvBudget {
    pub fn linf(eps: f64) -> Self {
        Self {
            norm: Norm::Inf,
            eps,
            domain: None,
        }
    }

    pub fn l2(eps: f64) -> Self {
        Self {
            norm: Norm::Two,
            eps,
            domain: None,
        }
    }

    pub fn with_domain(mut self, domain: Option<Domain>) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid(format!(
                "budget eps must be >= 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Projects `candidate` onto the ball around `origin`, then clamps it to
    /// the domain box.
    pub fn project(&self, origin: &[f64], candidate: &mut [f64]) {
        match self.norm {
            Norm::Inf => {
                for (c, o) in candidate.iter_mut().zip(origin) {
                    *c = o + (*c - o).clamp(-self.eps, self.eps);
                }
            }
            Norm::Two => {
                let dist = candidate
                    .iter()
                    .zip(origin)
                    .map(|(c, o)| (c - o) * (c - o))
                    .sum::<f64>()
                    .sqrt();
                if dist > self.eps {
                    let s = self.eps / dist;
                    for (c, o) in candidate.iter_mut().zip(origin) {
                        *c = o + (*c - o) * s;
                    }
                }
            }
        }
        if let Some(d) = self.domain {
            for c in candidate.iter_mut() {
                *c = d.clamp(*c);
            }
        }
    }

    fn random_offset<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        match self.norm {
            Norm::Inf => (0..dim)
                .map(|_| rng.random_range(-self.eps..=self.eps))
                .collect(),
            Norm::Two => {
                let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = Norm::Two.of(&dir);
                let radius = self.eps * rng.random::<f64>().powf(1.0 / dim as f64);
                dir.into_iter().map(|v| v / n * radius).collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub restarts: usize,
}

impl PgdConfig {
    pub fn new(steps: usize, step_size: f64, random_start: bool, restarts: usize) -> Result<Self> {
        let cfg = Self {
            steps,
            step_size,
            random_start,
            restarts,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::invalid("pgd needs steps >= 1 and restarts >= 1"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!(
                "pgd step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }

    /// Step 0.01 and `ceil(eps / 0.01) + 10` iterations.
    pub fn mnist(eps: f64) -> Self {
        Self {
            steps: (eps / 0.01 - 1e-9).ceil().max(0.0) as usize + 10,
            step_size: 0.01,
            random_start: true,
            restarts: 1,
        }
    }

    /// 10 iterations of size `eps / 4`.
    pub fn cifar(eps: f64) -> Self {
        Self {
            steps: 10,
            step_size: eps / 4.0,
            random_start: true,
            restarts: 1,
        }
    }
}

/// How to build a [`PgdConfig`] for a budget that changes during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PgdRecipe {
    Fixed {
        config: PgdConfig,
    },
    /// `steps` iterations with step size `step_fraction * eps`.
    Relative {
        steps: usize,
        step_fraction: f64,
        random_start: bool,
        restarts: usize,
    },
    /// [`PgdConfig::mnist`].
    Mnist {
        random_start: bool,
        restarts: usize,
    },
}

impl PgdRecipe {
    pub fn config(&self, eps: f64) -> PgdConfig {
        match *self {
            PgdRecipe::Fixed { config } => config,
            PgdRecipe::Relative {
                steps,
                step_fraction,
                random_start,
                restarts,
            } => PgdConfig {
                steps,
                step_size: step_fraction * eps,
                random_start,
                restarts,
            },
            PgdRecipe::Mnist {
                random_start,
                restarts,
            } => PgdConfig {
                random_start,
                restarts,
                ..PgdConfig::mnist(eps)
            },
        }
    }

    /// 10 steps of `eps / 4` with a random start.
    pub fn pgd10() -> Self {
        PgdRecipe::Relative {
            steps: 10,
            step_fraction: 0.25,
            random_start: true,
            restarts: 1,
        }
    }
}

/// Single signed-gradient step of size `eps`, projected into the budget.
pub fn fgsm_step(x: &[f64], grad: &[f64], budget: &AdvBudget) -> Result<Vec<f64>> {
    if budget.norm != Norm::Inf {
        return Err(Error::UnsupportedNorm {
            op: "fgsm",
            norm: budget.norm,
        });
    }
    budget.validate()?;
    let mut out: Vec<f64> = x
        .iter()
        .zip(grad)
        .map(|(xi, gi)| xi + budget.eps * sign(*gi))
        .collect();
    budget.project(x, &mut out);
    Ok(out)
}

pub fn fgsm(model: &Model, x: &[f64], label: usize, budget: &AdvBudget) -> Result<Vec<f64>> {
    if budget.norm != Norm::Inf {
        return Err(Error::UnsupportedNorm {
            op: "fgsm",
            norm: budget.norm,
        });
    }
    let (_, grad) = model.loss_grad_input(x, label)?;
    fgsm_step(x, &grad, budget)
}

/// Adversarial inputs for a batch and their losses.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub adv: Array2<f64>,
    pub losses: Vec<f64>,
}

fn step_direction(norm: Norm, grad: &[f64], out: &mut [f64]) {
    match norm {
        Norm::Inf => {
            for (o, g) in out.iter_mut().zip(grad) {
                *o = sign(*g);
            }
        }
        Norm::Two => {
            let n = Norm::Two.of(grad);
            for (o, g) in out.iter_mut().zip(grad) {
                *o = if n > 0.0 { g / n } else { 0.0 };
            }
        }
    }
}

fn keep_best(best: &mut Array2<f64>, best_loss: &mut [f64], cur: &Array2<f64>, losses: &[f64]) {
    for (i, &l) in losses.iter().enumerate() {
        if l > best_loss[i] {
            best_loss[i] = l;
            best.row_mut(i).assign(&cur.row(i));
        }
    }
}

/// PGD on a batch. Example `i` draws its random starts from
/// `stream.child(first_index + i)`, so results do not depend on how a dataset
/// is split into batches.
///
/// Every iterate (and the clean input, when starting at random) is scored and
/// the highest-loss point is returned.
pub fn pgd_batch(
    model: &Model,
    xs: ArrayView2<f64>,
    labels: &[usize],
    budget: &AdvBudget,
    cfg: &PgdConfig,
    stream: &RngStream,
    first_index: usize,
) -> Result<AttackOutcome> {
    budget.validate()?;
    if budget.eps == 0.0 {
        let eval = model.eval_batch(xs, labels, Want::LOSS)?;
        return Ok(AttackOutcome {
            adv: xs.to_owned(),
            losses: eval.losses,
        });
    }
    cfg.validate()?;
    let (n, m) = xs.dim();
    let mut best = xs.to_owned();
    let mut best_loss = if cfg.random_start {
        model.eval_batch(xs, labels, Want::LOSS)?.losses
    } else {
        vec![f64::NEG_INFINITY; n]
    };
    let restarts = if cfg.random_start { cfg.restarts } else { 1 };
    let mut dir = vec![0.0; m];
    for r in 0..restarts {
        let mut cur = xs.to_owned();
        if cfg.random_start {
            for (i, mut row) in cur.rows_mut().into_iter().enumerate() {
                let mut rng = stream
                    .child(first_index + i)
                    .child(format!("restart-{r}"))
                    .rng();
                let offset = budget.random_offset(m, &mut rng);
                let row = row.as_slice_mut().expect("owned rows are contiguous");
                for (v, o) in row.iter_mut().zip(&offset) {
                    *v += o;
                }
                budget.project(xs.row(i).as_slice().unwrap_or(&xs.row(i).to_vec()), row);
            }
        }
        for _ in 0..cfg.steps {
            let eval = model.eval_batch(cur.view(), labels, Want::INPUT)?;
            keep_best(&mut best, &mut best_loss, &cur, &eval.losses);
            let grad = eval.input_grad.expect("requested");
            for i in 0..n {
                step_direction(
                    budget.norm,
                    grad.row(i).as_slice().expect("contiguous"),
                    &mut dir,
                );
                let mut row: ArrayViewMut1<f64> = cur.row_mut(i);
                let row = row.as_slice_mut().expect("contiguous");
                for (v, d) in row.iter_mut().zip(&dir) {
                    *v += cfg.step_size * d;
                }
                let origin = xs.row(i);
                match origin.as_slice() {
                    Some(o) => budget.project(o, row),
                    None => budget.project(&origin.to_vec(), row),
                }
            }
        }
        let eval = model.eval_batch(cur.view(), labels, Want::LOSS)?;
        keep_best(&mut best, &mut best_loss, &cur, &eval.losses);
    }
    Ok(AttackOutcome {
        adv: best,
        losses: best_loss,
    })
}

/// PGD on a single example.
pub fn pgd(
    model: &Model,
    x: &[f64],
    label: usize,
    budget: &AdvBudget,
    cfg: &PgdConfig,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let xs = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    let out = pgd_batch(model, xs, &[label], budget, cfg, stream, 0)?;
    Ok(out.adv.into_raw_vec_and_offset().0)
}

/// Exact `max_{x' in S_eps(x)} g(x', W)` for a linear multiclass model.
///
/// The loss is convex in `x'`, so its maximum over the box
/// `[x - eps, x + eps] ∩ domain` sits at a vertex; all `2^m` vertices are
/// enumerated in Gray-code order with incremental logit updates.
pub fn bruteforce_adv_loss(
    model: &Model,
    x: &[f64],
    label: usize,
    budget: &AdvBudget,
) -> Result<(f64, Vec<f64>)> {
    let Arch::LinearMulticlass { inputs, classes } = *model.arch() else {
        return Err(Error::UnsupportedArch {
            op: "bruteforce_adv_loss",
            expected: "a linear multiclass model",
        });
    };
    if budget.norm != Norm::Inf {
        return Err(Error::UnsupportedNorm {
            op: "bruteforce_adv_loss",
            norm: budget.norm,
        });
    }
    budget.validate()?;
    if x.len() != inputs {
        return Err(Error::DimensionMismatch {
            segment: "input".into(),
            expected: inputs,
            actual: x.len(),
        });
    }
    if inputs > MAX_ENUMERATION_DIM {
        return Err(Error::EnumerationBound {
            dim: inputs,
            bound: MAX_ENUMERATION_DIM,
        });
    }
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if budget.eps == 0.0 {
        return Ok((model.loss(x, label)?, x.to_vec()));
    }
    let w = model.params().values();
    let weight = |k: usize, j: usize| w[k * inputs + j];
    let (lo, hi): (Vec<f64>, Vec<f64>) = x
        .iter()
        .map(|&xi| {
            let (mut a, mut b) = (xi - budget.eps, xi + budget.eps);
            if let Some(d) = budget.domain {
                a = d.clamp(a);
                b = d.clamp(b);
            }
            (a, b)
        })
        .unzip();

    let mut at_hi = vec![false; inputs];
    let mut logits: Vec<f64> = (0..classes)
        .map(|k| (0..inputs).map(|j| weight(k, j) * lo[j]).sum())
        .collect();
    let mut best_loss = cross_entropy(&logits, label);
    let mut best_code: u64 = 0;
    let mut code: u64 = 0;
    for step in 1u64..(1u64 << inputs) {
        let j = step.trailing_zeros() as usize;
        let delta = if at_hi[j] {
            lo[j] - hi[j]
        } else {
            hi[j] - lo[j]
        };
        at_hi[j] = !at_hi[j];
        code ^= 1 << j;
        for (k, z) in logits.iter_mut().enumerate() {
            *z += weight(k, j) * delta;
        }
        let loss = cross_entropy(&logits, label);
        if loss > best_loss {
            best_loss = loss;
            best_code = code;
        }
    }
    let vertex: Vec<f64> = (0..inputs)
        .map(|j| {
            if best_code >> j & 1 == 1 {
                hi[j]
            } else {
                lo[j]
            }
        })
        .collect();
    let exact = model.loss(&vertex, label)?;
    Ok((exact, vertex))
}

/// Aggregate of an attack over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvEval {
    pub mean_loss: f64,
    pub error: f64,
    pub count: usize,
}

/// Attacks one chunk of rows and evaluates the model at the adversarial
/// points. Returns the evaluation and the adversarial inputs.
#[allow(clippy::too_many_arguments)]
pub fn attack_and_eval(
    model: &Model,
    xs: ArrayView2<f64>,
    labels: &[usize],
    budget: &AdvBudget,
    cfg: &PgdConfig,
    stream: &RngStream,
    first_index: usize,
    want: Want,
) -> Result<(BatchEval, Array2<f64>)> {
    let outcome = pgd_batch(model, xs, labels, budget, cfg, stream, first_index)?;
    let eval = model.eval_batch(outcome.adv.view(), labels, want)?;
    Ok((eval, outcome.adv))
}

/// Splits `0..n` into fixed-size chunks.
pub(crate) fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n))
        .collect()
}

/// [`pgd_batch`] over many rows, split into fixed chunks that run in parallel.
/// Row `i` uses `stream.child(i)` as in a single call.
pub fn pgd_rows(
    model: &Model,
    xs: ArrayView2<f64>,
    labels: &[usize],
    budget: &AdvBudget,
    cfg: &PgdConfig,
    stream: &RngStream,
) -> Result<AttackOutcome> {
    let parts: Vec<Result<AttackOutcome>> = chunk_ranges(xs.nrows(), EVAL_CHUNK)
        .par_iter()
        .map(|r| {
            let rows = xs.slice(ndarray::s![r.clone(), ..]);
            pgd_batch(
                model,
                rows,
                &labels[r.clone()],
                budget,
                cfg,
                stream,
                r.start,
            )
        })
        .collect();
    let mut adv = Array2::zeros(xs.raw_dim());
    let mut losses = Vec::with_capacity(xs.nrows());
    let mut start = 0;
    for p in parts {
        let p = p?;
        let n = p.losses.len();
        adv.slice_mut(ndarray::s![start..start + n, ..])
            .assign(&p.adv);
        losses.extend(p.losses);
        start += n;
    }
    Ok(AttackOutcome { adv, losses })
}

/// Mean adversarial loss and robust error of `model` on `data` under PGD.
/// `eps = 0` reduces to the clean loss and clean error.
pub fn adversarial_eval(
    model: &Model,
    data: &Dataset,
    budget: &AdvBudget,
    cfg: &PgdConfig,
    stream: &RngStream,
) -> Result<AdvEval> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ranges = chunk_ranges(data.len(), EVAL_CHUNK);
    let parts: Vec<Result<(f64, usize)>> = ranges
        .par_iter()
        .map(|r| {
            let idx: Vec<usize> = r.clone().collect();
            let (xs, ys) = data.gather(&idx);
            let (eval, _) = attack_and_eval(
                model,
                xs.view(),
                &ys,
                budget,
                cfg,
                stream,
                r.start,
                Want::LOSS,
            )?;
            Ok((eval.loss_sum(), eval.errors(&ys)))
        })
        .collect();
    let mut loss = 0.0;
    let mut errors = 0;
    for p in parts {
        let (l, e) = p?;
        loss += l;
        errors += e;
    }
    let n = data.len();
    Ok(AdvEval {
        mean_loss: loss / n as f64,
        error: errors as f64 / n as f64,
        count: n,
    })
}

/// Fraction of `data` misclassified after the PGD attack.
pub fn robust_error(
    model: &Model,
    data: &Dataset,
    budget: &AdvBudget,
    cfg: &PgdConfig,
    stream: &RngStream,
) -> Result<f64> {
    Ok(adversarial_eval(model, data, budget, cfg, stream)?.error)
}

/// Fraction of `data` misclassified without an attack.
pub fn clean_error(model: &Model, data: &Dataset) -> Result<f64> {
    let preds = model.predict_batch(data.inputs())?;
    let wrong = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p != y)
        .count();
    Ok(wrong as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamVector;

    fn linear(w: &[f64], inputs: usize, classes: usize) -> Model {
        let arch = Arch::LinearMulticlass { inputs, classes };
        let p = ParamVector::from_values(&arch.layout(), w.to_vec()).unwrap();
        Model::new(arch, p).unwrap()
    }

    #[test]
    fn fgsm_step_examples() {
        let b = AdvBudget::linf(0.1);
        let out = fgsm_step(&[0.5], &[-2.0], &b).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15);
        let clipped = b.with_domain(Some(Domain::UNIT));
        assert_eq!(fgsm_step(&[0.95], &[1.0], &clipped).unwrap(), vec![1.0]);
        assert_eq!(
            fgsm_step(&[0.3, 0.7], &[0.0, 0.0], &b).unwrap(),
            vec![0.3, 0.7]
        );
        assert!(matches!(
            fgsm_step(&[0.5], &[1.0], &AdvBudget::l2(0.1)),
            Err(Error::UnsupportedNorm { .. })
        ));
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = linear(&[1.0, -1.0, 0.5, 2.0], 2, 2);
        let cfg = PgdConfig::new(5, 0.1, true, 3).unwrap();
        let x = [0.2, 0.9];
        let out = pgd(&m, &x, 1, &AdvBudget::linf(0.0), &cfg, &RngStream::new(0)).unwrap();
        assert_eq!(out, x.to_vec());
        assert_eq!(fgsm(&m, &x, 1, &AdvBudget::linf(0.0)).unwrap(), x.to_vec());
    }

    #[test]
    fn l2_projection_and_random_start_stay_inside() {
        let m = linear(&[1.0, -1.0, 0.5, 2.0, 0.0, 1.0], 3, 2);
        let b = AdvBudget::l2(0.3).with_domain(Some(Domain::UNIT));
        let cfg = PgdConfig::new(7, 0.1, true, 2).unwrap();
        let x = [0.1, 0.5, 0.99];
        let out = pgd(&m, &x, 0, &b, &cfg, &RngStream::new(4)).unwrap();
        let d: Vec<f64> = out.iter().zip(&x).map(|(a, b)| a - b).collect();
        assert!(Norm::Two.of(&d) <= 0.3 + 1e-12);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn vertex_oracle_pinned_instance() {
        // K = 3, m = 2, eps = 0.5; the four vertices were enumerated by hand:
        // x' in {(0,-1), (0,0), (1,-1), (1,0)}, the maximiser is (0, 0).
        let m = linear(&[1.0, 0.0, 0.0, 1.0, -1.0, 1.0], 2, 3);
        let (loss, vertex) =
            bruteforce_adv_loss(&m, &[0.5, -0.5], 0, &AdvBudget::linf(0.5)).unwrap();
        let expected = (1.0f64 + 1.0 + 1.0).ln();
        assert_eq!(vertex, vec![0.0, 0.0]);
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn vertex_oracle_refusals() {
        let big = Model::zeros(Arch::LinearMulticlass {
            inputs: 21,
            classes: 3,
        })
        .unwrap();
        assert!(matches!(
            bruteforce_adv_loss(&big, &[0.0; 21], 0, &AdvBudget::linf(0.1)),
            Err(Error::EnumerationBound { dim: 21, bound: 20 })
        ));
        let mlp = Model::zeros(Arch::mlp(&[2, 2, 2], crate::model::Activation::Relu)).unwrap();
        assert!(bruteforce_adv_loss(&mlp, &[0.0; 2], 0, &AdvBudget::linf(0.1)).is_err());
    }

    #[test]
    fn zero_weights_give_log_k_for_any_eps() {
        let m = Model::zeros(Arch::LinearMulticlass {
            inputs: 4,
            classes: 5,
        })
        .unwrap();
        for eps in [0.0, 0.3, 10.0] {
            let (l, _) =
                bruteforce_adv_loss(&m, &[0.1, 0.2, 0.3, 0.4], 2, &AdvBudget::linf(eps)).unwrap();
            assert!((l - 5f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn mnist_recipe_iterations() {
        assert_eq!(PgdConfig::mnist(0.3).steps, 40);
        assert_eq!(PgdConfig::mnist(0.1).steps, 20);
        let c = PgdConfig::cifar(8.0 / 255.0);
        assert_eq!(c.steps, 10);
        assert!((c.step_size - 2.0 / 255.0).abs() < 1e-15);
    }
}
