//! The adversarial loss `L_eps(theta)` behind a common oracle interface, so
//! probes can run on PGD estimates, exact linear oracles or closed forms.

use ndarray::{s, ArrayView2};
use rayon::prelude::*;

use crate::attack::{
    attack_and_eval, bruteforce_adv_loss, chunk_ranges, AdvBudget, PgdConfig, EVAL_CHUNK,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Arch, Model, Want};
use crate::params::ParamVector;
use crate::rng::RngStream;

/// A scalar loss over parameters with its gradient.
///
/// `stream` feeds any randomness inside the oracle (PGD random starts);
/// passing the same stream twice gives common random numbers, which keeps
/// finite differences of a stochastic oracle meaningful.
pub trait LossOracle: Sync {
    fn loss(&self, theta: &ParamVector, stream: &RngStream) -> Result<f64>;

    fn loss_grad(&self, theta: &ParamVector, stream: &RngStream) -> Result<(f64, ParamVector)>;
}

/// Sums over a batch of adversarial examples.
#[derive(Clone, Debug)]
pub struct AdvSums {
    pub loss: f64,
    pub grad: Option<ParamVector>,
    pub errors: usize,
    pub count: usize,
}

impl AdvSums {
    pub fn mean_loss(&self) -> f64 {
        self.loss / self.count as f64
    }

    pub fn error_rate(&self) -> f64 {
        self.errors as f64 / self.count as f64
    }

    /// Mean gradient, if one was accumulated.
    pub fn mean_grad(&self) -> Option<ParamVector> {
        self.grad.as_ref().map(|g| {
            let mut g = g.clone();
            g.scale(1.0 / self.count as f64);
            g
        })
    }
}

/// Attacks a batch and sums losses, errors and (optionally) parameter
/// gradients at the adversarial points.
///
/// Rows are processed in fixed chunks in parallel and reduced in chunk order.
/// Row `i` draws its attack randomness from `stream.child(i)`.
pub fn adversarial_sums(
    model: &Model,
    xs: ArrayView2<f64>,
    labels: &[usize],
    budget: &AdvBudget,
    cfg: &PgdConfig,
    stream: &RngStream,
    want_grad: bool,
) -> Result<AdvSums> {
    if xs.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let want = if want_grad { Want::THETA } else { Want::LOSS };
    let parts: Vec<Result<AdvSums>> = chunk_ranges(xs.nrows(), EVAL_CHUNK)
        .par_iter()
        .map(|r| {
            let rows = xs.slice(s![r.clone(), ..]);
            let ys = &labels[r.clone()];
            let (eval, _) = attack_and_eval(model, rows, ys, budget, cfg, stream, r.start, want)?;
            Ok(AdvSums {
                loss: eval.loss_sum(),
                errors: eval.errors(ys),
                grad: eval.theta_grad,
                count: ys.len(),
            })
        })
        .collect();
    let mut total: Option<AdvSums> = None;
    for p in parts {
        let p = p?;
        total = Some(match total {
            None => p,
            Some(mut t) => {
                t.loss += p.loss;
                t.errors += p.errors;
                t.count += p.count;
                if let (Some(g), Some(pg)) = (t.grad.as_mut(), p.grad.as_ref()) {
                    g.axpy(1.0, pg)?;
                }
                t
            }
        });
    }
    Ok(total.expect("at least one chunk"))
}

/// PGD estimate of `L_eps` over a whole dataset for a fixed architecture.
#[derive(Clone, Debug)]
pub struct AdversarialObjective<'a> {
    pub arch: Arch,
    pub data: &'a Dataset,
    pub budget: AdvBudget,
    pub pgd: PgdConfig,
}

impl<'a> AdversarialObjective<'a> {
    pub fn new(arch: Arch, data: &'a Dataset, budget: AdvBudget, pgd: PgdConfig) -> Self {
        Self {
            arch,
            data,
            budget,
            pgd,
        }
    }

    fn sums(&self, theta: &ParamVector, stream: &RngStream, want_grad: bool) -> Result<AdvSums> {
        let model = Model::new(self.arch.clone(), theta.clone())?;
        adversarial_sums(
            &model,
            self.data.inputs(),
            self.data.labels(),
            &self.budget,
            &self.pgd,
            stream,
            want_grad,
        )
    }
}

impl LossOracle for AdversarialObjective<'_> {
    fn loss(&self, theta: &ParamVector, stream: &RngStream) -> Result<f64> {
        Ok(self.sums(theta, stream, false)?.mean_loss())
    }

    fn loss_grad(&self, theta: &ParamVector, stream: &RngStream) -> Result<(f64, ParamVector)> {
        let s = self.sums(theta, stream, true)?;
        let g = s.mean_grad().expect("requested");
        Ok((s.mean_loss(), g))
    }
}

/// Exact `L_eps` of a linear multiclass model via the vertex oracle; the
/// gradient is taken at each example's maximising vertex.
#[derive(Clone, Debug)]
pub struct ExactLinearObjective<'a> {
    pub arch: Arch,
    pub data: &'a Dataset,
    pub budget: AdvBudget,
}

impl LossOracle for ExactLinearObjective<'_> {
    fn loss(&self, theta: &ParamVector, stream: &RngStream) -> Result<f64> {
        Ok(self.loss_grad(theta, stream)?.0)
    }

    fn loss_grad(&self, theta: &ParamVector, _stream: &RngStream) -> Result<(f64, ParamVector)> {
        let model = Model::new(self.arch.clone(), theta.clone())?;
        let n = self.data.len();
        let mut loss = 0.0;
        let mut grad = theta.zeros_like();
        for i in 0..n {
            let y = self.data.labels()[i];
            let (l, vertex) = bruteforce_adv_loss(&model, self.data.input(i), y, &self.budget)?;
            let (_, g) = model.loss_grad_theta(&vertex, y)?;
            loss += l;
            grad.axpy(1.0, &g)?;
        }
        grad.scale(1.0 / n as f64);
        Ok((loss / n as f64, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::rng::RngStream;
    use ndarray::s;

    #[test]
    fn chunked_sums_match_single_pass() {
        let data = make_blobs(5, 150, 3, 3, 0.1).unwrap();
        let arch = Arch::LinearMulticlass {
            inputs: 3,
            classes: 3,
        };
        let model = Model::init(arch, &mut RngStream::new(1).rng()).unwrap();
        let cfg = PgdConfig::new(5, 0.05, true, 1).unwrap();
        let budget = AdvBudget::linf(0.2);
        let s = RngStream::new(9);
        let a = adversarial_sums(
            &model,
            data.inputs(),
            data.labels(),
            &budget,
            &cfg,
            &s,
            true,
        )
        .unwrap();
        let mut loss = 0.0;
        for i in 0..150 {
            let row = data.inputs().slice_move(s![i..i + 1, ..]);
            let out = crate::attack::pgd_batch(
                &model,
                row,
                &data.labels()[i..i + 1],
                &budget,
                &cfg,
                &s,
                i,
            )
            .unwrap();
            loss += out.losses[0];
        }
        assert!((a.loss - loss).abs() < 1e-9 * loss.abs().max(1.0));
    }

    #[test]
    fn pgd_objective_at_zero_eps_is_clean_loss() {
        let data = make_blobs(2, 40, 2, 2, 0.0).unwrap();
        let arch = Arch::LinearMulticlass {
            inputs: 2,
            classes: 2,
        };
        let model = Model::init(arch.clone(), &mut RngStream::new(3).rng()).unwrap();
        let obj = AdversarialObjective::new(
            arch.clone(),
            &data,
            AdvBudget::linf(0.0),
            PgdConfig::mnist(0.0),
        );
        let exact = ExactLinearObjective {
            arch,
            data: &data,
            budget: AdvBudget::linf(0.0),
        };
        let s = RngStream::new(0);
        let (a, ga) = obj.loss_grad(model.params(), &s).unwrap();
        let (b, gb) = exact.loss_grad(model.params(), &s).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(ga.distance(&gb).unwrap() < 1e-12);
    }
}
