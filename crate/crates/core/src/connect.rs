//! Bezier curves between two trained parameter vectors: evaluation, Monte
//! Carlo training of the interior control points, and path evaluation.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{adversarial_eval, AdvBudget, PgdConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Arch, Model};
use crate::objective::adversarial_sums;
use crate::params::ParamVector;
use crate::rng::RngStream;
use crate::train::{OptimizerConfig, OptimizerState};

/// `C(n, k) (1 - t)^(n - k) t^k`.
pub fn bernstein(n: usize, k: usize, t: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut c = 1.0;
    for i in 0..k.min(n - k) {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * (1.0 - t).powi((n - k) as i32) * t.powi(k as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BezierCurve {
    arch: Arch,
    start: ParamVector,
    end: ParamVector,
    interior: Vec<ParamVector>,
}

impl BezierCurve {
    /// Order-`order` curve with interior points spaced evenly on the segment.
    pub fn new(arch: Arch, start: ParamVector, end: ParamVector, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("curve order must be at least 1"));
        }
        Model::new(arch.clone(), start.clone())?;
        Model::new(arch.clone(), end.clone())?;
        let diff = end.sub(&start)?;
        let interior = (1..order)
            .map(|k| start.offset(k as f64 / order as f64, &diff))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            start,
            end,
            interior,
        })
    }

    /// Curve with explicit interior control points.
    pub fn with_interior(
        arch: Arch,
        start: ParamVector,
        end: ParamVector,
        interior: Vec<ParamVector>,
    ) -> Result<Self> {
        for p in std::iter::once(&start)
            .chain(&interior)
            .chain(std::iter::once(&end))
        {
            Model::new(arch.clone(), p.clone())?;
        }
        Ok(Self {
            arch,
            start,
            end,
            interior,
        })
    }

    pub fn order(&self) -> usize {
        self.interior.len() + 1
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn start(&self) -> &ParamVector {
        &self.start
    }

    pub fn end(&self) -> &ParamVector {
        &self.end
    }

    pub fn interior(&self) -> &[ParamVector] {
        &self.interior
    }

    pub fn interior_mut(&mut self) -> &mut [ParamVector] {
        &mut self.interior
    }

    fn control(&self, k: usize) -> &ParamVector {
        if k == 0 {
            &self.start
        } else if k == self.order() {
            &self.end
        } else {
            &self.interior[k - 1]
        }
    }

    /// `B(t)`; the endpoints are returned exactly at `t = 0` and `t = 1`.
    pub fn point(&self, t: f64) -> Result<ParamVector> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!(
                "curve parameter {t} outside [0, 1]"
            )));
        }
        if t == 0.0 {
            return Ok(self.start.clone());
        }
        if t == 1.0 {
            return Ok(self.end.clone());
        }
        let n = self.order();
        let mut out = self.start.zeros_like();
        for k in 0..=n {
            out.axpy(bernstein(n, k, t), self.control(k))?;
        }
        Ok(out)
    }

    pub fn model_at(&self, t: f64) -> Result<Model> {
        Model::new(self.arch.clone(), self.point(t)?)
    }
}

pub fn bezier_point(curve: &BezierCurve, t: f64) -> Result<ParamVector> {
    curve.point(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug)]
pub struct CurveTrainOutcome {
    pub curve: BezierCurve,
    /// `(t, batch loss)` for every step.
    pub history: Vec<(f64, f64)>,
    pub diverged: bool,
}

/// Minimises `E_t L_eps(B(t))` over the interior control points with one
/// sampled `t` and one minibatch per step. Endpoints never change.
pub fn train_curve(
    curve: BezierCurve,
    data: &Dataset,
    budget: &AdvBudget,
    pgd: &PgdConfig,
    cfg: &CurveTrainConfig,
    stream: &RngStream,
) -> Result<CurveTrainOutcome> {
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::invalid(format!(
            "batch size {} must be in 1..={}",
            cfg.batch_size,
            data.len()
        )));
    }
    let mut curve = curve;
    let n = curve.order();
    let mut states: Vec<OptimizerState> = curve
        .interior
        .iter()
        .map(|p| OptimizerState::new(cfg.optimizer, p))
        .collect();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let s = stream.child(format!("step-{step}"));
        let t: f64 = s.child("t").rng().random();
        let mut idx = sample(&mut s.child("batch").rng(), data.len(), cfg.batch_size).into_vec();
        idx.sort_unstable();
        let (xs, ys) = data.gather(&idx);
        let model = curve.model_at(t)?;
        let sums = match adversarial_sums(
            &model,
            xs.view(),
            &ys,
            budget,
            pgd,
            &s.child("attack"),
            true,
        ) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                return Ok(CurveTrainOutcome {
                    curve,
                    history,
                    diverged: true,
                })
            }
            Err(e) => return Err(e),
        };
        let g = sums.mean_grad().expect("requested");
        let loss = sums.mean_loss();
        if !loss.is_finite() || !g.is_finite() {
            return Ok(CurveTrainOutcome {
                curve,
                history,
                diverged: true,
            });
        }
        history.push((t, loss));
        for (k, (p, state)) in curve.interior.iter_mut().zip(states.iter_mut()).enumerate() {
            let mut gk = g.clone();
            gk.scale(bernstein(n, k + 1, t));
            state.step(p, &gk, cfg.lr, step)?;
        }
    }
    Ok(CurveTrainOutcome {
        curve,
        history,
        diverged: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub train_loss: f64,
    pub test_robust_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveEval {
    pub points: Vec<CurvePoint>,
    /// Largest training loss on the grid minus the larger endpoint loss.
    pub barrier: f64,
}

impl CurveEval {
    pub const CSV_HEADER: &'static str = "t,train_loss,test_robust_error";

    pub fn csv_rows(&self) -> Vec<String> {
        self.points
            .iter()
            .map(|p| format!("{:e},{:e},{:e}", p.t, p.train_loss, p.test_robust_error))
            .collect()
    }
}

/// Adversarial training loss and test robust error on a uniform `t` grid that
/// includes both endpoints. Grid cell `i` uses `stream.child("t-i")`.
#[allow(clippy::too_many_arguments)]
pub fn eval_curve(
    curve: &BezierCurve,
    train: &Dataset,
    test: &Dataset,
    budget: &AdvBudget,
    pgd: &PgdConfig,
    resolution: usize,
    stream: &RngStream,
) -> Result<CurveEval> {
    if resolution < 2 {
        return Err(Error::invalid("curve resolution must be at least 2"));
    }
    let ts: Vec<f64> = (0..resolution)
        .map(|i| {
            if i + 1 == resolution {
                1.0
            } else {
                i as f64 / (resolution - 1) as f64
            }
        })
        .collect();
    let points: Vec<Result<CurvePoint>> = ts
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let model = curve.model_at(t)?;
            let s = stream.child(format!("t-{i}"));
            let tr = adversarial_eval(&model, train, budget, pgd, &s.child("train"))?;
            let te = adversarial_eval(&model, test, budget, pgd, &s.child("test"))?;
            Ok(CurvePoint {
                t,
                train_loss: tr.mean_loss,
                test_robust_error: te.error,
            })
        })
        .collect();
    let points = points.into_iter().collect::<Result<Vec<_>>>()?;
    let ends = points[0]
        .train_loss
        .max(points[points.len() - 1].train_loss);
    let top = points
        .iter()
        .map(|p| p.train_loss)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CurveEval {
        barrier: top - ends,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Segment;
    use crate::train::OptimizerKind;

    fn scalar(v: f64) -> ParamVector {
        ParamVector::from_values(&[Segment::new("weight", vec![1])], vec![v]).unwrap()
    }

    fn one_d() -> Arch {
        Arch::BinaryLogistic { inputs: 1 }
    }

    #[test]
    fn quadratic_example() {
        let c = BezierCurve::with_interior(one_d(), scalar(0.0), scalar(1.0), vec![scalar(2.0)])
            .unwrap();
        assert!((c.point(0.5).unwrap().values()[0] - 1.25).abs() < 1e-15);
        assert_eq!(c.point(0.0).unwrap(), scalar(0.0));
        assert_eq!(c.point(1.0).unwrap(), scalar(1.0));
        assert!(c.point(1.5).is_err());
    }

    #[test]
    fn order_one_is_linear() {
        let c = BezierCurve::new(one_d(), scalar(-1.0), scalar(3.0), 1).unwrap();
        assert!((c.point(0.25).unwrap().values()[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn partition_of_unity() {
        for n in 1..6 {
            for i in 0..20 {
                let t = (i as f64 + 0.37) / 20.0;
                let s: f64 = (0..=n).map(|k| bernstein(n, k, t)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(bernstein(2, 1, 0.3), 2.0 * 0.3 * 0.7);
    }

    #[test]
    fn equal_endpoints_make_training_a_no_op() {
        let data = crate::data::make_blobs(1, 30, 1, 2, 0.2).unwrap();
        let p = scalar(0.7);
        let c = BezierCurve::new(one_d(), p.clone(), p.clone(), 2).unwrap();
        let cfg = CurveTrainConfig {
            steps: 5,
            batch_size: 10,
            lr: 0.01,
            optimizer: OptimizerConfig::new(OptimizerKind::sgd(0.0)),
        };
        let out = train_curve(
            c,
            &data,
            &AdvBudget::linf(0.0),
            &PgdConfig::mnist(0.0),
            &cfg,
            &RngStream::new(2),
        )
        .unwrap();
        assert_eq!(out.curve.start(), &p);
        assert_eq!(out.curve.end(), &p);
        // The gradient at B(t) = p is not zero, so the interior point moves, but
        // only by lr * coefficient * gradient per step.
        let moved = (out.curve.interior()[0].values()[0] - 0.7).abs();
        assert!(moved < 5.0 * 0.01 * 0.5 * 2.0);
    }
}
