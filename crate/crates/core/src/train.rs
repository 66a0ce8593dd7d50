//! Outer minimisation: optimizers, the adversarial training loop with
//! scheduled budgets, per-batch telemetry, snapshots and ensembles.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_batch, AdvBudget, PgdRecipe};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Activation, Arch, Model};
use crate::objective::adversarial_sums;
use crate::params::ParamVector;
use crate::rng::RngStream;
use crate::schedule::SchedulePlan;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps_hat")]
        eps_hat: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps_hat() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps_hat: eps_hat(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: OptimizerKind,
    /// Coupled L2 penalty added to the gradient before the update.
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(algorithm: OptimizerKind) -> Self {
        Self {
            algorithm,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers and step counter of an optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamVector) -> Self {
        let n = params.len();
        let second = match config.algorithm {
            OptimizerKind::Adam { .. } => vec![0.0; n],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            first: vec![0.0; n],
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update in place. `batch` is only used to label errors.
    pub fn step(
        &mut self,
        params: &mut ParamVector,
        grad: &ParamVector,
        lr: f64,
        batch: usize,
    ) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.first.len() {
            return Err(Error::DimensionMismatch {
                segment: "<optimizer>".into(),
                expected: self.first.len(),
                actual: grad.len(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { batch });
        }
        self.steps += 1;
        let wd = self.config.weight_decay;
        let theta = params.values_mut();
        let g = grad.values();
        match self.config.algorithm {
            OptimizerKind::Sgd { momentum } => {
                for i in 0..theta.len() {
                    let gi = g[i] + wd * theta[i];
                    if momentum == 0.0 {
                        theta[i] -= lr * gi;
                    } else {
                        self.first[i] = momentum * self.first[i] + gi;
                        theta[i] -= lr * self.first[i];
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps_hat,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..theta.len() {
                    let gi = g[i] + wd * theta[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * gi;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps_hat);
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut ParamVector,
    grad: &ParamVector,
    lr: f64,
) -> Result<()> {
    let batch = state.steps as usize;
    state.step(params, grad, lr, batch)
}

/// One row of the per-batch telemetry stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub batch: usize,
    pub epoch: usize,
    /// Norm of the mean adversarial-loss gradient (without weight decay).
    pub grad_norm: f64,
    /// Error on the batch's adversarial examples.
    pub robust_err: f64,
    /// `||theta - theta_0||` before this batch's update.
    pub dist_init: f64,
    /// Mean adversarial loss of the batch.
    pub loss: f64,
    pub eps: f64,
    pub lr: f64,
}

impl TelemetryRecord {
    pub const CSV_HEADER: &'static str = "batch,epoch,grad_norm,robust_err,dist_init,loss,eps,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.batch,
            self.epoch,
            self.grad_norm,
            self.robust_err,
            self.dist_init,
            self.loss,
            self.eps,
            self.lr
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub eps: f64,
    pub params: ParamVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: SchedulePlan,
    /// Norm and domain of the training attack; its radius follows the schedule.
    pub budget: AdvBudget,
    pub pgd: PgdRecipe,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.batch_size > data.len() {
            return Err(Error::invalid(format!(
                "batch size {} must be in 1..={}",
                self.batch_size,
                data.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub initial: ParamVector,
    pub snapshots: Vec<Snapshot>,
    pub telemetry: Vec<TelemetryRecord>,
    /// Set when a loss or gradient went non-finite; `model` then holds the
    /// last finite parameters.
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn ensemble(&self) -> Result<Ensemble> {
        let members = self
            .snapshots
            .iter()
            .map(|s| self.model.with_params(s.params.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(members)
    }
}

/// Robust error reported for a diverged run.
pub const DIVERGED_ERROR: f64 = 0.9;

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
}

/// Min-max adversarial training.
///
/// Each epoch reshuffles the data from `seed/train/epoch-{d}/shuffle`; each
/// batch is attacked with PGD at the scheduled radius (randomness from
/// `seed/train/epoch-{d}/batch-{b}`) and the optimizer steps on the mean loss
/// gradient at the adversarial points.
pub fn train_adversarial(model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(data)?;
    if model.input_dim() != data.dim() || model.num_classes() != data.num_classes() {
        return Err(Error::DimensionMismatch {
            segment: "input".into(),
            expected: model.input_dim(),
            actual: data.dim(),
        });
    }
    let root = RngStream::new(cfg.seed).child("train");
    let initial = model.params().clone();
    let mut model = model;
    let mut state = OptimizerState::new(cfg.optimizer, model.params());
    let mut telemetry = Vec::new();
    let mut snapshots = Vec::new();
    let mut global_batch = 0usize;
    let n = data.len();

    for epoch in 0..cfg.schedule.epochs() {
        let row = cfg.schedule.at(epoch)?;
        let budget = cfg.budget.with_eps(row.eps);
        let pgd = cfg.pgd.config(row.eps);
        let epoch_stream = root.child(format!("epoch-{epoch}"));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_stream.child("shuffle").rng());

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, ys) = data.gather(idx);
            let stream = epoch_stream.child(format!("batch-{b}"));
            let sums = match adversarial_sums(&model, xs.view(), &ys, &budget, &pgd, &stream, true)
            {
                Ok(s) => s,
                Err(e) if is_divergence(&e) => {
                    return Ok(diverged(model, initial, snapshots, telemetry))
                }
                Err(e) => return Err(e),
            };
            let grad = sums.mean_grad().expect("requested");
            let loss = sums.mean_loss();
            if !loss.is_finite() || !grad.is_finite() {
                return Ok(diverged(model, initial, snapshots, telemetry));
            }
            telemetry.push(TelemetryRecord {
                batch: global_batch,
                epoch,
                grad_norm: grad.norm(),
                robust_err: sums.error_rate(),
                dist_init: model.params().distance(&initial)?,
                loss,
                eps: row.eps,
                lr: row.lr,
            });
            let before = model.params().clone();
            state.step(model.params_mut(), &grad, row.lr, global_batch)?;
            if !model.params().is_finite() {
                model = model.with_params(before)?;
                return Ok(diverged(model, initial, snapshots, telemetry));
            }
            global_batch += 1;
        }

        if cfg.schedule.periods.snapshot_at_period_end && cfg.schedule.periods.is_period_end(epoch)
        {
            snapshots.push(Snapshot {
                epoch,
                eps: row.eps,
                params: model.params().clone(),
            });
        }
    }

    Ok(TrainOutcome {
        model,
        initial,
        snapshots,
        telemetry,
        diverged: false,
    })
}

fn diverged(
    model: Model,
    initial: ParamVector,
    snapshots: Vec<Snapshot>,
    telemetry: Vec<TelemetryRecord>,
) -> TrainOutcome {
    TrainOutcome {
        model,
        initial,
        snapshots,
        telemetry,
        diverged: true,
    }
}

/// Models combined by averaging their class probabilities.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Model>,
}

impl Ensemble {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::invalid("an ensemble needs at least one model"));
        };
        let (m, k) = (first.input_dim(), first.num_classes());
        if members
            .iter()
            .any(|x| x.input_dim() != m || x.num_classes() != k)
        {
            return Err(Error::invalid(
                "ensemble members disagree on input or class count",
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn probabilities(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut acc = self.members[0].probabilities(xs)?;
        for m in &self.members[1..] {
            acc += &m.probabilities(xs)?;
        }
        acc /= self.members.len() as f64;
        Ok(acc)
    }

    pub fn predict_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<usize>> {
        let p = self.probabilities(xs)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("contiguous")))
            .collect())
    }

    pub fn error(&self, data: &Dataset) -> Result<f64> {
        let preds = self.predict_batch(data.inputs())?;
        let wrong = preds
            .iter()
            .zip(data.labels())
            .filter(|(p, y)| p != y)
            .count();
        Ok(wrong as f64 / data.len() as f64)
    }
}

/// Argmax of the members' mean probabilities; ties go to the lower class.
pub fn ensemble_predict(ensemble: &Ensemble, x: &[f64]) -> Result<usize> {
    let xs = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    Ok(ensemble.predict_batch(xs)?[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDeadness {
    pub units: usize,
    pub dead: usize,
    pub dead_layer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadNeuronReport {
    pub layers: Vec<LayerDeadness>,
    pub probed_inputs: usize,
}

impl DeadNeuronReport {
    pub fn any_dead_layer(&self) -> bool {
        self.layers.iter().any(|l| l.dead_layer)
    }
}

/// Counts ReLU units whose pre-activation is `<= 0` on every clean input of
/// `data` and on every PGD input found under `budget`.
pub fn dead_neuron_report(
    model: &Model,
    data: &Dataset,
    budget: &AdvBudget,
    pgd: &PgdRecipe,
    stream: &RngStream,
) -> Result<DeadNeuronReport> {
    if !matches!(
        model.arch(),
        Arch::Mlp {
            activation: Activation::Relu,
            ..
        }
    ) {
        return Err(Error::UnsupportedArch {
            op: "dead_neuron_report",
            expected: "a ReLU MLP",
        });
    }
    let mut alive: Vec<Vec<bool>> = Vec::new();
    let mut probe = |xs: ArrayView2<f64>| -> Result<()> {
        let pre = model.hidden_preactivations(xs)?;
        if alive.is_empty() {
            alive = pre.iter().map(|z| vec![false; z.ncols()]).collect();
        }
        for (flags, z) in alive.iter_mut().zip(&pre) {
            for row in z.rows() {
                for (f, v) in flags.iter_mut().zip(row.iter()) {
                    *f |= *v > 0.0;
                }
            }
        }
        Ok(())
    };
    probe(data.inputs())?;
    let mut probed = data.len();
    if budget.eps > 0.0 {
        let cfg = pgd.config(budget.eps);
        let adv = pgd_batch(model, data.inputs(), data.labels(), budget, &cfg, stream, 0)?;
        probe(adv.adv.view())?;
        probed += data.len();
    }
    let layers = alive
        .into_iter()
        .map(|flags| {
            let dead = flags.iter().filter(|f| !**f).count();
            LayerDeadness {
                units: flags.len(),
                dead,
                dead_layer: dead == flags.len(),
            }
        })
        .collect();
    Ok(DeadNeuronReport {
        layers,
        probed_inputs: probed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Segment;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_values(&[Segment::new("w", vec![v.len()])], v.to_vec()).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let mut p = pv(&[1.0, 1.0]);
        let mut s = OptimizerState::new(OptimizerConfig::new(OptimizerKind::sgd(0.0)), &p);
        optimizer_step(&mut s, &mut p, &pv(&[1.0, -1.0]), 0.1).unwrap();
        assert_eq!(p.values(), &[0.9, 1.1]);
    }

    #[test]
    fn momentum_second_step() {
        let g = pv(&[0.5, -2.0]);
        let mut p = pv(&[0.0, 0.0]);
        let mut s = OptimizerState::new(OptimizerConfig::new(OptimizerKind::sgd(0.9)), &p);
        optimizer_step(&mut s, &mut p, &g, 0.1).unwrap();
        let after_one = p.clone();
        optimizer_step(&mut s, &mut p, &g, 0.1).unwrap();
        for i in 0..2 {
            let update = after_one.values()[i] - p.values()[i];
            assert!((update - 0.1 * 1.9 * g.values()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = pv(&[0.0, 0.0, 0.0]);
        let mut s = OptimizerState::new(OptimizerConfig::new(OptimizerKind::adam()), &p);
        optimizer_step(&mut s, &mut p, &pv(&[3.0, -1e-3, 50.0]), 0.01).unwrap();
        for (v, sign) in p.values().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_batch() {
        let mut p = pv(&[0.0]);
        let mut s = OptimizerState::new(OptimizerConfig::new(OptimizerKind::sgd(0.0)), &p);
        let err = s.step(&mut p, &pv(&[f64::NAN]), 0.1, 17).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { batch: 17 }));
    }

    #[test]
    fn confident_member_wins() {
        // Member a: p(class 0) = 0.9; member b: p(class 1) = 0.55.
        let arch = Arch::LinearMulticlass {
            inputs: 1,
            classes: 2,
        };
        let la = (0.9f64 / 0.1).ln();
        let lb = (0.55f64 / 0.45).ln();
        let a = Model::new(
            arch.clone(),
            ParamVector::from_values(&arch.layout(), vec![la, 0.0]).unwrap(),
        )
        .unwrap();
        let b = Model::new(
            arch.clone(),
            ParamVector::from_values(&arch.layout(), vec![0.0, lb]).unwrap(),
        )
        .unwrap();
        let e = Ensemble::new(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(ensemble_predict(&e, &[1.0]).unwrap(), 0);
        assert_eq!(b.predict(&[1.0]).unwrap(), 1);
        let single = Ensemble::new(vec![b.clone()]).unwrap();
        assert_eq!(ensemble_predict(&single, &[1.0]).unwrap(), 1);
        assert!(Ensemble::new(vec![]).is_err());
    }

    #[test]
    fn dead_layer_is_flagged() {
        let arch = Arch::mlp(&[3, 4, 2], Activation::Relu);
        let mut p = ParamVector::zeros(&arch.layout());
        p.segment_mut("layer0.bias").unwrap().fill(-1.0);
        p.segment_mut("layer1.bias")
            .unwrap()
            .copy_from_slice(&[0.3, -0.2]);
        let model = Model::new(arch, p).unwrap();
        let data = crate::data::make_blobs(1, 20, 3, 2, 0.0).unwrap();
        let r = dead_neuron_report(
            &model,
            &data,
            &AdvBudget::linf(0.0),
            &PgdRecipe::pgd10(),
            &RngStream::new(0),
        )
        .unwrap();
        assert!(r.layers[0].dead_layer);
        let logits = model.forward_batch(data.inputs()).unwrap();
        for row in logits.rows() {
            assert_eq!(row.to_vec(), vec![0.3, -0.2]);
        }
    }
}
