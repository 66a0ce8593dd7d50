//! Task dispatch for the `advland` binary.

use std::path::{Path, PathBuf};

use advland_core::attack::{
    adversarial_eval, clean_error, pgd_rows, AdvBudget, AdvEval, Norm, PgdConfig,
};
use advland_core::connect::{eval_curve, train_curve, BezierCurve, CurveEval, CurveTrainConfig};
use advland_core::data::{make_blobs, Dataset};
use advland_core::model::{Arch, Model};
use advland_core::objective::AdversarialObjective;
use advland_core::probe::{
    hessian_eigenpairs, landscape_grid, normalization_constant, orthonormal_pair,
    perturb_similarity, EigenReport, LandscapeGrid, SimilarityReport,
};
use advland_core::theory::{
    eig_monotonicity_check, eps_bar_over_grid, separable_logistic, t_set_member,
    version_space_member, MonotonicityReport, GAMMA_GRID,
};
use advland_core::train::{
    dead_neuron_report, train_adversarial, Ensemble, TelemetryRecord, TrainConfig,
};
use advland_core::{ParamVector, RngStream};
use rand::Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, to_bytes, CheckpointMeta};
use crate::config::{BudgetSpec, DataSpec, DirectionKind, RunConfig, Task};
use crate::error::{Result, XioError};
use crate::idx::parse_idx;
use crate::report::{num, Manifest, Outputs};

/// Train split and optional test split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Splits {
    /// The test split when present, else the training split.
    pub fn eval(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads the configured data. Blob test points are the tail of one draw, so
/// both splits share class centres.
pub fn load_data(spec: &DataSpec, base: &Path, seed: u64) -> Result<Splits> {
    match spec {
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let train = parse_idx(
                &resolve(base, train_images),
                &resolve(base, train_labels),
                *train_limit,
            )?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(parse_idx(
                    &resolve(base, i),
                    &resolve(base, l),
                    *test_limit,
                )?),
                (None, None) => None,
                _ => {
                    return Err(XioError::Config(
                        "data.test_images and data.test_labels must be given together".into(),
                    ))
                }
            };
            Ok(Splits { train, test })
        }
        DataSpec::Blobs {
            n,
            m,
            classes,
            margin,
            test_n,
        } => {
            let all = make_blobs(seed, n + test_n, *m, *classes, *margin)?;
            let train = all.subset(&(0..*n).collect::<Vec<_>>())?;
            let test = if *test_n > 0 {
                Some(all.subset(&(*n..n + test_n).collect::<Vec<_>>())?)
            } else {
                None
            };
            Ok(Splits { train, test })
        }
    }
}

/// Initial parameters of a training run: `seed/init`.
pub fn init_model(arch: &Arch, scale: f64, seed: u64) -> Result<Model> {
    Ok(Model::init_scaled(
        arch.clone(),
        scale,
        &mut RngStream::new(seed).child("init").rng(),
    )?)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    base: &'a Path,
    seed: u64,
    root: RngStream,
}

impl Ctx<'_> {
    fn data(&self) -> Result<Splits> {
        let spec = self.cfg.data.as_ref().expect("validated");
        load_data(spec, self.base, self.seed)
    }

    fn budget_spec(&self) -> BudgetSpec {
        self.cfg.budget.expect("validated")
    }

    fn pgd(&self, eps: f64) -> PgdConfig {
        self.cfg.attack_recipe().config(eps)
    }

    fn checkpoints(&self) -> Result<Vec<Model>> {
        let input = self.cfg.input.as_ref().expect("validated");
        input
            .checkpoints
            .iter()
            .map(|p| Ok(load_checkpoint(&resolve(self.base, p))?.0))
            .collect()
    }

    fn first_checkpoint(&self) -> Result<Model> {
        Ok(self.checkpoints()?.remove(0))
    }
}

fn check_fit(model: &Model, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() || model.num_classes() != data.num_classes() {
        return Err(XioError::Config(format!(
            "model expects {} inputs and {} classes, data has {} and {}",
            model.input_dim(),
            model.num_classes(),
            data.dim(),
            data.num_classes()
        )));
    }
    Ok(())
}

/// Validates, runs the task and writes the manifest. Relative paths in the
/// config resolve against `base`.
pub fn run(cfg: &RunConfig, base: &Path, out: &Path) -> std::result::Result<Manifest, Failure> {
    cfg.validate().map_err(Failure::Invalid)?;
    execute(cfg, base, out).map_err(Failure::Runtime)
}

#[derive(Debug)]
pub enum Failure {
    Invalid(XioError),
    Runtime(XioError),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &XioError {
        match self {
            Failure::Invalid(e) | Failure::Runtime(e) => e,
        }
    }

    /// `{"error": kind, "message": text}` for stderr.
    pub fn to_json(&self) -> String {
        let e = self.error();
        serde_json::json!({
            "error": e.kind(),
            "exit": self.exit_code(),
            "message": e.to_string(),
        })
        .to_string()
    }
}

fn execute(cfg: &RunConfig, base: &Path, out_dir: &Path) -> Result<Manifest> {
    let task = cfg.task()?;
    let ctx = Ctx {
        cfg,
        base,
        seed: cfg.seed,
        root: RngStream::new(cfg.seed).child(task.name()),
    };
    let mut out = Outputs::create(out_dir, task.name())?;
    match task {
        Task::Train => task_train(&ctx, &mut out)?,
        Task::Attack => task_attack(&ctx, &mut out)?,
        Task::Eval => task_eval(&ctx, &mut out)?,
        Task::Hessian => task_hessian(&ctx, &mut out)?,
        Task::Landscape => task_landscape(&ctx, &mut out)?,
        Task::Similarity => task_similarity(&ctx, &mut out)?,
        Task::Connect => task_connect(&ctx, &mut out)?,
        Task::Theory => task_theory(&ctx, &mut out)?,
        Task::Schedule => task_schedule(&ctx, &mut out)?,
    }
    let mut echo = cfg.clone();
    echo.out = None;
    out.finish(cfg.seed, echo.to_toml())
}

#[derive(Serialize)]
struct TrainSummary {
    diverged: bool,
    batches: usize,
    final_eps: f64,
    eval_eps: f64,
    clean_error: f64,
    robust_error: f64,
    robust_loss: f64,
    snapshots: Vec<usize>,
    ensemble_clean_error: Option<f64>,
    dead_layer: Option<bool>,
}

fn task_train(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let cfg = ctx.cfg;
    let arch = cfg.model.as_ref().expect("validated");
    let spec = cfg.train.unwrap_or_default();
    let plan = cfg.schedule.as_ref().expect("validated").plan()?;
    let splits = ctx.data()?;
    let model = init_model(arch, spec.init_scale, ctx.seed)?;
    check_fit(&model, &splits.train)?;
    let bspec = cfg.budget.unwrap_or(BudgetSpec {
        norm: Norm::Inf,
        eps: plan.eps.eps_target,
        clip: true,
    });
    let tc = TrainConfig {
        schedule: plan.clone(),
        budget: bspec.budget(&splits.train),
        pgd: cfg.attack_recipe(),
        optimizer: cfg.optimizer_config(),
        batch_size: spec.batch_size,
        seed: ctx.seed,
    };
    let outcome = train_adversarial(model, &splits.train, &tc)?;
    let rows: Vec<String> = outcome
        .telemetry
        .iter()
        .map(TelemetryRecord::csv_row)
        .collect();
    out.write_csv("telemetry.csv", TelemetryRecord::CSV_HEADER, &rows)?;

    let final_eps = outcome.telemetry.last().map_or(0.0, |r| r.eps);
    let epochs_done = outcome.telemetry.last().map_or(0, |r| r.epoch + 1);
    out.write(
        "model.ckpt",
        &to_bytes(
            &outcome.model,
            CheckpointMeta {
                seed: ctx.seed,
                epoch: epochs_done,
                eps: final_eps,
            },
        ),
    )?;
    if spec.save_snapshots && plan.periods.num_periods() > 1 {
        for s in &outcome.snapshots {
            let m = outcome.model.with_params(s.params.clone())?;
            let meta = CheckpointMeta {
                seed: ctx.seed,
                epoch: s.epoch + 1,
                eps: s.eps,
            };
            out.write(
                &format!("snapshot-{}.ckpt", s.epoch + 1),
                &to_bytes(&m, meta),
            )?;
        }
    }

    let eval_data = splits.eval();
    let budget = bspec.budget(eval_data);
    let adv = adversarial_eval(
        &outcome.model,
        eval_data,
        &budget,
        &ctx.pgd(budget.eps),
        &ctx.root.child("eval"),
    )?;
    let ensemble_clean_error = if outcome.snapshots.len() > 1 {
        Some(outcome.ensemble()?.error(eval_data)?)
    } else {
        None
    };
    let dead_layer = match arch {
        Arch::Mlp { .. } => Some(
            dead_neuron_report(
                &outcome.model,
                &splits.train,
                &budget.with_domain(splits.train.domain().filter(|_| bspec.clip)),
                &cfg.attack_recipe(),
                &ctx.root.child("dead"),
            )
            .map(|r| r.any_dead_layer())
            .unwrap_or(false),
        ),
        _ => None,
    };
    let summary = TrainSummary {
        diverged: outcome.diverged,
        batches: outcome.telemetry.len(),
        final_eps,
        eval_eps: budget.eps,
        clean_error: clean_error(&outcome.model, eval_data)?,
        robust_error: adv.error,
        robust_loss: adv.mean_loss,
        snapshots: outcome.snapshots.iter().map(|s| s.epoch + 1).collect(),
        ensemble_clean_error,
        dead_layer,
    };
    out.write_json("summary.json", &summary)
}

fn task_attack(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let model = ctx.first_checkpoint()?;
    let splits = ctx.data()?;
    let data = splits.eval();
    check_fit(&model, data)?;
    let budget = ctx.budget_spec().budget(data);
    let pgd = ctx.pgd(budget.eps);
    let attack = pgd_rows(
        &model,
        data.inputs(),
        data.labels(),
        &budget,
        &pgd,
        &ctx.root.child("pgd"),
    )?;
    let clean = model.predict_batch(data.inputs())?;
    let adv_pred = model.predict_batch(attack.adv.view())?;
    let mut rows = Vec::with_capacity(data.len());
    let mut errors = 0;
    for i in 0..data.len() {
        let delta: Vec<f64> = attack
            .adv
            .row(i)
            .iter()
            .zip(data.input(i))
            .map(|(a, b)| a - b)
            .collect();
        let y = data.labels()[i];
        errors += usize::from(adv_pred[i] != y);
        rows.push(format!(
            "{i},{y},{},{},{},{}",
            clean[i],
            adv_pred[i],
            num(attack.losses[i]),
            num(budget.norm.of(&delta))
        ));
    }
    out.write_csv(
        "attack.csv",
        "index,label,clean_pred,adv_pred,adv_loss,perturbation_norm",
        &rows,
    )?;
    let summary = AdvEval {
        mean_loss: attack.losses.iter().sum::<f64>() / data.len() as f64,
        error: errors as f64 / data.len() as f64,
        count: data.len(),
    };
    out.write_json("attack.json", &summary)
}

#[derive(Serialize)]
struct MemberEval {
    checkpoint: String,
    clean_error: f64,
    robust: AdvEval,
}

#[derive(Serialize)]
struct EvalReport {
    eps: f64,
    members: Vec<MemberEval>,
    ensemble_clean_error: Option<f64>,
}

fn task_eval(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let models = ctx.checkpoints()?;
    let splits = ctx.data()?;
    let data = splits.eval();
    let budget = ctx.budget_spec().budget(data);
    let pgd = ctx.pgd(budget.eps);
    let names = &ctx.cfg.input.as_ref().expect("validated").checkpoints;
    let mut members = Vec::with_capacity(models.len());
    for (i, (m, name)) in models.iter().zip(names).enumerate() {
        check_fit(m, data)?;
        members.push(MemberEval {
            checkpoint: name.display().to_string(),
            clean_error: clean_error(m, data)?,
            robust: adversarial_eval(
                m,
                data,
                &budget,
                &pgd,
                &ctx.root.child(format!("member-{i}")),
            )?,
        });
    }
    let ensemble_clean_error = if models.len() > 1 {
        Some(Ensemble::new(models)?.error(data)?)
    } else {
        None
    };
    out.write_json(
        "eval.json",
        &EvalReport {
            eps: budget.eps,
            members,
            ensemble_clean_error,
        },
    )
}

/// Training data restricted to `probe.limit` examples.
fn probe_data(ctx: &Ctx, splits: &Splits) -> Result<Dataset> {
    let probe = ctx.cfg.probe.unwrap_or_default();
    Ok(match probe.limit {
        Some(n) => splits.train.head(n)?,
        None => splits.train.clone(),
    })
}

fn eigenpairs(
    ctx: &Ctx,
    model: &Model,
    data: &Dataset,
    budget: &AdvBudget,
    k: usize,
) -> Result<EigenReport> {
    let probe = ctx.cfg.probe.unwrap_or_default();
    let pgd = ctx.pgd(budget.eps);
    let oracle = AdversarialObjective::new(model.arch().clone(), data, *budget, pgd);
    let mut power = probe.power();
    power.k = power.k.max(k);
    let mut report = hessian_eigenpairs(
        &oracle,
        model.params(),
        &power,
        probe.fd_radius,
        &ctx.root.child("eigen"),
    )?;
    if probe.normalization_samples > 0 {
        let c = normalization_constant(
            model.arch(),
            data,
            budget,
            &pgd,
            probe.normalization_samples,
            1.0,
            &ctx.root.child("normalization"),
        )?;
        report = report.with_normalization(c);
    }
    Ok(report)
}

#[derive(Serialize)]
struct EigenSummary {
    eigenvalues: Vec<f64>,
    normalized: Option<Vec<f64>>,
    normalization: Option<f64>,
    converged: Vec<bool>,
    iterations: Vec<usize>,
}

fn task_hessian(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let model = ctx.first_checkpoint()?;
    let splits = ctx.data()?;
    let data = probe_data(ctx, &splits)?;
    check_fit(&model, &data)?;
    let budget = ctx.budget_spec().budget(&data);
    let report = eigenpairs(ctx, &model, &data, &budget, 1)?;
    let normalized = report.normalized();
    let rows: Vec<String> = (0..report.eigenvalues.len())
        .map(|i| {
            format!(
                "{i},{},{},{},{}",
                num(report.eigenvalues[i]),
                normalized.as_ref().map_or(String::new(), |n| num(n[i])),
                report.converged[i],
                report.iterations[i]
            )
        })
        .collect();
    out.write_csv(
        "eigen.csv",
        "index,eigenvalue,normalized,converged,iterations",
        &rows,
    )?;
    out.write_json(
        "eigen.json",
        &EigenSummary {
            eigenvalues: report.eigenvalues.clone(),
            normalized,
            normalization: report.normalization,
            converged: report.converged.clone(),
            iterations: report.iterations.clone(),
        },
    )
}

fn random_direction(model: &Model, stream: &RngStream) -> ParamVector {
    ParamVector::random_unit(model.params().layout(), &mut stream.rng())
}

fn task_landscape(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let model = ctx.first_checkpoint()?;
    let splits = ctx.data()?;
    let data = probe_data(ctx, &splits)?;
    check_fit(&model, &data)?;
    let spec = ctx.cfg.landscape.unwrap_or_default();
    let budget = ctx.budget_spec().budget(&data);
    let (a, b) = match spec.directions {
        DirectionKind::Random => (
            random_direction(&model, &ctx.root.child("v1")),
            random_direction(&model, &ctx.root.child("v2")),
        ),
        DirectionKind::Eigen => {
            let r = eigenpairs(ctx, &model, &data, &budget, 2)?;
            (r.eigenvectors[0].clone(), r.eigenvectors[1].clone())
        }
    };
    let (v1, v2) = orthonormal_pair(&a, &b)?;
    let oracle =
        AdversarialObjective::new(model.arch().clone(), &data, budget, ctx.pgd(budget.eps));
    let grid: LandscapeGrid = landscape_grid(
        &oracle,
        model.params(),
        &v1,
        &v2,
        spec.half_width,
        spec.resolution,
        &ctx.root.child("grid"),
    )?;
    out.write_csv("landscape.csv", LandscapeGrid::CSV_HEADER, &grid.csv_rows())
}

fn task_similarity(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let model = ctx.first_checkpoint()?;
    let splits = ctx.data()?;
    let data = probe_data(ctx, &splits)?;
    check_fit(&model, &data)?;
    let spec = ctx.cfg.similarity.expect("validated");
    let budget = ctx.budget_spec().budget(&data);
    let v = match spec.direction {
        DirectionKind::Random => random_direction(&model, &ctx.root.child("direction")),
        DirectionKind::Eigen => eigenpairs(ctx, &model, &data, &budget, 1)?
            .eigenvectors
            .remove(0),
    };
    let report: SimilarityReport = perturb_similarity(
        &model,
        &data,
        splits.test.as_ref(),
        &v,
        spec.a,
        &budget,
        &ctx.pgd(budget.eps),
        spec.repeats,
        &ctx.root.child("similarity"),
    )?;
    out.write_json("similarity.json", &report)
}

#[derive(Serialize)]
struct ConnectSummary {
    order: usize,
    steps_completed: usize,
    diverged: bool,
    barrier_segment: f64,
    barrier_trained: f64,
}

fn task_connect(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let mut models = ctx.checkpoints()?;
    let end = models.pop().expect("two checkpoints");
    let start = models.pop().expect("two checkpoints");
    if start.arch() != end.arch() {
        return Err(XioError::Config(
            "connect endpoints have different architectures".into(),
        ));
    }
    let splits = ctx.data()?;
    check_fit(&start, &splits.train)?;
    let spec = ctx.cfg.connect.expect("validated");
    let budget = ctx.budget_spec().budget(&splits.train);
    let pgd = ctx.pgd(budget.eps);
    let test = splits.eval();

    let segment = BezierCurve::new(
        start.arch().clone(),
        start.params().clone(),
        end.params().clone(),
        1,
    )?;
    let seg_eval = eval_curve(
        &segment,
        &splits.train,
        test,
        &budget,
        &pgd,
        spec.resolution,
        &ctx.root.child("segment"),
    )?;
    let curve = BezierCurve::new(
        start.arch().clone(),
        start.params().clone(),
        end.params().clone(),
        spec.order,
    )?;
    let tcfg = CurveTrainConfig {
        steps: spec.steps,
        batch_size: spec.batch_size,
        lr: spec.lr,
        optimizer: spec.optimizer,
    };
    let trained = train_curve(
        curve,
        &splits.train,
        &budget,
        &pgd,
        &tcfg,
        &ctx.root.child("curve"),
    )?;
    let eval: CurveEval = eval_curve(
        &trained.curve,
        &splits.train,
        test,
        &budget,
        &pgd,
        spec.resolution,
        &ctx.root.child("eval"),
    )?;
    out.write_csv("segment.csv", CurveEval::CSV_HEADER, &seg_eval.csv_rows())?;
    out.write_csv("curve.csv", CurveEval::CSV_HEADER, &eval.csv_rows())?;
    for (k, p) in trained.curve.interior().iter().enumerate() {
        let m = start.with_params(p.clone())?;
        out.write(
            &format!("control-{}.ckpt", k + 1),
            &to_bytes(
                &m,
                CheckpointMeta {
                    seed: ctx.seed,
                    epoch: 0,
                    eps: budget.eps,
                },
            ),
        )?;
    }
    out.write_json(
        "connect.json",
        &ConnectSummary {
            order: spec.order,
            steps_completed: trained.history.len(),
            diverged: trained.diverged,
            barrier_segment: seg_eval.barrier,
            barrier_trained: eval.barrier,
        },
    )
}

fn task_schedule(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let plan = ctx.cfg.schedule.as_ref().expect("validated").plan()?;
    let rows: Vec<String> = plan
        .trajectory()?
        .iter()
        .map(|r| format!("{},{},{}", r.epoch, num(r.eps), num(r.lr)))
        .collect();
    out.write_csv("schedule.csv", "epoch,eps,lr", &rows)
}

/// A random linear multiclass model with one labelled point, entries uniform
/// in `[-1, 1]`.
pub fn random_linear_instance(
    stream: &RngStream,
    m: usize,
    k: usize,
) -> Result<(Model, Vec<f64>, usize)> {
    let mut rng = stream.rng();
    let arch = Arch::LinearMulticlass {
        inputs: m,
        classes: k,
    };
    let w: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let model = Model::new(arch.clone(), ParamVector::from_values(&arch.layout(), w)?)?;
    let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let y = rng.random_range(0..k);
    Ok((model, x, y))
}

#[derive(Serialize)]
struct SuiteResult {
    name: &'static str,
    instances: usize,
    violations: usize,
    pass: bool,
}

#[derive(Serialize)]
struct TheoryReport {
    monotonicity: MonotonicityReport,
    suites: Vec<SuiteResult>,
    pass: bool,
}

const THEORY_SLACK: f64 = 1e-9;

fn task_theory(ctx: &Ctx, out: &mut Outputs) -> Result<()> {
    let n = ctx.cfg.theory.unwrap_or_default().instances;
    let (prob, cert) = separable_logistic(ctx.seed, 200, 5, 1.0, Norm::Inf)?;
    let monotonicity = eig_monotonicity_check(
        &prob,
        &cert,
        &[0.0, 0.25, 0.5, 0.75, 1.0],
        16,
        THEORY_SLACK,
        &ctx.root.child("monotonicity"),
    )?;

    let mut tset_bad = 0;
    for i in 0..n {
        let s = ctx.root.child(format!("tset-{i}"));
        let m = s.child("m").rng().random_range(2..=10);
        let k = if s.child("k").rng().random::<bool>() {
            3
        } else {
            5
        };
        let (model, x, y) = random_linear_instance(&s.child("instance"), m, k)?;
        let bar = eps_bar_over_grid(&model, &x, y, Norm::Inf, &GAMMA_GRID)?.max(0.0);
        let ok = [1e-3, 0.1, 1.0]
            .iter()
            .map(|d| t_set_member(&model, &x, y, bar + d, &GAMMA_GRID, THEORY_SLACK))
            .collect::<advland_core::Result<Vec<bool>>>()?;
        tset_bad += usize::from(ok.iter().any(|v| !v));
    }

    let grid = [0.0, 0.05, 0.1, 0.2, 0.4];
    let mut nest_bad = 0;
    for i in 0..n {
        let s = ctx.root.child(format!("nesting-{i}"));
        let (model, x, y) = random_linear_instance(&s, 4, 3)?;
        let member = grid
            .iter()
            .map(|e| version_space_member(&model, &x, y, *e))
            .collect::<advland_core::Result<Vec<bool>>>()?;
        let violates = (0..grid.len()).any(|j| (0..j).any(|i| member[j] && !member[i]));
        nest_bad += usize::from(violates);
    }

    let suites = vec![
        SuiteResult {
            name: "t_set_above_eps_bar",
            instances: n,
            violations: tset_bad,
            pass: tset_bad == 0,
        },
        SuiteResult {
            name: "version_space_nesting",
            instances: n,
            violations: nest_bad,
            pass: nest_bad == 0,
        },
    ];
    let pass = monotonicity.pass && suites.iter().all(|s| s.pass);
    out.write_json(
        "theory.json",
        &TheoryReport {
            monotonicity,
            suites,
            pass,
        },
    )
}

/// Mean distance from the initial point over the first `batches` updates.
pub fn mean_dist_first(telemetry: &[TelemetryRecord], batches: usize) -> f64 {
    let head = &telemetry[..batches.min(telemetry.len())];
    head.iter().map(|r| r.dist_init).sum::<f64>() / head.len() as f64
}

/// Mean gradient norm over the last recorded epoch.
pub fn mean_final_epoch_grad(telemetry: &[TelemetryRecord]) -> f64 {
    let Some(last) = telemetry.last().map(|r| r.epoch) else {
        return f64::NAN;
    };
    let g: Vec<f64> = telemetry
        .iter()
        .filter(|r| r.epoch == last)
        .map(|r| r.grad_norm)
        .collect();
    g.iter().sum::<f64>() / g.len() as f64
}
