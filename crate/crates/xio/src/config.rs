//! Run configuration, read from TOML. Unknown keys are rejected everywhere.

use std::fmt;
use std::path::{Path, PathBuf};

use advland_core::attack::{AdvBudget, Norm, PgdRecipe};
use advland_core::data::Dataset;
use advland_core::model::Arch;
use advland_core::probe::PowerConfig;
use advland_core::schedule::{EpsScheduler, LrSchedule, PeriodPlan, SchedulePlan};
use advland_core::train::{OptimizerConfig, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XioError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Train,
    Attack,
    Eval,
    Hessian,
    Landscape,
    Similarity,
    Connect,
    Theory,
    Schedule,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Attack => "attack",
            Task::Eval => "eval",
            Task::Hessian => "hessian",
            Task::Landscape => "landscape",
            Task::Similarity => "similarity",
            Task::Connect => "connect",
            Task::Theory => "theory",
            Task::Schedule => "schedule",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// MNIST-style IDX files. Relative paths resolve against the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Synthetic separable blobs; the test split is the tail of one draw.
    Blobs {
        n: usize,
        m: usize,
        classes: usize,
        margin: f64,
        #[serde(default)]
        test_n: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    #[serde(default = "default_norm")]
    pub norm: Norm,
    pub eps: f64,
    /// Intersect the ball with the data domain (when the data has one).
    #[serde(default = "yes")]
    pub clip: bool,
}

fn default_norm() -> Norm {
    Norm::Inf
}

fn yes() -> bool {
    true
}

impl BudgetSpec {
    pub fn budget(&self, data: &Dataset) -> AdvBudget {
        let b = match self.norm {
            Norm::Inf => AdvBudget::linf(self.eps),
            Norm::Two => AdvBudget::l2(self.eps),
        };
        b.with_domain(if self.clip { data.domain() } else { None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub epochs: usize,
    pub eps: EpsScheduler,
    pub lr: LrSchedule,
    /// Period end epochs; defaults to a single period of `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub snapshot_at_period_end: bool,
}

impl ScheduleSpec {
    pub fn plan(&self) -> Result<SchedulePlan> {
        let boundaries = self.periods.clone().unwrap_or_else(|| vec![self.epochs]);
        let periods = PeriodPlan::new(boundaries, self.snapshot_at_period_end)?;
        periods.validate(self.epochs)?;
        let plan = SchedulePlan {
            eps: self.eps,
            lr: self.lr.clone(),
            periods,
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Multiplies the default initialisation bounds.
    #[serde(default = "one")]
    pub init_scale: f64,
    #[serde(default = "yes")]
    pub save_snapshots: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            init_scale: 1.0,
            save_snapshots: true,
        }
    }
}

fn default_batch() -> usize {
    128
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_fd")]
    pub fd_radius: f64,
    /// Random initialisations averaged for the normalisation constant; 0 skips it.
    #[serde(default)]
    pub normalization_samples: usize,
    /// Number of training examples the loss is measured on (all when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            k: default_k(),
            tol: default_tol(),
            max_iters: default_iters(),
            fd_radius: default_fd(),
            normalization_samples: 0,
            limit: None,
        }
    }
}

impl ProbeSpec {
    pub fn power(&self) -> PowerConfig {
        PowerConfig {
            k: self.k,
            tol: self.tol,
            max_iters: self.max_iters,
        }
    }
}

fn default_k() -> usize {
    5
}
fn default_tol() -> f64 {
    1e-6
}
fn default_iters() -> usize {
    200
}
fn default_fd() -> f64 {
    advland_core::probe::DEFAULT_FD_RADIUS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    /// Leading Hessian eigenvectors.
    Eigen,
    /// Seeded random unit directions.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    #[serde(default = "one")]
    pub half_width: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "random_dirs")]
    pub directions: DirectionKind,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        Self {
            half_width: 1.0,
            resolution: default_resolution(),
            directions: DirectionKind::Random,
        }
    }
}

fn default_resolution() -> usize {
    11
}

fn random_dirs() -> DirectionKind {
    DirectionKind::Random
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilaritySpec {
    pub a: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "eigen_dirs")]
    pub direction: DirectionKind,
}

fn default_repeats() -> usize {
    4
}

fn eigen_dirs() -> DirectionKind {
    DirectionKind::Eigen
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectSpec {
    #[serde(default = "default_order")]
    pub order: usize,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_curve_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn default_order() -> usize {
    2
}

fn default_curve_optimizer() -> OptimizerConfig {
    OptimizerConfig::new(OptimizerKind::adam())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySpec {
    /// Random instances per suite.
    #[serde(default = "default_instances")]
    pub instances: usize,
}

impl Default for TheorySpec {
    fn default() -> Self {
        Self {
            instances: default_instances(),
        }
    }
}

fn default_instances() -> usize {
    100
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    /// Checkpoints consumed by the task; `connect` needs exactly two and
    /// `eval` ensembles all of them.
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// May be left out when the task is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<Arch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<PgdRecipe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<LandscapeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilaritySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect: Option<ConnectSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheorySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSpec>,
}

fn missing(task: Task, section: &str) -> XioError {
    XioError::Config(format!("task `{task}` needs a [{section}] section"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| XioError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XioError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| XioError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn task(&self) -> Result<Task> {
        self.task.ok_or_else(|| {
            XioError::Config("no task given in the config or on the command line".into())
        })
    }

    pub fn attack_recipe(&self) -> PgdRecipe {
        self.attack.unwrap_or_else(PgdRecipe::pgd10)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        self.optimizer
            .unwrap_or_else(|| OptimizerConfig::new(OptimizerKind::adam()))
    }

    /// Checks everything the task will use, before any data is read.
    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        let needs_model = matches!(task, Task::Train);
        let needs_data = !matches!(task, Task::Theory | Task::Schedule);
        let needs_budget = matches!(
            task,
            Task::Attack
                | Task::Eval
                | Task::Hessian
                | Task::Landscape
                | Task::Similarity
                | Task::Connect
        );
        let needs_input = matches!(
            task,
            Task::Attack
                | Task::Eval
                | Task::Hessian
                | Task::Landscape
                | Task::Similarity
                | Task::Connect
        );
        if needs_model && self.model.is_none() {
            return Err(missing(task, "model"));
        }
        if let Some(arch) = &self.model {
            arch.validate()?;
        }
        if needs_data && self.data.is_none() {
            return Err(missing(task, "data"));
        }
        if let Some(DataSpec::Blobs {
            n,
            m,
            classes,
            margin,
            ..
        }) = &self.data
        {
            if *n == 0 || *m == 0 || *classes < 2 || !(margin.is_finite() && *margin >= 0.0) {
                return Err(XioError::Config(
                    "blobs need n >= 1, m >= 1, classes >= 2 and a finite margin >= 0".into(),
                ));
            }
        }
        if needs_budget && self.budget.is_none() {
            return Err(missing(task, "budget"));
        }
        if let Some(b) = &self.budget {
            AdvBudget::linf(b.eps).validate()?;
        }
        if let Some(a) = &self.attack {
            a.config(self.budget.map_or(0.1, |b| b.eps.max(1e-3)))
                .validate()?;
        }
        if matches!(task, Task::Train | Task::Schedule) {
            self.schedule
                .as_ref()
                .ok_or_else(|| missing(task, "schedule"))?
                .plan()?;
        } else if let Some(s) = &self.schedule {
            s.plan()?;
        }
        if let Some(t) = &self.train {
            if t.batch_size == 0 || !(t.init_scale.is_finite() && t.init_scale > 0.0) {
                return Err(XioError::Config(
                    "train.batch_size must be >= 1 and train.init_scale > 0".into(),
                ));
            }
        }
        if let Some(p) = &self.probe {
            if p.k == 0 || p.max_iters == 0 || !(p.tol > 0.0) || !(p.fd_radius > 0.0) {
                return Err(XioError::Config(
                    "probe needs k >= 1, max_iters >= 1, tol > 0 and fd_radius > 0".into(),
                ));
            }
        }
        if task == Task::Similarity && self.similarity.is_none() {
            return Err(missing(task, "similarity"));
        }
        if let Some(s) = &self.similarity {
            if s.repeats == 0 || !(s.a.is_finite() && s.a >= 0.0) {
                return Err(XioError::Config(
                    "similarity needs repeats >= 1 and a >= 0".into(),
                ));
            }
        }
        if let Some(l) = &self.landscape {
            if l.resolution < 2 || !(l.half_width.is_finite() && l.half_width > 0.0) {
                return Err(XioError::Config(
                    "landscape needs resolution >= 2 and half_width > 0".into(),
                ));
            }
        }
        if task == Task::Connect {
            let c = self
                .connect
                .as_ref()
                .ok_or_else(|| missing(task, "connect"))?;
            if c.order == 0
                || c.batch_size == 0
                || c.resolution < 2
                || !(c.lr.is_finite() && c.lr > 0.0)
            {
                return Err(XioError::Config(
                    "connect needs order >= 1, batch_size >= 1, resolution >= 2 and lr > 0".into(),
                ));
            }
        }
        if needs_input {
            let input = self.input.as_ref().ok_or_else(|| missing(task, "input"))?;
            let want = match task {
                Task::Connect => Some(2),
                Task::Eval => None,
                _ => Some(1),
            };
            let got = input.checkpoints.len();
            let ok = match want {
                Some(n) => got == n,
                None => got >= 1,
            };
            if !ok {
                return Err(XioError::Config(format!(
                    "task `{task}` got {got} checkpoints in [input], expected {}",
                    want.map_or("at least 1".to_string(), |n| n.to_string())
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN: &str = r#"
task = "train"
seed = 3

[model]
kind = "mlp"
widths = [4, 8, 3]
activation = "relu"

[data]
kind = "blobs"
n = 60
m = 4
classes = 3
margin = 0.5

[schedule]
epochs = 4
eps = { kind = "cosine", eps_max = 0.1, warmup = 2.0, eps_target = 0.3 }
lr = { kind = "constant", lr = 0.001 }

[attack]
kind = "relative"
steps = 5
step_fraction = 0.25
random_start = true
restarts = 1
"#;

    #[test]
    fn parses_and_echoes() {
        let cfg = RunConfig::from_toml(TRAIN).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.task, Some(Task::Train));
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err =
            RunConfig::from_toml(&TRAIN.replace("seed = 3", "seed = 3\nsede = 4")).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err = RunConfig::from_toml(&TRAIN.replace("margin = 0.5", "margin = 0.5\nmargn = 1"))
            .unwrap_err();
        assert!(err.to_string().contains("margn"), "{err}");
    }

    #[test]
    fn missing_sections_fail_validation() {
        let cfg =
            RunConfig::from_toml(&TRAIN.replace("task = \"train\"", "task = \"attack\"")).unwrap();
        assert!(matches!(cfg.validate(), Err(XioError::Config(_))));
    }

    #[test]
    fn period_boundaries_must_end_at_epochs() {
        let cfg =
            RunConfig::from_toml(&TRAIN.replace("epochs = 4", "epochs = 4\nperiods = [2, 3]"))
                .unwrap();
        assert!(cfg.validate().is_err());
    }
}
