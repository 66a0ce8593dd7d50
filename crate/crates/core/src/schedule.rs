//! Adversarial-budget and learning-rate trajectories, and the period plan
//! used for periodic resets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsKind {
    Constant,
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsScheduler {
    pub kind: EpsKind,
    #[serde(default)]
    pub eps_min: f64,
    #[serde(default)]
    pub eps_max: f64,
    /// Warmup length `D` in (rescaled) epochs.
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    pub eps_target: f64,
}

fn default_warmup() -> f64 {
    1.0
}

/// Where an epoch sits inside its training period.
///
/// `reference` is the length the scheduler's warmup is expressed against;
/// offsets inside a period of a different length are rescaled by
/// `reference / length`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodWindow {
    pub start: usize,
    pub length: usize,
    pub reference: usize,
}

impl PeriodWindow {
    /// One period covering `0..total`.
    pub fn single(total: usize) -> Self {
        Self {
            start: 0,
            length: total,
            reference: total,
        }
    }

    /// The rescaled offset `d_hat` of epoch `d`.
    pub fn offset(&self, d: usize) -> Result<f64> {
        if d < self.start || d >= self.start + self.length {
            return Err(Error::invalid(format!(
                "epoch {d} outside period [{}, {})",
                self.start,
                self.start + self.length
            )));
        }
        Ok((d - self.start) as f64 * self.reference as f64 / self.length as f64)
    }
}

impl EpsScheduler {
    pub fn constant(eps: f64) -> Self {
        Self {
            kind: EpsKind::Constant,
            eps_min: eps,
            eps_max: eps,
            warmup: 1.0,
            eps_target: eps,
        }
    }

    pub fn cosine(eps_min: f64, eps_max: f64, warmup: f64, eps_target: f64) -> Self {
        Self {
            kind: EpsKind::Cosine,
            eps_min,
            eps_max,
            warmup,
            eps_target,
        }
    }

    pub fn linear(eps_min: f64, eps_max: f64, warmup: f64, eps_target: f64) -> Self {
        Self {
            kind: EpsKind::Linear,
            eps_min,
            eps_max,
            warmup,
            eps_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_target >= 0.0) || !self.eps_target.is_finite() {
            return Err(Error::invalid(format!(
                "eps_target must be >= 0, got {}",
                self.eps_target
            )));
        }
        if self.kind != EpsKind::Constant && !(self.warmup > 0.0) {
            return Err(Error::invalid(format!(
                "warmup length must be positive, got {}",
                self.warmup
            )));
        }
        if !self.eps_min.is_finite() || !self.eps_max.is_finite() {
            return Err(Error::invalid("eps_min and eps_max must be finite"));
        }
        Ok(())
    }

    /// Budget at rescaled offset `d_hat`, clipped to `[0, eps_target]`.
    pub fn eps_at_offset(&self, d_hat: f64) -> Result<f64> {
        self.validate()?;
        let raw = match self.kind {
            EpsKind::Constant => self.eps_target,
            EpsKind::Cosine => {
                let phase = std::f64::consts::PI * d_hat / self.warmup;
                0.5 * (1.0 - phase.cos()) * (self.eps_max - self.eps_min) + self.eps_min
            }
            EpsKind::Linear => (self.eps_max - self.eps_min) * d_hat / self.warmup + self.eps_min,
        };
        // Past the warmup the cosine would turn back down; hold the end value.
        let raw = if self.kind == EpsKind::Cosine && d_hat >= self.warmup {
            self.eps_max.max(raw)
        } else {
            raw
        };
        Ok(raw.clamp(0.0, self.eps_target))
    }

    pub fn eps_at(&self, d: usize, window: PeriodWindow) -> Result<f64> {
        self.eps_at_offset(window.offset(d)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `initial * factor^(number of boundaries <= d)`.
    StepDecay {
        initial: f64,
        #[serde(default = "default_factor")]
        factor: f64,
        boundaries: Vec<f64>,
    },
    /// `initial` before `start`, log-linear to `end_lr` over `[start, end]`,
    /// `end_lr` afterwards.
    Exponential {
        initial: f64,
        end_lr: f64,
        start: f64,
        end: f64,
    },
}

fn default_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Constant { lr } => *lr > 0.0,
            LrSchedule::StepDecay {
                initial,
                factor,
                boundaries,
            } => *initial > 0.0 && *factor > 0.0 && boundaries.windows(2).all(|w| w[0] < w[1]),
            LrSchedule::Exponential {
                initial,
                end_lr,
                start,
                end,
            } => *initial > 0.0 && *end_lr > 0.0 && start < end,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid learning-rate schedule {self:?}"
            )))
        }
    }

    pub fn lr_at(&self, d: f64) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay {
                initial,
                factor,
                boundaries,
            } => {
                let passed = boundaries.iter().filter(|&&b| b <= d).count();
                initial * factor.powi(passed as i32)
            }
            LrSchedule::Exponential {
                initial,
                end_lr,
                start,
                end,
            } => {
                if d <= *start {
                    *initial
                } else if d >= *end {
                    *end_lr
                } else {
                    let f = (d - start) / (end - start);
                    (initial.ln() + f * (end_lr.ln() - initial.ln())).exp()
                }
            }
        }
    }
}

/// Training periods, each ending at a boundary epoch (exclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodPlan {
    pub boundaries: Vec<usize>,
    #[serde(default = "default_true")]
    pub snapshot_at_period_end: bool,
}

fn default_true() -> bool {
    true
}

impl PeriodPlan {
    pub fn single(total: usize) -> Self {
        Self {
            boundaries: vec![total],
            snapshot_at_period_end: true,
        }
    }

    pub fn new(boundaries: Vec<usize>, snapshot_at_period_end: bool) -> Result<Self> {
        let plan = Self {
            boundaries,
            snapshot_at_period_end,
        };
        plan.check()?;
        Ok(plan)
    }

    fn check(&self) -> Result<()> {
        if self.boundaries.is_empty() || self.boundaries[0] == 0 {
            return Err(Error::invalid(
                "period boundaries must be nonempty and positive",
            ));
        }
        if !self.boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(format!(
                "period boundaries must be strictly increasing, got {:?}",
                self.boundaries
            )));
        }
        Ok(())
    }

    /// Checks the plan against the run length.
    pub fn validate(&self, epochs: usize) -> Result<()> {
        self.check()?;
        if self.total() != epochs {
            return Err(Error::invalid(format!(
                "last period boundary {} differs from {epochs} epochs",
                self.total()
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }

    pub fn num_periods(&self) -> usize {
        self.boundaries.len()
    }

    pub fn period_of(&self, epoch: usize) -> Option<usize> {
        self.boundaries.iter().position(|&b| epoch < b)
    }

    /// The window of `epoch`; offsets are expressed against the first
    /// period's length.
    pub fn window(&self, epoch: usize) -> Result<PeriodWindow> {
        let p = self.period_of(epoch).ok_or_else(|| {
            Error::invalid(format!(
                "epoch {epoch} beyond last boundary {}",
                self.total()
            ))
        })?;
        let start = if p == 0 { 0 } else { self.boundaries[p - 1] };
        Ok(PeriodWindow {
            start,
            length: self.boundaries[p] - start,
            reference: self.boundaries[0],
        })
    }

    pub fn is_period_end(&self, epoch: usize) -> bool {
        self.boundaries.contains(&(epoch + 1))
    }
}

/// Budget, learning rate and periods of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePlan {
    pub eps: EpsScheduler,
    pub lr: LrSchedule,
    pub periods: PeriodPlan,
}

/// One row of a schedule dump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub epoch: usize,
    pub eps: f64,
    pub lr: f64,
}

impl SchedulePlan {
    pub fn validate(&self) -> Result<()> {
        self.eps.validate()?;
        self.lr.validate()?;
        self.periods.check()
    }

    pub fn epochs(&self) -> usize {
        self.periods.total()
    }

    /// Budget and learning rate at `epoch`; both restart at every period.
    pub fn at(&self, epoch: usize) -> Result<ScheduleRow> {
        let window = self.periods.window(epoch)?;
        let d_hat = window.offset(epoch)?;
        Ok(ScheduleRow {
            epoch,
            eps: self.eps.eps_at_offset(d_hat)?,
            lr: self.lr.lr_at(d_hat),
        })
    }

    pub fn trajectory(&self) -> Result<Vec<ScheduleRow>> {
        (0..self.epochs()).map(|d| self.at(d)).collect()
    }
}
