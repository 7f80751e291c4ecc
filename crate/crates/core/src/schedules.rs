//! Learning-rate schedules with a linear warmup.
//!
//! A schedule is an immutable value; [`LrSchedule::lr_at`] is a pure function
//! of the step index. Steps are 0-indexed and a schedule covers `[0, T)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The decay shape after warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Half-cosine from `eta_max` at `t0` to `eta_end` at `T`.
    Cosine,
    /// Straight line from `eta_max` at `t0` to `eta_end` at `T`.
    Linear,
    /// Base schedule with each post-warmup value rounded to a power of two.
    StepQuantized { base: Box<LrSchedule> },
    /// Base schedule frozen at its value at `freeze_step`.
    ModifiedCosine {
        base: Box<LrSchedule>,
        freeze_step: u64,
    },
    /// Peak until `plateau_epochs`, then halved every `halve_every` epochs.
    SmithStep {
        plateau_epochs: u64,
        halve_every: u64,
    },
}

/// A learning-rate schedule over `total_steps` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    kind: ScheduleKind,
    eta_max: f64,
    eta_end: f64,
    warmup_steps: u64,
    total_steps: u64,
    steps_per_epoch: u64,
}

/// Number of optimizer steps in one pass over the data when the last
/// incomplete batch is dropped.
pub fn steps_per_epoch(dataset_size: u64, global_batch: u64) -> Result<u64> {
    if global_batch == 0 {
        return Err(Error::param("global_batch", "must be positive"));
    }
    let spe = dataset_size / global_batch;
    if spe == 0 {
        return Err(Error::param(
            "dataset_size",
            format!("{dataset_size} examples do not fill one batch of {global_batch}"),
        ));
    }
    Ok(spe)
}

fn check_bounds(eta_max: f64, eta_end: f64, warmup_steps: u64, total_steps: u64) -> Result<()> {
    if !(eta_max.is_finite() && eta_max >= 0.0) {
        return Err(Error::param(
            "eta_max",
            format!("must be nonnegative and finite, got {eta_max}"),
        ));
    }
    // eta_max = eta_end = 0 is allowed as a frozen run.
    let frozen = eta_max == 0.0 && eta_end == 0.0;
    if !frozen && !(eta_end.is_finite() && eta_end >= 0.0 && eta_end < eta_max) {
        return Err(Error::param(
            "eta_end",
            format!("must satisfy 0 <= eta_end < eta_max, got {eta_end}"),
        ));
    }
    if total_steps == 0 {
        return Err(Error::param("total_steps", "must be positive"));
    }
    if warmup_steps >= total_steps {
        return Err(Error::param(
            "warmup_steps",
            format!("must be below total_steps ({total_steps}), got {warmup_steps}"),
        ));
    }
    Ok(())
}

/// Cosine decay with linear warmup.
pub fn make_cosine(
    eta_max: f64,
    eta_end: f64,
    warmup_steps: u64,
    total_steps: u64,
) -> Result<LrSchedule> {
    check_bounds(eta_max, eta_end, warmup_steps, total_steps)?;
    Ok(LrSchedule {
        kind: ScheduleKind::Cosine,
        eta_max,
        eta_end,
        warmup_steps,
        total_steps,
        steps_per_epoch: 1,
    })
}

/// Linear decay with linear warmup.
pub fn make_linear(
    eta_max: f64,
    eta_end: f64,
    warmup_steps: u64,
    total_steps: u64,
) -> Result<LrSchedule> {
    check_bounds(eta_max, eta_end, warmup_steps, total_steps)?;
    Ok(LrSchedule {
        kind: ScheduleKind::Linear,
        eta_max,
        eta_end,
        warmup_steps,
        total_steps,
        steps_per_epoch: 1,
    })
}

/// Rounds every post-warmup value of `base` to the nearest power of two in
/// log space (ties to even). The warmup ramp is left as it is.
pub fn quantize_to_step_decay(base: LrSchedule) -> Result<LrSchedule> {
    for t in base.warmup_steps..base.total_steps {
        let lr = base.lr_at(t)?;
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::param(
                "base",
                format!("learning rate {lr} at step {t} cannot be quantized in log space"),
            ));
        }
    }
    Ok(LrSchedule {
        eta_max: base.eta_max,
        eta_end: base.eta_end,
        warmup_steps: base.warmup_steps,
        total_steps: base.total_steps,
        steps_per_epoch: base.steps_per_epoch,
        kind: ScheduleKind::StepQuantized {
            base: Box::new(base),
        },
    })
}

/// Holds `base` constant from `freeze_step` on.
pub fn make_modified_cosine(base: LrSchedule, freeze_step: u64) -> Result<LrSchedule> {
    if freeze_step < base.warmup_steps || freeze_step >= base.total_steps {
        return Err(Error::param(
            "freeze_step",
            format!(
                "must lie in [{}, {}), got {freeze_step}",
                base.warmup_steps, base.total_steps
            ),
        ));
    }
    Ok(LrSchedule {
        eta_max: base.eta_max,
        eta_end: base.eta_end,
        warmup_steps: base.warmup_steps,
        total_steps: base.total_steps,
        steps_per_epoch: base.steps_per_epoch,
        kind: ScheduleKind::ModifiedCosine {
            base: Box::new(base),
            freeze_step,
        },
    })
}

/// Staircase schedule: `eta_max` for epochs below `plateau_epochs`, then
/// `eta_max / 2^(floor((e - plateau) / halve_every) + 1)` for epoch `e`.
pub fn make_smith_step(
    eta_max: f64,
    warmup_steps: u64,
    total_steps: u64,
    steps_per_epoch: u64,
    plateau_epochs: u64,
    halve_every: u64,
) -> Result<LrSchedule> {
    check_bounds(eta_max, 0.0, warmup_steps, total_steps)?;
    if steps_per_epoch == 0 {
        return Err(Error::param("steps_per_epoch", "must be positive"));
    }
    if halve_every == 0 {
        return Err(Error::param("halve_every", "must be positive"));
    }
    let epochs = total_steps.div_ceil(steps_per_epoch);
    if plateau_epochs >= epochs {
        return Err(Error::param(
            "plateau_epochs",
            format!("must be below the number of epochs ({epochs}), got {plateau_epochs}"),
        ));
    }
    if plateau_epochs * steps_per_epoch < warmup_steps {
        return Err(Error::param(
            "plateau_epochs",
            "plateau ends before warmup does",
        ));
    }
    Ok(LrSchedule {
        kind: ScheduleKind::SmithStep {
            plateau_epochs,
            halve_every,
        },
        eta_max,
        eta_end: 0.0,
        warmup_steps,
        total_steps,
        steps_per_epoch,
    })
}

impl LrSchedule {
    /// Sets the epoch length used by epoch-based schedules and configuration.
    /// For a step-quantized or frozen schedule the base is updated too.
    pub fn with_steps_per_epoch(mut self, steps_per_epoch: u64) -> Result<Self> {
        if steps_per_epoch == 0 {
            return Err(Error::param("steps_per_epoch", "must be positive"));
        }
        if matches!(self.kind, ScheduleKind::SmithStep { .. })
            && steps_per_epoch != self.steps_per_epoch
        {
            return Err(Error::param(
                "steps_per_epoch",
                "fixed when the staircase schedule is built",
            ));
        }
        self.steps_per_epoch = steps_per_epoch;
        match &mut self.kind {
            ScheduleKind::StepQuantized { base } | ScheduleKind::ModifiedCosine { base, .. } => {
                **base = base
                    .as_ref()
                    .clone()
                    .with_steps_per_epoch(steps_per_epoch)?;
            }
            _ => {}
        }
        Ok(self)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn eta_end(&self) -> f64 {
        self.eta_end
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// Learning rate used at step `t`.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t >= self.total_steps {
            return Err(Error::OutOfRange {
                step: t,
                total: self.total_steps,
            });
        }
        Ok(self.eval(t))
    }

    /// Learning rates for every step, in order.
    pub fn values(&self) -> Vec<f64> {
        (0..self.total_steps).map(|t| self.eval(t)).collect()
    }

    fn warmup_lr(&self, t: u64) -> f64 {
        self.eta_max * ((t + 1) as f64 / self.warmup_steps as f64)
    }

    // Caller guarantees t < total_steps.
    fn eval(&self, t: u64) -> f64 {
        match &self.kind {
            ScheduleKind::StepQuantized { base } => {
                let lr = base.eval(t);
                if t < self.warmup_steps {
                    lr
                } else {
                    2f64.powi(lr.log2().round_ties_even() as i32)
                }
            }
            ScheduleKind::ModifiedCosine { base, freeze_step } => base.eval(t.min(*freeze_step)),
            _ if t < self.warmup_steps => self.warmup_lr(t),
            ScheduleKind::Cosine => {
                let phase =
                    (t - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
                // Written so that phase 0 returns eta_max exactly.
                self.eta_max - (self.eta_max - self.eta_end) * 0.5 * (1.0 - (PI * phase).cos())
            }
            ScheduleKind::Linear => {
                let span = (self.total_steps - self.warmup_steps) as f64;
                let remaining = (self.total_steps - t) as f64 / span;
                self.eta_end + (self.eta_max - self.eta_end) * remaining
            }
            ScheduleKind::SmithStep {
                plateau_epochs,
                halve_every,
            } => {
                let epoch = t / self.steps_per_epoch;
                if epoch < *plateau_epochs {
                    self.eta_max
                } else {
                    let halvings = (epoch - plateau_epochs) / halve_every + 1;
                    self.eta_max / 2f64.powi(halvings as i32)
                }
            }
        }
    }
}
