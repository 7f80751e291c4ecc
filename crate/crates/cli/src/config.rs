//! Run configurations for each subcommand.
//!
//! Files are TOML, or JSON when the extension is `.json`. Every table rejects
//! unknown keys. Parse errors carry the path of the offending key, and the
//! `build` methods prefix core validation errors with the section they came
//! from, so a diagnostic always names something the user can find in the file.

use std::path::Path;

use qsr_core::engine::{
    GaussianMixtureMlp, MomentSync, NoisyManifold, NoisyQuadratic, Problem, Sampling,
};
use qsr_core::optim::{OptimizerKind, OptimizerSpec};
use qsr_core::schedules::{
    make_cosine, make_linear, make_modified_cosine, make_smith_step, quantize_to_step_decay,
    steps_per_epoch, LrSchedule,
};
use qsr_core::sdelab::{ManifoldProblem, RingValley, SdeVariant, ToyValley};
use qsr_core::syncrules::SyncRule;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Bumped whenever the layout of emitted files changes.
pub const FORMAT_VERSION: u32 = 1;

/// Reads and parses a config file.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        parse_json(&text)
    } else {
        parse_toml(&text)
    }
}

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let de = toml::Deserializer::parse(text)
        .map_err(|e| CliError::config("<file>", e.message().to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        CliError::config(key, e.into_inner().message().to_string())
    })
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        CliError::config(key, e.into_inner().to_string())
    })
}

// Core errors raised while building an object from section `section`.
fn in_section(section: &'static str) -> impl Fn(qsr_core::Error) -> CliError {
    move |e| CliError::from_core(e, section)
}

fn require<T: Copy>(v: Option<T>, key: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::config(key, "missing value"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Cosine,
    Linear,
    StepQuantized,
    ModifiedCosine,
    SmithStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseShape {
    Cosine,
    Linear,
}

/// Learning-rate schedule. Lengths are given in steps, or in epochs together
/// with `dataset_size` and `batch_size` (last partial batch dropped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleShape,
    pub eta_max: f64,
    #[serde(default)]
    pub eta_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<u64>,
    /// Underlying decay for `step_quantized` and `modified_cosine`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plateau_epochs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halve_every: Option<u64>,
}

impl ScheduleConfig {
    fn epoch_steps(&self) -> Result<Option<u64>, CliError> {
        match (self.dataset_size, self.batch_size) {
            (Some(n), Some(b)) => Ok(Some(steps_per_epoch(n, b).map_err(in_section("schedule"))?)),
            (None, None) => Ok(None),
            (None, Some(_)) => Err(CliError::config(
                "schedule.dataset_size",
                "needed together with batch_size",
            )),
            (Some(_), None) => Err(CliError::config(
                "schedule.batch_size",
                "needed together with dataset_size",
            )),
        }
    }

    /// Total and warmup step counts after resolving epochs.
    pub fn steps(&self) -> Result<(u64, u64, Option<u64>), CliError> {
        let spe = self.epoch_steps()?;
        let epochs_to_steps = |e: u64, key: &str| match spe {
            Some(s) => Ok(e * s),
            None => Err(CliError::config(
                key,
                "epochs need dataset_size and batch_size",
            )),
        };
        let total = match (self.total_steps, self.epochs) {
            (Some(t), None) => t,
            (None, Some(e)) => epochs_to_steps(e, "schedule.epochs")?,
            (Some(_), Some(_)) => {
                return Err(CliError::config(
                    "schedule.epochs",
                    "give total_steps or epochs, not both",
                ))
            }
            (None, None) => {
                return Err(CliError::config(
                    "schedule.total_steps",
                    "missing value (or set epochs)",
                ))
            }
        };
        let warmup = match (self.warmup_steps, self.warmup_epochs) {
            (Some(w), None) => w,
            (None, Some(e)) => epochs_to_steps(e, "schedule.warmup_epochs")?,
            (None, None) => 0,
            (Some(_), Some(_)) => {
                return Err(CliError::config(
                    "schedule.warmup_epochs",
                    "give warmup_steps or warmup_epochs, not both",
                ))
            }
        };
        Ok((total, warmup, spe))
    }

    pub fn build(&self) -> Result<LrSchedule, CliError> {
        let (total, warmup, spe) = self.steps()?;
        let err = in_section("schedule");
        let base = |shape: Option<BaseShape>| match shape.unwrap_or(BaseShape::Cosine) {
            BaseShape::Cosine => make_cosine(self.eta_max, self.eta_end, warmup, total),
            BaseShape::Linear => make_linear(self.eta_max, self.eta_end, warmup, total),
        };
        let unused = |key: &str, present: bool| {
            if present {
                Err(CliError::config(
                    format!("schedule.{key}"),
                    format!("not used by kind {:?}", self.kind),
                ))
            } else {
                Ok(())
            }
        };
        if !matches!(
            self.kind,
            ScheduleShape::StepQuantized | ScheduleShape::ModifiedCosine
        ) {
            unused("base", self.base.is_some())?;
        }
        if self.kind != ScheduleShape::ModifiedCosine {
            unused("freeze_step", self.freeze_step.is_some())?;
        }
        if self.kind != ScheduleShape::SmithStep {
            unused("plateau_epochs", self.plateau_epochs.is_some())?;
            unused("halve_every", self.halve_every.is_some())?;
        }
        let schedule = match self.kind {
            ScheduleShape::Cosine => base(Some(BaseShape::Cosine)).map_err(err)?,
            ScheduleShape::Linear => base(Some(BaseShape::Linear)).map_err(err)?,
            ScheduleShape::StepQuantized => {
                quantize_to_step_decay(base(self.base).map_err(&err)?).map_err(err)?
            }
            ScheduleShape::ModifiedCosine => {
                let freeze = require(self.freeze_step, "schedule.freeze_step")?;
                make_modified_cosine(base(self.base).map_err(&err)?, freeze).map_err(err)?
            }
            ScheduleShape::SmithStep => {
                unused("eta_end", self.eta_end != 0.0)?;
                let spe = spe.ok_or_else(|| {
                    CliError::config("schedule.dataset_size", "smith_step counts epochs")
                })?;
                let plateau = require(self.plateau_epochs, "schedule.plateau_epochs")?;
                let every = require(self.halve_every, "schedule.halve_every")?;
                make_smith_step(self.eta_max, warmup, total, spe, plateau, every).map_err(err)?
            }
        };
        match spe {
            Some(s) => schedule
                .with_steps_per_epoch(s)
                .map_err(in_section("schedule")),
            None => Ok(schedule),
        }
    }
}

/// Synchronization rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyncConfig {
    Constant { h: u64 },
    Qsr { alpha: f64, h_base: u64 },
    Cubic { rho: f64, h_base: u64 },
    BetaOverEta { beta: f64, h_base: u64 },
    Power { gamma: u32, coef: f64, h_base: u64 },
    PostLocal { switch_step: u64, h_after: u64 },
    Swap { h: u64, switch_step: u64 },
}

impl SyncConfig {
    pub fn build(&self) -> Result<SyncRule, CliError> {
        let rule = match *self {
            SyncConfig::Constant { h } => SyncRule::constant(h),
            SyncConfig::Qsr { alpha, h_base } => SyncRule::qsr(alpha, h_base),
            SyncConfig::Cubic { rho, h_base } => SyncRule::cubic(rho, h_base),
            SyncConfig::BetaOverEta { beta, h_base } => SyncRule::beta_over_eta(beta, h_base),
            SyncConfig::Power {
                gamma,
                coef,
                h_base,
            } => SyncRule::power(gamma, coef, h_base),
            SyncConfig::PostLocal {
                switch_step,
                h_after,
            } => SyncRule::post_local(switch_step, h_after),
            SyncConfig::Swap { h, switch_step } => SyncRule::swap(h, switch_step),
        };
        rule.map_err(in_section("sync"))
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clip: Option<f64>,
    },
    Adamw {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clip: Option<f64>,
    },
}

impl OptimizerConfig {
    pub fn build(&self) -> Result<OptimizerSpec, CliError> {
        let (kind, clip) = match *self {
            OptimizerConfig::Sgd {
                momentum,
                weight_decay,
                clip,
            } => (OptimizerKind::sgd(momentum, weight_decay), clip),
            OptimizerConfig::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
                clip,
            } => (
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                },
                clip,
            ),
        };
        let spec = OptimizerSpec { kind, clip };
        spec.validate().map_err(in_section("optimizer"))?;
        Ok(spec)
    }
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}

/// A loss with a manifold of minimizers, used by `sde` and `moments` and
/// wrapped with sampled noise by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldConfig {
    /// `½ (h0 + c‖x‖²) ‖y‖²` with diagonal Gaussian noise.
    Toy {
        #[serde(default = "one_usize")]
        x_dim: usize,
        #[serde(default = "one_usize")]
        y_dim: usize,
        #[serde(default = "one")]
        h0: f64,
        #[serde(default = "one")]
        c: f64,
        #[serde(default)]
        sigma_x: f64,
        #[serde(default = "one")]
        sigma_y: f64,
    },
    /// `¼ (‖θ‖² − 1)²` with isotropic noise.
    Ring { dim: usize, sigma: f64 },
}

impl ManifoldConfig {
    pub fn build(&self) -> Result<Box<dyn ManifoldProblem>, CliError> {
        let err = in_section("problem");
        Ok(match *self {
            ManifoldConfig::Toy {
                x_dim,
                y_dim,
                h0,
                c,
                sigma_x,
                sigma_y,
            } => Box::new(ToyValley::new(x_dim, y_dim, h0, c, sigma_x, sigma_y).map_err(err)?),
            ManifoldConfig::Ring { dim, sigma } => {
                Box::new(RingValley::isotropic(dim, sigma).map_err(err)?)
            }
        })
    }
}

/// Training problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        curvature: Vec<f64>,
        target: Vec<f64>,
        noise_std: Vec<f64>,
        init: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dataset_size: Option<u64>,
        #[serde(default)]
        data_seed: u64,
    },
    Manifold {
        manifold: ManifoldConfig,
        init: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dataset_size: Option<u64>,
        #[serde(default)]
        data_seed: u64,
    },
    Mlp {
        classes: usize,
        hidden: usize,
        dataset_size: u64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        data_seed: u64,
    },
}

fn default_radius() -> f64 {
    2.0
}
fn default_spread() -> f64 {
    0.7
}

impl ProblemConfig {
    pub fn build(&self) -> Result<Box<dyn Problem>, CliError> {
        let err = in_section("problem");
        Ok(match self {
            ProblemConfig::Quadratic {
                curvature,
                target,
                noise_std,
                init,
                dataset_size,
                data_seed,
            } => Box::new(
                NoisyQuadratic::new(
                    curvature.clone(),
                    target.clone(),
                    noise_std.clone(),
                    init.clone(),
                    *dataset_size,
                    *data_seed,
                )
                .map_err(err)?,
            ),
            ProblemConfig::Manifold {
                manifold,
                init,
                dataset_size,
                data_seed,
            } => Box::new(
                NoisyManifold::new(manifold.build()?, init.clone(), *dataset_size, *data_seed)
                    .map_err(err)?,
            ),
            ProblemConfig::Mlp {
                classes,
                hidden,
                dataset_size,
                radius,
                spread,
                data_seed,
            } => Box::new(
                GaussianMixtureMlp::new(
                    *classes,
                    *hidden,
                    *dataset_size,
                    *radius,
                    *spread,
                    *data_seed,
                )
                .map_err(err)?,
            ),
        })
    }
}

/// `qsr-lab schedule`: learning rates, and rounds when a rule is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleRun {
    pub schedule: ScheduleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync: Option<SyncConfig>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Local,
    Parallel,
}

fn default_seeds() -> u64 {
    1
}

/// `qsr-lab train`: one run per seed in `seed..seed + seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub mode: TrainMode,
    pub workers: usize,
    pub local_batch: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub moment_sync: MomentSync,
    #[serde(default)]
    pub record_params: bool,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync: Option<SyncConfig>,
    pub problem: ProblemConfig,
}

fn default_record_every() -> u64 {
    1
}

/// `qsr-lab sde`: path ensembles for each variant, sharing Brownian paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeRun {
    #[serde(default)]
    pub seed: u64,
    pub problem: ManifoldConfig,
    pub start: Vec<f64>,
    pub variants: Vec<SdeVariant>,
    pub batch: f64,
    pub workers: usize,
    pub horizon: f64,
    pub dt: f64,
    pub paths: u64,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
}

fn yes() -> bool {
    true
}
fn default_eta_power() -> i32 {
    3
}

/// `qsr-lab moments`: one report per α. The learning rate is either fixed
/// (`eta`) or `eta_coef · α^eta_power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsRun {
    #[serde(default)]
    pub seed: u64,
    pub problem: ManifoldConfig,
    pub start: Vec<f64>,
    pub alphas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_coef: Option<f64>,
    #[serde(default = "default_eta_power")]
    pub eta_power: i32,
    #[serde(default = "default_h_base")]
    pub h_base: u64,
    pub local_batch: u64,
    pub workers: usize,
    pub seeds: u64,
    #[serde(default = "yes")]
    pub control_variate: bool,
}

fn default_h_base() -> u64 {
    1
}

impl MomentsRun {
    pub fn eta_for(&self, alpha: f64) -> Result<f64, CliError> {
        match (self.eta, self.eta_coef) {
            (Some(eta), None) => Ok(eta),
            (None, Some(c)) => Ok(c * alpha.powi(self.eta_power)),
            (Some(_), Some(_)) => Err(CliError::config(
                "eta_coef",
                "give eta or eta_coef, not both",
            )),
            (None, None) => Err(CliError::config("eta", "missing value (or set eta_coef)")),
        }
    }
}

/// One line of a communication ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictionConfig {
    /// Constant period.
    Period { h: u64 },
    /// Known communication fraction.
    Fraction { label: String, value: f64 },
    /// Fraction computed from a schedule and a rule.
    Rule {
        label: String,
        schedule: ScheduleConfig,
        sync: SyncConfig,
    },
}

/// `qsr-lab commcost`: split measured totals and predict other settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommcostRun {
    pub total_parallel: f64,
    pub total_h1: f64,
    pub h1: u64,
    #[serde(default)]
    pub predictions: Vec<PredictionConfig>,
}
