//! Multi-worker training simulator.
//!
//! [`run_parallel`] averages gradients across K workers every step and applies
//! one shared optimizer update. [`run_local`] lets each worker take H local
//! steps between parameter averages, with H taken from a [`SyncRule`]. Workers
//! may run on several threads, but every reduction sums in worker order and
//! every random draw comes from a stream addressed by (seed, worker, purpose,
//! step), so results do not depend on the thread count.

mod problems;
mod sampler;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use problems::{GaussianMixtureMlp, NoisyManifold, NoisyQuadratic, Problem};
pub use sampler::{Sampler, Sampling};

use crate::optim::{OptimizerSpec, OptimizerState};
use crate::schedules::LrSchedule;
use crate::syncrules::{expand_timeline, SyncRule};
use crate::{Error, Result};

/// What happens to per-worker optimizer buffers at a synchronization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSync {
    /// Keep each worker's buffers as they are.
    #[default]
    Persist,
    /// Zero all buffers.
    Reset,
    /// Replace each buffer with its average across workers.
    Average,
}

/// Settings shared by both training modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub workers: usize,
    pub local_batch: usize,
    pub seed: u64,
    pub sampling: Sampling,
    pub optimizer: OptimizerSpec,
    pub schedule: LrSchedule,
    /// Required by [`run_local`], ignored by [`run_parallel`].
    pub sync: Option<SyncRule>,
    #[serde(default)]
    pub moment_sync: MomentSync,
    /// Keep a parameter snapshot in every record.
    #[serde(default)]
    pub record_params: bool,
}

impl TrainConfig {
    pub fn global_batch(&self) -> usize {
        self.workers * self.local_batch
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps()
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::param("workers", "must be at least 1"));
        }
        if self.local_batch == 0 {
            return Err(Error::param("local_batch", "must be at least 1"));
        }
        self.optimizer.validate()
    }
}

/// State of the run at a synchronization (or at step 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Rounds completed so far.
    pub round: u64,
    /// Global step count at this point.
    pub step: u64,
    /// Length of the round that just ended (0 for the initial record).
    pub period: u64,
    pub loss: f64,
    pub sharpness: Option<f64>,
    pub params: Option<Vec<f64>>,
}

/// Output of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<RoundRecord>,
    pub final_params: Vec<f64>,
    pub num_syncs: u64,
    pub total_steps: u64,
}

/// Elementwise mean, summed in replica order.
pub fn average_params(replicas: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = replicas
        .first()
        .ok_or_else(|| Error::param("replicas", "need at least one replica"))?;
    let mut out = vec![0.0; first.len()];
    for r in replicas {
        crate::error::check_shape("replica", first.len(), r.len())?;
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let k = replicas.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

fn record<P: Problem + ?Sized>(
    problem: &P,
    config: &TrainConfig,
    round: u64,
    step: u64,
    period: u64,
    params: &[f64],
) -> Result<RoundRecord> {
    let loss = problem.loss(params);
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "loss", step });
    }
    Ok(RoundRecord {
        round,
        step,
        period,
        loss,
        sharpness: problem.sharpness(params),
        params: config.record_params.then(|| params.to_vec()),
    })
}

fn check_finite(params: &[f64], step: u64) -> Result<()> {
    if params.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "parameters",
            step,
        })
    }
}

/// Data-parallel training: one averaged gradient and one update per step.
pub fn run_parallel<P: Problem + ?Sized>(problem: &P, config: &TrainConfig) -> Result<Trace> {
    config.validate()?;
    let dim = problem.dim();
    let sampler = Sampler::new(
        config.sampling,
        problem.dataset_size(),
        config.workers,
        config.local_batch,
        config.seed,
    )?;
    let mut params = problem.init_params(config.seed);
    let mut state = OptimizerState::new(config.optimizer, dim)?;
    let total = config.total_steps();
    let mut records = vec![record(problem, config, 0, 0, 0, &params)?];
    let mut grads = vec![vec![0.0; dim]; config.workers];
    let mut mean = vec![0.0; dim];
    for t in 0..total {
        grads.par_iter_mut().enumerate().for_each(|(k, g)| {
            let batch = sampler.batch(k, t);
            problem.grad(&params, &batch, g);
        });
        mean.fill(0.0);
        for g in &grads {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v;
            }
        }
        let k = config.workers as f64;
        mean.iter_mut().for_each(|v| *v /= k);
        let lr = config.schedule.lr_at(t)?;
        state
            .step(&mut params, lr, &mut mean)
            .map_err(|e| at_step(e, t))?;
        check_finite(&params, t)?;
        records.push(record(problem, config, t + 1, t + 1, 1, &params)?);
    }
    Ok(Trace {
        records,
        final_params: params,
        num_syncs: total,
        total_steps: total,
    })
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        other => other,
    }
}

struct Replica {
    params: Vec<f64>,
    state: OptimizerState,
    grad: Vec<f64>,
}

/// Local training: rounds from the sync rule, H local steps per worker, then a
/// parameter average.
pub fn run_local<P: Problem + ?Sized>(problem: &P, config: &TrainConfig) -> Result<Trace> {
    config.validate()?;
    let rule = config
        .sync
        .as_ref()
        .ok_or_else(|| Error::param("sync", "local training needs a synchronization rule"))?;
    let dim = problem.dim();
    let sampler = Sampler::new(
        config.sampling,
        problem.dataset_size(),
        config.workers,
        config.local_batch,
        config.seed,
    )?;
    let timeline = expand_timeline(rule, &config.schedule)?;
    let init = problem.init_params(config.seed);
    let mut replicas: Vec<Replica> = (0..config.workers)
        .map(|_| {
            Ok(Replica {
                params: init.clone(),
                state: OptimizerState::new(config.optimizer, dim)?,
                grad: vec![0.0; dim],
            })
        })
        .collect::<Result<_>>()?;
    let mut records = vec![record(problem, config, 0, 0, 0, &init)?];
    let mut global = init;

    for (s, round) in timeline.rounds.iter().enumerate() {
        let outcomes: Vec<Result<()>> = replicas
            .par_iter_mut()
            .enumerate()
            .map(|(k, rep)| {
                for h in 0..round.period {
                    let t = round.start_step + h;
                    let batch = sampler.batch(k, t);
                    problem.grad(&rep.params, &batch, &mut rep.grad);
                    let lr = config.schedule.lr_at(t)?;
                    rep.state
                        .step(&mut rep.params, lr, &mut rep.grad)
                        .map_err(|e| at_step(e, t))?;
                    check_finite(&rep.params, t)?;
                }
                Ok(())
            })
            .collect();
        // Report the earliest failure, breaking ties by worker index.
        let mut first_err: Option<Error> = None;
        for e in outcomes.into_iter().filter_map(|r| r.err()) {
            let step_of = |e: &Error| match e {
                Error::NonFinite { step, .. } => *step,
                _ => 0,
            };
            if first_err
                .as_ref()
                .map_or(true, |f| step_of(&e) < step_of(f))
            {
                first_err = Some(e);
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }

        let snapshot: Vec<Vec<f64>> = replicas.iter().map(|r| r.params.clone()).collect();
        global = average_params(&snapshot)?;
        for rep in &mut replicas {
            rep.params.copy_from_slice(&global);
        }
        sync_moments(&mut replicas, config.moment_sync);
        let end = round.start_step + round.period;
        records.push(record(
            problem,
            config,
            s as u64 + 1,
            end,
            round.period,
            &global,
        )?);
    }
    Ok(Trace {
        records,
        final_params: global,
        num_syncs: timeline.num_syncs,
        total_steps: timeline.total_steps,
    })
}

fn sync_moments(replicas: &mut [Replica], policy: MomentSync) {
    match policy {
        MomentSync::Persist => {}
        MomentSync::Reset => replicas.iter_mut().for_each(|r| r.state.reset()),
        MomentSync::Average => {
            let k = replicas.len() as f64;
            let n_buffers = replicas[0].state.buffers().len();
            for b in 0..n_buffers {
                let len = replicas[0].state.buffers()[b].len();
                let mut mean = vec![0.0; len];
                for r in replicas.iter() {
                    for (m, v) in mean.iter_mut().zip(r.state.buffers()[b]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= k);
                for r in replicas.iter_mut() {
                    r.state.buffers_mut()[b].copy_from_slice(&mean);
                }
            }
        }
    }
}
