//! The five subcommands. Each writes its CSV files and `summary.json` into
//! the output directory and returns the result block of the summary.

use qsr_core::commcost::{round_hours, CommLedger};
use qsr_core::engine::{run_local, run_parallel, Trace, TrainConfig};
use qsr_core::sdelab::{
    estimate_round_moments, fit_drift, sharpness, simulate_ensemble, MomentReport, RoundMomentSpec,
    SdeVariant, SlowSdeSpec,
};
use qsr_core::syncrules::{comm_fraction, expand_timeline};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    CommcostRun, MomentsRun, PredictionConfig, ScheduleRun, SdeRun, TrainMode, TrainRun,
};
use crate::error::CliError;
use crate::fields;
use crate::output::{opt, OutDir};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleResult {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub steps_per_epoch: u64,
    pub num_syncs: Option<u64>,
    pub comm_fraction: Option<f64>,
}

pub fn schedule(
    cfg: &ScheduleRun,
    out: &OutDir,
    threads: usize,
) -> Result<ScheduleResult, CliError> {
    let sched = cfg.schedule.build()?;
    let mut lr = out.csv("lr.csv", &["step", "lr"])?;
    for (t, v) in sched.values().iter().enumerate() {
        lr.row(fields!(t, v))?;
    }
    lr.finish()?;

    let mut result = ScheduleResult {
        total_steps: sched.total_steps(),
        warmup_steps: sched.warmup_steps(),
        steps_per_epoch: sched.steps_per_epoch(),
        num_syncs: None,
        comm_fraction: None,
    };
    if let Some(sync) = &cfg.sync {
        let rule = sync.build()?;
        let timeline =
            expand_timeline(&rule, &sched).map_err(|e| CliError::from_core(e, "sync"))?;
        let mut rounds = out.csv(
            "rounds.csv",
            &["round", "start_step", "period", "lr_at_start"],
        )?;
        for (i, r) in timeline.rounds.iter().enumerate() {
            rounds.row(fields!(i, r.start_step, r.period, r.lr_at_start))?;
        }
        rounds.finish()?;
        result.num_syncs = Some(timeline.num_syncs);
        result.comm_fraction = Some(timeline.comm_fraction());
    }
    out.summary("schedule", cfg, &result, threads)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_loss: f64,
    pub final_sharpness: Option<f64>,
    pub num_syncs: u64,
    pub total_steps: u64,
    pub final_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainResult {
    pub runs: Vec<SeedSummary>,
    pub comm_fraction: f64,
    pub mean_final_loss: f64,
    pub mean_final_sharpness: Option<f64>,
    /// Standard error of the mean final sharpness across seeds.
    pub sharpness_std_err: Option<f64>,
}

/// Mean and standard error; the error is absent for a single value.
pub fn mean_se(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

pub fn train(cfg: &TrainRun, out: &OutDir, threads: usize) -> Result<TrainResult, CliError> {
    if cfg.seeds == 0 {
        return Err(CliError::config("seeds", "need at least one run"));
    }
    let schedule = cfg.schedule.build()?;
    let optimizer = cfg.optimizer.build()?;
    let sync = cfg.sync.as_ref().map(|s| s.build()).transpose()?;
    if cfg.mode == TrainMode::Local && sync.is_none() {
        return Err(CliError::config(
            "sync",
            "local training needs a synchronization rule",
        ));
    }
    let problem = cfg.problem.build()?;
    let base = TrainConfig {
        workers: cfg.workers,
        local_batch: cfg.local_batch,
        seed: cfg.seed,
        sampling: cfg.sampling,
        optimizer,
        schedule,
        sync,
        moment_sync: cfg.moment_sync,
        record_params: cfg.record_params,
    };
    base.validate().map_err(|e| CliError::from_core(e, ""))?;

    let traces: Vec<Result<Trace, qsr_core::Error>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|i| {
            let mut c = base.clone();
            c.seed = cfg.seed + i;
            match cfg.mode {
                TrainMode::Local => run_local(problem.as_ref(), &c),
                TrainMode::Parallel => run_parallel(problem.as_ref(), &c),
            }
        })
        .collect();
    // Report the failure of the lowest seed.
    let traces: Vec<Trace> = traces
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::from_core(e, ""))?;

    let mut trace_csv = out.csv(
        "trace.csv",
        &["seed", "round", "step", "period", "loss", "sharpness"],
    )?;
    let mut params_csv = if cfg.record_params {
        Some(out.csv("params.csv", &["seed", "round", "index", "value"])?)
    } else {
        None
    };
    let mut final_csv = out.csv("final.csv", &["seed", "index", "value"])?;
    let mut runs = Vec::with_capacity(traces.len());
    for (i, tr) in traces.iter().enumerate() {
        let seed = cfg.seed + i as u64;
        for r in &tr.records {
            trace_csv.row(fields!(
                seed,
                r.round,
                r.step,
                r.period,
                r.loss,
                opt(r.sharpness)
            ))?;
            if let (Some(csv), Some(p)) = (params_csv.as_mut(), r.params.as_ref()) {
                for (j, v) in p.iter().enumerate() {
                    csv.row(fields!(seed, r.round, j, v))?;
                }
            }
        }
        for (j, v) in tr.final_params.iter().enumerate() {
            final_csv.row(fields!(seed, j, v))?;
        }
        let last = tr
            .records
            .last()
            .expect("the initial record is always present");
        runs.push(SeedSummary {
            seed,
            final_loss: last.loss,
            final_sharpness: last.sharpness,
            num_syncs: tr.num_syncs,
            total_steps: tr.total_steps,
            final_params: tr.final_params.clone(),
        });
    }
    trace_csv.finish()?;
    if let Some(csv) = params_csv {
        csv.finish()?;
    }
    final_csv.finish()?;

    let losses: Vec<f64> = runs.iter().map(|r| r.final_loss).collect();
    let sharp: Option<Vec<f64>> = runs.iter().map(|r| r.final_sharpness).collect();
    let (mean_sharp, se) = match sharp {
        Some(s) => {
            let (m, se) = mean_se(&s);
            (Some(m), se)
        }
        None => (None, None),
    };
    let result = TrainResult {
        comm_fraction: runs[0].num_syncs as f64 / runs[0].total_steps as f64,
        mean_final_loss: mean_se(&losses).0,
        mean_final_sharpness: mean_sharp,
        sharpness_std_err: se,
        runs,
    };
    out.summary("train", cfg, &result, threads)?;
    Ok(result)
}

/// Short label used in CSV rows.
pub fn variant_label(v: &SdeVariant) -> String {
    match v {
        SdeVariant::Sgd => "sgd".into(),
        SdeVariant::LocalLsr { beta } => format!("local_lsr(beta={beta})"),
        SdeVariant::LocalQsr => "local_qsr".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: SdeVariant,
    pub label: String,
    /// Least-squares slope of the mean path through its start.
    pub fitted_drift: Vec<f64>,
    pub mean_final_sharpness: f64,
    pub sharpness_std_err: Option<f64>,
    pub final_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdeResult {
    pub variants: Vec<VariantSummary>,
}

pub fn sde(cfg: &SdeRun, out: &OutDir, threads: usize) -> Result<SdeResult, CliError> {
    if cfg.variants.is_empty() {
        return Err(CliError::config("variants", "need at least one variant"));
    }
    let problem = cfg.problem.build()?;
    let d = problem.dim();
    if cfg.start.len() != d {
        return Err(CliError::config(
            "start",
            format!("expected {d} coordinates, got {}", cfg.start.len()),
        ));
    }
    let mut mean_csv = out.csv("mean.csv", &["variant", "time", "coord", "mean", "std_err"])?;
    let header: Vec<String> = ["variant", "path", "sharpness"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|i| format!("z{i}")))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut finals_csv = out.csv("finals.csv", &header)?;
    let mut variants = Vec::new();
    for v in &cfg.variants {
        let spec = SlowSdeSpec {
            variant: *v,
            batch: cfg.batch,
            workers: cfg.workers,
            horizon: cfg.horizon,
            dt: cfg.dt,
            seed: cfg.seed,
        };
        let ens = simulate_ensemble(
            problem.as_ref(),
            &spec,
            &cfg.start,
            cfg.paths,
            cfg.record_every,
        )
        .map_err(|e| CliError::from_core(e, ""))?;
        let label = variant_label(v);
        for (k, t) in ens.times.iter().enumerate() {
            for i in 0..d {
                mean_csv.row(fields!(label, t, i, ens.mean[k][i], ens.std_err[k][i]))?;
            }
        }
        let mut sharp = Vec::with_capacity(ens.finals.len());
        for (p, z) in ens.finals.iter().enumerate() {
            let s = sharpness(problem.as_ref(), z).map_err(|e| CliError::from_core(e, ""))?;
            sharp.push(s);
            let row = fields!(label, p, s)
                .into_iter()
                .chain(z.iter().map(|x| x.to_string()));
            finals_csv.row(row)?;
        }
        let (m, se) = mean_se(&sharp);
        variants.push(VariantSummary {
            variant: *v,
            label,
            fitted_drift: fit_drift(&ens),
            mean_final_sharpness: m,
            sharpness_std_err: se,
            final_mean: ens.mean.last().expect("start is recorded").clone(),
        });
    }
    mean_csv.finish()?;
    finals_csv.finish()?;
    let result = SdeResult { variants };
    out.summary("sde", cfg, &result, threads)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentsResult {
    pub reports: Vec<MomentReport>,
    /// Least-squares slope of log residual against log α, with two or more α.
    pub first_residual_slope: Option<f64>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub fn moments(cfg: &MomentsRun, out: &OutDir, threads: usize) -> Result<MomentsResult, CliError> {
    if cfg.alphas.is_empty() {
        return Err(CliError::config("alphas", "need at least one value"));
    }
    let problem = cfg.problem.build()?;
    let d = problem.dim();
    if cfg.start.len() != d {
        return Err(CliError::config(
            "start",
            format!("expected {d} coordinates, got {}", cfg.start.len()),
        ));
    }
    let mut reports = Vec::new();
    for &alpha in &cfg.alphas {
        let spec = RoundMomentSpec {
            alpha,
            h_base: cfg.h_base,
            eta: cfg.eta_for(alpha)?,
            local_batch: cfg.local_batch,
            workers: cfg.workers,
            n_seeds: cfg.seeds,
            seed: cfg.seed,
            control_variate: cfg.control_variate,
        };
        let report = estimate_round_moments(problem.as_ref(), &cfg.start, &spec)
            .map_err(|e| CliError::from_core(e, ""))?;
        reports.push(report);
    }

    let mut first = out.csv(
        "first.csv",
        &[
            "alpha",
            "eta",
            "period",
            "coord",
            "estimate",
            "std_err",
            "raw",
            "raw_std_err",
            "predicted",
        ],
    )?;
    let mut second = out.csv(
        "second.csv",
        &[
            "alpha",
            "eta",
            "period",
            "i",
            "j",
            "estimate",
            "std_err",
            "predicted",
        ],
    )?;
    for r in &reports {
        for i in 0..d {
            first.row(fields!(
                r.alpha,
                r.eta,
                r.period,
                i,
                r.first[i],
                r.first_se[i],
                r.first_raw[i],
                r.first_raw_se[i],
                r.predicted_first[i]
            ))?;
            for j in 0..d {
                second.row(fields!(
                    r.alpha,
                    r.eta,
                    r.period,
                    i,
                    j,
                    r.second[i][j],
                    r.second_se[i][j],
                    r.predicted_second[i][j]
                ))?;
            }
        }
    }
    first.finish()?;
    second.finish()?;

    let residuals: Vec<f64> = reports.iter().map(|r| r.first_residual()).collect();
    let slope = (reports.len() >= 2 && residuals.iter().all(|v| *v > 0.0))
        .then(|| log_log_slope(&cfg.alphas, &residuals));
    let result = MomentsResult {
        reports,
        first_residual_slope: slope,
    };
    out.summary("moments", cfg, &result, threads)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommcostResult {
    pub ledger: CommLedger,
    pub comm_rounded: f64,
    pub comp_rounded: f64,
}

pub fn commcost(
    cfg: &CommcostRun,
    out: &OutDir,
    threads: usize,
) -> Result<CommcostResult, CliError> {
    let err = |e| CliError::from_core(e, "");
    let mut ledger = CommLedger::new(cfg.total_parallel, cfg.total_h1, cfg.h1).map_err(err)?;
    for (i, p) in cfg.predictions.iter().enumerate() {
        let at = |e| CliError::from_core(e, "predictions");
        match p {
            PredictionConfig::Period { h } => {
                ledger.predict_period(*h).map_err(at)?;
            }
            PredictionConfig::Fraction { label, value } => {
                ledger.predict_fraction(label.clone(), *value).map_err(at)?;
            }
            PredictionConfig::Rule {
                label,
                schedule,
                sync,
            } => {
                let s = schedule.build().map_err(|e| prefix(e, i))?;
                let r = sync.build().map_err(|e| prefix(e, i))?;
                let f = comm_fraction(&r, &s).map_err(at)?;
                ledger.predict_fraction(label.clone(), f).map_err(at)?;
            }
        }
    }
    let mut csv = out.csv(
        "ledger.csv",
        &[
            "label",
            "fraction",
            "comm_h",
            "total_h",
            "comm_h_rounded",
            "total_h_rounded",
        ],
    )?;
    let e = ledger.estimate;
    csv.row(fields!(
        "parallel",
        1.0,
        e.comm,
        ledger.total_parallel,
        round_hours(e.comm),
        round_hours(ledger.total_parallel)
    ))?;
    for p in &ledger.predictions {
        csv.row(fields!(
            p.label,
            p.fraction,
            p.comm,
            p.total,
            round_hours(p.comm),
            round_hours(p.total)
        ))?;
    }
    csv.finish()?;
    if e.negative_comm {
        eprintln!("warning: the H={} run was slower than data parallel; communication estimate is negative", cfg.h1);
    }
    let result = CommcostResult {
        comm_rounded: round_hours(e.comm),
        comp_rounded: round_hours(e.comp),
        ledger,
    };
    out.summary("commcost", cfg, &result, threads)?;
    Ok(result)
}

// Points nested config errors at their prediction entry.
fn prefix(e: CliError, index: usize) -> CliError {
    match e {
        CliError::Config { key, reason } => {
            CliError::config(format!("predictions[{index}].{key}"), reason)
        }
        other => other,
    }
}
