//! Monte Carlo moments of one communication round.
//!
//! Each seed runs a single round of Local SGD with K workers from a point ζ0
//! on the manifold, averages the workers, and projects the average with Φ.
//! The change `Φ(θ̄) − ζ0` has first moment close to `(α²/2B_loc) ∂²Φ[Σ]` and
//! second moment close to `(α²/B) Σ∥`, where `α² = Hη²`.
//!
//! The first moment is small compared to the spread of the individual changes,
//! so the estimator subtracts a martingale control variate
//! `C = Σ_t w(θ_t)(−η ξ_t)`, with `w` a first-order Taylor model of ∂Φ around
//! ζ0 and `ξ_t` the gradient noise. Because `w(θ_t)` only depends on the past,
//! `E[C] = 0` and the adjusted estimate stays unbiased.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::sigma_parallel;
use super::projection::{
    project, projection_jacobian, projection_second_derivative, Projection, DEFAULT_TOL,
};
use super::{require_on_manifold, ManifoldProblem};
use crate::rng::{fast_stream, fill_normal, StreamTag};
use crate::syncrules::power_period;
use crate::{Error, Result};

/// Settings for [`estimate_round_moments`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMomentSpec {
    pub alpha: f64,
    pub h_base: u64,
    pub eta: f64,
    pub local_batch: u64,
    pub workers: usize,
    pub n_seeds: u64,
    pub seed: u64,
    pub control_variate: bool,
}

impl RoundMomentSpec {
    /// Round length `max(h_base, floor((α/η)²))`.
    pub fn period(&self) -> u64 {
        power_period(self.alpha, 2, self.eta, self.h_base)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("eta", self.eta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        if self.h_base == 0 {
            return Err(Error::param("h_base", "must be at least 1"));
        }
        if self.local_batch == 0 {
            return Err(Error::param("local_batch", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::param("workers", "must be at least 1"));
        }
        if self.n_seeds < 100 {
            return Err(Error::param(
                "seeds",
                format!("need at least 100, got {}", self.n_seeds),
            ));
        }
        if self.period() > 1 << 32 {
            return Err(Error::param("eta", "round length is unreasonably large"));
        }
        Ok(())
    }
}

/// Empirical round moments next to their leading-order predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub alpha: f64,
    pub eta: f64,
    pub period: u64,
    pub local_batch: u64,
    pub global_batch: u64,
    pub workers: usize,
    pub n_seeds: u64,
    pub n_used: u64,
    pub n_excluded: u64,
    /// False when more than 1% of the seeds had to be excluded.
    pub valid: bool,
    pub control_variate: bool,
    /// Mean change, after the control variate when enabled.
    pub first: Vec<f64>,
    pub first_se: Vec<f64>,
    /// Mean change without the control variate.
    pub first_raw: Vec<f64>,
    pub first_raw_se: Vec<f64>,
    /// Row-major `E[Δ Δᵀ]`.
    pub second: Vec<Vec<f64>>,
    pub second_se: Vec<Vec<f64>>,
    /// `E‖Δ‖⁶`.
    pub sixth: f64,
    pub sixth_se: f64,
    /// `(α²/2B_loc) ∂²Φ[Σ]`.
    pub predicted_first: Vec<f64>,
    /// `(α²/B) Σ∥`.
    pub predicted_second: Vec<Vec<f64>>,
    /// `‖first − predicted‖ / ‖predicted‖`, absent when the prediction is zero.
    pub first_rel_error: Option<f64>,
    /// Frobenius-norm analogue for the second moment.
    pub second_rel_error: Option<f64>,
}

impl MomentReport {
    /// `‖first − predicted_first‖`.
    pub fn first_residual(&self) -> f64 {
        dist(&self.first, &self.predicted_first)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

struct SeedOutcome {
    delta: Vec<f64>,
    control: Vec<f64>,
}

/// Runs `spec.n_seeds` single-round simulations from `zeta0`.
///
/// Seeds whose projection fails or turns non-finite are excluded and counted.
pub fn estimate_round_moments<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta0: &[f64],
    spec: &RoundMomentSpec,
) -> Result<MomentReport> {
    spec.validate()?;
    require_on_manifold(problem, zeta0)?;
    let d = problem.dim();
    let h = spec.period();
    let k = spec.workers;
    let alpha2 = spec.alpha * spec.alpha;
    let global_batch = spec.local_batch * k as u64;

    let jac = projection_jacobian(problem, zeta0)?;
    let cov = problem.noise_cov(zeta0);
    let predicted_first = projection_second_derivative(problem, zeta0, &cov)?
        * (alpha2 / (2.0 * spec.local_batch as f64));
    let predicted_second = sigma_parallel(problem, zeta0)? * (alpha2 / global_batch as f64);

    // Second-derivative tensor of Φ at ζ0 by polarization, for the control variate.
    let mut tensor = vec![DMatrix::<f64>::zeros(d, d); d];
    if spec.control_variate {
        for j in 0..d {
            for l in j..d {
                let mut m = DMatrix::zeros(d, d);
                m[(j, l)] = 1.0;
                m[(l, j)] = 1.0;
                let col = projection_second_derivative(problem, zeta0, &m)?;
                let scale = if j == l { 1.0 } else { 0.5 };
                for i in 0..d {
                    tensor[i][(j, l)] = col[i] * scale;
                    tensor[i][(l, j)] = col[i] * scale;
                }
            }
        }
    }

    let noise_scale = 1.0 / (spec.local_batch as f64).sqrt();
    let eta = spec.eta;
    let run_seed = |s: u64| -> Option<SeedOutcome> {
        let mut avg = vec![0.0; d];
        let mut control = vec![0.0; d];
        let mut theta = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut xi = vec![0.0; d];
        let mut z = vec![0.0; d];
        for w in 0..k {
            let mut rng = fast_stream(spec.seed, w as u64, StreamTag::Moments, s);
            theta.copy_from_slice(zeta0);
            for _ in 0..h {
                problem.grad(&theta, &mut g);
                fill_normal(&mut rng, &mut z);
                xi.fill(0.0);
                problem.add_noise(&theta, &z, &mut xi);
                xi.iter_mut().for_each(|v| *v *= noise_scale);
                if spec.control_variate {
                    for i in 0..d {
                        let mut acc = 0.0;
                        for j in 0..d {
                            let mut wij = jac[(i, j)];
                            for l in 0..d {
                                wij += tensor[i][(j, l)] * (theta[l] - zeta0[l]);
                            }
                            acc += wij * xi[j];
                        }
                        control[i] -= eta * acc;
                    }
                }
                for i in 0..d {
                    theta[i] -= eta * (g[i] + xi[i]);
                }
            }
            for i in 0..d {
                avg[i] += theta[i];
            }
        }
        let kf = k as f64;
        avg.iter_mut().for_each(|v| *v /= kf);
        control.iter_mut().for_each(|v| *v /= kf);
        match project(problem, &avg, DEFAULT_TOL) {
            Projection::Limit(p) if p.iter().all(|v| v.is_finite()) => Some(SeedOutcome {
                delta: p.iter().zip(zeta0).map(|(a, b)| a - b).collect(),
                control,
            }),
            _ => None,
        }
    };
    let outcomes: Vec<Option<SeedOutcome>> =
        (0..spec.n_seeds).into_par_iter().map(run_seed).collect();

    let used: Vec<&SeedOutcome> = outcomes.iter().flatten().collect();
    let n_used = used.len() as u64;
    let n_excluded = spec.n_seeds - n_used;
    if n_used < 2 {
        return Err(Error::Integration {
            time: 0.0,
            reason: format!(
                "only {n_used} of {} seeds produced a projection",
                spec.n_seeds
            ),
        });
    }
    let n = n_used as f64;

    let mut raw = Welford::new(d);
    let mut adjusted = Welford::new(d);
    let mut outer = Welford::new(d * d);
    let mut sixth = Welford::new(1);
    let mut buf = vec![0.0; d * d];
    for o in &used {
        raw.push(&o.delta);
        let adj: Vec<f64> = o.delta.iter().zip(&o.control).map(|(a, c)| a - c).collect();
        adjusted.push(&adj);
        for i in 0..d {
            for j in 0..d {
                buf[i * d + j] = o.delta[i] * o.delta[j];
            }
        }
        outer.push(&buf);
        sixth.push(&[o.delta.iter().map(|v| v * v).sum::<f64>().powi(3)]);
    }
    let first_est = if spec.control_variate {
        &adjusted
    } else {
        &raw
    };
    let first = first_est.mean.clone();
    let second: Vec<Vec<f64>> = outer.mean.chunks(d).map(|r| r.to_vec()).collect();
    let second_se: Vec<Vec<f64>> = outer.std_err(n).chunks(d).map(|r| r.to_vec()).collect();

    let pf: Vec<f64> = predicted_first.iter().copied().collect();
    let ps: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| predicted_second[(i, j)]).collect())
        .collect();
    let pf_norm = pf.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ps_norm = predicted_second.norm();
    let second_mat = DMatrix::from_row_slice(d, d, &outer.mean);
    let first_rel_error = (pf_norm > 0.0).then(|| dist(&first, &pf) / pf_norm);
    let second_rel_error =
        (ps_norm > 0.0).then(|| (&second_mat - &predicted_second).norm() / ps_norm);

    Ok(MomentReport {
        alpha: spec.alpha,
        eta: spec.eta,
        period: h,
        local_batch: spec.local_batch,
        global_batch,
        workers: k,
        n_seeds: spec.n_seeds,
        n_used,
        n_excluded,
        valid: n_excluded as f64 <= 0.01 * spec.n_seeds as f64,
        control_variate: spec.control_variate,
        first_se: first_est.std_err(n),
        first,
        first_raw: raw.mean.clone(),
        first_raw_se: raw.std_err(n),
        second,
        second_se,
        sixth: sixth.mean[0],
        sixth_se: sixth.std_err(n)[0],
        predicted_first: pf,
        predicted_second: ps,
        first_rel_error,
        second_rel_error,
    })
}

// Running mean and sum of squared deviations per coordinate.
struct Welford {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford {
            count: 0.0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    fn std_err(&self, n: f64) -> Vec<f64> {
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}
