//! Slow SDEs on the minimizer manifold.
//!
//! All three variants share the diffusion `B^{-1/2} Σ∥^{1/2} dW`. Their drifts
//! are `-(1/2B) ∇³L[Σ̂⋄]` for SGD, an extra `-((K-1)/2B) ∇³L[Ψ̂(β)]` for Local
//! SGD with a period proportional to `1/η`, and `-(K/2B) ∇³L[Σ̂⋄]` for the
//! quadratic rule. A step is Euler–Maruyama in the ambient space followed by
//! Φ, which both projects the increment onto the tangent space and supplies
//! the second-order correction from curvature of Γ.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::{sym_sqrt, EigenFrame};
use super::projection::{project, projection_jacobian, Projection, DEFAULT_TOL};
use super::{psi, require_on_manifold, ManifoldProblem};
use crate::rng::{fast_stream, fill_normal, StreamTag};
use crate::{Error, Result};

/// Which slow SDE to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SdeVariant {
    Sgd,
    /// Local SGD with `H = β/η`.
    LocalLsr {
        beta: f64,
    },
    LocalQsr,
}

/// Integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowSdeSpec {
    pub variant: SdeVariant,
    /// Global batch size B.
    pub batch: f64,
    /// Number of workers K.
    pub workers: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
}

impl SlowSdeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::param(
                "dt",
                format!("must be positive, got {}", self.dt),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::param(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        if !(self.batch.is_finite() && self.batch > 0.0) {
            return Err(Error::param(
                "batch",
                format!("must be positive, got {}", self.batch),
            ));
        }
        if self.workers == 0 {
            return Err(Error::param("workers", "must be at least 1"));
        }
        if let SdeVariant::LocalLsr { beta } = self.variant {
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(Error::param(
                    "beta",
                    format!("must be nonnegative, got {beta}"),
                ));
            }
        }
        Ok(())
    }

    /// Number of Euler steps; the step is shrunk slightly to land on the horizon.
    pub fn steps(&self) -> u64 {
        ((self.horizon / self.dt).round() as u64).max(1)
    }
}

/// Drift vector and diffusion matrix of the chosen SDE at ζ.
pub fn slow_sde_coefficients<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
    spec: &SlowSdeSpec,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    require_on_manifold(problem, zeta)?;
    let cov = problem.noise_cov(zeta);
    let jac = projection_jacobian(problem, zeta)?;
    let par = &jac * &cov * jac.transpose();
    let par = (&par + par.transpose()) * 0.5;
    let off = &cov - &par;
    let frame = EigenFrame::at(problem, zeta)?;
    let diamond = frame.rescale(&off, |_| 1.0);
    let b = spec.batch;
    let k = spec.workers as f64;
    let contracted = match spec.variant {
        SdeVariant::Sgd => problem.third_contract(zeta, &diamond) / (2.0 * b),
        SdeVariant::LocalLsr { beta } => {
            let damped = frame.rescale(&off, |s| psi(beta * s));
            problem.third_contract(zeta, &(diamond + damped * (k - 1.0))) / (2.0 * b)
        }
        SdeVariant::LocalQsr => problem.third_contract(zeta, &diamond) * (k / (2.0 * b)),
    };
    Ok((-contracted, sym_sqrt(&par) / b.sqrt()))
}

/// A sampled path. `points[i]` is the state at `times[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdePath {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

/// Integrates one path from ζ0, recording every `record_every` steps plus the
/// start and end. Brownian increments come from the stream addressed by
/// `(spec.seed, path)`, so variants sharing a seed share their noise.
pub fn integrate_slow_sde<P: ManifoldProblem + ?Sized>(
    problem: &P,
    spec: &SlowSdeSpec,
    zeta0: &[f64],
    path: u64,
    record_every: u64,
) -> Result<SdePath> {
    spec.validate()?;
    require_on_manifold(problem, zeta0)?;
    let record_every = record_every.max(1);
    let d = problem.dim();
    let n = spec.steps();
    let dt = spec.horizon / n as f64;
    let sqrt_dt = dt.sqrt();
    let mut rng = fast_stream(spec.seed, path, StreamTag::SdePath, 0);
    let mut z = vec![0.0; d];
    let mut zeta = zeta0.to_vec();
    let mut out = SdePath {
        times: vec![0.0],
        points: vec![zeta.clone()],
    };
    for step in 1..=n {
        let (drift, diffusion) = slow_sde_coefficients(problem, &zeta, spec)?;
        fill_normal(&mut rng, &mut z);
        let kick = diffusion * DVector::from_column_slice(&z) * sqrt_dt + drift * dt;
        let trial: Vec<f64> = zeta.iter().zip(kick.iter()).map(|(a, b)| a + b).collect();
        let time = step as f64 * dt;
        zeta = match project(problem, &trial, DEFAULT_TOL) {
            Projection::Limit(p) if p.iter().all(|v| v.is_finite()) => p,
            _ => {
                return Err(Error::Integration {
                    time,
                    reason: "retraction onto the manifold failed".into(),
                })
            }
        };
        if step % record_every == 0 || step == n {
            out.times.push(time);
            out.points.push(zeta.clone());
        }
    }
    Ok(out)
}

/// Summary of many independent paths sharing a start point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub times: Vec<f64>,
    /// Mean state at each recorded time.
    pub mean: Vec<Vec<f64>>,
    /// Standard error of each mean coordinate.
    pub std_err: Vec<Vec<f64>>,
    /// Final state of every path, in path order.
    pub finals: Vec<Vec<f64>>,
}

/// Runs `n_paths` paths (indices `0..n_paths`) in parallel and reduces them in
/// path order.
pub fn simulate_ensemble<P: ManifoldProblem + ?Sized>(
    problem: &P,
    spec: &SlowSdeSpec,
    zeta0: &[f64],
    n_paths: u64,
    record_every: u64,
) -> Result<Ensemble> {
    if n_paths == 0 {
        return Err(Error::param("paths", "need at least one path"));
    }
    let paths: Vec<SdePath> = (0..n_paths)
        .into_par_iter()
        .map(|i| integrate_slow_sde(problem, spec, zeta0, i, record_every))
        .collect::<Result<_>>()?;
    let times = paths[0].times.clone();
    let d = problem.dim();
    let n = n_paths as f64;
    let mut mean = vec![vec![0.0; d]; times.len()];
    let mut sq = vec![vec![0.0; d]; times.len()];
    for p in &paths {
        for (r, point) in p.points.iter().enumerate() {
            for i in 0..d {
                mean[r][i] += point[i];
                sq[r][i] += point[i] * point[i];
            }
        }
    }
    let std_err = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            m.iter_mut()
                .zip(s)
                .map(|(mi, si)| {
                    *mi /= n;
                    let var = (si / n - *mi * *mi).max(0.0) * n / (n - 1.0).max(1.0);
                    (var / n).sqrt()
                })
                .collect()
        })
        .collect();
    let finals = paths
        .into_iter()
        .map(|mut p| p.points.pop().expect("start is recorded"))
        .collect();
    Ok(Ensemble {
        times,
        mean,
        std_err,
        finals,
    })
}

/// Least-squares slope through the start point of each mean coordinate.
pub fn fit_drift(ensemble: &Ensemble) -> Vec<f64> {
    let start = &ensemble.mean[0];
    let tt: f64 = ensemble.times.iter().map(|t| t * t).sum();
    (0..start.len())
        .map(|i| {
            ensemble
                .times
                .iter()
                .zip(&ensemble.mean)
                .map(|(t, m)| t * (m[i] - start[i]))
                .sum::<f64>()
                / tt
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdelab::{RingValley, ToyValley};
    use approx::assert_relative_eq;

    fn spec(variant: SdeVariant, dt: f64) -> SlowSdeSpec {
        SlowSdeSpec {
            variant,
            batch: 2.0,
            workers: 4,
            horizon: 3.0,
            dt,
            seed: 11,
        }
    }

    // dx/dt = -m c σy² x / (2B h(x)) by classical RK4 with a tiny step.
    fn oracle_x(x0: f64, sigma_y: f64, batch: f64, mult: f64, horizon: f64) -> f64 {
        let f = |x: f64| -mult * sigma_y * sigma_y * x / (2.0 * batch * (1.0 + x * x));
        let n = 100_000;
        let h = horizon / n as f64;
        let mut x = x0;
        for _ in 0..n {
            let k1 = f(x);
            let k2 = f(x + 0.5 * h * k1);
            let k3 = f(x + 0.5 * h * k2);
            let k4 = f(x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        x
    }

    #[test]
    fn zero_noise_paths_stay_put() {
        let p = ToyValley::standard(0.0);
        for v in [
            SdeVariant::Sgd,
            SdeVariant::LocalLsr { beta: 0.5 },
            SdeVariant::LocalQsr,
        ] {
            let path = integrate_slow_sde(&p, &spec(v, 0.01), &[0.7, 0.0], 0, 10).unwrap();
            assert!(path.points.iter().all(|z| z == &vec![0.7, 0.0]));
            assert_eq!(path.times.len(), 31);
            assert_relative_eq!(*path.times.last().unwrap(), 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn toy_drift_follows_its_ode() {
        let p = ToyValley::standard(1.5);
        for (v, mult) in [
            (SdeVariant::Sgd, 1.0),
            (SdeVariant::LocalQsr, 4.0),
            (SdeVariant::LocalLsr { beta: 0.0 }, 1.0),
            (SdeVariant::LocalLsr { beta: 1e6 }, 4.0),
        ] {
            let exact = oracle_x(0.8, 1.5, 2.0, mult, 3.0);
            let coarse = integrate_slow_sde(&p, &spec(v, 0.01), &[0.8, 0.0], 0, 1000).unwrap();
            let fine = integrate_slow_sde(&p, &spec(v, 0.005), &[0.8, 0.0], 0, 1000).unwrap();
            let e1 = (coarse.points.last().unwrap()[0] - exact).abs();
            let e2 = (fine.points.last().unwrap()[0] - exact).abs();
            assert!(e1 < 2e-3, "{v:?}: {e1}");
            // First-order convergence: halving dt roughly halves the error.
            assert!(e2 < 0.65 * e1 && e2 > 0.35 * e1, "{v:?}: {e1} {e2}");
        }
    }

    #[test]
    fn lsr_drift_sits_between_sgd_and_qsr() {
        let p = ToyValley::standard(1.5);
        let z = [0.8, 0.0];
        let x_drift = |v| slow_sde_coefficients(&p, &z, &spec(v, 0.01)).unwrap().0[0];
        let sgd = x_drift(SdeVariant::Sgd);
        let qsr = x_drift(SdeVariant::LocalQsr);
        let lsr = x_drift(SdeVariant::LocalLsr { beta: 0.4 });
        assert!(qsr < lsr && lsr < sgd && sgd < 0.0);
        let h = 1.64;
        let expected = sgd * (1.0 + 3.0 * crate::sdelab::psi(2.0 * 0.4 * h));
        assert_relative_eq!(lsr, expected, max_relative = 1e-12);
    }

    #[test]
    fn ring_paths_stay_on_the_sphere_and_repeat() {
        let p = RingValley::isotropic(3, 0.5).unwrap();
        let s = spec(SdeVariant::LocalQsr, 0.01);
        let a = integrate_slow_sde(&p, &s, &[1.0, 0.0, 0.0], 3, 7).unwrap();
        let b = integrate_slow_sde(&p, &s, &[1.0, 0.0, 0.0], 3, 7).unwrap();
        assert_eq!(a, b);
        for z in &a.points {
            assert!(p.distance_to_manifold(z) < 1e-12);
        }
        let c = integrate_slow_sde(&p, &s, &[1.0, 0.0, 0.0], 4, 7).unwrap();
        assert_ne!(a.points.last(), c.points.last());
    }

    #[test]
    fn ensemble_is_thread_independent() {
        let p = ToyValley::new(1, 1, 1.0, 1.0, 0.3, 1.5).unwrap();
        let s = spec(SdeVariant::Sgd, 0.02);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_ensemble(&p, &s, &[0.8, 0.0], 16, 10).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn fit_drift_recovers_a_linear_mean() {
        let e = Ensemble {
            times: vec![0.0, 1.0, 2.0, 3.0],
            mean: vec![vec![1.0], vec![0.5], vec![0.0], vec![-0.5]],
            std_err: vec![vec![0.0]; 4],
            finals: vec![],
        };
        assert_relative_eq!(fit_drift(&e)[0], -0.5, max_relative = 1e-15);
    }

    #[test]
    fn rejects_bad_specs() {
        let p = ToyValley::standard(1.0);
        let mut s = spec(SdeVariant::Sgd, 0.0);
        assert!(integrate_slow_sde(&p, &s, &[0.5, 0.0], 0, 1).is_err());
        s.dt = 0.1;
        s.workers = 0;
        assert!(s.validate().is_err());
        s.workers = 2;
        s.variant = SdeVariant::LocalLsr { beta: -1.0 };
        assert!(s.validate().is_err());
        s.variant = SdeVariant::Sgd;
        assert!(matches!(
            integrate_slow_sde(&p, &s, &[0.5, 0.1], 0, 1),
            Err(Error::OffManifold { .. })
        ));
        assert!(simulate_ensemble(&p, &s, &[0.5, 0.0], 0, 1).is_err());
    }
}
