//! Continuous-time numerics around a manifold of minimizers.
//!
//! Near a connected manifold Γ of local minimizers, the slow dynamics of SGD
//! and of Local SGD are described by SDEs that live on Γ. This module provides
//! the pieces needed to evaluate and simulate them: the gradient-flow
//! projection Φ and its derivatives, the projected and rescaled noise
//! covariances, the SDEs themselves, and a Monte Carlo estimator for the
//! moments of one communication round.

mod moments;
mod noise;
mod problems;
mod projection;
mod sde;

use nalgebra::{DMatrix, DVector};

pub use moments::{estimate_round_moments, MomentReport, RoundMomentSpec};
pub use noise::{psi, psi_hat, sigma_diamond, sigma_parallel, sym_sqrt, EigenFrame};
pub use problems::{RingValley, ToyValley};
pub use projection::{
    gradient_flow_projection, project, projection_jacobian, projection_second_derivative,
    Projection, DEFAULT_TOL,
};
pub use sde::{
    fit_drift, integrate_slow_sde, simulate_ensemble, slow_sde_coefficients, Ensemble, SdePath,
    SdeVariant, SlowSdeSpec,
};

use crate::{Error, Result};

/// A loss with a manifold of minimizers and a gradient-noise model.
///
/// Only the first group of methods is required. Built-ins that know Φ or its
/// derivatives in closed form override the `Option`-returning hooks, and the
/// generic code falls back to numerical integration and finite differences
/// otherwise.
pub trait ManifoldProblem: Send + Sync {
    fn dim(&self) -> usize;

    fn loss(&self, x: &[f64]) -> f64;

    /// Writes ∇L(x) into `out`.
    fn grad(&self, x: &[f64], out: &mut [f64]);

    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;

    /// The third-derivative contraction `∇³L(x)[M]`, whose i-th entry is
    /// `Σ_jk ∂³L/∂x_i∂x_j∂x_k · M_jk`.
    fn third_contract(&self, x: &[f64], m: &DMatrix<f64>) -> DVector<f64>;

    /// Covariance Σ(x) of one example's gradient noise.
    fn noise_cov(&self, x: &[f64]) -> DMatrix<f64>;

    /// Adds `Σ(x)^{1/2} z` to `out`. The default factors `noise_cov` on every
    /// call; problems with cheap square roots should override it.
    fn add_noise(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        let root = sym_sqrt(&self.noise_cov(x));
        for (i, o) in out.iter_mut().enumerate() {
            *o += (0..z.len()).map(|j| root[(i, j)] * z[j]).sum::<f64>();
        }
    }

    /// Distance from `x` to the manifold.
    fn distance_to_manifold(&self, x: &[f64]) -> f64;

    /// Rank of the Hessian on the manifold.
    fn codimension(&self) -> usize;

    /// Φ(x) in closed form, if known. `None` also covers the null result.
    fn closed_form_projection(&self, _x: &[f64]) -> Option<Option<Vec<f64>>> {
        None
    }

    /// ∂Φ(ζ) for ζ on the manifold, if known in closed form.
    fn projection_jacobian(&self, _zeta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// ∂²Φ(ζ)[M] for ζ on the manifold, if known in closed form.
    fn projection_second(&self, _zeta: &[f64], _m: &DMatrix<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// Tolerance used to decide that a point lies on the manifold.
pub const ON_MANIFOLD_TOL: f64 = 1e-6;

pub(crate) fn require_on_manifold<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
) -> Result<()> {
    crate::error::check_shape("zeta", problem.dim(), zeta.len())?;
    let distance = problem.distance_to_manifold(zeta);
    if distance <= ON_MANIFOLD_TOL {
        Ok(())
    } else {
        Err(Error::OffManifold {
            distance,
            tol: ON_MANIFOLD_TOL,
        })
    }
}

/// Largest Hessian eigenvalue at a point of the manifold.
pub fn sharpness<P: ManifoldProblem + ?Sized>(problem: &P, zeta: &[f64]) -> Result<f64> {
    require_on_manifold(problem, zeta)?;
    Ok(problem
        .hessian(zeta)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}
