//! Projected and rescaled noise covariances on the manifold.

use nalgebra::DMatrix;

use super::projection::projection_jacobian;
use super::{require_on_manifold, ManifoldProblem};
use crate::Result;

/// `ψ(x) = (e^{-x} − 1 + x) / x` with `ψ(0) = 0`.
///
/// Below 1e-4 the three leading Taylor terms are used; the closed form would
/// cancel almost every digit there.
pub fn psi(x: f64) -> f64 {
    if x < 1e-4 {
        x / 2.0 - x * x / 6.0 + x * x * x / 24.0
    } else {
        ((-x).exp_m1() + x) / x
    }
}

/// Symmetric PSD square root. Negative eigenvalues from rounding are clipped.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Hessian eigendecomposition at a point of the manifold.
#[derive(Debug, Clone)]
pub struct EigenFrame {
    /// Eigenvalues; those below a relative threshold are stored as exact zeros.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, one per column.
    pub vectors: DMatrix<f64>,
}

impl EigenFrame {
    pub fn at<P: ManifoldProblem + ?Sized>(problem: &P, zeta: &[f64]) -> Result<Self> {
        require_on_manifold(problem, zeta)?;
        let eig = problem.hessian(zeta).symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let cutoff = 1e-9 * top.max(f64::MIN_POSITIVE);
        let values = eig
            .eigenvalues
            .iter()
            .map(|&l| if l.abs() <= cutoff { 0.0 } else { l })
            .collect();
        Ok(EigenFrame {
            values,
            vectors: eig.eigenvectors,
        })
    }

    /// `Vᵀ M V`.
    pub fn to_eigenbasis(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.vectors.transpose() * m * &self.vectors
    }

    /// `V M Vᵀ`.
    pub fn from_eigenbasis(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.vectors * m * self.vectors.transpose()
    }

    // Σ over pairs (i, j) not both in the kernel of w(λi+λj)/(λi+λj) ⟨S, vi vjᵀ⟩ vi vjᵀ.
    pub(crate) fn rescale(&self, s: &DMatrix<f64>, weight: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut e = self.to_eigenbasis(s);
        let n = self.values.len();
        for i in 0..n {
            for j in 0..n {
                let sum = self.values[i] + self.values[j];
                e[(i, j)] = if self.values[i] == 0.0 && self.values[j] == 0.0 {
                    0.0
                } else {
                    e[(i, j)] * weight(sum) / sum
                };
            }
        }
        let out = self.from_eigenbasis(&e);
        (&out + out.transpose()) * 0.5
    }
}

/// `Σ∥ = ∂Φ Σ ∂Φ` at ζ.
pub fn sigma_parallel<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
) -> Result<DMatrix<f64>> {
    let j = projection_jacobian(problem, zeta)?;
    let out = &j * problem.noise_cov(zeta) * j.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

fn off_tangent<P: ManifoldProblem + ?Sized>(problem: &P, zeta: &[f64]) -> Result<DMatrix<f64>> {
    Ok(problem.noise_cov(zeta) - sigma_parallel(problem, zeta)?)
}

/// The non-tangent part of the noise, rescaled by `1/(λi+λj)` in the Hessian
/// eigenbasis.
pub fn sigma_diamond<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
) -> Result<DMatrix<f64>> {
    let frame = EigenFrame::at(problem, zeta)?;
    Ok(frame.rescale(&off_tangent(problem, zeta)?, |_| 1.0))
}

/// Like [`sigma_diamond`] with each eigenbasis entry damped by
/// `ψ(β(λi+λj))`, where `β = Hη`.
pub fn psi_hat<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
    beta: f64,
) -> Result<DMatrix<f64>> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(crate::Error::param(
            "beta",
            format!("must be nonnegative, got {beta}"),
        ));
    }
    let frame = EigenFrame::at(problem, zeta)?;
    Ok(frame.rescale(&off_tangent(problem, zeta)?, |s| psi(beta * s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdelab::{RingValley, ToyValley};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn psi_values() {
        assert_eq!(psi(0.0), 0.0);
        assert_relative_eq!(psi(1.0), (-1.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(psi(50.0), 0.98, max_relative = 1e-15);
        assert!(psi(51.0) > psi(50.0));
    }

    #[test]
    fn psi_series_meets_closed_form() {
        let below = psi(1e-4 * (1.0 - 1e-12));
        let above = psi(1e-4);
        assert!((below - above).abs() < 1e-15);
        // Half the slope at the origin.
        assert_relative_eq!(psi(1e-8), 5e-9, max_relative = 1e-8);
    }

    #[test]
    fn psi_grid_is_monotone_and_below_one() {
        let mut prev = psi(0.0);
        for k in 1..10_000 {
            let v = psi(k as f64 * 0.02);
            assert!(v > prev, "k={k}");
            assert!(v < 1.0);
            prev = v;
        }
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = sym_sqrt(&m);
        assert!((&r * &r - &m).amax() < 1e-14);
    }

    fn toy_full(sx: f64, sy: f64) -> ToyValley {
        ToyValley::new(1, 1, 1.0, 0.0, sx, sy).unwrap()
    }

    #[test]
    fn sigma_parallel_examples() {
        let z = [0.3, 0.0];
        assert_eq!(
            sigma_parallel(&toy_full(0.0, 0.0), &z).unwrap(),
            DMatrix::zeros(2, 2)
        );
        assert_eq!(
            sigma_parallel(&toy_full(0.0, 2.0), &z).unwrap(),
            DMatrix::zeros(2, 2)
        );
        let id = sigma_parallel(&toy_full(1.0, 1.0), &z).unwrap();
        assert_eq!(id, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn off_manifold_is_a_domain_error() {
        let p = ToyValley::standard(1.0);
        assert!(matches!(
            sigma_parallel(&p, &[0.0, 0.1]),
            Err(crate::Error::OffManifold { .. })
        ));
        assert!(crate::sdelab::sharpness(&p, &[0.0, 0.1]).is_err());
    }

    #[test]
    fn sigma_diamond_single_sharp_mode() {
        // Hessian diag(0, h) with h = 1 + 0.5² and noise σ² in y only.
        let p = ToyValley::standard(1.5);
        let z = [0.5, 0.0];
        let h = 1.25;
        let d = sigma_diamond(&p, &z).unwrap();
        assert_relative_eq!(d[(1, 1)], 2.25 / (2.0 * h), max_relative = 1e-12);
        assert!(d[(0, 0)].abs() < 1e-15 && d[(0, 1)].abs() < 1e-15);

        let zero = sigma_diamond(&toy_full(0.7, 0.0), &z).unwrap();
        assert!(zero.amax() < 1e-15);
    }

    #[test]
    fn psi_hat_single_mode_and_limits() {
        let p = ToyValley::standard(1.5);
        let z = [0.5, 0.0];
        let h = 1.25;
        let d = sigma_diamond(&p, &z).unwrap();
        assert!(psi_hat(&p, &z, 0.0).unwrap().amax() == 0.0);
        for beta in [0.01, 0.3, 2.0] {
            let ph = psi_hat(&p, &z, beta).unwrap();
            assert_relative_eq!(
                ph[(1, 1)],
                psi(2.0 * beta * h) * 2.25 / (2.0 * h),
                max_relative = 1e-12
            );
        }
        // β(λi+λj) ≥ 60 puts every entry within 2% of the undamped matrix.
        let big = psi_hat(&p, &z, 60.0 / (2.0 * h)).unwrap();
        assert!((big[(1, 1)] - d[(1, 1)]).abs() <= 0.02 * d[(1, 1)]);
    }

    #[test]
    fn mixed_pairs_enter_with_the_nonzero_eigenvalue() {
        // Correlated x/y noise gives Σ − Σ∥ an off-diagonal block, which pairs
        // the zero tangent eigenvalue with the sharp one.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let ring = RingValley::with_covariance(cov).unwrap();
        let z = [1.0, 0.0];
        // Tangent is e2, normal e1 with eigenvalue 2.
        let d = sigma_diamond(&ring, &z).unwrap();
        assert_relative_eq!(d[(0, 0)], 1.0 / 4.0, max_relative = 1e-12);
        assert_relative_eq!(d[(0, 1)], 0.4 / 2.0, max_relative = 1e-12);
        assert!(d[(1, 1)].abs() < 1e-14);
    }

    fn random_ring() -> impl Strategy<Value = (RingValley, Vec<f64>)> {
        (
            prop::collection::vec(-1.0f64..1.0, 9),
            0.0f64..std::f64::consts::TAU,
            -1.0f64..1.0,
        )
            .prop_map(|(a, phi, w)| {
                let a = DMatrix::from_row_slice(3, 3, &a);
                let cov = &a * a.transpose();
                let r = (1.0 - w * w).sqrt();
                (
                    RingValley::with_covariance(cov).unwrap(),
                    vec![r * phi.cos(), r * phi.sin(), w],
                )
            })
    }

    proptest! {
        #[test]
        fn psi_hat_is_sandwiched_and_monotone((ring, z) in random_ring(), b1 in 0.0f64..5.0, b2 in 0.0f64..5.0) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let frame = EigenFrame::at(&ring, &z).unwrap();
            let d = frame.to_eigenbasis(&sigma_diamond(&ring, &z).unwrap());
            let p_lo = psi_hat(&ring, &z, lo).unwrap();
            let p_hi = psi_hat(&ring, &z, hi).unwrap();
            prop_assert!((&p_lo - p_lo.transpose()).amax() < 1e-14);
            let (e_lo, e_hi) = (frame.to_eigenbasis(&p_lo), frame.to_eigenbasis(&p_hi));
            for i in 0..3 {
                for j in 0..3 {
                    let tol = 1e-12 * (1.0 + d[(i, j)].abs());
                    // Each entry is d_ij times a factor in [0, 1] that grows with β.
                    prop_assert!(e_lo[(i, j)].abs() <= e_hi[(i, j)].abs() + tol);
                    prop_assert!(e_hi[(i, j)].abs() <= d[(i, j)].abs() + tol);
                    prop_assert!(e_hi[(i, j)] * d[(i, j)] >= -tol);
                }
            }
        }

        #[test]
        fn sigma_diamond_is_linear_in_sigma((ring, z) in random_ring(), s in 0.1f64..4.0) {
            let scaled = RingValley::with_covariance(ring.noise_cov(&z) * s).unwrap();
            let a = sigma_diamond(&ring, &z).unwrap() * s;
            let b = sigma_diamond(&scaled, &z).unwrap();
            prop_assert!((&a - &b).amax() <= 1e-12 * (1.0 + a.amax()));
            prop_assert!((&b - b.transpose()).amax() < 1e-14);
        }
    }
}
