//! Built-in problems with a known manifold of minimizers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ManifoldProblem;
use crate::{Error, Result};

/// `L(x, y) = ½ h(x) ‖y‖²` with `h(x) = h0 + c‖x‖²`.
///
/// The minimizers are `Γ = {y = 0}` and the sharpness at `(x, 0)` is `h(x)`,
/// so drifting along Γ towards `x = 0` means moving to flatter minima.
/// Gradient noise is Gaussian with constant diagonal covariance
/// `diag(σx² I, σy² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyValley {
    pub x_dim: usize,
    pub y_dim: usize,
    pub h0: f64,
    pub c: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl ToyValley {
    pub fn new(
        x_dim: usize,
        y_dim: usize,
        h0: f64,
        c: f64,
        sigma_x: f64,
        sigma_y: f64,
    ) -> Result<Self> {
        if x_dim == 0 || y_dim == 0 {
            return Err(Error::param(
                "x_dim",
                "both blocks need at least one coordinate",
            ));
        }
        if !(h0.is_finite() && h0 > 0.0) {
            return Err(Error::param("h0", format!("must be positive, got {h0}")));
        }
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::param("c", format!("must be nonnegative, got {c}")));
        }
        for (name, s) in [("sigma_x", sigma_x), ("sigma_y", sigma_y)] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::param(name, format!("must be nonnegative, got {s}")));
            }
        }
        Ok(ToyValley {
            x_dim,
            y_dim,
            h0,
            c,
            sigma_x,
            sigma_y,
        })
    }

    /// One flat and one sharp coordinate, `h(x) = 1 + x²`, noise only in y.
    pub fn standard(sigma_y: f64) -> Self {
        ToyValley::new(1, 1, 1.0, 1.0, 0.0, sigma_y).expect("valid constants")
    }

    pub fn h(&self, x: &[f64]) -> f64 {
        self.h0 + self.c * norm2(x)
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        p.split_at(self.x_dim)
    }

    // F(u) = (2 h0 / c) ln u + u² is conserved up to the shift by ‖y‖²
    // along gradient flow; solve F(u_inf) = F(u) - r for u_inf in log space.
    fn flow_limit_radius(&self, u: f64, r: f64) -> f64 {
        let a = 2.0 * self.h0 / self.c;
        let g = |s: f64| a * s + (2.0 * s).exp();
        let s0 = u.ln();
        let target = g(s0) - r;
        let mut s = s0;
        // G is increasing and convex, so Newton from the right converges
        // monotonically.
        for _ in 0..100 {
            let step = (g(s) - target) / (a + 2.0 * (2.0 * s).exp());
            s -= step;
            if step.abs() <= 1e-15 * (1.0 + s.abs()) {
                break;
            }
        }
        s.exp()
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

impl ManifoldProblem for ToyValley {
    fn dim(&self) -> usize {
        self.x_dim + self.y_dim
    }

    fn loss(&self, p: &[f64]) -> f64 {
        let (x, y) = self.split(p);
        0.5 * self.h(x) * norm2(y)
    }

    fn grad(&self, p: &[f64], out: &mut [f64]) {
        let (x, y) = self.split(p);
        let r = norm2(y);
        let h = self.h(x);
        let (gx, gy) = out.split_at_mut(self.x_dim);
        for (g, xi) in gx.iter_mut().zip(x) {
            *g = self.c * r * xi;
        }
        for (g, yi) in gy.iter_mut().zip(y) {
            *g = h * yi;
        }
    }

    fn hessian(&self, p: &[f64]) -> DMatrix<f64> {
        let (x, y) = self.split(p);
        let (n, r, h) = (self.x_dim, norm2(y), self.h(x));
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| match (i < n, j < n) {
            (true, true) => {
                if i == j {
                    self.c * r
                } else {
                    0.0
                }
            }
            (true, false) => 2.0 * self.c * x[i] * y[j - n],
            (false, true) => 2.0 * self.c * x[j] * y[i - n],
            (false, false) => {
                if i == j {
                    h
                } else {
                    0.0
                }
            }
        })
    }

    fn third_contract(&self, p: &[f64], m: &DMatrix<f64>) -> DVector<f64> {
        // Nonzero third derivatives: ∂x_i∂x_j∂y_a = 2c δij y_a and
        // ∂x_i∂y_a∂y_b = 2c x_i δab.
        let (x, y) = self.split(p);
        let n = self.x_dim;
        let tr_xx: f64 = (0..n).map(|i| m[(i, i)]).sum();
        let tr_yy: f64 = (n..self.dim()).map(|a| m[(a, a)]).sum();
        DVector::from_fn(self.dim(), |i, _| {
            let c = self.c;
            if i < n {
                let cross: f64 = (0..self.y_dim).map(|a| y[a] * m[(i, n + a)]).sum();
                4.0 * c * cross + 2.0 * c * x[i] * tr_yy
            } else {
                let a = i - n;
                let cross: f64 = (0..n).map(|j| x[j] * m[(j, n + a)]).sum();
                2.0 * c * y[a] * tr_xx + 4.0 * c * cross
            }
        })
    }

    fn noise_cov(&self, _p: &[f64]) -> DMatrix<f64> {
        let mut d = DVector::from_element(self.dim(), self.sigma_y * self.sigma_y);
        d.rows_mut(0, self.x_dim).fill(self.sigma_x * self.sigma_x);
        DMatrix::from_diagonal(&d)
    }

    fn add_noise(&self, _p: &[f64], z: &[f64], out: &mut [f64]) {
        for (i, (o, zi)) in out.iter_mut().zip(z).enumerate() {
            *o += if i < self.x_dim {
                self.sigma_x
            } else {
                self.sigma_y
            } * zi;
        }
    }

    fn distance_to_manifold(&self, p: &[f64]) -> f64 {
        norm2(self.split(p).1).sqrt()
    }

    fn codimension(&self) -> usize {
        self.y_dim
    }

    fn closed_form_projection(&self, p: &[f64]) -> Option<Option<Vec<f64>>> {
        let (x, y) = self.split(p);
        let r = norm2(y);
        let u = norm2(x).sqrt();
        let mut out = vec![0.0; self.dim()];
        if self.c == 0.0 || u == 0.0 || r == 0.0 {
            out[..self.x_dim].copy_from_slice(x);
        } else {
            let scale = self.flow_limit_radius(u, r) / u;
            for (o, xi) in out.iter_mut().zip(x) {
                *o = scale * xi;
            }
        }
        Some(Some(out))
    }

    fn projection_jacobian(&self, _zeta: &[f64]) -> Option<DMatrix<f64>> {
        let mut d = DVector::zeros(self.dim());
        d.rows_mut(0, self.x_dim).fill(1.0);
        Some(DMatrix::from_diagonal(&d))
    }

    fn projection_second(&self, zeta: &[f64], m: &DMatrix<f64>) -> Option<DVector<f64>> {
        // Φ_x ≈ x - ∇h ‖y‖² / (4h) near Γ, and ∇h = 2c x.
        let (x, _) = self.split(zeta);
        let n = self.x_dim;
        let tr_yy: f64 = (n..self.dim()).map(|a| m[(a, a)]).sum();
        let h = self.h(x);
        Some(DVector::from_fn(self.dim(), |i, _| {
            if i < n {
                -(2.0 * self.c * x[i]) / (2.0 * h) * tr_yy
            } else {
                0.0
            }
        }))
    }
}

/// `L(θ) = ¼ (‖θ‖² − 1)²`, minimized on the unit sphere.
///
/// A curved manifold with a closed-form projection `Φ(θ) = θ/‖θ‖`, used to
/// check the generic finite-difference code where curvature matters. Noise
/// covariance is a constant matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RingValley {
    dim: usize,
    cov: DMatrix<f64>,
    root: DMatrix<f64>,
}

impl RingValley {
    /// Ring in `dim` dimensions with isotropic noise of standard deviation `sigma`.
    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        Self::with_covariance(DMatrix::identity(dim, dim) * (sigma * sigma))
    }

    /// Ring with an arbitrary constant noise covariance.
    pub fn with_covariance(cov: DMatrix<f64>) -> Result<Self> {
        let dim = cov.nrows();
        if dim < 2 || cov.ncols() != dim {
            return Err(Error::param(
                "cov",
                "needs a square matrix of size at least 2",
            ));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * (1.0 + cov.amax()) {
            return Err(Error::param("cov", "must be symmetric"));
        }
        if cov.clone().symmetric_eigenvalues().min() < -1e-12 * (1.0 + cov.amax()) {
            return Err(Error::param("cov", "must be positive semidefinite"));
        }
        let root = super::sym_sqrt(&cov);
        Ok(RingValley { dim, cov, root })
    }
}

impl ManifoldProblem for RingValley {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, x: &[f64]) -> f64 {
        0.25 * (norm2(x) - 1.0).powi(2)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let s = norm2(x) - 1.0;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = s * xi;
        }
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let v = DVector::from_column_slice(x);
        DMatrix::identity(self.dim, self.dim) * (norm2(x) - 1.0) + &v * v.transpose() * 2.0
    }

    fn third_contract(&self, x: &[f64], m: &DMatrix<f64>) -> DVector<f64> {
        // ∂ijk L = 2(δij x_k + δik x_j + δjk x_i).
        let v = DVector::from_column_slice(x);
        m * &v * 4.0 + &v * (2.0 * m.trace())
    }

    fn noise_cov(&self, _x: &[f64]) -> DMatrix<f64> {
        self.cov.clone()
    }

    fn add_noise(&self, _x: &[f64], z: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += (0..self.dim).map(|j| self.root[(i, j)] * z[j]).sum::<f64>();
        }
    }

    fn distance_to_manifold(&self, x: &[f64]) -> f64 {
        (norm2(x).sqrt() - 1.0).abs()
    }

    fn codimension(&self) -> usize {
        1
    }

    fn closed_form_projection(&self, x: &[f64]) -> Option<Option<Vec<f64>>> {
        let n = norm2(x).sqrt();
        // The origin is a stationary point that gradient flow never leaves.
        if n == 0.0 || !n.is_finite() {
            return Some(None);
        }
        Some(Some(x.iter().map(|v| v / n).collect()))
    }

    fn projection_jacobian(&self, zeta: &[f64]) -> Option<DMatrix<f64>> {
        let v = DVector::from_column_slice(zeta);
        Some(DMatrix::identity(self.dim, self.dim) - &v * v.transpose())
    }

    fn projection_second(&self, zeta: &[f64], m: &DMatrix<f64>) -> Option<DVector<f64>> {
        // ∂²Φ_i/∂j∂k = -(δij ζk + δik ζj + δjk ζi) + 3 ζi ζj ζk on the sphere.
        let v = DVector::from_column_slice(zeta);
        let quad = (v.transpose() * m * &v)[(0, 0)];
        Some(m * &v * -2.0 - &v * m.trace() + &v * (3.0 * quad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdelab::projection::{fd_jacobian, fd_second, gradient_flow_projection};
    use crate::sdelab::Projection;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy22() -> ToyValley {
        ToyValley::new(2, 2, 0.7, 1.3, 0.4, 0.9).unwrap()
    }

    fn ring3() -> RingValley {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 0.8, -0.2, 0.1, -0.2, 0.5]);
        RingValley::with_covariance(cov).unwrap()
    }

    fn shifted(x: &[f64], i: usize, e: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        p[i] += e;
        p
    }

    // Central-difference checks of grad against loss, Hessian against grad,
    // and the third-derivative contraction against tr(H(x) M).
    fn check_derivatives<P: ManifoldProblem>(p: &P, x: &[f64], m: &DMatrix<f64>) {
        let d = p.dim();
        let e = 1e-5;
        let mut g = vec![0.0; d];
        p.grad(x, &mut g);
        let h = p.hessian(x);
        let t = p.third_contract(x, m);
        let mut gp = vec![0.0; d];
        let mut gm = vec![0.0; d];
        for i in 0..d {
            let fd = (p.loss(&shifted(x, i, e)) - p.loss(&shifted(x, i, -e))) / (2.0 * e);
            assert!(
                (fd - g[i]).abs() < 1e-7 * (1.0 + g[i].abs()),
                "grad {i}: {fd} vs {}",
                g[i]
            );
            p.grad(&shifted(x, i, e), &mut gp);
            p.grad(&shifted(x, i, -e), &mut gm);
            for j in 0..d {
                let fd = (gp[j] - gm[j]) / (2.0 * e);
                assert!(
                    (fd - h[(j, i)]).abs() < 1e-7 * (1.0 + h[(j, i)].abs()),
                    "hess {j}{i}"
                );
            }
            let tr = |q: &[f64]| (p.hessian(q).component_mul(m)).sum();
            let fd = (tr(&shifted(x, i, e)) - tr(&shifted(x, i, -e))) / (2.0 * e);
            assert!(
                (fd - t[i]).abs() < 1e-6 * (1.0 + t[i].abs()),
                "third {i}: {fd} vs {}",
                t[i]
            );
        }
    }

    fn sym(d: usize, v: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |i, j| v[(i * d + j) % v.len()]);
        (&a + a.transpose()) * 0.5
    }

    proptest! {
        #[test]
        fn toy_derivatives_match_differences(x in prop::collection::vec(-1.5f64..1.5, 4), m in prop::collection::vec(-1.0f64..1.0, 16)) {
            check_derivatives(&toy22(), &x, &sym(4, &m));
        }

        #[test]
        fn ring_derivatives_match_differences(x in prop::collection::vec(-1.5f64..1.5, 3), m in prop::collection::vec(-1.0f64..1.0, 9)) {
            check_derivatives(&ring3(), &x, &sym(3, &m));
        }

        #[test]
        fn toy_projection_lands_on_the_manifold_and_is_idempotent(x in prop::collection::vec(-1.5f64..1.5, 4)) {
            let p = toy22();
            let z = p.closed_form_projection(&x).unwrap().unwrap();
            prop_assert!(p.distance_to_manifold(&z) == 0.0);
            prop_assert_eq!(p.closed_form_projection(&z).unwrap().unwrap(), z.clone());
            // Gradient flow only shrinks x towards the origin.
            let n = |v: &[f64]| v[..2].iter().map(|a| a * a).sum::<f64>();
            prop_assert!(n(&z) <= n(&x) + 1e-15);
        }
    }

    #[test]
    fn toy_closed_form_matches_gradient_flow() {
        let p = toy22();
        for x in [
            [0.5, -0.2, 0.3, 0.1],
            [1.2, 0.4, -0.9, 0.7],
            [0.05, 0.0, 1.5, -1.0],
            [0.0, 0.0, 0.4, 0.4],
        ] {
            let closed = p.closed_form_projection(&x).unwrap().unwrap();
            let flow = match gradient_flow_projection(&p, &x, 1e-12) {
                Projection::Limit(v) => v,
                Projection::Null => panic!("flow failed from {x:?}"),
            };
            for (a, b) in closed.iter().zip(&flow) {
                assert!((a - b).abs() < 1e-9, "{closed:?} vs {flow:?}");
            }
        }
    }

    #[test]
    fn ring_closed_form_matches_gradient_flow() {
        let p = ring3();
        for x in [[0.3, 0.1, -0.2], [2.0, -1.0, 0.5], [0.0, 0.0, 0.9]] {
            let closed = p.closed_form_projection(&x).unwrap().unwrap();
            let flow = gradient_flow_projection(&p, &x, 1e-12)
                .into_option()
                .unwrap();
            for (a, b) in closed.iter().zip(&flow) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(p.closed_form_projection(&[0.0; 3]).unwrap().is_none());
        assert!(gradient_flow_projection(&p, &[0.0; 3], 1e-12).is_null());
    }

    #[test]
    fn analytic_projection_derivatives_match_finite_differences() {
        let toy = toy22();
        let z = [0.6, -0.3, 0.0, 0.0];
        let m = sym(4, &[0.4, -0.1, 0.3, 0.2, 0.9, -0.5, 0.7]);
        let jac = toy.projection_jacobian(&z).unwrap();
        assert!((jac - fd_jacobian(&toy, &z).unwrap()).amax() < 1e-6);
        let an = toy.projection_second(&z, &m).unwrap();
        let fd = fd_second(&toy, &z, &m).unwrap();
        assert!(
            (&an - &fd).amax() < 1e-4 * (1.0 + an.amax()),
            "{an} vs {fd}"
        );

        let ring = ring3();
        let z = [0.6, -0.48, 0.64];
        let m = sym(3, &[0.4, -0.1, 0.3, 0.2, 0.9]);
        let jac = ring.projection_jacobian(&z).unwrap();
        assert!((jac - fd_jacobian(&ring, &z).unwrap()).amax() < 1e-6);
        let an = ring.projection_second(&z, &m).unwrap();
        let fd = fd_second(&ring, &z, &m).unwrap();
        assert!(
            (&an - &fd).amax() < 1e-4 * (1.0 + an.amax()),
            "{an} vs {fd}"
        );
    }

    #[test]
    fn sharpness_of_the_toy_is_h() {
        let p = toy22();
        let z = [0.5, 1.0, 0.0, 0.0];
        assert_relative_eq!(
            crate::sdelab::sharpness(&p, &z).unwrap(),
            0.7 + 1.3 * 1.25,
            max_relative = 1e-12
        );
        assert!(crate::sdelab::sharpness(&p, &[0.5, 1.0, 0.1, 0.0]).is_err());
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(ToyValley::new(0, 1, 1.0, 1.0, 0.0, 1.0).is_err());
        assert!(ToyValley::new(1, 1, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(ToyValley::new(1, 1, 1.0, -1.0, 0.0, 1.0).is_err());
        assert!(RingValley::isotropic(1, 1.0).is_err());
        assert!(
            RingValley::with_covariance(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]))
                .is_err()
        );
        assert!(
            RingValley::with_covariance(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]))
                .is_err()
        );
    }
}
