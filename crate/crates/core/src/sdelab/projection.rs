//! The gradient-flow projection Φ and its derivatives.

use nalgebra::{DMatrix, DVector};

use super::{require_on_manifold, ManifoldProblem};
use crate::Result;

/// Default stopping tolerance for [`gradient_flow_projection`].
pub const DEFAULT_TOL: f64 = 1e-12;

const MAX_STEPS: usize = 200_000;
const MAX_TIME: f64 = 1e9;
const BLOWUP: f64 = 1e12;

/// Limit of gradient flow, or the null result when the flow diverges, stalls
/// away from the manifold, or exhausts its budget.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Limit(Vec<f64>),
    Null,
}

impl Projection {
    pub fn into_option(self) -> Option<Vec<f64>> {
        match self {
            Projection::Limit(v) => Some(v),
            Projection::Null => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Projection::Null)
    }
}

// Dormand–Prince 5(4) tableau. The flow is autonomous, so the nodes are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `dx/dt = -∇L(x)` with an adaptive Dormand–Prince scheme until
/// `‖∇L‖ ≤ tol` and the point is within `tol` of the manifold.
pub fn gradient_flow_projection<P: ManifoldProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    tol: f64,
) -> Projection {
    let d = problem.dim();
    let tol = tol.max(f64::EPSILON);
    let local_tol = (tol * 1e-2).max(1e-15);
    let mut x = x.to_vec();
    let mut k = vec![vec![0.0; d]; 7];
    let mut stage = vec![0.0; d];
    let mut x5 = vec![0.0; d];
    let mut g = vec![0.0; d];
    let neg_grad = |p: &[f64], out: &mut [f64]| {
        problem.grad(p, out);
        out.iter_mut().for_each(|v| *v = -*v);
    };

    let mut t = 0.0;
    problem.grad(&x, &mut g);
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut dt = if gnorm > 0.0 {
        (0.01 / gnorm).min(1e-2)
    } else {
        1e-2
    };
    neg_grad(&x, &mut k[0]);

    for _ in 0..MAX_STEPS {
        let gnorm = k[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        if !gnorm.is_finite() || x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
            return Projection::Null;
        }
        if gnorm <= tol && problem.distance_to_manifold(&x) <= tol {
            return Projection::Limit(x);
        }
        if t > MAX_TIME {
            return Projection::Null;
        }

        for s in 1..7 {
            for i in 0..d {
                stage[i] = x[i] + dt * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
            }
            neg_grad(&stage, &mut k[s]);
        }
        let mut err: f64 = 0.0;
        for i in 0..d {
            x5[i] = x[i] + dt * (0..7).map(|j| B5[j] * k[j][i]).sum::<f64>();
            let x4 = x[i] + dt * (0..7).map(|j| B4[j] * k[j][i]).sum::<f64>();
            let scale = local_tol * (1.0 + x[i].abs().max(x5[i].abs()));
            err = err.max((x5[i] - x4).abs() / scale);
        }
        if !err.is_finite() {
            dt *= 0.1;
            continue;
        }
        if err <= 1.0 {
            t += dt;
            std::mem::swap(&mut x, &mut x5);
            // First-same-as-last: the last stage is the derivative at the new point.
            k.swap(0, 6);
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        dt *= factor;
    }
    Projection::Null
}

/// Φ(x): the closed form if the problem provides one, otherwise numerical
/// gradient flow with tolerance `tol`.
pub fn project<P: ManifoldProblem + ?Sized>(problem: &P, x: &[f64], tol: f64) -> Projection {
    match problem.closed_form_projection(x) {
        Some(Some(p)) => Projection::Limit(p),
        Some(None) => Projection::Null,
        None => gradient_flow_projection(problem, x, tol),
    }
}

fn fd_step(zeta: &[f64]) -> f64 {
    1e-4 * (1.0 + zeta.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn project_or_err<P: ManifoldProblem + ?Sized>(problem: &P, x: &[f64]) -> Result<DVector<f64>> {
    match gradient_flow_projection(problem, x, DEFAULT_TOL) {
        Projection::Limit(p) => Ok(DVector::from_vec(p)),
        Projection::Null => Err(crate::Error::Integration {
            time: 0.0,
            reason: "gradient flow did not converge while differentiating the projection".into(),
        }),
    }
}

/// ∂Φ(ζ) for ζ on the manifold, analytic when available, otherwise by central
/// differences of numerical gradient flow.
pub fn projection_jacobian<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
) -> Result<DMatrix<f64>> {
    require_on_manifold(problem, zeta)?;
    if let Some(j) = problem.projection_jacobian(zeta) {
        return Ok(j);
    }
    fd_jacobian(problem, zeta)
}

pub(crate) fn fd_jacobian<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
) -> Result<DMatrix<f64>> {
    let d = problem.dim();
    let eps = fd_step(zeta);
    let mut jac = DMatrix::zeros(d, d);
    let mut p = zeta.to_vec();
    for j in 0..d {
        p[j] = zeta[j] + eps;
        let plus = project_or_err(problem, &p)?;
        p[j] = zeta[j] - eps;
        let minus = project_or_err(problem, &p)?;
        p[j] = zeta[j];
        jac.set_column(j, &((plus - minus) / (2.0 * eps)));
    }
    Ok(jac)
}

/// ∂²Φ(ζ)[M] for ζ on the manifold and symmetric M.
///
/// Without a closed form, M is diagonalised and each eigen-direction u
/// contributes `μ (Φ(ζ+εu) − 2Φ(ζ) + Φ(ζ−εu)) / ε²`.
pub fn projection_second_derivative<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
    m: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    require_on_manifold(problem, zeta)?;
    crate::error::check_shape("m", problem.dim(), m.nrows())?;
    if let Some(v) = problem.projection_second(zeta, m) {
        return Ok(v);
    }
    fd_second(problem, zeta, m)
}

pub(crate) fn fd_second<P: ManifoldProblem + ?Sized>(
    problem: &P,
    zeta: &[f64],
    m: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let d = problem.dim();
    let eps = fd_step(zeta);
    let center = project_or_err(problem, zeta)?;
    let eig = m.clone().symmetric_eigen();
    let mut out = DVector::zeros(d);
    for (k, &mu) in eig.eigenvalues.iter().enumerate() {
        if mu == 0.0 {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        let shifted = |sign: f64| -> Vec<f64> {
            zeta.iter()
                .zip(u.iter())
                .map(|(z, ui)| z + sign * eps * ui)
                .collect()
        };
        let plus = project_or_err(problem, &shifted(1.0))?;
        let minus = project_or_err(problem, &shifted(-1.0))?;
        out += (plus - &center * 2.0 + minus) * (mu / (eps * eps));
    }
    Ok(out)
}
