//! Smooth nonlinear programs and an SQP solver.
//!
//! Problems have the form
//!
//! ```text
//! min f(z)  s.t.  c_eq(z) = 0,  c_in(z) >= 0,  lo <= z <= hi
//! ```

mod qp;
mod sqp;

pub use sqp::solve;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{fd_gradient, fd_jacobian, inf_norm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NlpError {
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("starting point is not finite")]
    NonFiniteStart,
    #[error("problem evaluation failed: {0}")]
    Evaluation(String),
}

/// Function values at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
}

impl Evaluation {
    pub fn is_finite(&self) -> bool {
        self.cost.is_finite() && self.eq.iter().chain(self.ineq.iter()).all(|v| v.is_finite())
    }

    /// `max(|c_eq|∞, max(-c_in))`, clipped at zero.
    pub fn violation(&self) -> f64 {
        let eq = inf_norm(&self.eq);
        let ineq = self.ineq.iter().fold(0.0f64, |m, v| m.max(-v));
        eq.max(ineq).max(0.0)
    }

    /// ℓ1 infeasibility used by the merit function.
    pub fn l1_violation(&self) -> f64 {
        self.eq.iter().map(|v| v.abs()).sum::<f64>() + self.ineq.iter().map(|v| (-v).max(0.0)).sum::<f64>()
    }
}

/// First derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub grad: DVector<f64>,
    pub eq_jac: DMatrix<f64>,
    pub ineq_jac: DMatrix<f64>,
}

pub trait NlpProblem {
    fn dim(&self) -> usize;

    /// Variable bounds; infinite entries are unbounded.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);

    fn evaluate(&self, z: &DVector<f64>) -> Result<Evaluation, NlpError>;

    /// Analytic derivatives where available. Defaults to central differences.
    fn differentiate(&self, z: &DVector<f64>) -> Result<Derivatives, NlpError> {
        finite_difference_derivatives(self, z, 1e-6)
    }

    /// Initial curvature estimate for the quasi-Newton matrix.
    fn hessian_guess(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Central-difference derivatives of any problem.
pub fn finite_difference_derivatives<P: NlpProblem + ?Sized>(
    problem: &P,
    z: &DVector<f64>,
    h: f64,
) -> Result<Derivatives, NlpError> {
    let base = problem.evaluate(z)?;
    // evaluation failures inside the stencil surface as NaN entries
    let eval = |v: &DVector<f64>| problem.evaluate(v).ok();
    let grad = fd_gradient(|v| eval(v).map_or(f64::NAN, |e| e.cost), z, h);
    let eq_jac = fd_jacobian(
        |v| eval(v).map_or_else(|| DVector::from_element(base.eq.len(), f64::NAN), |e| e.eq),
        z,
        h,
    );
    let ineq_jac = fd_jacobian(
        |v| eval(v).map_or_else(|| DVector::from_element(base.ineq.len(), f64::NAN), |e| e.ineq),
        z,
        h,
    );
    let d = Derivatives { grad, eq_jac, ineq_jac };
    if d.grad
        .iter()
        .chain(d.eq_jac.iter())
        .chain(d.ineq_jac.iter())
        .any(|v| !v.is_finite())
    {
        return Err(NlpError::Evaluation("finite-difference stencil left the domain".into()));
    }
    Ok(d)
}

/// Largest relative mismatch `|a - fd| / max(1, |fd|)` between a problem's
/// derivatives and central differences of its values.
pub fn check_gradients<P: NlpProblem + ?Sized>(problem: &P, z: &DVector<f64>, h: f64) -> Result<f64, NlpError> {
    let analytic = problem.differentiate(z)?;
    let fd = finite_difference_derivatives(problem, z, h)?;
    let pairs = analytic
        .grad
        .iter()
        .zip(fd.grad.iter())
        .chain(analytic.eq_jac.iter().zip(fd.eq_jac.iter()))
        .chain(analytic.ineq_jac.iter().zip(fd.ineq_jac.iter()));
    let mut worst: f64 = 0.0;
    for (a, f) in pairs {
        worst = worst.max((a - f).abs() / f.abs().max(1.0));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
    NumericalFailure,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NumericalFailure => "numerical_failure",
        }
    }
}

/// When the quasi-Newton matrix is rebuilt from the problem's guess.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BfgsReset {
    Never,
    #[default]
    OnLineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpOptions {
    /// Tolerance on the scaled KKT residual.
    pub tol: f64,
    /// Tolerance on constraint violation.
    pub feas_tol: f64,
    pub max_iter: usize,
    pub max_line_search: usize,
    pub bfgs_reset: BfgsReset,
    pub second_order_correction: bool,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            feas_tol: 1e-8,
            max_iter: 200,
            max_line_search: 40,
            bfgs_reset: BfgsReset::default(),
            second_order_correction: true,
        }
    }
}

/// Merit values around one accepted step, at a fixed penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeritRecord {
    pub iteration: usize,
    pub penalty: f64,
    pub before: f64,
    pub after: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct SqpSolution {
    pub z: DVector<f64>,
    pub cost: f64,
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub kkt: f64,
    pub violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub merit_history: Vec<MeritRecord>,
}

/// Components of the first-order optimality residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    /// Projected stationarity, scaled by `max(1, |∇f|∞)`.
    pub stationarity: f64,
    pub complementarity: f64,
    /// Magnitude of wrong-signed inequality multipliers.
    pub dual_sign: f64,
}

impl KktResidual {
    pub fn total(&self) -> f64 {
        self.stationarity.max(self.complementarity).max(self.dual_sign)
    }
}

/// Multipliers follow `∇f = J_eqᵀ λ_eq + J_inᵀ λ_in + (bound terms)` with
/// `λ_in >= 0`. Components of the Lagrangian gradient that point out of an
/// active bound are absorbed by that bound.
pub fn kkt_residual(
    z: &DVector<f64>,
    bounds: (&DVector<f64>, &DVector<f64>),
    eval: &Evaluation,
    deriv: &Derivatives,
    eq_multipliers: &DVector<f64>,
    ineq_multipliers: &DVector<f64>,
) -> KktResidual {
    let (lo, hi) = bounds;
    let r = &deriv.grad - deriv.eq_jac.transpose() * eq_multipliers - deriv.ineq_jac.transpose() * ineq_multipliers;
    let mut stat: f64 = 0.0;
    for i in 0..z.len() {
        let tol = 1e-9 * (1.0 + z[i].abs());
        let at_lo = lo[i].is_finite() && z[i] - lo[i] <= tol;
        let at_hi = hi[i].is_finite() && hi[i] - z[i] <= tol;
        let ri = match (at_lo, at_hi) {
            (true, true) => 0.0,
            (true, false) => r[i].min(0.0),
            (false, true) => r[i].max(0.0),
            (false, false) => r[i],
        };
        stat = stat.max(ri.abs());
    }
    let scale = inf_norm(&deriv.grad).max(1.0);
    let complementarity = ineq_multipliers
        .iter()
        .zip(eval.ineq.iter())
        .fold(0.0f64, |m, (l, c)| m.max((l * c).abs()));
    let dual_sign = ineq_multipliers.iter().fold(0.0f64, |m, l| m.max(-l));
    KktResidual {
        stationarity: stat / scale,
        complementarity,
        dual_sign,
    }
}
