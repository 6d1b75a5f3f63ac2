//! Discrete-time plant models `x⁺ = f(x, u)`, `y = h(x, u)` with their
//! constraint sets and steady-state maps.

mod ball;

pub use ball::{build_ball_on_plate, BallOnPlate, BallOnPlateState, GRAVITY, INPUT_LIMIT};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numeric::{all_finite, fd_jacobian, inf_norm};
use crate::setgeom::ImplicitSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by the {0} map")]
    NonFinite(&'static str),
    #[error("no steady state found for y = {y:?} (residual {residual:e})")]
    NoSteadyState { y: Vec<f64>, residual: f64 },
    #[error("invalid constraint set: {0}")]
    InvalidConstraints(String),
    #[error("sampling time must be positive, got {0}")]
    InvalidSamplingTime(f64),
}

/// Model equations. Implementors supply the maps; Jacobians default to
/// central differences and the steady-state map defaults to a Newton solve.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `(∂f/∂x, ∂f/∂u)`.
    fn transition_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            fd_jacobian(|xx| self.transition(xx, u), x, 1e-7),
            fd_jacobian(|uu| self.transition(x, uu), u, 1e-7),
        )
    }

    /// `(∂h/∂x, ∂h/∂u)`.
    fn output_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            fd_jacobian(|xx| self.output(xx, u), x, 1e-7),
            fd_jacobian(|uu| self.output(x, uu), u, 1e-7),
        )
    }

    /// Closed-form `(g_x(y), g_u(y))`, when known.
    fn analytic_steady_state(&self, _y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        None
    }

    /// Closed-form `(∂g_x/∂y, ∂g_u/∂y)`, when known.
    fn analytic_steady_jacobians(&self, _y: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// Input box, admissible output region and the interiority margin.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
    pub output_set: ImplicitSet,
    /// Radius of the tightening ball that defines the restricted set.
    pub epsilon: f64,
    /// Steady outputs must satisfy `psi(y) >= steady_margin`.
    pub steady_margin: f64,
}

impl ConstraintSet {
    pub fn new(
        input_lo: Vec<f64>,
        input_hi: Vec<f64>,
        output_set: ImplicitSet,
        epsilon: f64,
    ) -> Result<Self, PlantError> {
        if input_lo.len() != input_hi.len() {
            return Err(PlantError::InvalidConstraints("input bound lengths differ".into()));
        }
        if input_lo.iter().zip(&input_hi).any(|(l, h)| !(l <= h)) {
            return Err(PlantError::InvalidConstraints("empty input box".into()));
        }
        if !(epsilon > 0.0) {
            return Err(PlantError::InvalidConstraints(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            input_lo,
            input_hi,
            output_set,
            epsilon,
            steady_margin: 0.0,
        })
    }

    pub fn with_steady_margin(mut self, margin: f64) -> Self {
        self.steady_margin = margin;
        self
    }

    /// Margin `epsilon * L`, with `L` the largest gradient norm of psi over a
    /// grid of the set's bounding box. A steady output with
    /// `psi >= epsilon * L` keeps its epsilon-ball inside the set.
    pub fn lipschitz_margin(set: &ImplicitSet, epsilon: f64, per_axis: usize) -> f64 {
        let bbox = set.bbox();
        let dim = set.dim();
        let per_axis = per_axis.max(2);
        let mut lip: f64 = 0.0;
        let mut y = vec![0.0; dim];
        for flat in 0..per_axis.pow(dim as u32) {
            let mut rem = flat;
            for (axis, v) in y.iter_mut().enumerate() {
                let i = rem % per_axis;
                rem /= per_axis;
                let (l, h) = bbox.interval(axis);
                *v = l + (h - l) * i as f64 / (per_axis - 1) as f64;
            }
            let g = set.psi_gradient(&y);
            lip = lip.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        epsilon * lip
    }

    pub fn input_admissible(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.iter()
            .zip(self.input_lo.iter().zip(&self.input_hi))
            .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }
}

/// Dynamics together with their constraints.
#[derive(Clone)]
pub struct PlantModel {
    dynamics: Arc<dyn Dynamics>,
    constraints: ConstraintSet,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("name", &self.dynamics.name())
            .field("n", &self.state_dim())
            .field("m", &self.input_dim())
            .field("p", &self.output_dim())
            .field("constraints", &self.constraints)
            .finish()
    }
}

impl PlantModel {
    pub fn new(dynamics: Arc<dyn Dynamics>, constraints: ConstraintSet) -> Result<Self, PlantError> {
        if constraints.input_lo.len() != dynamics.input_dim() {
            return Err(PlantError::DimensionMismatch {
                what: "input box",
                expected: dynamics.input_dim(),
                got: constraints.input_lo.len(),
            });
        }
        if constraints.output_set.dim() != dynamics.output_dim() {
            return Err(PlantError::DimensionMismatch {
                what: "output set",
                expected: dynamics.output_dim(),
                got: constraints.output_set.dim(),
            });
        }
        Ok(Self { dynamics, constraints })
    }

    pub fn name(&self) -> &str {
        self.dynamics.name()
    }
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }
    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }
    pub fn output_dim(&self) -> usize {
        self.dynamics.output_dim()
    }
    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }
    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn with_output_set(mut self, set: ImplicitSet) -> Result<Self, PlantError> {
        if set.dim() != self.output_dim() {
            return Err(PlantError::DimensionMismatch {
                what: "output set",
                expected: self.output_dim(),
                got: set.dim(),
            });
        }
        self.constraints.output_set = set;
        Ok(self)
    }

    pub fn with_constraints(mut self, constraints: ConstraintSet) -> Result<Self, PlantError> {
        let dynamics = self.dynamics.clone();
        self = Self::new(dynamics, constraints)?;
        Ok(self)
    }

    fn check(&self, what: &'static str, expected: usize, v: &DVector<f64>) -> Result<(), PlantError> {
        if v.len() != expected {
            return Err(PlantError::DimensionMismatch {
                what,
                expected,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// One transition. No constraint checking happens here.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        self.check("state", self.state_dim(), x)?;
        self.check("input", self.input_dim(), u)?;
        let next = self.dynamics.transition(x, u);
        if !all_finite(&next) {
            return Err(PlantError::NonFinite("transition"));
        }
        Ok(next)
    }

    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        self.check("state", self.state_dim(), x)?;
        self.check("input", self.input_dim(), u)?;
        let y = self.dynamics.output(x, u);
        if !all_finite(&y) {
            return Err(PlantError::NonFinite("output"));
        }
        Ok(y)
    }

    /// Steady state and input `(g_x(y), g_u(y))` for output `y`.
    ///
    /// Uses the model's closed form when available; otherwise solves
    /// `f(x, u) = x, h(x, u) = y` by damped minimum-norm Newton from the origin.
    pub fn steady_state(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), PlantError> {
        self.check("output", self.output_dim(), y)?;
        if let Some(pair) = self.dynamics.analytic_steady_state(y) {
            return Ok(pair);
        }
        self.newton_steady_state(y)
    }

    /// `(∂g_x/∂y, ∂g_u/∂y)`.
    pub fn steady_jacobians(&self, y: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), PlantError> {
        self.check("output", self.output_dim(), y)?;
        if let Some(pair) = self.dynamics.analytic_steady_jacobians(y) {
            return Ok(pair);
        }
        let (x, u) = self.newton_steady_state(y)?;
        let (n, m, p) = (self.state_dim(), self.input_dim(), self.output_dim());
        let jac = self.steady_residual_jacobian(&x, &u);
        // implicit differentiation of F(w) = [f - x; h - y] at the min-norm solution
        let mut rhs = DMatrix::zeros(n + p, p);
        for i in 0..p {
            rhs[(n + i, i)] = 1.0;
        }
        let sens = jac
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|_| PlantError::NoSteadyState {
                y: y.as_slice().to_vec(),
                residual: f64::NAN,
            })?;
        Ok((sens.rows(0, n).into_owned(), sens.rows(n, m).into_owned()))
    }

    fn steady_residual(&self, x: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n = self.state_dim();
        let p = self.output_dim();
        let mut r = DVector::zeros(n + p);
        r.rows_mut(0, n).copy_from(&(self.dynamics.transition(x, u) - x));
        r.rows_mut(n, p).copy_from(&(self.dynamics.output(x, u) - y));
        r
    }

    fn steady_residual_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (n, m, p) = (self.state_dim(), self.input_dim(), self.output_dim());
        let (a, b) = self.dynamics.transition_jacobians(x, u);
        let (c, d) = self.dynamics.output_jacobians(x, u);
        let mut j = DMatrix::zeros(n + p, n + m);
        j.view_mut((0, 0), (n, n)).copy_from(&(a - DMatrix::identity(n, n)));
        j.view_mut((0, n), (n, m)).copy_from(&b);
        j.view_mut((n, 0), (p, n)).copy_from(&c);
        j.view_mut((n, n), (p, m)).copy_from(&d);
        j
    }

    fn newton_steady_state(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), PlantError> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut x = DVector::zeros(n);
        let mut u = DVector::zeros(m);
        let mut r = self.steady_residual(&x, &u, y);
        let mut norm = inf_norm(&r);
        for _ in 0..100 {
            if norm <= 1e-10 {
                return Ok((x, u));
            }
            let jac = self.steady_residual_jacobian(&x, &u);
            let Ok(dw) = jac.svd(true, true).solve(&(-&r), 1e-14) else {
                break;
            };
            let mut alpha = 1.0;
            let mut improved = false;
            while alpha > 1e-8 {
                let xt = &x + dw.rows(0, n) * alpha;
                let ut = &u + dw.rows(n, m) * alpha;
                let rt = self.steady_residual(&xt, &ut, y);
                let nt = inf_norm(&rt);
                if nt.is_finite() && nt < norm {
                    x = xt;
                    u = ut;
                    r = rt;
                    norm = nt;
                    improved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if norm <= 1e-10 {
            return Ok((x, u));
        }
        Err(PlantError::NoSteadyState {
            y: y.as_slice().to_vec(),
            residual: norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setgeom::{Ellipsoid, RVariant};

    /// Damped pendulum on a cart-less pivot: y = angle, steady input holds it.
    struct Pendulum;

    impl Dynamics for Pendulum {
        fn name(&self) -> &str {
            "pendulum"
        }
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            let dt = 0.05;
            DVector::from_vec(vec![
                x[0] + dt * x[1],
                x[1] + dt * (-9.81 * x[0].sin() - 0.5 * x[1] + u[0]),
            ])
        }
        fn output(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0]])
        }
    }

    fn pendulum_model() -> PlantModel {
        let set = Ellipsoid::new(vec![0.0], DMatrix::identity(1, 1)).unwrap().into_set();
        let cons = ConstraintSet::new(vec![-20.0], vec![20.0], set, 1e-3).unwrap();
        PlantModel::new(Arc::new(Pendulum), cons).unwrap()
    }

    #[test]
    fn newton_steady_state_is_a_fixed_point() {
        let model = pendulum_model();
        for y in [-0.8, -0.1, 0.0, 0.4, 0.9] {
            let yv = DVector::from_vec(vec![y]);
            let (x, u) = model.steady_state(&yv).unwrap();
            let next = model.step(&x, &u).unwrap();
            assert!((next - &x).amax() <= 1e-10);
            assert!((model.output(&x, &u).unwrap()[0] - y).abs() <= 1e-10);
            assert!((u[0] - 9.81 * y.sin()).abs() <= 1e-8);
        }
    }

    #[test]
    fn newton_steady_jacobian_matches_differences() {
        let model = pendulum_model();
        let y = DVector::from_vec(vec![0.3]);
        let (gx, gu) = model.steady_jacobians(&y).unwrap();
        let h = 1e-6;
        let (xp, up) = model.steady_state(&DVector::from_vec(vec![0.3 + h])).unwrap();
        let (xm, um) = model.steady_state(&DVector::from_vec(vec![0.3 - h])).unwrap();
        assert!(((xp - xm) / (2.0 * h) - gx.column(0)).amax() < 1e-6);
        assert!(((up - um) / (2.0 * h) - gu.column(0)).amax() < 1e-5);
    }

    #[test]
    fn unreachable_output_has_no_steady_state() {
        struct Saturated;
        impl Dynamics for Saturated {
            fn name(&self) -> &str {
                "saturated"
            }
            fn state_dim(&self) -> usize {
                1
            }
            fn input_dim(&self) -> usize {
                1
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![0.5 * x[0] + u[0].tanh()])
            }
            fn output(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![x[0].atan()])
            }
        }
        let set = Ellipsoid::new(vec![0.0], DMatrix::identity(1, 1) * 0.01)
            .unwrap()
            .into_set();
        let cons = ConstraintSet::new(vec![-1.0], vec![1.0], set, 1e-3).unwrap();
        let model = PlantModel::new(Arc::new(Saturated), cons).unwrap();
        // atan never reaches 2
        let err = model.steady_state(&DVector::from_vec(vec![2.0])).unwrap_err();
        assert!(matches!(err, PlantError::NoSteadyState { .. }));
    }

    #[test]
    fn constraint_validation() {
        let set = crate::setgeom::two_ellipsoid_set(RVariant::Smooth);
        assert!(ConstraintSet::new(vec![0.1], vec![-0.1], set.clone(), 1e-3).is_err());
        assert!(ConstraintSet::new(vec![-0.1], vec![0.1], set.clone(), 0.0).is_err());
        assert!(ConstraintSet::new(vec![-0.1], vec![0.1, 0.2], set.clone(), 1e-3).is_err());
        let cons = ConstraintSet::new(vec![-0.1], vec![0.1], set, 1e-3).unwrap();
        assert!(PlantModel::new(Arc::new(Pendulum), cons).is_err());
    }

    #[test]
    fn lipschitz_margin_scales_with_epsilon() {
        let set = Ellipsoid::new(vec![0.0, 0.0], DMatrix::identity(2, 2))
            .unwrap()
            .into_set();
        // |grad psi| = 2|y| peaks at the bbox corner, radius sqrt(2)
        let m = ConstraintSet::lipschitz_margin(&set, 1e-3, 11);
        assert!((m - 1e-3 * 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let model = pendulum_model();
        let x = DVector::zeros(3);
        let u = DVector::zeros(1);
        assert!(matches!(
            model.step(&x, &u),
            Err(PlantError::DimensionMismatch { what: "state", .. })
        ));
        assert!(model.output(&DVector::zeros(2), &DVector::zeros(2)).is_err());
    }
}
