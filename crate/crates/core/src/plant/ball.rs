use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ConstraintSet, Dynamics, PlantError, PlantModel};
use crate::setgeom::{two_ellipsoid_set, RVariant};

/// Gravitational acceleration, m/s².
pub const GRAVITY: f64 = 9.81;

/// Rolling-ball factor for a solid sphere.
const ROLL: f64 = 5.0 / 7.0;

/// Bound on each plate angular acceleration.
pub const INPUT_LIMIT: f64 = 0.1;

/// Named view of the 8-dimensional ball-on-plate state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BallOnPlateState {
    pub x1: f64,
    pub x1_dot: f64,
    pub x2: f64,
    pub x2_dot: f64,
    pub phi1: f64,
    pub phi1_dot: f64,
    pub phi2: f64,
    pub phi2_dot: f64,
}

impl BallOnPlateState {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.x1,
            self.x1_dot,
            self.x2,
            self.x2_dot,
            self.phi1,
            self.phi1_dot,
            self.phi2,
            self.phi2_dot,
        ])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            x1: v[0],
            x1_dot: v[1],
            x2: v[2],
            x2_dot: v[3],
            phi1: v[4],
            phi1_dot: v[5],
            phi2: v[6],
            phi2_dot: v[7],
        }
    }
}

/// Ball rolling on a two-axis tilting plate, forward-Euler discretized.
/// Inputs are the plate angular accelerations, the output is the ball position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallOnPlate {
    pub ts: f64,
    pub gravity: f64,
}

impl BallOnPlate {
    pub fn new(ts: f64) -> Result<Self, PlantError> {
        if !(ts > 0.0) || !ts.is_finite() {
            return Err(PlantError::InvalidSamplingTime(ts));
        }
        Ok(Self { ts, gravity: GRAVITY })
    }

    /// Continuous-time accelerations of the ball.
    fn ball_accel(&self, s: &BallOnPlateState) -> (f64, f64) {
        let cross = s.phi1_dot * s.phi2_dot;
        (
            ROLL * (s.x1 * s.phi1_dot.powi(2) + s.x2 * cross + self.gravity * s.phi1.sin()),
            ROLL * (s.x2 * s.phi2_dot.powi(2) + s.x1 * cross + self.gravity * s.phi2.sin()),
        )
    }
}

impl Dynamics for BallOnPlate {
    fn name(&self) -> &str {
        "ball_on_plate"
    }
    fn state_dim(&self) -> usize {
        8
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        2
    }

    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let s = BallOnPlateState::from_slice(x.as_slice());
        let (a1, a2) = self.ball_accel(&s);
        let rate = [s.x1_dot, a1, s.x2_dot, a2, s.phi1_dot, u[0], s.phi2_dot, u[1]];
        DVector::from_fn(8, |i, _| x[i] + self.ts * rate[i])
    }

    fn output(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0], x[2]])
    }

    fn transition_jacobians(&self, x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = BallOnPlateState::from_slice(x.as_slice());
        let ts = self.ts;
        let mut a = DMatrix::identity(8, 8);
        a[(0, 1)] = ts;
        a[(2, 3)] = ts;
        a[(4, 5)] = ts;
        a[(6, 7)] = ts;
        // row 1: x1_dot += ts * 5/7 (x1 w1² + x2 w1 w2 + g sin phi1)
        let k = ts * ROLL;
        a[(1, 0)] += k * s.phi1_dot.powi(2);
        a[(1, 2)] += k * s.phi1_dot * s.phi2_dot;
        a[(1, 4)] += k * self.gravity * s.phi1.cos();
        a[(1, 5)] += k * (2.0 * s.x1 * s.phi1_dot + s.x2 * s.phi2_dot);
        a[(1, 7)] += k * s.x2 * s.phi1_dot;
        // row 3: x2_dot += ts * 5/7 (x2 w2² + x1 w1 w2 + g sin phi2)
        a[(3, 2)] += k * s.phi2_dot.powi(2);
        a[(3, 0)] += k * s.phi1_dot * s.phi2_dot;
        a[(3, 6)] += k * self.gravity * s.phi2.cos();
        a[(3, 7)] += k * (2.0 * s.x2 * s.phi2_dot + s.x1 * s.phi1_dot);
        a[(3, 5)] += k * s.x1 * s.phi2_dot;
        let mut b = DMatrix::zeros(8, 2);
        b[(5, 0)] = ts;
        b[(7, 1)] = ts;
        (a, b)
    }

    fn output_jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut c = DMatrix::zeros(2, 8);
        c[(0, 0)] = 1.0;
        c[(1, 2)] = 1.0;
        (c, DMatrix::zeros(2, 2))
    }

    fn analytic_steady_state(&self, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let mut x = DVector::zeros(8);
        x[0] = y[0];
        x[2] = y[1];
        Some((x, DVector::zeros(2)))
    }

    fn analytic_steady_jacobians(&self, _y: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let mut gx = DMatrix::zeros(8, 2);
        gx[(0, 0)] = 1.0;
        gx[(2, 1)] = 1.0;
        Some((gx, DMatrix::zeros(2, 2)))
    }
}

/// Ball-on-plate benchmark: `|u| <= 0.1` componentwise and the ball confined
/// to the union of two crossing ellipsoids. Replace the output region with
/// [`PlantModel::with_output_set`].
pub fn build_ball_on_plate(ts: f64) -> Result<PlantModel, PlantError> {
    let dynamics = BallOnPlate::new(ts)?;
    let constraints = ConstraintSet::new(
        vec![-INPUT_LIMIT; 2],
        vec![INPUT_LIMIT; 2],
        two_ellipsoid_set(RVariant::Smooth),
        1e-3,
    )?;
    PlantModel::new(Arc::new(dynamics), constraints)
}
