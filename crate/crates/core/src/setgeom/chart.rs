use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, GeomError};

const TAU: f64 = 2.0 * PI;

/// Coordinate chart in which a set is normal.
///
/// Polar charts are two-dimensional and order their coordinates as
/// `(angle, radius)`. The angle lives on the half-open branch
/// `[branch_start, branch_start + 2π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Chart {
    Identity,
    Polar {
        center: [f64; 2],
        #[serde(default = "default_branch_start")]
        branch_start: f64,
    },
}

fn default_branch_start() -> f64 {
    -PI
}

impl Chart {
    pub fn polar_about_origin() -> Self {
        Chart::Polar {
            center: [0.0, 0.0],
            branch_start: -PI,
        }
    }

    pub fn check_dim(&self, p: usize) -> Result<(), GeomError> {
        match self {
            Chart::Identity => Ok(()),
            Chart::Polar { .. } if p == 2 => Ok(()),
            Chart::Polar { .. } => Err(GeomError::InvalidChart(format!(
                "polar charts need a 2-dimensional set, got {p}"
            ))),
        }
    }

    /// Cartesian point to chart coordinates.
    pub fn to_chart(&self, y: &[f64]) -> Result<Vec<f64>, GeomError> {
        match self {
            Chart::Identity => Ok(y.to_vec()),
            Chart::Polar { center, branch_start } => {
                if y.len() != 2 {
                    return Err(GeomError::DimensionMismatch {
                        expected: 2,
                        got: y.len(),
                    });
                }
                let dx = y[0] - center[0];
                let dy = y[1] - center[1];
                let radius = dx.hypot(dy);
                if radius <= 1e-14 {
                    return Err(GeomError::UndefinedAngle);
                }
                Ok(vec![wrap_angle(dy.atan2(dx), *branch_start), radius])
            }
        }
    }

    /// Chart coordinates to Cartesian point. Exact inverse of [`Chart::to_chart`]
    /// on the branch.
    pub fn from_chart(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Chart::Identity => v.to_vec(),
            Chart::Polar { center, .. } => {
                let (s, c) = v[0].sin_cos();
                vec![center[0] + v[1] * c, center[1] + v[1] * s]
            }
        }
    }

    /// Jacobian of [`Chart::from_chart`] with respect to the chart coordinates.
    pub fn from_chart_jacobian(&self, v: &[f64]) -> DMatrix<f64> {
        match self {
            Chart::Identity => DMatrix::identity(v.len(), v.len()),
            Chart::Polar { .. } => {
                let (s, c) = v[0].sin_cos();
                DMatrix::from_row_slice(2, 2, &[-v[1] * s, c, v[1] * c, s])
            }
        }
    }

    /// Box in chart coordinates covering the image of a Cartesian box.
    pub fn chart_bbox(&self, cartesian: &BoundingBox) -> BoundingBox {
        match self {
            Chart::Identity => cartesian.clone(),
            Chart::Polar { center, branch_start } => {
                let mut r_max: f64 = 0.0;
                for x in [cartesian.lo[0], cartesian.hi[0]] {
                    for y in [cartesian.lo[1], cartesian.hi[1]] {
                        r_max = r_max.max((x - center[0]).hypot(y - center[1]));
                    }
                }
                BoundingBox::new(vec![*branch_start, 0.0], vec![branch_start + TAU, r_max])
            }
        }
    }
}

fn wrap_angle(angle: f64, branch_start: f64) -> f64 {
    let mut a = (angle - branch_start).rem_euclid(TAU) + branch_start;
    // rem_euclid can round up to exactly TAU
    if a >= branch_start + TAU {
        a -= TAU;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polar_examples() {
        let c = Chart::polar_about_origin();
        assert_eq!(c.to_chart(&[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        let v = c.to_chart(&[0.0, -0.5]).unwrap();
        assert_abs_diff_eq!(v[0], -PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-15);
        assert_eq!(c.to_chart(&[0.0, 0.0]), Err(GeomError::UndefinedAngle));
    }

    #[test]
    fn branch_is_half_open() {
        let c = Chart::polar_about_origin();
        let v = c.to_chart(&[-1.0, 0.0]).unwrap();
        assert_eq!(v[0], -PI);
        let shifted = Chart::Polar {
            center: [0.0, 0.0],
            branch_start: 0.0,
        };
        let v = shifted.to_chart(&[0.0, -1.0]).unwrap();
        assert_abs_diff_eq!(v[0], 1.5 * PI, epsilon = 1e-15);
    }

    #[test]
    fn off_center_polar() {
        let c = Chart::Polar {
            center: [1.0, 2.0],
            branch_start: -PI,
        };
        let v = c.to_chart(&[1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(v[0], PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-15);
        let y = c.from_chart(&v);
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn polar_jacobian_matches_differences() {
        let c = Chart::polar_about_origin();
        let v = [0.7, 1.3];
        let j = c.from_chart_jacobian(&v);
        for col in 0..2 {
            let h = 1e-6;
            let mut vp = v;
            vp[col] += h;
            let mut vm = v;
            vm[col] -= h;
            let (yp, ym) = (c.from_chart(&vp), c.from_chart(&vm));
            for row in 0..2 {
                assert_abs_diff_eq!(j[(row, col)], (yp[row] - ym[row]) / (2.0 * h), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn polar_requires_planar_sets() {
        let c = Chart::polar_about_origin();
        assert!(c.check_dim(2).is_ok());
        assert!(c.check_dim(3).is_err());
        assert!(Chart::Identity.check_dim(3).is_ok());
    }
}
