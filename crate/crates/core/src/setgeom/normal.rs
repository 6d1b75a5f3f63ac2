use serde::{Deserialize, Serialize};

use super::{BoundingBox, Chart, GeomError, ImplicitSet};

/// Admissibility slack for points produced from fiber extremes.
pub const FIBER_FEASIBILITY_TOL: f64 = 1e-8;

const UNIT_INTERVAL_SLACK: f64 = 1e-12;

/// Resolution of the numeric envelope computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiberOptions {
    /// Samples of the dense scan along the fiber domain.
    pub samples: usize,
    /// Bracket width at which bisection stops.
    pub bisection_tol: f64,
}

impl Default for FiberOptions {
    fn default() -> Self {
        Self {
            samples: 512,
            bisection_tol: 1e-10,
        }
    }
}

/// Whether a fiber extreme sits on the set boundary (`psi = 0`) or on the edge
/// of the chart's fiber domain (e.g. radius zero of a polar chart).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremeKind {
    Boundary,
    DomainBound,
}

/// Lower and upper envelope values above one basis point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberExtremes {
    pub lo: f64,
    pub hi: f64,
    pub lo_kind: ExtremeKind,
    pub hi_kind: ExtremeKind,
}

impl FiberExtremes {
    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationReport {
    pub fibers_checked: usize,
    pub samples_per_fiber: usize,
    pub min_fiber_length: f64,
}

/// A set that is normal with respect to a chart: the chart coordinates split
/// into `p - 1` basis coordinates, whose admissible region is the convex box
/// `basis_region`, and one fiber coordinate along which every slice of the set
/// is a single interval.
///
/// Chart vectors keep the chart's own coordinate order; `basis_dims` and
/// `fiber_dim` say which slot is which. Transformed references `theta` use the
/// same layout, with the fiber slot holding the normalized coordinate in
/// `[0, 1]`.
#[derive(Debug, Clone)]
pub struct NormalSetChart {
    set: ImplicitSet,
    chart: Chart,
    basis_dims: Vec<usize>,
    fiber_dim: usize,
    basis_region: BoundingBox,
    fiber_domain: (f64, f64),
    options: FiberOptions,
}

impl NormalSetChart {
    pub fn new(
        set: ImplicitSet,
        chart: Chart,
        basis_dims: Vec<usize>,
        fiber_dim: usize,
        basis_region: BoundingBox,
    ) -> Result<Self, GeomError> {
        let p = set.dim();
        chart.check_dim(p)?;
        if basis_dims.len() + 1 != p {
            return Err(GeomError::InvalidChart(format!(
                "{} basis coordinates given for a {p}-dimensional set",
                basis_dims.len()
            )));
        }
        let mut seen = vec![false; p];
        for &d in basis_dims.iter().chain(std::iter::once(&fiber_dim)) {
            if d >= p || seen[d] {
                return Err(GeomError::InvalidChart(format!(
                    "basis/fiber indices must be a permutation of 0..{p}"
                )));
            }
            seen[d] = true;
        }
        if basis_region.dim() != p - 1 {
            return Err(GeomError::DimensionMismatch {
                expected: p - 1,
                got: basis_region.dim(),
            });
        }
        if basis_region.is_empty() {
            return Err(GeomError::InvalidChart("empty basis region".into()));
        }
        let fiber_domain = chart.chart_bbox(set.bbox()).interval(fiber_dim);
        Ok(Self {
            set,
            chart,
            basis_dims,
            fiber_dim,
            basis_region,
            fiber_domain,
            options: FiberOptions::default(),
        })
    }

    /// Star-shaped planar set in polar coordinates about `center`: basis is
    /// the angle, fiber the radius.
    pub fn star_shaped(set: ImplicitSet, center: [f64; 2], branch_start: f64) -> Result<Self, GeomError> {
        let region = BoundingBox::new(vec![branch_start], vec![branch_start + 2.0 * std::f64::consts::PI]);
        Self::new(set, Chart::Polar { center, branch_start }, vec![0], 1, region)
    }

    pub fn with_options(mut self, options: FiberOptions) -> Self {
        self.options = options;
        self
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }
    pub fn set(&self) -> &ImplicitSet {
        &self.set
    }
    pub fn chart(&self) -> &Chart {
        &self.chart
    }
    pub fn basis_dims(&self) -> &[usize] {
        &self.basis_dims
    }
    pub fn fiber_dim(&self) -> usize {
        self.fiber_dim
    }
    pub fn basis_region(&self) -> &BoundingBox {
        &self.basis_region
    }
    pub fn fiber_domain(&self) -> (f64, f64) {
        self.fiber_domain
    }
    pub fn options(&self) -> FiberOptions {
        self.options
    }

    /// Basis part `v|_c` of a chart vector.
    pub fn basis_of(&self, v: &[f64]) -> Vec<f64> {
        self.basis_dims.iter().map(|&d| v[d]).collect()
    }

    /// Chart vector `[q; lambda]`.
    pub fn compose(&self, q: &[f64], lambda: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for (&d, &value) in self.basis_dims.iter().zip(q) {
            v[d] = value;
        }
        v[self.fiber_dim] = lambda;
        v
    }

    /// psi evaluated at chart coordinates.
    pub fn psi_chart(&self, v: &[f64]) -> f64 {
        self.set.psi(&self.chart.from_chart(v))
    }

    /// psi and its gradient with respect to the chart coordinates.
    pub fn psi_chart_gradient(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let y = self.chart.from_chart(v);
        let (value, grad_y) = self.set.value_and_gradient(&y);
        let jac = self.chart.from_chart_jacobian(v);
        let grad = (0..v.len())
            .map(|j| (0..y.len()).map(|i| grad_y[i] * jac[(i, j)]).sum())
            .collect();
        (value, grad)
    }

    fn check_basis_point(&self, q: &[f64]) -> Result<(), GeomError> {
        if q.len() != self.basis_dims.len() {
            return Err(GeomError::DimensionMismatch {
                expected: self.basis_dims.len(),
                got: q.len(),
            });
        }
        if !self.basis_region.contains(q, 1e-12) {
            return Err(GeomError::OutsideBasis { q: q.to_vec() });
        }
        Ok(())
    }

    fn check_chart_vector(&self, v: &[f64]) -> Result<(), GeomError> {
        if v.len() != self.dim() {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Envelope values `(f_lo(q), f_hi(q))`: the extreme admissible fiber
    /// coordinates above `q`.
    ///
    /// A dense scan of the fiber domain brackets the sign changes of
    /// `lambda -> psi([q; lambda])`; each bracket is bisected and finished
    /// with one secant step. More than one admissible run along the scan is a
    /// normality violation.
    pub fn fiber_extremes(&self, q: &[f64]) -> Result<FiberExtremes, GeomError> {
        self.check_basis_point(q)?;
        let (a, b) = self.fiber_domain;
        let n = self.options.samples.max(3);
        let mut v = self.compose(q, a);
        let lambda_at = |i: usize| a + (b - a) * i as f64 / (n - 1) as f64;

        let mut first = None;
        let mut last = None;
        let mut runs = 0;
        let mut prev_inside = false;
        for i in 0..n {
            v[self.fiber_dim] = lambda_at(i);
            let inside = self.set.psi(&self.chart.from_chart(&v)) >= 0.0;
            if inside {
                if !prev_inside {
                    runs += 1;
                }
                first.get_or_insert(i);
                last = Some(i);
            }
            prev_inside = inside;
        }
        let (Some(first), Some(last)) = (first, last) else {
            return Err(GeomError::InfeasibleFiber { q: q.to_vec() });
        };
        if runs > 1 {
            return Err(GeomError::NormalityViolation {
                q: q.to_vec(),
                intervals: runs,
            });
        }

        let (lo, lo_kind) = if first == 0 {
            (a, ExtremeKind::DomainBound)
        } else {
            (
                self.refine(q, lambda_at(first), lambda_at(first - 1)),
                ExtremeKind::Boundary,
            )
        };
        let (hi, hi_kind) = if last == n - 1 {
            (b, ExtremeKind::DomainBound)
        } else {
            (
                self.refine(q, lambda_at(last), lambda_at(last + 1)),
                ExtremeKind::Boundary,
            )
        };
        Ok(FiberExtremes {
            lo,
            hi,
            lo_kind,
            hi_kind,
        })
    }

    /// Locates the boundary between an admissible `inside` and an inadmissible
    /// `outside` fiber coordinate.
    fn refine(&self, q: &[f64], mut inside: f64, mut outside: f64) -> f64 {
        let psi = |lambda: f64| self.psi_chart(&self.compose(q, lambda));
        let mut psi_in = psi(inside);
        let mut psi_out = psi(outside);
        while (outside - inside).abs() > self.options.bisection_tol {
            let mid = 0.5 * (inside + outside);
            let pm = psi(mid);
            if pm >= 0.0 {
                inside = mid;
                psi_in = pm;
            } else {
                outside = mid;
                psi_out = pm;
            }
        }
        let denom = psi_in - psi_out;
        if denom > 0.0 {
            let secant = inside + psi_in * (outside - inside) / denom;
            let lies_between = (secant - inside) * (secant - outside) <= 0.0;
            if lies_between && psi(secant).abs() <= psi_in.abs() {
                return secant;
            }
        }
        inside
    }

    /// Derivatives of `(f_lo, f_hi)` with respect to the basis point, by
    /// implicit differentiation of `psi([q; f(q)]) = 0`. Extremes pinned to
    /// the fiber domain do not move.
    pub fn extremes_sensitivity(&self, q: &[f64], fe: &FiberExtremes) -> (Vec<f64>, Vec<f64>) {
        let side = |value: f64, kind: ExtremeKind| -> Vec<f64> {
            if kind == ExtremeKind::DomainBound {
                return vec![0.0; q.len()];
            }
            let (_, grad) = self.psi_chart_gradient(&self.compose(q, value));
            let dfiber = grad[self.fiber_dim];
            if dfiber.abs() < 1e-300 {
                return vec![0.0; q.len()];
            }
            self.basis_dims.iter().map(|&d| -grad[d] / dfiber).collect()
        };
        (side(fe.lo, fe.lo_kind), side(fe.hi, fe.hi_kind))
    }

    /// The convexifying homeomorphism: maps `theta` (basis part in the basis
    /// region, fiber part in `[0, 1]`) to chart coordinates of a set point.
    pub fn homeo_forward(&self, theta: &[f64]) -> Result<Vec<f64>, GeomError> {
        self.check_chart_vector(theta)?;
        let t = theta[self.fiber_dim];
        if !(-UNIT_INTERVAL_SLACK..=1.0 + UNIT_INTERVAL_SLACK).contains(&t) {
            return Err(GeomError::OutsideUnitInterval { value: t });
        }
        let q = self.basis_of(theta);
        let fe = self.fiber_extremes(&q)?;
        Ok(self.compose(&q, t * (fe.hi - fe.lo) + fe.lo))
    }

    /// Inverse homeomorphism for admissible chart points.
    pub fn homeo_inverse(&self, y: &[f64]) -> Result<Vec<f64>, GeomError> {
        self.check_chart_vector(y)?;
        let psi = self.psi_chart(y);
        if psi < -FIBER_FEASIBILITY_TOL {
            return Err(GeomError::OutsideSet { psi });
        }
        self.target_transform(y)
    }

    /// The inverse-homeomorphism formula without the membership requirement.
    /// Points beyond the envelopes get fiber coordinates outside `[0, 1]`;
    /// this is how targets outside the admissible set are expressed in the
    /// transformed space.
    pub fn target_transform(&self, y: &[f64]) -> Result<Vec<f64>, GeomError> {
        self.check_chart_vector(y)?;
        let q = self.basis_of(y);
        let fe = self.fiber_extremes(&q)?;
        let span = fe.hi - fe.lo;
        if span <= 1e-14 {
            return Err(GeomError::DegenerateFiber { q });
        }
        let mut theta = y.to_vec();
        theta[self.fiber_dim] = (y[self.fiber_dim] - fe.lo) / span;
        Ok(theta)
    }

    /// The homeomorphism with the envelopes replaced by free values
    /// `lambda_lo <= lambda_hi`.
    pub fn lambda_map(&self, theta: &[f64], lambda_lo: f64, lambda_hi: f64) -> Result<Vec<f64>, GeomError> {
        self.check_chart_vector(theta)?;
        if lambda_hi < lambda_lo {
            return Err(GeomError::InvertedLambda {
                lo: lambda_lo,
                hi: lambda_hi,
            });
        }
        let mut y = theta.to_vec();
        y[self.fiber_dim] = theta[self.fiber_dim] * (lambda_hi - lambda_lo) + lambda_lo;
        Ok(y)
    }

    /// `homeo_forward` followed by the chart's inverse.
    pub fn forward_cartesian(&self, theta: &[f64]) -> Result<Vec<f64>, GeomError> {
        Ok(self.chart.from_chart(&self.homeo_forward(theta)?))
    }

    /// Chart map followed by `homeo_inverse`.
    pub fn inverse_cartesian(&self, y: &[f64]) -> Result<Vec<f64>, GeomError> {
        self.homeo_inverse(&self.chart.to_chart(y)?)
    }

    /// Sampled normality certificate: on a grid of basis points every fiber
    /// must be a single non-empty interval at scan resolution
    /// `resolution * fiber length`.
    pub fn certify(&self, grid_per_axis: usize, resolution: f64) -> Result<CertificationReport, GeomError> {
        let samples = ((1.0 / resolution).ceil() as usize + 1).max(3);
        let scanner = self.clone().with_options(FiberOptions {
            samples,
            bisection_tol: self.options.bisection_tol,
        });
        let grid = grid_per_axis.max(2);
        let k = self.basis_dims.len();
        let mut q = vec![0.0; k];
        let mut checked = 0;
        let mut min_len = f64::INFINITY;
        for flat in 0..grid.pow(k as u32) {
            let mut rem = flat;
            for (axis, qa) in q.iter_mut().enumerate() {
                let i = rem % grid;
                rem /= grid;
                let (l, h) = self.basis_region.interval(axis);
                // the last polar grid point would repeat the first one
                *qa = l + (h - l) * i as f64 / grid as f64;
            }
            let fe = scanner.fiber_extremes(&q)?;
            min_len = min_len.min(fe.length());
            checked += 1;
        }
        Ok(CertificationReport {
            fibers_checked: checked,
            samples_per_fiber: samples,
            min_fiber_length: min_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setgeom::{r_union, two_ellipsoid_set, Ellipsoid, RVariant};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn unit_disk() -> NormalSetChart {
        let s = Ellipsoid::new(vec![0.0, 0.0], DMatrix::identity(2, 2))
            .unwrap()
            .into_set();
        NormalSetChart::star_shaped(s, [0.0, 0.0], -PI).unwrap()
    }

    fn benchmark() -> NormalSetChart {
        NormalSetChart::star_shaped(two_ellipsoid_set(RVariant::Smooth), [0.0, 0.0], -PI).unwrap()
    }

    #[test]
    fn unit_disk_fibers() {
        let ns = unit_disk();
        for q in [-3.0, -1.0, 0.0, 0.4, 2.9] {
            let fe = ns.fiber_extremes(&[q]).unwrap();
            assert_eq!(fe.lo, 0.0);
            assert_eq!(fe.lo_kind, ExtremeKind::DomainBound);
            assert_abs_diff_eq!(fe.hi, 1.0, epsilon = 1e-12);
            assert_eq!(fe.hi_kind, ExtremeKind::Boundary);
        }
    }

    #[test]
    fn single_ellipsoid_along_x() {
        let s = Ellipsoid::from_row_major(vec![0.0, 0.0], &[16.0, 0.0, 0.0, 0.5])
            .unwrap()
            .into_set();
        let ns = NormalSetChart::star_shaped(s, [0.0, 0.0], -PI).unwrap();
        let fe = ns.fiber_extremes(&[0.0]).unwrap();
        assert_eq!(fe.lo, 0.0);
        assert_abs_diff_eq!(fe.hi, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn benchmark_fiber_straight_up() {
        let fe = benchmark().fiber_extremes(&[PI / 2.0]).unwrap();
        assert_eq!(fe.lo, 0.0);
        assert_abs_diff_eq!(fe.hi, 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn basis_point_outside_region() {
        let ns = benchmark();
        assert!(matches!(ns.fiber_extremes(&[4.0]), Err(GeomError::OutsideBasis { .. })));
        assert!(matches!(
            ns.fiber_extremes(&[0.0, 1.0]),
            Err(GeomError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_fiber_is_infeasible() {
        // a disk that does not contain the chart center leaves most rays empty
        let s = Ellipsoid::new(vec![3.0, 0.0], DMatrix::identity(2, 2))
            .unwrap()
            .into_set();
        let ns = NormalSetChart::star_shaped(s, [0.0, 0.0], -PI).unwrap();
        assert!(matches!(
            ns.fiber_extremes(&[PI / 2.0]),
            Err(GeomError::InfeasibleFiber { .. })
        ));
        // along +x the fiber is [2, 4]
        let fe = ns.fiber_extremes(&[0.0]).unwrap();
        assert_abs_diff_eq!(fe.lo, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fe.hi, 4.0, epsilon = 1e-12);
        assert_eq!(fe.lo_kind, ExtremeKind::Boundary);
    }

    #[test]
    fn two_blobs_violate_normality() {
        let a = Ellipsoid::new(vec![1.0, 0.0], DMatrix::identity(2, 2) * 16.0)
            .unwrap()
            .into_set();
        let b = Ellipsoid::new(vec![3.0, 0.0], DMatrix::identity(2, 2) * 16.0)
            .unwrap()
            .into_set();
        let s = r_union(&a, &b, RVariant::Smooth).unwrap();
        let ns = NormalSetChart::star_shaped(s, [0.0, 0.0], -PI).unwrap();
        assert!(matches!(
            ns.fiber_extremes(&[0.0]),
            Err(GeomError::NormalityViolation { intervals: 2, .. })
        ));
        assert!(ns.certify(64, 1e-4).is_err());
    }

    #[test]
    fn envelope_endpoints() {
        let ns = benchmark();
        let q = 0.3;
        let fe = ns.fiber_extremes(&[q]).unwrap();
        assert_eq!(ns.homeo_forward(&[q, 0.0]).unwrap()[1], fe.lo);
        assert_abs_diff_eq!(ns.homeo_forward(&[q, 1.0]).unwrap()[1], fe.hi, epsilon = 1e-15);
        let mid = ns.homeo_forward(&[PI / 2.0, 0.5]).unwrap();
        assert_abs_diff_eq!(mid[1], 2f64.sqrt() / 2.0, epsilon = 1e-12);
        assert!(matches!(
            ns.homeo_forward(&[q, 1.5]),
            Err(GeomError::OutsideUnitInterval { .. })
        ));
    }

    #[test]
    fn inverse_checks_membership_and_degeneracy() {
        let ns = benchmark();
        assert!(matches!(
            ns.homeo_inverse(&[0.0, 1.0]),
            Err(GeomError::OutsideSet { .. })
        ));
        let theta = ns.homeo_inverse(&[0.0, 0.0]).unwrap();
        assert_eq!(theta[1], 0.0);
        // target outside the set keeps going past one
        let t = ns.target_transform(&[PI / 2.0, 2.0 * 2f64.sqrt()]).unwrap();
        assert_abs_diff_eq!(t[1], 2.0, epsilon = 1e-10);

        // a fiber domain squeezed to a point
        let line = ImplicitSet::from_fn(2, BoundingBox::new(vec![-1.0, 0.0], vec![1.0, 0.0]), |y| -y[1] * y[1]);
        let flat = NormalSetChart::new(
            line,
            Chart::Identity,
            vec![0],
            1,
            BoundingBox::new(vec![-1.0], vec![1.0]),
        )
        .unwrap();
        assert!(matches!(
            flat.homeo_inverse(&[0.0, 0.0]),
            Err(GeomError::DegenerateFiber { .. })
        ));
    }

    #[test]
    fn lambda_map_examples() {
        let ns = benchmark();
        assert_eq!(ns.lambda_map(&[0.1, 0.5], 0.0, 2.0).unwrap()[1], 1.0);
        let eps = 1e-9;
        assert_eq!(ns.lambda_map(&[0.1, 1.0], 0.3, 0.3 + eps).unwrap()[1], 0.3 + eps);
        assert!(ns.lambda_map(&[0.1, 1.0], 0.4, 0.3).is_err());
        let theta = [-0.6, 0.37];
        let fe = ns.fiber_extremes(&[theta[0]]).unwrap();
        let a = ns.lambda_map(&theta, fe.lo, fe.hi).unwrap();
        let b = ns.homeo_forward(&theta).unwrap();
        assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-15);
    }

    #[test]
    fn sensitivity_matches_differences() {
        let ns = benchmark();
        for q in [-2.5, -0.6, 0.2, 1.0, 2.2] {
            let fe = ns.fiber_extremes(&[q]).unwrap();
            let (dlo, dhi) = ns.extremes_sensitivity(&[q], &fe);
            let h = 1e-6;
            let fp = ns.fiber_extremes(&[q + h]).unwrap().hi;
            let fm = ns.fiber_extremes(&[q - h]).unwrap().hi;
            assert_eq!(dlo[0], 0.0);
            assert_abs_diff_eq!(dhi[0], (fp - fm) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn benchmark_set_certifies() {
        let report = benchmark().certify(256, 1e-4).unwrap();
        assert_eq!(report.fibers_checked, 256);
        assert!(report.min_fiber_length > 0.2);
    }

    #[test]
    fn invalid_chart_layouts() {
        let s = two_ellipsoid_set(RVariant::Smooth);
        let region = BoundingBox::new(vec![-1.0], vec![1.0]);
        assert!(NormalSetChart::new(s.clone(), Chart::Identity, vec![1], 1, region.clone()).is_err());
        assert!(NormalSetChart::new(s.clone(), Chart::Identity, vec![0, 1], 1, region.clone()).is_err());
        assert!(NormalSetChart::new(s, Chart::Identity, vec![0], 1, region).is_ok());
    }
}
