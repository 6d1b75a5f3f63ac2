//! Implicit set geometry.
//!
//! A region is described by a scalar function `psi` with `psi(y) >= 0` inside
//! and `psi(y) = 0` on the boundary. Primitives (ellipsoids, user closures) are
//! composed with R-functions whose sign behaves like boolean union and
//! intersection. [`NormalSetChart`] adds the coordinate chart and basis/fiber
//! split needed to build the convexifying homeomorphism of a normal set.

mod chart;
mod normal;

pub use chart::Chart;
pub use normal::{
    CertificationReport, ExtremeKind, FiberExtremes, FiberOptions, NormalSetChart, FIBER_FEASIBILITY_TOL,
};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid shape matrix: {0}")]
    InvalidShape(String),
    #[error("invalid chart: {0}")]
    InvalidChart(String),
    #[error("angle undefined at the chart center")]
    UndefinedAngle,
    #[error("basis point {q:?} lies outside the basis region")]
    OutsideBasis { q: Vec<f64> },
    #[error("fiber above {q:?} contains no admissible point")]
    InfeasibleFiber { q: Vec<f64> },
    #[error("fiber above {q:?} splits into {intervals} intervals; the set is not normal in this basis")]
    NormalityViolation { q: Vec<f64>, intervals: usize },
    #[error("degenerate fiber above {q:?}: upper and lower envelopes coincide")]
    DegenerateFiber { q: Vec<f64> },
    #[error("point lies outside the set (psi = {psi:e})")]
    OutsideSet { psi: f64 },
    #[error("normalized fiber coordinate {value} outside [0, 1]")]
    OutsideUnitInterval { value: f64 },
    #[error("lambda_hi ({hi}) is below lambda_lo ({lo})")]
    InvertedLambda { lo: f64, hi: f64 },
    #[error("set continuity check failed near {y:?}: psi jumps across zero by {jump:e}")]
    Discontinuity { y: Vec<f64>, jump: f64 },
    #[error("bounding box does not contain admissible point {y:?}")]
    BoundingBoxViolation { y: Vec<f64> },
}

/// Axis-aligned box, one closed interval per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "bounding box corner dimensions differ");
        Self { lo, hi }
    }

    pub fn from_intervals(intervals: &[(f64, f64)]) -> Self {
        Self {
            lo: intervals.iter().map(|i| i.0).collect(),
            hi: intervals.iter().map(|i| i.1).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn interval(&self, axis: usize) -> (f64, f64) {
        (self.lo[axis], self.hi[axis])
    }

    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        y.len() == self.dim()
            && y.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    pub fn hull(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    /// Intersection of two boxes. May be empty (`lo > hi` on some axis).
    pub fn intersect(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.max(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.min(*b)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| l > h)
    }

    /// Grows every side by `factor` times the box width on that axis.
    pub fn expanded(&self, factor: f64) -> BoundingBox {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| {
                let w = (h - l) * factor;
                (l - w, h + w)
            })
            .unzip();
        BoundingBox { lo, hi }
    }

    pub fn clamp(&self, y: &mut [f64]) {
        for ((v, l), h) in y.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }
}

/// How R-function compositions combine their operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RVariant {
    /// Rvachev R0 system: `a + b ± sqrt(a² + b²)`. Differentiable away from `a = b = 0`.
    #[default]
    Smooth,
    /// `max`/`min`. Exact, but non-smooth wherever the operands cross.
    Exact,
}

/// `{y : (y - c)ᵀ P (y - c) <= 1}` with symmetric positive definite `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(center: Vec<f64>, shape: DMatrix<f64>) -> Result<Self, GeomError> {
        let p = center.len();
        if p == 0 {
            return Err(GeomError::InvalidShape("zero-dimensional ellipsoid".into()));
        }
        if shape.nrows() != p || shape.ncols() != p {
            return Err(GeomError::InvalidShape(format!(
                "shape is {}x{}, center has {} entries",
                shape.nrows(),
                shape.ncols(),
                p
            )));
        }
        for i in 0..p {
            for j in 0..i {
                if (shape[(i, j)] - shape[(j, i)]).abs() > 1e-12 {
                    return Err(GeomError::InvalidShape(format!("not symmetric at ({i},{j})")));
                }
            }
        }
        let eig = SymmetricEigen::new(shape.clone());
        if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
            if !(min > 0.0) {
                return Err(GeomError::InvalidShape(format!(
                    "smallest eigenvalue {min} is not positive"
                )));
            }
        }
        Ok(Self {
            center: DVector::from_vec(center),
            shape,
        })
    }

    /// Builds from a row-major shape matrix.
    pub fn from_row_major(center: Vec<f64>, shape: &[f64]) -> Result<Self, GeomError> {
        let p = center.len();
        if shape.len() != p * p {
            return Err(GeomError::InvalidShape(format!(
                "expected {} shape entries, got {}",
                p * p,
                shape.len()
            )));
        }
        Self::new(center, DMatrix::from_row_slice(p, p, shape))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        self.center.as_slice()
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn psi(&self, y: &[f64]) -> f64 {
        let d = DVector::from_fn(self.dim(), |i, _| y[i] - self.center[i]);
        1.0 - d.dot(&(&self.shape * &d))
    }

    pub fn psi_gradient(&self, y: &[f64]) -> Vec<f64> {
        let d = DVector::from_fn(self.dim(), |i, _| y[i] - self.center[i]);
        (&self.shape * d * -2.0).as_slice().to_vec()
    }

    /// Tight box: half-widths are `sqrt(diag(P⁻¹))`.
    pub fn bounding_box(&self) -> BoundingBox {
        // SPD checked in the constructor, so the inverse exists.
        let inv = self
            .shape
            .clone()
            .try_inverse()
            .expect("positive definite shape matrix is invertible");
        let (lo, hi) = (0..self.dim())
            .map(|i| {
                let w = inv[(i, i)].sqrt();
                (self.center[i] - w, self.center[i] + w)
            })
            .unzip();
        BoundingBox { lo, hi }
    }

    pub fn into_set(self) -> ImplicitSet {
        let dim = self.dim();
        let bbox = self.bounding_box();
        ImplicitSet {
            node: Arc::new(Node::Ellipsoid(self)),
            dim,
            bbox,
        }
    }
}

type PsiFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

enum Node {
    Ellipsoid(Ellipsoid),
    Union(ImplicitSet, ImplicitSet, RVariant),
    Intersection(ImplicitSet, ImplicitSet, RVariant),
    Custom(Arc<PsiFn>),
}

/// A region `{y : psi(y) >= 0}` together with a box guaranteed to contain it.
///
/// Cloning is cheap; the composition tree is shared.
#[derive(Clone)]
pub struct ImplicitSet {
    node: Arc<Node>,
    dim: usize,
    bbox: BoundingBox,
}

impl fmt::Debug for ImplicitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.node.as_ref() {
            Node::Ellipsoid(_) => "ellipsoid",
            Node::Union(..) => "union",
            Node::Intersection(..) => "intersection",
            Node::Custom(_) => "custom",
        };
        f.debug_struct("ImplicitSet")
            .field("kind", &kind)
            .field("dim", &self.dim)
            .field("bbox", &self.bbox)
            .finish()
    }
}

impl From<Ellipsoid> for ImplicitSet {
    fn from(e: Ellipsoid) -> Self {
        e.into_set()
    }
}

impl ImplicitSet {
    /// Wraps an arbitrary function. The caller guarantees that every point with
    /// `psi >= 0` lies inside `bbox`; [`ImplicitSet::check_bbox_containment`]
    /// can spot-check it.
    pub fn from_fn<F>(dim: usize, bbox: BoundingBox, psi: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        assert_eq!(bbox.dim(), dim, "bounding box dimension");
        Self {
            node: Arc::new(Node::Custom(Arc::new(psi))),
            dim,
            bbox,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    /// False when any node uses the non-smooth [`RVariant::Exact`] composition.
    pub fn is_smooth(&self) -> bool {
        match self.node.as_ref() {
            Node::Ellipsoid(_) | Node::Custom(_) => true,
            Node::Union(a, b, v) | Node::Intersection(a, b, v) => {
                *v == RVariant::Smooth && a.is_smooth() && b.is_smooth()
            }
        }
    }

    pub fn eval_psi(&self, y: &[f64]) -> Result<f64, GeomError> {
        self.check_dim(y.len())?;
        Ok(self.psi(y))
    }

    pub fn contains(&self, y: &[f64]) -> Result<bool, GeomError> {
        Ok(self.eval_psi(y)? >= 0.0)
    }

    /// Unchecked evaluation; `y.len()` must equal `dim()`.
    pub fn psi(&self, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.dim);
        match self.node.as_ref() {
            Node::Ellipsoid(e) => e.psi(y),
            Node::Union(a, b, v) => r_or(a.psi(y), b.psi(y), *v),
            Node::Intersection(a, b, v) => r_and(a.psi(y), b.psi(y), *v),
            Node::Custom(f) => f(y),
        }
    }

    /// Gradient of psi. Analytic through the composition tree; custom leaves
    /// fall back to central differences.
    pub fn psi_gradient(&self, y: &[f64]) -> Vec<f64> {
        self.value_and_gradient(y).1
    }

    pub fn value_and_gradient(&self, y: &[f64]) -> (f64, Vec<f64>) {
        debug_assert_eq!(y.len(), self.dim);
        match self.node.as_ref() {
            Node::Ellipsoid(e) => (e.psi(y), e.psi_gradient(y)),
            Node::Union(a, b, v) | Node::Intersection(a, b, v) => {
                let union = matches!(self.node.as_ref(), Node::Union(..));
                let (va, ga) = a.value_and_gradient(y);
                let (vb, gb) = b.value_and_gradient(y);
                let (value, wa, wb) = r_compose_partials(va, vb, *v, union);
                let grad = ga.iter().zip(&gb).map(|(x, z)| wa * x + wb * z).collect();
                (value, grad)
            }
            Node::Custom(f) => {
                let h = 1e-7;
                let mut probe = y.to_vec();
                let grad = (0..self.dim)
                    .map(|i| {
                        let yi = probe[i];
                        probe[i] = yi + h;
                        let fp = f(&probe);
                        probe[i] = yi - h;
                        let fm = f(&probe);
                        probe[i] = yi;
                        (fp - fm) / (2.0 * h)
                    })
                    .collect();
                (f(y), grad)
            }
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), GeomError> {
        if got != self.dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// Samples a regular grid over an enlarged copy of the bounding box and
    /// reports the first admissible point found outside the box.
    pub fn check_bbox_containment(&self, per_axis: usize) -> Result<(), GeomError> {
        let outer = self.bbox.expanded(0.5);
        let mut result = Ok(());
        for_each_grid_point(&outer, per_axis, |y| {
            if result.is_ok() && !self.bbox.contains(y, 1e-12) && self.psi(y) >= 0.0 {
                result = Err(GeomError::BoundingBoxViolation { y: y.to_vec() });
            }
        });
        result
    }

    /// Probes psi along axis-parallel lines through a grid of the bounding box
    /// with spacing `spacing`. At every sign change the bracket is bisected;
    /// a continuous psi shrinks to `|psi| <= tol` there, a jump does not.
    pub fn check_continuity(&self, lines_per_axis: usize, spacing: f64, tol: f64) -> Result<(), GeomError> {
        let bbox = self.bbox.expanded(0.05);
        for axis in 0..self.dim {
            let (a, b) = bbox.interval(axis);
            let samples = (((b - a) / spacing).ceil() as usize).max(2);
            let mut result = Ok(());
            for_each_grid_point(&bbox, lines_per_axis, |base| {
                if result.is_err() {
                    return;
                }
                let mut y = base.to_vec();
                let mut prev: Option<(f64, f64)> = None;
                for i in 0..=samples {
                    let t = a + (b - a) * i as f64 / samples as f64;
                    y[axis] = t;
                    let v = self.psi(&y);
                    if let Some((tp, vp)) = prev {
                        if (vp >= 0.0) != (v >= 0.0) {
                            let jump = self.refine_crossing(&mut y.clone(), axis, tp, vp, t);
                            if jump > tol {
                                y[axis] = t;
                                result = Err(GeomError::Discontinuity { y: y.clone(), jump });
                                return;
                            }
                        }
                    }
                    prev = Some((t, v));
                }
            });
            result?;
        }
        Ok(())
    }

    fn refine_crossing(&self, y: &mut [f64], axis: usize, mut lo: f64, vlo: f64, mut hi: f64) -> f64 {
        let lo_inside = vlo >= 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            y[axis] = mid;
            if (self.psi(y) >= 0.0) == lo_inside {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        y[axis] = lo;
        let a = self.psi(y).abs();
        y[axis] = hi;
        a.min(self.psi(y).abs())
    }
}

fn for_each_grid_point(bbox: &BoundingBox, per_axis: usize, mut visit: impl FnMut(&[f64])) {
    let dim = bbox.dim();
    let per_axis = per_axis.max(2);
    let total = per_axis.pow(dim as u32);
    let mut y = vec![0.0; dim];
    for flat in 0..total {
        let mut rem = flat;
        for (axis, v) in y.iter_mut().enumerate() {
            let i = rem % per_axis;
            rem /= per_axis;
            let (l, h) = bbox.interval(axis);
            *v = l + (h - l) * i as f64 / (per_axis - 1) as f64;
        }
        visit(&y);
    }
}

fn r_or(a: f64, b: f64, variant: RVariant) -> f64 {
    match variant {
        RVariant::Smooth => a + b + a.hypot(b),
        RVariant::Exact => a.max(b),
    }
}

fn r_and(a: f64, b: f64, variant: RVariant) -> f64 {
    match variant {
        RVariant::Smooth => a + b - a.hypot(b),
        RVariant::Exact => a.min(b),
    }
}

/// Value and partial derivatives with respect to both operands.
fn r_compose_partials(a: f64, b: f64, variant: RVariant, union: bool) -> (f64, f64, f64) {
    match variant {
        RVariant::Smooth => {
            let r = a.hypot(b);
            let s = if union { 1.0 } else { -1.0 };
            // The kink at a = b = 0 gets the average of the one-sided slopes.
            let (da, db) = if r > 0.0 {
                (1.0 + s * a / r, 1.0 + s * b / r)
            } else {
                (1.0, 1.0)
            };
            (a + b + s * r, da, db)
        }
        RVariant::Exact => {
            let pick_a = if union { a >= b } else { a <= b };
            if pick_a {
                (a, 1.0, 0.0)
            } else {
                (b, 0.0, 1.0)
            }
        }
    }
}

/// R-disjunction: the result is admissible wherever `a` or `b` is.
/// The bounding box is the hull of both boxes.
pub fn r_union(a: &ImplicitSet, b: &ImplicitSet, variant: RVariant) -> Result<ImplicitSet, GeomError> {
    a.check_dim(b.dim)?;
    Ok(ImplicitSet {
        bbox: a.bbox.hull(&b.bbox),
        dim: a.dim,
        node: Arc::new(Node::Union(a.clone(), b.clone(), variant)),
    })
}

/// R-conjunction: admissible where both `a` and `b` are.
pub fn r_intersection(a: &ImplicitSet, b: &ImplicitSet, variant: RVariant) -> Result<ImplicitSet, GeomError> {
    a.check_dim(b.dim)?;
    Ok(ImplicitSet {
        bbox: a.bbox.intersect(&b.bbox),
        dim: a.dim,
        node: Arc::new(Node::Intersection(a.clone(), b.clone(), variant)),
    })
}

/// The non-convex X-shaped region of the ball-on-plate benchmark: union of two
/// centered ellipsoids with eigenvalues (16, 0.5), the second one rotated.
pub fn two_ellipsoid_set(variant: RVariant) -> ImplicitSet {
    let e1 = Ellipsoid::from_row_major(vec![0.0, 0.0], &[16.0, 0.0, 0.0, 0.5]).expect("valid benchmark ellipsoid");
    let e2 = Ellipsoid::from_row_major(vec![0.0, 0.0], &[5.8551, 7.3707, 7.3707, 10.6449])
        .expect("valid benchmark ellipsoid");
    r_union(&e1.into_set(), &e2.into_set(), variant).expect("equal dimensions")
}
