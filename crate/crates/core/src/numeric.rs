//! Small dense numerical helpers shared by the plant and solver modules.

use nalgebra::{DMatrix, DVector};

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut probe = x.clone();
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = probe[i];
        let step = h * (1.0 + xi.abs());
        probe[i] = xi + step;
        let fp = f(&probe);
        probe[i] = xi - step;
        let fm = f(&probe);
        probe[i] = xi;
        cols.push((fp - fm) / (2.0 * step));
    }
    if cols.is_empty() {
        return DMatrix::zeros(f(x).len(), 0);
    }
    DMatrix::from_columns(&cols)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        let xi = probe[i];
        let step = h * (1.0 + xi.abs());
        probe[i] = xi + step;
        let fp = f(&probe);
        probe[i] = xi - step;
        let fm = f(&probe);
        probe[i] = xi;
        (fp - fm) / (2.0 * step)
    })
}

/// Weighted squared norm `vᵀ W v`.
pub fn quad_form(w: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(w * v))
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Largest absolute entry, zero for empty vectors.
pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
