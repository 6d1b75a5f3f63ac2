//! Elastic quadratic subproblems solved by the dual active-set method of
//! Goldfarb and Idnani.
//!
//! The subproblem is
//!
//! ```text
//! min  gᵀd + ½ dᵀHd
//! s.t. Ae d = be,  Ai d >= bi,  lo <= d <= hi
//! ```
//!
//! and is relaxed with nonnegative slacks penalized in the ℓ1 norm, so the
//! relaxed problem is always feasible.

use nalgebra::{DMatrix, DVector};

/// Data of one quadratic subproblem. `lo <= 0 <= hi` is required.
pub(crate) struct QpData<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub ae: &'a DMatrix<f64>,
    pub be: &'a DVector<f64>,
    pub ai: &'a DMatrix<f64>,
    pub bi: &'a DVector<f64>,
    pub lo: &'a DVector<f64>,
    pub hi: &'a DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    pub d: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub lambda_ineq: DVector<f64>,
    /// Sum of all slack values at the solution.
    pub slack: f64,
    /// False when the slacks could not be driven to zero.
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum QpFailure {
    Singular,
    IterationLimit,
}

const SLACK_TOL: f64 = 1e-9;
const MAX_PENALTY: f64 = 1e12;

/// Solves the elastic subproblem, raising the penalty tenfold while slacks
/// remain positive.
pub(crate) fn solve_elastic(data: &QpData, penalty: f64) -> Result<QpSolution, QpFailure> {
    let mut nu = penalty.max(1.0);
    loop {
        let sol = solve_with_penalty(data, nu)?;
        if sol.slack <= SLACK_TOL {
            return Ok(sol);
        }
        if nu >= MAX_PENALTY {
            return Ok(QpSolution {
                consistent: false,
                ..sol
            });
        }
        nu = (nu * 10.0).min(MAX_PENALTY);
    }
}

/// One linear constraint `a·w >= b`, or `a·w = b` when `eq` is set.
struct Row {
    a: DVector<f64>,
    b: f64,
    eq: bool,
}

struct Active {
    row: usize,
    /// Orientation of the normal: equalities may enter with either sign.
    sign: f64,
    u: f64,
}

fn unit(nv: usize, j: usize, v: f64) -> DVector<f64> {
    let mut a = DVector::zeros(nv);
    a[j] = v;
    a
}

fn solve_with_penalty(data: &QpData, nu: f64) -> Result<QpSolution, QpFailure> {
    let nd = data.g.len();
    let me = data.be.len();
    let mi = data.bi.len();
    let nv = nd + 2 * me + mi;
    // objective divided by nu so that large penalties keep the system balanced
    let inv = 1.0 / nu;
    let mu = 1e-6;

    let mut gmat = DMatrix::zeros(nv, nv);
    gmat.view_mut((0, 0), (nd, nd)).copy_from(&(data.h * inv));
    for i in nd..nv {
        gmat[(i, i)] = mu;
    }
    let mut c = DVector::from_element(nv, 1.0);
    c.rows_mut(0, nd).copy_from(&(data.g * inv));
    let chol = gmat.clone().cholesky().ok_or(QpFailure::Singular)?;
    let l = chol.l();

    let mut rows: Vec<Row> = Vec::new();
    // slack bounds first: they form the initial working set
    for j in nd..nv {
        rows.push(Row {
            a: unit(nv, j, 1.0),
            b: 0.0,
            eq: false,
        });
    }
    for i in 0..me {
        let mut a = DVector::zeros(nv);
        a.rows_mut(0, nd).copy_from(&data.ae.row(i).transpose());
        a[nd + i] = -1.0;
        a[nd + me + i] = 1.0;
        rows.push(Row {
            a,
            b: data.be[i],
            eq: true,
        });
    }
    for j in 0..nd {
        if data.lo[j] >= data.hi[j] {
            rows.push(Row {
                a: unit(nv, j, 1.0),
                b: 0.0,
                eq: true,
            });
            continue;
        }
        if data.lo[j].is_finite() {
            rows.push(Row {
                a: unit(nv, j, 1.0),
                b: data.lo[j].min(0.0),
                eq: false,
            });
        }
        if data.hi[j].is_finite() {
            rows.push(Row {
                a: unit(nv, j, -1.0),
                b: -data.hi[j].max(0.0),
                eq: false,
            });
        }
    }
    for i in 0..mi {
        let mut a = DVector::zeros(nv);
        a.rows_mut(0, nd).copy_from(&data.ai.row(i).transpose());
        a[nd + 2 * me + i] = 1.0;
        rows.push(Row {
            a,
            b: data.bi[i],
            eq: false,
        });
    }

    // dual feasible start: slacks held at zero, d the unconstrained minimizer
    let mut w = DVector::zeros(nv);
    let hd = data.h.clone().cholesky().ok_or(QpFailure::Singular)?;
    w.rows_mut(0, nd).copy_from(&(-hd.solve(data.g)));
    let mut active: Vec<Active> = (0..nv - nd)
        .map(|k| Active {
            row: k,
            sign: 1.0,
            u: 1.0,
        })
        .collect();

    let mut budget = 10 * (nv + rows.len()) + 50;
    let eq_rows: Vec<usize> = (0..rows.len()).filter(|&k| rows[k].eq).collect();
    for p in eq_rows {
        let s = rows[p].a.dot(&w) - rows[p].b;
        let sign = if s > 0.0 { -1.0 } else { 1.0 };
        add_row(&l, &rows, &mut active, &mut w, p, sign, &mut budget)?;
    }
    let mut refined = false;
    loop {
        let scale = 1.0 + w.amax();
        let mut worst: Option<(usize, f64)> = None;
        for (k, row) in rows.iter().enumerate() {
            if row.eq || active.iter().any(|a| a.row == k) {
                continue;
            }
            let norm = row.a.amax();
            let s = (row.a.dot(&w) - row.b) / norm;
            if s < -1e-12 * scale && worst.is_none_or(|(_, v)| s < v) {
                worst = Some((k, s));
            }
        }
        match worst {
            Some((p, _)) => add_row(&l, &rows, &mut active, &mut w, p, 1.0, &mut budget)?,
            None if refined => break,
            None => {
                // the rank-one updates drift; re-solve on the final working set
                if let Some((w_ref, u_ref)) = refine(&gmat, &c, &rows, &active) {
                    w = w_ref;
                    for (act, u) in active.iter_mut().zip(u_ref.iter()) {
                        act.u = *u;
                    }
                }
                refined = true;
            }
        }
    }

    let mut lambda_eq = DVector::zeros(me);
    let mut lambda_ineq = DVector::zeros(mi);
    let ineq_start = rows.len() - mi;
    for act in &active {
        let k = act.row;
        if (nv - nd..nv - nd + me).contains(&k) {
            lambda_eq[k - (nv - nd)] = act.sign * act.u * nu;
        } else if k >= ineq_start {
            lambda_ineq[k - ineq_start] = act.u * nu;
        }
    }
    let slack = w.rows(nd, 2 * me + mi).iter().map(|v| v.max(0.0)).sum();
    Ok(QpSolution {
        d: w.rows(0, nd).into_owned(),
        lambda_eq,
        lambda_ineq,
        slack,
        consistent: true,
    })
}

/// Minimizer and multipliers of the equality-constrained problem on the
/// working set.
fn refine(
    gmat: &DMatrix<f64>,
    c: &DVector<f64>,
    rows: &[Row],
    active: &[Active],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let nv = c.len();
    let na = active.len();
    let mut k = DMatrix::zeros(nv + na, nv + na);
    let mut r = DVector::zeros(nv + na);
    k.view_mut((0, 0), (nv, nv)).copy_from(gmat);
    r.rows_mut(0, nv).copy_from(&(-c));
    for (slot, act) in active.iter().enumerate() {
        let a = &rows[act.row].a * act.sign;
        for j in 0..nv {
            k[(nv + slot, j)] = a[j];
            k[(j, nv + slot)] = -a[j];
        }
        r[nv + slot] = rows[act.row].b * act.sign;
    }
    let sol = k.lu().solve(&r)?;
    sol.iter()
        .all(|v| v.is_finite())
        .then(|| (sol.rows(0, nv).into_owned(), sol.rows(nv, na).into_owned()))
}

/// Brings row `p` into the working set with Goldfarb–Idnani steps, dropping
/// inequalities whose multipliers would turn negative.
fn add_row(
    l: &DMatrix<f64>,
    rows: &[Row],
    active: &mut Vec<Active>,
    w: &mut DVector<f64>,
    p: usize,
    sign: f64,
    budget: &mut usize,
) -> Result<(), QpFailure> {
    let n = &rows[p].a * sign;
    let b = rows[p].b * sign;
    let v = l.solve_lower_triangular(&n).ok_or(QpFailure::Singular)?;
    let mut u_p = 0.0;
    loop {
        if *budget == 0 {
            return Err(QpFailure::IterationLimit);
        }
        *budget -= 1;
        let na = active.len();
        let (res, r) = if na == 0 {
            (v.clone(), DVector::zeros(0))
        } else {
            let mut nmat = DMatrix::zeros(n.len(), na);
            for (k, act) in active.iter().enumerate() {
                nmat.set_column(k, &(&rows[act.row].a * act.sign));
            }
            let bmat = l.solve_lower_triangular(&nmat).ok_or(QpFailure::Singular)?;
            let qr = bmat.qr();
            let q = qr.q();
            let qtv = q.transpose() * &v;
            let r = qr.r().solve_upper_triangular(&qtv).ok_or(QpFailure::Singular)?;
            (&v - &q * &qtv, r)
        };
        let dependent = res.norm() <= 1e-10 * v.norm();
        let s = n.dot(w) - b;
        if dependent && s.abs() <= 1e-12 * (1.0 + b.abs() + n.amax() * w.amax()) && rows[p].eq {
            return Ok(());
        }
        let mut t1 = f64::INFINITY;
        let mut drop = None;
        for (k, act) in active.iter().enumerate() {
            if !rows[act.row].eq && r[k] > 1e-14 {
                let ratio = act.u / r[k];
                if ratio < t1 {
                    t1 = ratio;
                    drop = Some(k);
                }
            }
        }
        let (z, zn) = if dependent {
            (None, 0.0)
        } else {
            let z = l.transpose().solve_upper_triangular(&res).ok_or(QpFailure::Singular)?;
            (Some(z), res.norm_squared())
        };
        let t2 = if z.is_some() { (-s / zn).max(0.0) } else { f64::INFINITY };
        let t = t1.min(t2);
        if !t.is_finite() {
            return Err(QpFailure::Singular);
        }
        if let Some(z) = &z {
            *w += z * t;
        }
        for (k, act) in active.iter_mut().enumerate() {
            act.u -= t * r[k];
        }
        u_p += t;
        if t2 <= t1 {
            active.push(Active { row: p, sign, u: u_p });
            return Ok(());
        }
        active.remove(drop.expect("finite t1 has a blocking row"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unbounded(n: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    #[test]
    fn unconstrained_newton_step() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let g = DVector::from_vec(vec![-2.0, 4.0]);
        let (lo, hi) = unbounded(2);
        let empty_m = DMatrix::zeros(0, 2);
        let empty_v = DVector::zeros(0);
        let data = QpData {
            h: &h,
            g: &g,
            ae: &empty_m,
            be: &empty_v,
            ai: &empty_m,
            bi: &empty_v,
            lo: &lo,
            hi: &hi,
        };
        let sol = solve_elastic(&data, 1.0).unwrap();
        assert!((sol.d[0] - 1.0).abs() < 1e-12 && (sol.d[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_onto_hyperplane() {
        // min ½|d - (3, 0)|² s.t. d1 + d2 = 1  ->  d = (2, -1), lambda = -1
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![-3.0, 0.0]);
        let ae = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let be = DVector::from_vec(vec![1.0]);
        let empty_m = DMatrix::zeros(0, 2);
        let empty_v = DVector::zeros(0);
        let (lo, hi) = unbounded(2);
        let data = QpData {
            h: &h,
            g: &g,
            ae: &ae,
            be: &be,
            ai: &empty_m,
            bi: &empty_v,
            lo: &lo,
            hi: &hi,
        };
        let sol = solve_elastic(&data, 1.0).unwrap();
        assert!((sol.d[0] - 2.0).abs() < 1e-9 && (sol.d[1] + 1.0).abs() < 1e-9);
        assert!((sol.lambda_eq[0] + 1.0).abs() < 1e-6);
        assert!(sol.slack <= 1e-9 && sol.consistent);
    }

    #[test]
    fn active_inequality_and_bound() {
        // min ½|d - (2, 2)|² s.t. d1 <= 1 (as -d1 >= -1), d2 <= 0.5 bound
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![-2.0, -2.0]);
        let ai = DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]);
        let bi = DVector::from_vec(vec![-1.0]);
        let empty_m = DMatrix::zeros(0, 2);
        let empty_v = DVector::zeros(0);
        let lo = DVector::from_element(2, -10.0);
        let hi = DVector::from_vec(vec![10.0, 0.5]);
        let data = QpData {
            h: &h,
            g: &g,
            ae: &empty_m,
            be: &empty_v,
            ai: &ai,
            bi: &bi,
            lo: &lo,
            hi: &hi,
        };
        let sol = solve_elastic(&data, 1.0).unwrap();
        assert!((sol.d[0] - 1.0).abs() < 1e-9 && (sol.d[1] - 0.5).abs() < 1e-9);
        assert!((sol.lambda_ineq[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inconsistent_linearization_minimizes_violation() {
        // d1 = 1 and d1 = -1 cannot both hold
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let ae = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let be = DVector::from_vec(vec![1.0, -1.0]);
        let empty_m = DMatrix::zeros(0, 1);
        let empty_v = DVector::zeros(0);
        let (lo, hi) = unbounded(1);
        let data = QpData {
            h: &h,
            g: &g,
            ae: &ae,
            be: &be,
            ai: &empty_m,
            bi: &empty_v,
            lo: &lo,
            hi: &hi,
        };
        let sol = solve_elastic(&data, 1.0).unwrap();
        assert!(!sol.consistent);
        assert!((sol.slack - 2.0).abs() < 1e-6, "{sol:?}");
        assert!(sol.d[0].abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn fixed_variable_stays_put() {
        // min ½|d - (1, 1)|² with d2 fixed at zero
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![-1.0, -1.0]);
        let empty_m = DMatrix::zeros(0, 2);
        let empty_v = DVector::zeros(0);
        let lo = DVector::from_vec(vec![-5.0, 0.0]);
        let hi = DVector::from_vec(vec![5.0, 0.0]);
        let data = QpData {
            h: &h,
            g: &g,
            ae: &empty_m,
            be: &empty_v,
            ai: &empty_m,
            bi: &empty_v,
            lo: &lo,
            hi: &hi,
        };
        let sol = solve_elastic(&data, 1.0).unwrap();
        assert!((sol.d[0] - 1.0).abs() < 1e-12 && sol.d[1] == 0.0);
    }

    #[test]
    fn degenerate_vertex_terminates() {
        // many constraints through the origin, all active at the minimizer
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let mut coeffs = Vec::new();
        for k in 0..12 {
            let t = k as f64 * std::f64::consts::PI / 24.0;
            coeffs.extend_from_slice(&[t.cos(), t.sin()]);
        }
        let ai = DMatrix::from_row_slice(12, 2, &coeffs);
        let bi = DVector::zeros(12);
        let empty_m = DMatrix::zeros(0, 2);
        let empty_v = DVector::zeros(0);
        let lo = DVector::from_element(2, -1.0);
        let hi = DVector::from_element(2, 1.0);
        let data = QpData {
            h: &h,
            g: &g,
            ae: &empty_m,
            be: &empty_v,
            ai: &ai,
            bi: &bi,
            lo: &lo,
            hi: &hi,
        };
        let sol = solve_elastic(&data, 10.0).unwrap();
        assert!(sol.d.amax() < 1e-12 && sol.consistent, "{sol:?}");
        // the multipliers reproduce the gradient
        let resid = &g - ai.transpose() * &sol.lambda_ineq;
        assert!(resid.amax() < 1e-10 && sol.lambda_ineq.min() >= 0.0);
    }
}
