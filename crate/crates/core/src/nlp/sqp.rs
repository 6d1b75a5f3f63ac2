//! Line-search SQP with damped BFGS updates and an ℓ1 merit function.

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_elastic, QpData, QpSolution};
use super::{
    kkt_residual, Derivatives, Evaluation, MeritRecord, NlpError, NlpProblem, SolveStatus, SqpOptions, SqpSolution,
};

const ARMIJO: f64 = 1e-4;

struct Iterate {
    z: DVector<f64>,
    eval: Evaluation,
    deriv: Derivatives,
}

fn project(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(z.len(), |i, _| z[i].clamp(lo[i], hi[i]))
}

fn merit(eval: &Evaluation, penalty: f64) -> f64 {
    eval.cost + penalty * eval.l1_violation()
}

/// Symmetrizes and lifts small or negative eigenvalues.
fn make_positive_definite(b: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&b + b.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return DMatrix::identity(b.nrows(), b.ncols());
    }
    let eig = sym.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax().max(1.0);
    let floor = 1e-8 * top;
    if eig.eigenvalues.iter().all(|l| *l >= floor) {
        return sym;
    }
    let lifted = eig.eigenvalues.map(|l| l.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose()
}

fn initial_hessian<P: NlpProblem + ?Sized>(problem: &P, z: &DVector<f64>) -> DMatrix<f64> {
    let n = problem.dim();
    match problem.hessian_guess(z) {
        Some(b) if b.nrows() == n && b.ncols() == n => make_positive_definite(b),
        _ => DMatrix::identity(n, n),
    }
}

fn lagrangian_gradient(deriv: &Derivatives, lam_e: &DVector<f64>, lam_i: &DVector<f64>) -> DVector<f64> {
    &deriv.grad - deriv.eq_jac.transpose() * lam_e - deriv.ineq_jac.transpose() * lam_i
}

fn checked_eval<P: NlpProblem + ?Sized>(
    problem: &P,
    z: &DVector<f64>,
    me: usize,
    mi: usize,
) -> Result<Evaluation, NlpError> {
    let e = problem.evaluate(z)?;
    if e.eq.len() != me || e.ineq.len() != mi {
        return Err(NlpError::DimensionMismatch {
            what: "constraint vector",
            expected: me + mi,
            got: e.eq.len() + e.ineq.len(),
        });
    }
    if !e.is_finite() {
        return Err(NlpError::Evaluation("non-finite function value".into()));
    }
    Ok(e)
}

fn sub_qp(it: &Iterate, b: &DMatrix<f64>, lo: &DVector<f64>, hi: &DVector<f64>, penalty: f64) -> Option<QpSolution> {
    let be = -&it.eval.eq;
    let bi = -&it.eval.ineq;
    let dlo = lo - &it.z;
    let dhi = hi - &it.z;
    let data = QpData {
        h: b,
        g: &it.deriv.grad,
        ae: &it.deriv.eq_jac,
        be: &be,
        ai: &it.deriv.ineq_jac,
        bi: &bi,
        lo: &dlo,
        hi: &dhi,
    };
    solve_elastic(&data, penalty).ok()
}

/// ℓ1 infeasibility of the constraint linearization at `z + d`.
fn linearized_violation(it: &Iterate, d: &DVector<f64>) -> f64 {
    let eq = &it.eval.eq + &it.deriv.eq_jac * d;
    let ineq = &it.eval.ineq + &it.deriv.ineq_jac * d;
    eq.iter().map(|v| v.abs()).sum::<f64>() + ineq.iter().map(|v| (-v).max(0.0)).sum::<f64>()
}

/// Minimum-norm step back onto the linearized equalities and the active
/// inequalities, evaluated at the trial point.
fn second_order_correction(it: &Iterate, qp: &QpSolution, trial: &Evaluation) -> Option<DVector<f64>> {
    let n = it.z.len();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for i in 0..trial.eq.len() {
        rows.push(it.deriv.eq_jac.row(i).transpose());
        rhs.push(-trial.eq[i]);
    }
    let lin = &it.eval.ineq + &it.deriv.ineq_jac * &qp.d;
    for i in 0..trial.ineq.len() {
        if qp.lambda_ineq[i] > 0.0 || lin[i].abs() <= 1e-9 {
            rows.push(it.deriv.ineq_jac.row(i).transpose());
            rhs.push(-trial.ineq[i]);
        }
    }
    if rows.is_empty() {
        return None;
    }
    let a = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    let rhs = DVector::from_vec(rhs);
    let step = a.svd(true, true).solve(&rhs, 1e-12).ok()?;
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Solves the problem from `z0`, which is first projected onto the bounds.
///
/// Errors are reserved for malformed problems and a failing evaluation at the
/// start; solver trouble is reported through [`SolveStatus`].
pub fn solve<P: NlpProblem + ?Sized>(
    problem: &P,
    z0: &DVector<f64>,
    options: &SqpOptions,
) -> Result<SqpSolution, NlpError> {
    let n = problem.dim();
    if z0.len() != n {
        return Err(NlpError::DimensionMismatch {
            what: "starting point",
            expected: n,
            got: z0.len(),
        });
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(NlpError::NonFiniteStart);
    }
    let (lo, hi) = problem.bounds();
    if lo.len() != n || hi.len() != n {
        return Err(NlpError::InvalidBounds("bound vectors have the wrong length".into()));
    }
    if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
        return Err(NlpError::InvalidBounds("lower bound exceeds upper bound".into()));
    }

    let z = project(z0, &lo, &hi);
    let first = problem.evaluate(&z)?;
    let (me, mi) = (first.eq.len(), first.ineq.len());
    let eval = checked_eval(problem, &z, me, mi)?;
    let deriv = problem.differentiate(&z)?;
    let mut it = Iterate { z, eval, deriv };
    let mut b = initial_hessian(problem, &it.z);
    let mut penalty: f64 = 1.0;
    let mut history = Vec::new();
    let mut lam_e = DVector::zeros(me);
    let mut lam_i = DVector::zeros(mi);
    let mut kkt = f64::INFINITY;

    let finish = |it: Iterate,
                  lam_e: DVector<f64>,
                  lam_i: DVector<f64>,
                  kkt: f64,
                  iterations: usize,
                  status: SolveStatus,
                  history: Vec<MeritRecord>| SqpSolution {
        cost: it.eval.cost,
        violation: it.eval.violation(),
        eq: it.eval.eq,
        ineq: it.eval.ineq,
        z: it.z,
        eq_multipliers: lam_e,
        ineq_multipliers: lam_i,
        kkt,
        iterations,
        status,
        merit_history: history,
    };

    for iteration in 0..options.max_iter {
        let mut reset_done = false;
        let (qp, accepted) = loop {
            let Some(qp) = sub_qp(&it, &b, &lo, &hi, penalty) else {
                if !reset_done && options.bfgs_reset != super::BfgsReset::Never {
                    b = initial_hessian(problem, &it.z);
                    reset_done = true;
                    continue;
                }
                return Ok(finish(
                    it,
                    lam_e,
                    lam_i,
                    kkt,
                    iteration,
                    SolveStatus::NumericalFailure,
                    history,
                ));
            };
            lam_e = qp.lambda_eq.clone();
            lam_i = qp.lambda_ineq.clone();
            kkt = kkt_residual(&it.z, (&lo, &hi), &it.eval, &it.deriv, &lam_e, &lam_i).total();
            let violation = it.eval.violation();
            if violation <= options.feas_tol && kkt <= options.tol {
                return Ok(finish(it, lam_e, lam_i, kkt, iteration, SolveStatus::Optimal, history));
            }
            let step_norm = qp.d.amax();
            if !qp.consistent && step_norm <= 1e-10 * (1.0 + it.z.amax()) {
                return Ok(finish(
                    it,
                    lam_e,
                    lam_i,
                    kkt,
                    iteration,
                    SolveStatus::Infeasible,
                    history,
                ));
            }

            // penalty large enough for the multipliers and for descent
            let lam_max = qp.lambda_eq.amax().max(qp.lambda_ineq.amax());
            penalty = penalty.max(1.1 * lam_max);
            let viol0 = it.eval.l1_violation();
            let viol_lin = linearized_violation(&it, &qp.d);
            let gd = it.deriv.grad.dot(&qp.d);
            let dbd = qp.d.dot(&(&b * &qp.d));
            if viol0 - viol_lin > 1e-12 {
                let needed = (gd + 0.5 * dbd) / (0.5 * (viol0 - viol_lin));
                penalty = penalty.max(needed);
            }
            let phi0 = merit(&it.eval, penalty);
            let mut slope = gd + penalty * (viol_lin - viol0);
            if slope >= 0.0 {
                slope = -dbd.max(1e-16);
            }

            let mut alpha = 1.0;
            let mut found = None;
            for trial_no in 0..options.max_line_search {
                let zt = project(&(&it.z + &qp.d * alpha), &lo, &hi);
                if let Ok(et) = checked_eval(problem, &zt, me, mi) {
                    let phit = merit(&et, penalty);
                    if phit <= phi0 + ARMIJO * alpha * slope {
                        found = Some((zt, et, alpha, phit));
                        break;
                    }
                    if trial_no == 0 && options.second_order_correction {
                        if let Some(dc) = second_order_correction(&it, &qp, &et) {
                            let zs = project(&(&zt + dc), &lo, &hi);
                            if let Ok(es) = checked_eval(problem, &zs, me, mi) {
                                let phis = merit(&es, penalty);
                                if phis <= phi0 + ARMIJO * slope {
                                    found = Some((zs, es, 1.0, phis));
                                    break;
                                }
                            }
                        }
                    }
                }
                alpha *= 0.5;
            }
            match found {
                Some(step) => {
                    history.push(MeritRecord {
                        iteration,
                        penalty,
                        before: phi0,
                        after: step.3,
                        step: step.2,
                    });
                    break (qp, step);
                }
                None if !reset_done && options.bfgs_reset != super::BfgsReset::Never => {
                    b = initial_hessian(problem, &it.z);
                    reset_done = true;
                }
                None => {
                    return Ok(finish(
                        it,
                        lam_e,
                        lam_i,
                        kkt,
                        iteration,
                        SolveStatus::NumericalFailure,
                        history,
                    ));
                }
            }
        };

        let (z_new, e_new, _, _) = accepted;
        let d_new = match problem.differentiate(&z_new) {
            Ok(d) => d,
            Err(_) => {
                return Ok(finish(
                    it,
                    lam_e,
                    lam_i,
                    kkt,
                    iteration + 1,
                    SolveStatus::NumericalFailure,
                    history,
                ))
            }
        };
        let s = &z_new - &it.z;
        let y = lagrangian_gradient(&d_new, &qp.lambda_eq, &qp.lambda_ineq)
            - lagrangian_gradient(&it.deriv, &qp.lambda_eq, &qp.lambda_ineq);
        it = Iterate {
            z: z_new,
            eval: e_new,
            deriv: d_new,
        };
        bfgs_update(&mut b, &s, &y);
    }

    let status = SolveStatus::MaxIter;
    Ok(finish(it, lam_e, lam_i, kkt, options.max_iter, status, history))
}

/// Powell-damped BFGS update; keeps `b` positive definite.
fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let ss = s.dot(s);
    if ss <= 1e-30 {
        return;
    }
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-30 {
        return;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if sr <= 1e-30 {
        return;
    }
    let updated = &*b - (&bs * bs.transpose()) / sbs + (&r * r.transpose()) / sr;
    if updated.iter().all(|v| v.is_finite()) {
        *b = (&updated + updated.transpose()) * 0.5;
    }
}
