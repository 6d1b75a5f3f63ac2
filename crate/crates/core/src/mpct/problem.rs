//! Single-shooting transcription of the tracking problem.

use nalgebra::{DMatrix, DVector};

use super::{LambdaExtremes, MpcConfig, MpcMode, Target};
use crate::nlp::{Derivatives, Evaluation, NlpError, NlpProblem};
use crate::plant::PlantModel;
use crate::setgeom::{ExtremeKind, NormalSetChart};

fn geom(e: impl std::fmt::Display) -> NlpError {
    NlpError::Evaluation(e.to_string())
}

/// Artificial steady output and its Jacobian with respect to the reference
/// block of the decision vector.
pub(crate) struct ReferenceImage {
    pub y_s: DVector<f64>,
    pub jac: DMatrix<f64>,
}

/// The optimal control problem for one sampling instant, as an NLP in
/// `z = [u(0); ...; u(Nc-1); reference block]`.
///
/// The reference block is `y_s` in standard mode, `theta` in homeo mode and
/// `[theta; lambda_lo; lambda_hi]` in normal mode.
pub struct TrackingProblem<'a> {
    pub(crate) plant: &'a PlantModel,
    pub(crate) chart: Option<&'a NormalSetChart>,
    pub(crate) config: &'a MpcConfig,
    pub(crate) target: Target,
    pub(crate) x0: DVector<f64>,
    /// Envelope kinds decided at the warm start (normal mode, active variant).
    pub(crate) sides: (ExtremeKind, ExtremeKind),
    pub(crate) steady_margin: f64,
}

/// Derivatives with the Gauss-Newton Hessian of the cost.
type DerivsAndHessian = (Derivatives, DMatrix<f64>);

struct Rollout {
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    /// `dx(j)/dU`, present when derivatives are requested.
    sens: Vec<DMatrix<f64>>,
}

impl<'a> TrackingProblem<'a> {
    fn n(&self) -> usize {
        self.plant.state_dim()
    }
    fn m(&self) -> usize {
        self.plant.input_dim()
    }
    fn p(&self) -> usize {
        self.plant.output_dim()
    }
    pub(crate) fn n_inputs(&self) -> usize {
        self.config.nc * self.m()
    }
    pub(crate) fn n_reference(&self) -> usize {
        match self.config.mode {
            MpcMode::Normal => self.p() + 2,
            _ => self.p(),
        }
    }

    fn active_lambda(&self) -> bool {
        self.config.mode == MpcMode::Normal && self.config.lambda_extremes == LambdaExtremes::Active
    }

    fn input_at(&self, z: &DVector<f64>, j: usize) -> (usize, DVector<f64>) {
        let m = self.m();
        let k = j.min(self.config.nc - 1);
        (k, z.rows(k * m, m).into_owned())
    }

    fn rollout(&self, z: &DVector<f64>, with_sens: bool) -> Result<Rollout, NlpError> {
        let (n, m, np) = (self.n(), self.m(), self.config.np);
        let nu = self.n_inputs();
        let dynamics = self.plant.dynamics();
        let mut xs = Vec::with_capacity(np + 1);
        let mut us = Vec::with_capacity(np);
        let mut sens = Vec::new();
        xs.push(self.x0.clone());
        if with_sens {
            sens.push(DMatrix::zeros(n, nu));
        }
        for j in 0..np {
            let (k, u) = self.input_at(z, j);
            let x = &xs[j];
            let next = dynamics.transition(x, &u);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(NlpError::Evaluation("prediction diverged".into()));
            }
            if with_sens {
                let (a, b) = dynamics.transition_jacobians(x, &u);
                let mut s = &a * &sens[j];
                let mut cols = s.columns_mut(k * m, m);
                cols += b;
                sens.push(s);
            }
            us.push(u);
            xs.push(next);
        }
        Ok(Rollout { xs, us, sens })
    }

    /// Maps the reference block to the artificial steady output.
    pub(crate) fn reference_image(&self, r: &[f64], with_jac: bool) -> Result<ReferenceImage, NlpError> {
        let p = self.p();
        match self.config.mode {
            MpcMode::Standard => Ok(ReferenceImage {
                y_s: DVector::from_column_slice(r),
                jac: DMatrix::identity(p, p),
            }),
            MpcMode::Homeo => {
                let chart = self.chart.expect("homeo mode carries a chart");
                let fd = chart.fiber_dim();
                let q = chart.basis_of(r);
                let fe = chart.fiber_extremes(&q).map_err(geom)?;
                let t = r[fd];
                let mut v = r.to_vec();
                v[fd] = t * (fe.hi - fe.lo) + fe.lo;
                let y = chart.chart().from_chart(&v);
                let mut jac = DMatrix::zeros(p, p);
                if with_jac {
                    let (dlo, dhi) = chart.extremes_sensitivity(&q, &fe);
                    // dv/dtheta
                    let mut dv = DMatrix::identity(p, p);
                    dv[(fd, fd)] = fe.hi - fe.lo;
                    for (slot, &d) in chart.basis_dims().iter().enumerate() {
                        dv[(fd, d)] = t * (dhi[slot] - dlo[slot]) + dlo[slot];
                    }
                    jac = chart.chart().from_chart_jacobian(&v) * dv;
                }
                Ok(ReferenceImage {
                    y_s: DVector::from_vec(y),
                    jac,
                })
            }
            MpcMode::Normal => {
                let chart = self.chart.expect("normal mode carries a chart");
                let fd = chart.fiber_dim();
                let (lo, hi) = (r[p], r[p + 1]);
                let t = r[fd];
                let mut v = r[..p].to_vec();
                v[fd] = t * (hi - lo) + lo;
                let y = chart.chart().from_chart(&v);
                let mut jac = DMatrix::zeros(p, p + 2);
                if with_jac {
                    let mut dv = DMatrix::zeros(p, p + 2);
                    for i in 0..p {
                        dv[(i, i)] = 1.0;
                    }
                    dv[(fd, fd)] = hi - lo;
                    dv[(fd, p)] = 1.0 - t;
                    dv[(fd, p + 1)] = t;
                    jac = chart.chart().from_chart_jacobian(&v) * dv;
                }
                Ok(ReferenceImage {
                    y_s: DVector::from_vec(y),
                    jac,
                })
            }
        }
    }

    /// Offset term and its gradient over the reference block.
    fn offset_cost(&self, r: &[f64]) -> (f64, DVector<f64>) {
        let p = self.p();
        let goal = match self.config.mode {
            MpcMode::Standard => &self.target.y_t,
            _ => self
                .target
                .theta_t
                .as_ref()
                .expect("chart modes carry a transformed target"),
        };
        let diff = DVector::from_fn(p, |i, _| r[i] - goal[i]);
        let tdiff = &self.config.t * &diff;
        let mut grad = DVector::zeros(self.n_reference());
        grad.rows_mut(0, p).copy_from(&(tdiff.clone() * 2.0));
        (diff.dot(&tdiff), grad)
    }

    fn compute(&self, z: &DVector<f64>, with_derivs: bool) -> Result<(Evaluation, Option<DerivsAndHessian>), NlpError> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        let (np, nc) = (self.config.np, self.config.nc);
        let nu = self.n_inputs();
        let nr = self.n_reference();
        let nz = nu + nr;
        let r: Vec<f64> = z.rows(nu, nr).iter().copied().collect();

        let image = self.reference_image(&r, with_derivs)?;
        let (x_s, u_s) = self.plant.steady_state(&image.y_s).map_err(geom)?;
        let steady_jac = if with_derivs {
            let (gx, gu) = self.plant.steady_jacobians(&image.y_s).map_err(geom)?;
            Some((gx * &image.jac, gu * &image.jac))
        } else {
            None
        };
        let roll = self.rollout(z, with_derivs)?;
        let q = &self.config.q;
        let rw = &self.config.r;

        let mut cost = 0.0;
        let mut grad = DVector::zeros(nz);
        let mut gn = DMatrix::zeros(nz, nz);
        for j in 0..np {
            let ex = &roll.xs[j] - &x_s;
            let eu = &roll.us[j] - &u_s;
            let qe = q * &ex;
            let re = rw * &eu;
            cost += ex.dot(&qe) + eu.dot(&re);
            if let Some((dxs, dus)) = &steady_jac {
                // d(ex)/dz and d(eu)/dz
                let mut dex = DMatrix::zeros(n, nz);
                dex.view_mut((0, 0), (n, nu)).copy_from(&roll.sens[j]);
                dex.view_mut((0, nu), (n, nr)).copy_from(&(-dxs));
                let mut deu = DMatrix::zeros(m, nz);
                let k = j.min(nc - 1);
                for i in 0..m {
                    deu[(i, k * m + i)] = 1.0;
                }
                deu.view_mut((0, nu), (m, nr)).copy_from(&(-dus));
                grad += dex.transpose() * &qe * 2.0 + deu.transpose() * &re * 2.0;
                gn += dex.transpose() * q * &dex * 2.0 + deu.transpose() * rw * &deu * 2.0;
            }
        }
        let (vo, vo_grad) = self.offset_cost(&r);
        cost += vo;
        if with_derivs {
            let mut gr = grad.rows_mut(nu, nr);
            gr += &vo_grad;
            let mut t2 = gn.view_mut((nu, nu), (p, p));
            t2 += &self.config.t * 2.0;
        }

        // equalities
        let n_lambda_eq = if self.active_lambda() {
            [self.sides.0, self.sides.1]
                .iter()
                .filter(|k| **k == ExtremeKind::Boundary)
                .count()
        } else {
            0
        };
        let me = if self.config.has_terminal_equality() { n } else { 0 } + n_lambda_eq;
        let mut eq = DVector::zeros(me);
        let mut eq_jac = DMatrix::zeros(me, nz);
        let mut row = 0;
        if self.config.has_terminal_equality() {
            eq.rows_mut(0, n).copy_from(&(&roll.xs[np] - &x_s));
            if let Some((dxs, _)) = &steady_jac {
                eq_jac.view_mut((0, 0), (n, nu)).copy_from(&roll.sens[np]);
                eq_jac.view_mut((0, nu), (n, nr)).copy_from(&(-dxs));
            }
            row = n;
        }

        // inequalities: output constraints along the horizon, then mode terms
        let set = &self.plant.constraints().output_set;
        let mode_ineq = match self.config.mode {
            MpcMode::Standard => 1,
            MpcMode::Homeo => 0,
            MpcMode::Normal => match self.config.lambda_extremes {
                LambdaExtremes::Active => 1,
                LambdaExtremes::Relaxed => 3,
            },
        };
        let mi = np.saturating_sub(1) + mode_ineq;
        let mut ineq = DVector::zeros(mi);
        let mut ineq_jac = DMatrix::zeros(mi, nz);
        let dynamics = self.plant.dynamics();
        for j in 1..np {
            let (k, u) = self.input_at(z, j);
            let y = dynamics.output(&roll.xs[j], &u);
            let (psi, dpsi) = set.value_and_gradient(y.as_slice());
            ineq[j - 1] = psi;
            if with_derivs {
                let (c, d) = dynamics.output_jacobians(&roll.xs[j], &u);
                let dpsi = DVector::from_vec(dpsi);
                let mut dy = DMatrix::zeros(p, nz);
                dy.view_mut((0, 0), (p, nu)).copy_from(&(&c * &roll.sens[j]));
                let mut cols = dy.columns_mut(k * m, m);
                cols += d;
                ineq_jac.row_mut(j - 1).copy_from(&(dpsi.transpose() * dy));
            }
        }
        let base = np.saturating_sub(1);
        match self.config.mode {
            MpcMode::Standard => {
                let (psi, dpsi) = set.value_and_gradient(image.y_s.as_slice());
                ineq[base] = psi - self.steady_margin;
                for i in 0..p {
                    ineq_jac[(base, nu + i)] = dpsi[i];
                }
            }
            MpcMode::Homeo => {}
            MpcMode::Normal => {
                let chart = self.chart.expect("normal mode carries a chart");
                let (lo, hi) = (r[p], r[p + 1]);
                ineq[base] = hi - lo - self.config.epsilon_lambda;
                ineq_jac[(base, nu + p)] = -1.0;
                ineq_jac[(base, nu + p + 1)] = 1.0;
                let qb = chart.basis_of(&r[..p]);
                let envelope = |lambda: f64, slot: usize| -> (f64, DVector<f64>) {
                    let v = chart.compose(&qb, lambda);
                    let (psi, g) = chart.psi_chart_gradient(&v);
                    let mut grow = DVector::zeros(nz);
                    for &d in chart.basis_dims() {
                        grow[nu + d] = g[d];
                    }
                    grow[nu + p + slot] = g[chart.fiber_dim()];
                    (psi, grow)
                };
                match self.config.lambda_extremes {
                    LambdaExtremes::Active => {
                        for (slot, kind, value) in [(0, self.sides.0, lo), (1, self.sides.1, hi)] {
                            if kind == ExtremeKind::Boundary {
                                let (psi, grow) = envelope(value, slot);
                                eq[row] = psi;
                                eq_jac.row_mut(row).copy_from(&grow.transpose());
                                row += 1;
                            }
                        }
                    }
                    LambdaExtremes::Relaxed => {
                        for (slot, value) in [(0, lo), (1, hi)] {
                            let (psi, grow) = envelope(value, slot);
                            ineq[base + 1 + slot] = psi;
                            ineq_jac.row_mut(base + 1 + slot).copy_from(&grow.transpose());
                        }
                    }
                }
            }
        }
        debug_assert_eq!(row, me);

        let eval = Evaluation { cost, eq, ineq };
        let derivs = with_derivs.then_some((Derivatives { grad, eq_jac, ineq_jac }, gn));
        Ok((eval, derivs))
    }
}

impl NlpProblem for TrackingProblem<'_> {
    fn dim(&self) -> usize {
        self.n_inputs() + self.n_reference()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let (m, p) = (self.m(), self.p());
        let nz = self.dim();
        let nu = self.n_inputs();
        let mut lo = DVector::from_element(nz, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(nz, f64::INFINITY);
        let cons = self.plant.constraints();
        for k in 0..self.config.nc {
            for i in 0..m {
                lo[k * m + i] = cons.input_lo[i];
                hi[k * m + i] = cons.input_hi[i];
            }
        }
        if let Some(chart) = self.chart.filter(|_| self.config.mode != MpcMode::Standard) {
            for (slot, &d) in chart.basis_dims().iter().enumerate() {
                let (l, h) = chart.basis_region().interval(slot);
                lo[nu + d] = l;
                hi[nu + d] = h;
            }
            lo[nu + chart.fiber_dim()] = 0.0;
            hi[nu + chart.fiber_dim()] = 1.0;
            if self.config.mode == MpcMode::Normal {
                let (a, b) = chart.fiber_domain();
                for (slot, kind) in [(0, self.sides.0), (1, self.sides.1)] {
                    lo[nu + p + slot] = a;
                    hi[nu + p + slot] = b;
                    if self.config.lambda_extremes == LambdaExtremes::Active && kind == ExtremeKind::DomainBound {
                        // the envelope sits on the domain edge: pin it there
                        let edge = if slot == 0 { a } else { b };
                        lo[nu + p + slot] = edge;
                        hi[nu + p + slot] = edge;
                    }
                }
            }
        }
        (lo, hi)
    }

    fn evaluate(&self, z: &DVector<f64>) -> Result<Evaluation, NlpError> {
        Ok(self.compute(z, false)?.0)
    }

    fn differentiate(&self, z: &DVector<f64>) -> Result<Derivatives, NlpError> {
        let (_, d) = self.compute(z, true)?;
        Ok(d.expect("derivatives requested").0)
    }

    fn hessian_guess(&self, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.compute(z, true).ok().and_then(|(_, d)| d.map(|(_, gn)| gn))
    }
}
