//! MPC for tracking with an artificial steady reference.
//!
//! Three transcriptions share one controller type:
//!
//! * `standard`: the artificial output `y_s` is a decision variable
//!   constrained to the (possibly non-convex) admissible set;
//! * `homeo`: the decision variable is `theta` in the convex box `Θ`, mapped
//!   onto the set through the normal-set homeomorphism;
//! * `normal`: as `homeo`, with the fiber envelopes replaced by decision
//!   variables `lambda_lo`, `lambda_hi`.

mod problem;

pub use problem::TrackingProblem;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nlp::{self, NlpError, NlpProblem, SolveStatus, SqpOptions, SqpSolution};
use crate::plant::{PlantError, PlantModel};
use crate::setgeom::{ExtremeKind, GeomError, NormalSetChart};

/// Constraint violation above which a step result is flagged.
pub const FEASIBILITY_FLAG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("target cannot be expressed in the chart: {0}")]
    Target(GeomError),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcMode {
    Standard,
    Homeo,
    Normal,
}

impl MpcMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MpcMode::Standard => "standard",
            MpcMode::Homeo => "homeo",
            MpcMode::Normal => "normal",
        }
    }
}

/// How the envelope variables of the normal mode are tied to the set.
///
/// `Active` makes each envelope variable an extreme of its fiber: it sits on
/// the set boundary (`psi = 0`) or, when the fiber reaches the edge of the
/// chart domain, on that edge. `Relaxed` only asks `psi >= 0` at both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaExtremes {
    #[default]
    Active,
    Relaxed,
}

/// Terminal ingredients. Only the terminal equality is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalIngredient {
    #[default]
    Equality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub mode: MpcMode,
    pub nc: usize,
    pub np: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Offset weight, in output space (standard) or transformed space.
    pub t: DMatrix<f64>,
    /// Separation `lambda_hi - lambda_lo >= epsilon_lambda`.
    pub epsilon_lambda: f64,
    /// Interiority margin for `y_s` in standard mode: `psi(y_s) >= delta_eps`.
    pub delta_eps: f64,
    pub lambda_extremes: LambdaExtremes,
    pub terminal: TerminalIngredient,
    pub solver: SqpOptions,
    /// Accept sets built with the exact (non-smooth) R-functions.
    pub allow_nonsmooth: bool,
}

impl MpcConfig {
    /// Horizons 4/4, identity weights and default solver options.
    pub fn new(mode: MpcMode, n: usize, m: usize, p: usize) -> Self {
        Self {
            mode,
            nc: 4,
            np: 4,
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
            t: DMatrix::identity(p, p),
            epsilon_lambda: 1e-3,
            delta_eps: 0.0,
            lambda_extremes: LambdaExtremes::Active,
            terminal: TerminalIngredient::Equality,
            solver: SqpOptions::default(),
            allow_nonsmooth: false,
        }
    }

    pub fn has_terminal_equality(&self) -> bool {
        self.terminal == TerminalIngredient::Equality
    }

    /// Weights of the ball-on-plate benchmark: `Q = I8`, `R = 10 I2`, `T = 1e5 I2`.
    pub fn ball_on_plate(mode: MpcMode) -> Self {
        let mut c = Self::new(mode, 8, 2, 2);
        c.r *= 10.0;
        c.t *= 1e5;
        c
    }
}

/// A set-point request for one sampling instant.
#[derive(Debug, Clone)]
pub struct MpcQuery<'a> {
    pub x: DVector<f64>,
    pub y_t: DVector<f64>,
    pub warm_start: Option<&'a WarmStart>,
}

/// Previous decision vector, carried between steps by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: DVector<f64>,
}

/// Target set-point with its transformed image (chart modes).
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub y_t: DVector<f64>,
    pub theta_t: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct MpcResult {
    pub u0: DVector<f64>,
    pub u_seq: Vec<DVector<f64>>,
    pub y_s: DVector<f64>,
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
    pub theta: Option<DVector<f64>>,
    pub lambda_lo: Option<f64>,
    pub lambda_hi: Option<f64>,
    pub cost: f64,
    pub nlp: SqpSolution,
    pub solve_time: Duration,
    /// Set when the solver reports infeasibility or the returned point
    /// violates a constraint by more than [`FEASIBILITY_FLAG_TOL`].
    pub flagged: bool,
}

impl MpcResult {
    /// Shift-and-extend warm start for the next sampling instant.
    pub fn warm_start(&self, m: usize) -> WarmStart {
        let mut z = self.nlp.z.clone();
        let nu = self.u_seq.len() * m;
        if self.u_seq.len() > 1 {
            let tail: Vec<f64> = z.rows(m, nu - m).iter().copied().collect();
            z.rows_mut(0, nu - m).copy_from_slice(&tail);
        }
        WarmStart { z }
    }
}

/// Static optimum of the offset cost over the admissible references.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetOptimum {
    pub y_s: DVector<f64>,
    pub theta: Option<DVector<f64>>,
    pub cost: f64,
}

/// An immutable tracking controller. Per-step state lives in [`WarmStart`].
#[derive(Debug, Clone)]
pub struct TrackingMpc {
    plant: PlantModel,
    chart: Option<NormalSetChart>,
    config: MpcConfig,
}

fn check_square(name: &str, m: &DMatrix<f64>, dim: usize, definite: bool) -> Result<(), MpcError> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(MpcError::InvalidConfig(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(MpcError::InvalidConfig(format!("{name} must be symmetric")));
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if definite && min_eig <= 0.0 {
        return Err(MpcError::InvalidConfig(format!("{name} must be positive definite")));
    }
    if min_eig < -1e-12 {
        return Err(MpcError::InvalidConfig(format!("{name} must be positive semidefinite")));
    }
    Ok(())
}

impl TrackingMpc {
    pub fn build_standard(plant: PlantModel, config: MpcConfig) -> Result<Self, MpcError> {
        if config.mode != MpcMode::Standard {
            return Err(MpcError::InvalidConfig("build_standard needs mode standard".into()));
        }
        Self::build(plant, None, config)
    }

    pub fn build_homeo(plant: PlantModel, chart: NormalSetChart, config: MpcConfig) -> Result<Self, MpcError> {
        if config.mode != MpcMode::Homeo {
            return Err(MpcError::InvalidConfig("build_homeo needs mode homeo".into()));
        }
        Self::build(plant, Some(chart), config)
    }

    pub fn build_normal(plant: PlantModel, chart: NormalSetChart, config: MpcConfig) -> Result<Self, MpcError> {
        if config.mode != MpcMode::Normal {
            return Err(MpcError::InvalidConfig("build_normal needs mode normal".into()));
        }
        Self::build(plant, Some(chart), config)
    }

    /// Dispatches on `config.mode`. Chart modes require `chart`.
    pub fn build(plant: PlantModel, chart: Option<NormalSetChart>, config: MpcConfig) -> Result<Self, MpcError> {
        let (n, m, p) = (plant.state_dim(), plant.input_dim(), plant.output_dim());
        if config.nc == 0 || config.np == 0 {
            return Err(MpcError::InvalidConfig("horizons must be positive".into()));
        }
        if config.nc > config.np {
            return Err(MpcError::InvalidConfig(format!(
                "control horizon {} exceeds prediction horizon {}",
                config.nc, config.np
            )));
        }
        if config.has_terminal_equality() && config.nc != config.np {
            return Err(MpcError::InvalidConfig(
                "the terminal equality needs equal control and prediction horizons".into(),
            ));
        }
        check_square("Q", &config.q, n, false)?;
        check_square("R", &config.r, m, true)?;
        check_square("T", &config.t, p, true)?;
        if !(config.epsilon_lambda > 0.0) {
            return Err(MpcError::InvalidConfig("epsilon_lambda must be positive".into()));
        }
        if !(config.delta_eps >= 0.0) {
            return Err(MpcError::InvalidConfig("delta_eps must be nonnegative".into()));
        }
        if !config.allow_nonsmooth && !plant.constraints().output_set.is_smooth() {
            return Err(MpcError::InvalidConfig(
                "the output set uses exact R-functions, which are not differentiable; set allow_nonsmooth to accept"
                    .into(),
            ));
        }
        let chart = match config.mode {
            MpcMode::Standard => chart,
            _ => {
                let chart =
                    chart.ok_or_else(|| MpcError::InvalidConfig("chart modes need a normal-set chart".into()))?;
                if chart.dim() != p {
                    return Err(MpcError::InvalidConfig(format!(
                        "chart dimension {} does not match output dimension {p}",
                        chart.dim()
                    )));
                }
                if !config.allow_nonsmooth && !chart.set().is_smooth() {
                    return Err(MpcError::InvalidConfig("the chart set uses exact R-functions".into()));
                }
                Some(chart)
            }
        };
        Ok(Self { plant, chart, config })
    }

    pub fn plant(&self) -> &PlantModel {
        &self.plant
    }
    pub fn chart(&self) -> Option<&NormalSetChart> {
        self.chart.as_ref()
    }
    pub fn config(&self) -> &MpcConfig {
        &self.config
    }
    pub fn mode(&self) -> MpcMode {
        self.config.mode
    }

    /// Target with its transformed image, computed once per set-point.
    pub fn target(&self, y_t: &DVector<f64>) -> Result<Target, MpcError> {
        let p = self.plant.output_dim();
        if y_t.len() != p {
            return Err(MpcError::InvalidConfig(format!(
                "target has dimension {}, expected {p}",
                y_t.len()
            )));
        }
        if y_t.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::InvalidConfig("target is not finite".into()));
        }
        let theta_t = match (&self.chart, self.config.mode) {
            (Some(chart), MpcMode::Homeo | MpcMode::Normal) => {
                let v = chart.chart().to_chart(y_t.as_slice()).map_err(MpcError::Target)?;
                let q = chart.basis_of(&v);
                if !chart.basis_region().contains(&q, 1e-12) {
                    return Err(MpcError::Target(GeomError::OutsideBasis { q }));
                }
                Some(DVector::from_vec(chart.target_transform(&v).map_err(MpcError::Target)?))
            }
            _ => None,
        };
        Ok(Target {
            y_t: y_t.clone(),
            theta_t,
        })
    }

    fn n_reference(&self) -> usize {
        let p = self.plant.output_dim();
        match self.config.mode {
            MpcMode::Normal => p + 2,
            _ => p,
        }
    }

    /// Decision-vector length.
    pub fn dim(&self) -> usize {
        self.config.nc * self.plant.input_dim() + self.n_reference()
    }

    /// Cold start: steady inputs and the reference at the current output,
    /// expressed in the decision variables and projected onto their box.
    pub fn cold_start(&self, x: &DVector<f64>) -> Result<DVector<f64>, MpcError> {
        let m = self.plant.input_dim();
        let nu = self.config.nc * m;
        let u_zero = DVector::zeros(m);
        let y0 = self.plant.output(x, &u_zero)?;
        let mut z = DVector::zeros(self.dim());
        let y_ref = match (&self.chart, self.config.mode) {
            (Some(chart), MpcMode::Homeo | MpcMode::Normal) => {
                let v = chart.chart().to_chart(y0.as_slice())?;
                let mut theta = chart.target_transform(&v)?;
                let mut q = chart.basis_of(&theta);
                chart.basis_region().clamp(&mut q);
                for (slot, &d) in chart.basis_dims().iter().enumerate() {
                    theta[d] = q[slot];
                }
                let fd = chart.fiber_dim();
                theta[fd] = theta[fd].clamp(0.0, 1.0);
                for (i, t) in theta.iter().enumerate() {
                    z[nu + i] = *t;
                }
                let fe = chart.fiber_extremes(&q)?;
                if self.config.mode == MpcMode::Normal {
                    let p = self.plant.output_dim();
                    z[nu + p] = fe.lo;
                    z[nu + p + 1] = fe.hi;
                }
                let mut v = theta.clone();
                v[fd] = theta[fd] * (fe.hi - fe.lo) + fe.lo;
                DVector::from_vec(chart.chart().from_chart(&v))
            }
            _ => {
                z.rows_mut(nu, y0.len()).copy_from(&y0);
                y0.clone()
            }
        };
        let (_, u_s) = self.plant.steady_state(&y_ref)?;
        let cons = self.plant.constraints();
        for k in 0..self.config.nc {
            for i in 0..m {
                z[k * m + i] = u_s[i].clamp(cons.input_lo[i], cons.input_hi[i]);
            }
        }
        Ok(z)
    }

    /// The transcribed NLP for a query together with its starting point.
    pub fn problem(&self, query: &MpcQuery) -> Result<(TrackingProblem<'_>, DVector<f64>), MpcError> {
        let n = self.plant.state_dim();
        if query.x.len() != n {
            return Err(MpcError::InvalidConfig(format!(
                "state has dimension {}, expected {n}",
                query.x.len()
            )));
        }
        if query.x.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::InvalidConfig("state is not finite".into()));
        }
        let target = self.target(&query.y_t)?;
        let z0 = match query.warm_start {
            Some(w) if w.z.len() == self.dim() => w.z.clone(),
            Some(w) => {
                return Err(MpcError::InvalidConfig(format!(
                    "warm start has dimension {}, expected {}",
                    w.z.len(),
                    self.dim()
                )))
            }
            None => self.cold_start(&query.x)?,
        };
        self.problem_at(&query.x, target, &z0).map(|pr| (pr, z0))
    }

    /// The transcribed NLP with envelope sides decided at `z`.
    pub fn problem_at(
        &self,
        x: &DVector<f64>,
        target: Target,
        z: &DVector<f64>,
    ) -> Result<TrackingProblem<'_>, MpcError> {
        let nu = self.config.nc * self.plant.input_dim();
        let sides = match (&self.chart, self.config.mode) {
            (Some(chart), MpcMode::Normal) => {
                let theta: Vec<f64> = z.rows(nu, self.plant.output_dim()).iter().copied().collect();
                let mut q = chart.basis_of(&theta);
                chart.basis_region().clamp(&mut q);
                let fe = chart.fiber_extremes(&q)?;
                (fe.lo_kind, fe.hi_kind)
            }
            _ => (ExtremeKind::Boundary, ExtremeKind::Boundary),
        };
        Ok(TrackingProblem {
            plant: &self.plant,
            chart: self.chart.as_ref(),
            config: &self.config,
            target,
            x0: x.clone(),
            sides,
            steady_margin: self.config.delta_eps,
        })
    }

    /// Solves the optimal control problem for one sampling instant.
    pub fn solve_step(&self, query: &MpcQuery) -> Result<MpcResult, MpcError> {
        let (problem, z0) = self.problem(query)?;
        let started = Instant::now();
        let sol = nlp::solve(&problem, &z0, &self.config.solver)?;
        let solve_time = started.elapsed();
        self.assemble(&problem, sol, solve_time)
    }

    fn assemble(
        &self,
        problem: &TrackingProblem,
        sol: SqpSolution,
        solve_time: Duration,
    ) -> Result<MpcResult, MpcError> {
        let m = self.plant.input_dim();
        let p = self.plant.output_dim();
        let nu = self.config.nc * m;
        let u_seq: Vec<DVector<f64>> = (0..self.config.nc).map(|k| sol.z.rows(k * m, m).into_owned()).collect();
        let r: Vec<f64> = sol.z.rows(nu, self.n_reference()).iter().copied().collect();
        let image = problem.reference_image(&r, false)?;
        let (x_s, u_s) = self.plant.steady_state(&image.y_s)?;
        let theta = (self.config.mode != MpcMode::Standard).then(|| DVector::from_column_slice(&r[..p]));
        let (lambda_lo, lambda_hi) = if self.config.mode == MpcMode::Normal {
            (Some(r[p]), Some(r[p + 1]))
        } else {
            (None, None)
        };
        let flagged = sol.status == SolveStatus::Infeasible || sol.violation > FEASIBILITY_FLAG_TOL;
        Ok(MpcResult {
            u0: u_seq[0].clone(),
            u_seq,
            y_s: image.y_s,
            x_s,
            u_s,
            theta,
            lambda_lo,
            lambda_hi,
            cost: sol.cost,
            nlp: sol,
            solve_time,
            flagged,
        })
    }

    /// Offset cost of a reference: `|y_s - y_t|²_T` in standard mode and
    /// `|theta - theta_t|²_T` in the chart modes.
    pub fn offset_cost(&self, target: &Target, reference: &DVector<f64>) -> f64 {
        let goal = match self.config.mode {
            MpcMode::Standard => &target.y_t,
            _ => target.theta_t.as_ref().expect("chart modes carry a transformed target"),
        };
        let d = reference - goal;
        d.dot(&(&self.config.t * &d))
    }

    /// Minimizer of the offset cost over admissible references.
    ///
    /// In the chart modes this is a convex quadratic over the box `Θ`. In
    /// standard mode the weighted projection onto `{psi >= delta_eps}` is
    /// computed from several starts and the best local solution kept.
    pub fn offset_optimum(&self, y_t: &DVector<f64>) -> Result<OffsetOptimum, MpcError> {
        let target = self.target(y_t)?;
        match (&self.chart, self.config.mode) {
            (Some(chart), MpcMode::Homeo | MpcMode::Normal) => {
                let theta_t = target.theta_t.clone().expect("chart modes carry a transformed target");
                let p = theta_t.len();
                let mut lo = DVector::zeros(p);
                let mut hi = DVector::zeros(p);
                for (slot, &d) in chart.basis_dims().iter().enumerate() {
                    let (l, h) = chart.basis_region().interval(slot);
                    lo[d] = l;
                    hi[d] = h;
                }
                lo[chart.fiber_dim()] = 0.0;
                hi[chart.fiber_dim()] = 1.0;
                let problem = WeightedProjection {
                    goal: theta_t.clone(),
                    weight: self.config.t.clone(),
                    lo: lo.clone(),
                    hi: hi.clone(),
                    set: None,
                };
                let start = DVector::from_fn(p, |i, _| theta_t[i].clamp(lo[i], hi[i]));
                let sol = nlp::solve(&problem, &start, &tight_options())?;
                let theta = sol.z;
                let y = chart.forward_cartesian(theta.as_slice())?;
                Ok(OffsetOptimum {
                    cost: self.offset_cost(&target, &theta),
                    y_s: DVector::from_vec(y),
                    theta: Some(theta),
                })
            }
            _ => {
                let set = &self.plant.constraints().output_set;
                let margin = self.config.delta_eps;
                if set.psi(y_t.as_slice()) >= margin {
                    return Ok(OffsetOptimum {
                        y_s: y_t.clone(),
                        theta: None,
                        cost: 0.0,
                    });
                }
                let p = y_t.len();
                let bbox = set.bbox();
                let problem = WeightedProjection {
                    goal: y_t.clone(),
                    weight: self.config.t.clone(),
                    lo: DVector::from_column_slice(&bbox.lo),
                    hi: DVector::from_column_slice(&bbox.hi),
                    set: Some((set.clone(), margin)),
                };
                let per_axis: usize = if p <= 2 { 9 } else { 4 };
                let mut best: Option<DVector<f64>> = None;
                let mut best_cost = f64::INFINITY;
                let mut start = vec![0.0; p];
                for flat in 0..per_axis.pow(p as u32) {
                    let mut rem = flat;
                    for (axis, s) in start.iter_mut().enumerate() {
                        let i = rem % per_axis;
                        rem /= per_axis;
                        let (l, h) = bbox.interval(axis);
                        *s = l + (h - l) * (i as f64 + 0.5) / per_axis as f64;
                    }
                    if set.psi(&start) < margin {
                        continue;
                    }
                    let sol = nlp::solve(&problem, &DVector::from_column_slice(&start), &tight_options())?;
                    if sol.status == SolveStatus::Optimal && sol.cost < best_cost {
                        best_cost = sol.cost;
                        best = Some(sol.z);
                    }
                }
                let y_s = best.ok_or_else(|| {
                    MpcError::InvalidConfig("no admissible starting point found for the offset optimum".into())
                })?;
                Ok(OffsetOptimum {
                    y_s,
                    theta: None,
                    cost: best_cost,
                })
            }
        }
    }
}

fn tight_options() -> SqpOptions {
    SqpOptions {
        tol: 1e-10,
        feas_tol: 1e-10,
        ..SqpOptions::default()
    }
}

/// `min (v - goal)ᵀ W (v - goal)` over a box, optionally with `psi(v) >= margin`.
struct WeightedProjection {
    goal: DVector<f64>,
    weight: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    set: Option<(crate::setgeom::ImplicitSet, f64)>,
}

impl NlpProblem for WeightedProjection {
    fn dim(&self) -> usize {
        self.goal.len()
    }
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.lo.clone(), self.hi.clone())
    }
    fn evaluate(&self, z: &DVector<f64>) -> Result<nlp::Evaluation, NlpError> {
        let d = z - &self.goal;
        let ineq = match &self.set {
            Some((set, margin)) => DVector::from_vec(vec![set.psi(z.as_slice()) - margin]),
            None => DVector::zeros(0),
        };
        Ok(nlp::Evaluation {
            cost: d.dot(&(&self.weight * &d)),
            eq: DVector::zeros(0),
            ineq,
        })
    }
    fn differentiate(&self, z: &DVector<f64>) -> Result<nlp::Derivatives, NlpError> {
        let d = z - &self.goal;
        let n = z.len();
        let ineq_jac = match &self.set {
            Some((set, _)) => DMatrix::from_row_slice(1, n, &set.psi_gradient(z.as_slice())),
            None => DMatrix::zeros(0, n),
        };
        Ok(nlp::Derivatives {
            grad: &self.weight * d * 2.0,
            eq_jac: DMatrix::zeros(0, n),
            ineq_jac,
        })
    }
    fn hessian_guess(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(&self.weight * 2.0)
    }
}

#[cfg(test)]
mod tests;
