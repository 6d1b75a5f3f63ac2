use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::mpct::{LambdaExtremes, MpcConfig, MpcMode, TerminalIngredient, TrackingMpc};
use crate::nlp::SqpOptions;
use crate::plant::{BallOnPlate, ConstraintSet, PlantModel};
use crate::setgeom::{
    r_intersection, r_union, BoundingBox, CertificationReport, Chart, Ellipsoid, ImplicitSet, NormalSetChart, RVariant,
};

/// Fibers sampled per basis axis when a chart is certified at load time.
pub const CERTIFY_GRID: usize = 64;
/// Certification resolution as a fraction of the fiber length.
pub const CERTIFY_RESOLUTION: f64 = 1e-4;

/// A closed-loop experiment: plant, admissible set, controller, solver and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub plant: PlantSpec,
    pub set: SetSpec,
    pub mpc: MpcSpec,
    #[serde(default)]
    pub solver: SqpOptions,
    pub run: RunSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub name: String,
    #[serde(rename = "Ts")]
    pub ts: f64,
    /// Interiority radius of the restricted constraint set.
    #[serde(default = "default_plant_epsilon")]
    pub epsilon: f64,
}

fn default_plant_epsilon() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    pub primitives: Vec<Primitive>,
    pub composition: Composition,
    #[serde(default)]
    pub variant: RVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart: Option<ChartSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Ellipsoid { center: Vec<f64>, shape: MatrixSpec },
}

/// Composition tree over the primitives: a bare index picks one primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Composition {
    Primitive(usize),
    Union { union: Vec<Composition> },
    Intersection { intersection: Vec<Composition> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    Identity,
    Polar,
}

/// Chart descriptor. Omitted fields are resolved at load time and echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub kind: ChartKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiber_dim: Option<usize>,
    /// One `[lo, hi]` interval per basis coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_region: Option<Vec<[f64; 2]>>,
}

/// Row-major matrix, or a diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Rows(Vec<Vec<f64>>),
    Diag { diag: Vec<f64> },
}

impl MatrixSpec {
    pub fn to_matrix(&self, field: &str) -> Result<DMatrix<f64>, HarnessError> {
        match self {
            MatrixSpec::Diag { diag } => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(diag))),
            MatrixSpec::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if r == 0 || c == 0 {
                    return Err(HarnessError::invalid(field, "matrix is empty"));
                }
                if rows.iter().any(|row| row.len() != c) {
                    return Err(HarnessError::invalid(field, "rows have different lengths"));
                }
                Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSpec {
    pub mode: MpcMode,
    #[serde(rename = "Nc")]
    pub nc: usize,
    #[serde(rename = "Np")]
    pub np: usize,
    #[serde(rename = "Q")]
    pub q: MatrixSpec,
    #[serde(rename = "R")]
    pub r: MatrixSpec,
    #[serde(rename = "T")]
    pub t: MatrixSpec,
    /// Envelope separation of the normal mode.
    #[serde(default = "default_lambda_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub delta_eps: f64,
    #[serde(default)]
    pub lambda_extremes: LambdaExtremes,
    #[serde(default)]
    pub terminal: TerminalIngredient,
    #[serde(default)]
    pub allow_nonsmooth: bool,
}

fn default_lambda_epsilon() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub x0: Vec<f64>,
    pub y_t: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub stop: StopSpec,
}

fn default_steps() -> usize {
    200
}

/// Stop once `|y - y_t| <= tolerance` has held for `hold` consecutive steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSpec {
    pub tolerance: f64,
    pub hold: usize,
}

impl Default for StopSpec {
    fn default() -> Self {
        Self {
            tolerance: 0.02,
            hold: 10,
        }
    }
}

/// Everything needed to run a scenario.
#[derive(Debug, Clone)]
pub struct Setup {
    pub mpc: TrackingMpc,
    pub x0: DVector<f64>,
    pub y_t: DVector<f64>,
    pub certification: Option<CertificationReport>,
}

/// Reads, parses and validates a scenario file. Defaults are filled in.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Scenario::from_json(&text)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut scenario: Scenario = serde_path_to_error::deserialize(de).map_err(parse_error)?;
        scenario.resolve_defaults()?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios serialize")
    }

    fn resolve_defaults(&mut self) -> Result<(), HarnessError> {
        let p = self.run.y_t.len();
        let Some(chart) = self.set.chart.as_mut() else {
            return Ok(());
        };
        match chart.kind {
            ChartKind::Polar => {
                chart.center.get_or_insert([0.0, 0.0]);
                let start = *chart.branch_start.get_or_insert(-PI);
                chart.basis_dims.get_or_insert_with(|| vec![0]);
                chart.fiber_dim.get_or_insert(1);
                chart
                    .basis_region
                    .get_or_insert_with(|| vec![[start, start + 2.0 * PI]]);
            }
            ChartKind::Identity => {
                if chart.center.is_some() || chart.branch_start.is_some() {
                    return Err(HarnessError::invalid(
                        "set.chart",
                        "identity charts take no center or branch",
                    ));
                }
                chart
                    .basis_dims
                    .get_or_insert_with(|| (0..p.saturating_sub(1)).collect());
                chart.fiber_dim.get_or_insert(p.saturating_sub(1));
                if chart.basis_region.is_none() {
                    return Err(HarnessError::invalid(
                        "set.chart.basis_region",
                        "identity charts need an explicit basis region",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Structural checks that do not need the plant model.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.plant.ts.is_finite() && self.plant.ts > 0.0) {
            return Err(HarnessError::invalid("plant.Ts", "must be positive"));
        }
        let (n, m, p) = plant_dims(&self.plant.name)?;
        if self.mpc.nc > self.mpc.np {
            return Err(HarnessError::invalid(
                "mpc.Nc",
                format!("Nc = {} exceeds Np = {}", self.mpc.nc, self.mpc.np),
            ));
        }
        for (field, spec, dim) in [
            ("mpc.Q", &self.mpc.q, n),
            ("mpc.R", &self.mpc.r, m),
            ("mpc.T", &self.mpc.t, p),
        ] {
            let mat = spec.to_matrix(field)?;
            if mat.nrows() != dim || mat.ncols() != dim {
                return Err(HarnessError::invalid(
                    field,
                    format!("expected {dim}x{dim}, got {}x{}", mat.nrows(), mat.ncols()),
                ));
            }
        }
        if self.run.x0.len() != n {
            return Err(HarnessError::invalid(
                "run.x0",
                format!("expected {n} entries, got {}", self.run.x0.len()),
            ));
        }
        if self.run.y_t.len() != p {
            return Err(HarnessError::invalid(
                "run.y_t",
                format!("expected {p} entries, got {}", self.run.y_t.len()),
            ));
        }
        if self.run.x0.iter().chain(&self.run.y_t).any(|v| !v.is_finite()) {
            return Err(HarnessError::invalid("run", "x0 and y_t must be finite"));
        }
        if !(self.run.stop.tolerance > 0.0) || self.run.stop.hold == 0 {
            return Err(HarnessError::invalid(
                "run.stop",
                "tolerance must be positive and hold at least 1",
            ));
        }
        if self.set.primitives.is_empty() {
            return Err(HarnessError::invalid(
                "set.primitives",
                "at least one primitive is needed",
            ));
        }
        for (i, prim) in self.set.primitives.iter().enumerate() {
            let Primitive::Ellipsoid { center, .. } = prim;
            if center.len() != p {
                return Err(HarnessError::invalid(
                    format!("set.primitives[{i}].center"),
                    format!("expected {p} entries, got {}", center.len()),
                ));
            }
        }
        check_composition(&self.set.composition, self.set.primitives.len(), "set.composition")?;
        if self.mpc.mode != MpcMode::Standard && self.set.chart.is_none() {
            return Err(HarnessError::invalid(
                "set.chart",
                format!("mode {} needs a chart", self.mpc.mode.as_str()),
            ));
        }
        Ok(())
    }

    pub fn output_set(&self) -> Result<ImplicitSet, HarnessError> {
        let prims = self
            .set
            .primitives
            .iter()
            .enumerate()
            .map(|(i, prim)| {
                let Primitive::Ellipsoid { center, shape } = prim;
                let field = format!("set.primitives[{i}]");
                let shape = shape.to_matrix(&format!("{field}.shape"))?;
                Ellipsoid::new(center.clone(), shape)
                    .map(Ellipsoid::into_set)
                    .map_err(|e| HarnessError::invalid(field, e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        compose(&self.set.composition, &prims, self.set.variant)
    }

    pub fn plant_model(&self) -> Result<PlantModel, HarnessError> {
        let set = self.output_set()?;
        match self.plant.name.as_str() {
            "ball_on_plate" => {
                let dynamics =
                    BallOnPlate::new(self.plant.ts).map_err(|e| HarnessError::invalid("plant", e.to_string()))?;
                let limit = crate::plant::INPUT_LIMIT;
                let cons = ConstraintSet::new(vec![-limit; 2], vec![limit; 2], set, self.plant.epsilon)
                    .map_err(|e| HarnessError::invalid("plant.epsilon", e.to_string()))?;
                PlantModel::new(Arc::new(dynamics), cons).map_err(|e| HarnessError::invalid("plant", e.to_string()))
            }
            other => Err(HarnessError::invalid("plant.name", format!("unknown plant {other:?}"))),
        }
    }

    pub fn chart(&self, set: ImplicitSet) -> Result<Option<NormalSetChart>, HarnessError> {
        let Some(spec) = &self.set.chart else {
            return Ok(None);
        };
        let chart = match spec.kind {
            ChartKind::Identity => Chart::Identity,
            ChartKind::Polar => Chart::Polar {
                center: spec.center.unwrap_or([0.0, 0.0]),
                branch_start: spec.branch_start.unwrap_or(-PI),
            },
        };
        let region = spec
            .basis_region
            .as_ref()
            .ok_or_else(|| HarnessError::invalid("set.chart.basis_region", "missing"))?;
        let intervals: Vec<(f64, f64)> = region.iter().map(|r| (r[0], r[1])).collect();
        let basis_dims = spec.basis_dims.clone().unwrap_or_default();
        let fiber_dim = spec.fiber_dim.unwrap_or(0);
        NormalSetChart::new(
            set,
            chart,
            basis_dims,
            fiber_dim,
            BoundingBox::from_intervals(&intervals),
        )
        .map(Some)
        .map_err(|e| HarnessError::invalid("set.chart", e.to_string()))
    }

    pub fn mpc_config(&self) -> Result<MpcConfig, HarnessError> {
        let (n, m, p) = plant_dims(&self.plant.name)?;
        let mut c = MpcConfig::new(self.mpc.mode, n, m, p);
        c.nc = self.mpc.nc;
        c.np = self.mpc.np;
        c.q = self.mpc.q.to_matrix("mpc.Q")?;
        c.r = self.mpc.r.to_matrix("mpc.R")?;
        c.t = self.mpc.t.to_matrix("mpc.T")?;
        c.epsilon_lambda = self.mpc.epsilon;
        c.delta_eps = self.mpc.delta_eps;
        c.lambda_extremes = self.mpc.lambda_extremes;
        c.terminal = self.mpc.terminal;
        c.solver = self.solver.clone();
        c.allow_nonsmooth = self.mpc.allow_nonsmooth;
        Ok(c)
    }

    /// Builds the controller, certifies the chart and checks that the chart
    /// covers the target.
    pub fn build(&self) -> Result<Setup, HarnessError> {
        let plant = self.plant_model()?;
        let chart = self.chart(plant.constraints().output_set.clone())?;
        let certification = match &chart {
            Some(ch) => Some(
                ch.certify(CERTIFY_GRID, CERTIFY_RESOLUTION)
                    .map_err(|e| HarnessError::invalid("set.chart", format!("normality certification failed: {e}")))?,
            ),
            None => None,
        };
        let chart = if self.mpc.mode == MpcMode::Standard {
            None
        } else {
            chart
        };
        let mpc = TrackingMpc::build(plant, chart, self.mpc_config()?)
            .map_err(|e| HarnessError::invalid("mpc", e.to_string()))?;
        let y_t = DVector::from_vec(self.run.y_t.clone());
        mpc.target(&y_t)
            .map_err(|e| HarnessError::invalid("run.y_t", e.to_string()))?;
        Ok(Setup {
            mpc,
            x0: DVector::from_vec(self.run.x0.clone()),
            y_t,
            certification,
        })
    }
}

fn plant_dims(name: &str) -> Result<(usize, usize, usize), HarnessError> {
    match name {
        "ball_on_plate" => Ok((8, 2, 2)),
        other => Err(HarnessError::invalid("plant.name", format!("unknown plant {other:?}"))),
    }
}

fn check_composition(node: &Composition, count: usize, field: &str) -> Result<(), HarnessError> {
    match node {
        Composition::Primitive(i) if *i >= count => Err(HarnessError::invalid(
            field,
            format!("primitive index {i} out of range ({count} primitives)"),
        )),
        Composition::Primitive(_) => Ok(()),
        Composition::Union { union: kids } | Composition::Intersection { intersection: kids } => {
            if kids.is_empty() {
                return Err(HarnessError::invalid(field, "empty composition node"));
            }
            kids.iter()
                .enumerate()
                .try_for_each(|(k, kid)| check_composition(kid, count, &format!("{field}[{k}]")))
        }
    }
}

fn compose(node: &Composition, prims: &[ImplicitSet], variant: RVariant) -> Result<ImplicitSet, HarnessError> {
    let fold = |kids: &[Composition], union: bool| -> Result<ImplicitSet, HarnessError> {
        let mut acc = compose(&kids[0], prims, variant)?;
        for kid in &kids[1..] {
            let next = compose(kid, prims, variant)?;
            acc = if union {
                r_union(&acc, &next, variant)
            } else {
                r_intersection(&acc, &next, variant)
            }
            .map_err(|e| HarnessError::invalid("set.composition", e.to_string()))?;
        }
        Ok(acc)
    };
    match node {
        Composition::Primitive(i) => Ok(prims[*i].clone()),
        Composition::Union { union } => fold(union, true),
        Composition::Intersection { intersection } => fold(intersection, false),
    }
}

fn parse_error(err: serde_path_to_error::Error<serde_json::Error>) -> HarnessError {
    let path = err.path().to_string();
    let inner = err.into_inner();
    let message = inner.to_string();
    // a missing field is reported at its parent; name the field itself
    let field = match message
        .strip_prefix("missing field `")
        .and_then(|r| r.split('`').next())
    {
        Some(name) if path == "." => name.to_string(),
        Some(name) => format!("{path}.{name}"),
        None => path,
    };
    HarnessError::Parse { field, message }
}
