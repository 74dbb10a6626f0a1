//! Experiment configuration: TOML with arithmetic expression strings.
//!
//! Every expression keeps its source span, so both syntax errors and
//! precondition failures (for example a non-positive γ) are reported with
//! the line and column of the offending value.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::heat::{Envelope, TimeGrid};
use crate::mesh::{build_box_mesh, build_disk_mesh, Mesh, ScalarField, TensorField};

/// Configuration used when no file is given.
pub const DEFAULT_CONFIG: &str = r#"seed = 7

[domain]
shape = "box"
lengths = [1.0, 1.0]
divisions = [64, 64]

[coefficients]
gamma = "1 + 0.3*exp(-((x-0.5)^2 + (y-0.5)^2)/0.02)"
kappa = "1"
tensor = [["1", "0"], ["0", "1"]]
lower_bound = 1e-3

[source]
h = "x"
h_tilde = "y"
envelope = "ramp"
epsilon = 1e-3

[time]
t_end = 5.0
dt = 0.02
stride = 5

[solver]
tolerance = 1e-10
cluster_rtol = 1e-6
modes = 150

[measure]
map = "sigma"
probes = ["x", "y", "x^2 - y^2", "x*y", "x^3 - 3*x*y^2", "3*x^2*y - y^3",
          "x^4 - 6*x^2*y^2 + y^4", "x^3*y - x*y^3", "exp(x)*cos(y)", "exp(x)*sin(y)",
          "exp(y)*cos(x)", "exp(y)*sin(x)"]
impulse_probes = 5
impulse_dt = 2e-3
impulse_t_end = 1.0

[reconstruct]
divisions = [32, 32]
gamma_basis = ["1", "x - 0.5", "y - 0.5", "exp(-((x-0.5)^2 + (y-0.5)^2)/0.02)"]
gamma_initial = [1.0, 0.0, 0.0, 0.0]
kappa_basis = ["1", "x - 0.5", "y - 0.5", "exp(-((x-0.5)^2 + (y-0.5)^2)/0.02)"]
tensor = [["1", "0"], ["0", "1"]]
tikhonov = 1e-8
window = [0.1, 1.0]
mode_budget = 40
clusters = 5
kappa_modes = 300
margin = 0.2

[halfspace]
tensor = [["2", "1"], ["1", "1"]]
frequencies = [6.283185307179586, 12.566370614359172]
depths = [0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2]
divisions = [128, 128]
thickness = 1.0
a_nn = 1.0

[cgo]
gamma = "1 + 0.5*exp(-((x-0.5)^2 + (y-0.5)^2 + (z-0.5)^2)/0.05)"
xi = [1.0, 1.0, 0.0]
radii = [20.0, 40.0, 80.0, 160.0]
grid = 48
probes = 40
basis = 10
"#;

/// Maps a byte offset to 1-based (line, column).
pub fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(src.len());
    let before = &src[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, col)
}

fn config_error(src: &str, span: Range<usize>, message: impl Into<String>) -> Error {
    let (line, column) = line_col(src, span.start);
    Error::Config {
        line,
        column,
        message: message.into(),
    }
}

/// An expression with the position of its first character in the file.
#[derive(Clone, Debug)]
pub struct SourcedExpr {
    pub expr: Expr,
    pub line: usize,
    pub column: usize,
}

impl SourcedExpr {
    fn parse(src: &str, s: &Spanned<String>) -> Result<SourcedExpr> {
        // span covers the quotes; the expression starts one byte later
        let start = s.span().start + 1;
        let (line, column) = line_col(src, start);
        let expr = Expr::parse(s.get_ref()).map_err(|e| Error::Config {
            line,
            column: column + e.column - 1,
            message: format!("bad expression `{}`: {}", s.get_ref(), e.message),
        })?;
        Ok(SourcedExpr { expr, line, column })
    }

    /// Standalone expression (no file position).
    pub fn inline(text: &str) -> Result<SourcedExpr> {
        let expr = Expr::parse(text).map_err(|e| Error::Config {
            line: 1,
            column: e.column,
            message: format!("bad expression `{text}`: {}", e.message),
        })?;
        Ok(SourcedExpr { expr, line: 1, column: 1 })
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    pub fn sample(&self, mesh: &Mesh) -> ScalarField {
        ScalarField::from_fn(mesh, |p| self.expr.eval(p))
    }
}

/// A coefficient given by an expression or a JSON array file of nodal values.
#[derive(Clone, Debug)]
pub enum FieldSpec {
    Expr(SourcedExpr),
    File { path: PathBuf, line: usize, column: usize },
}

impl FieldSpec {
    fn error(&self, message: impl Into<String>) -> Error {
        let (line, column) = match self {
            FieldSpec::Expr(e) => (e.line, e.column),
            FieldSpec::File { line, column, .. } => (*line, *column),
        };
        Error::Config {
            line,
            column,
            message: message.into(),
        }
    }

    /// Nodal values on a mesh, checked against a positive lower bound.
    pub fn positive_field(&self, mesh: &Mesh, name: &str, lower: f64) -> Result<ScalarField> {
        let f = match self {
            FieldSpec::Expr(e) => e.sample(mesh),
            FieldSpec::File { path, .. } => {
                let text = std::fs::read_to_string(path).map_err(|e| self.error(format!("{}: {e}", path.display())))?;
                let values: Vec<f64> = serde_json::from_str(&text).map_err(|e| self.error(format!("{}: {e}", path.display())))?;
                if values.len() != mesh.node_count() {
                    return Err(self.error(format!(
                        "{} has {} values for {} nodes",
                        path.display(),
                        values.len(),
                        mesh.node_count()
                    )));
                }
                ScalarField::new(values)
            }
        };
        for (i, v) in f.values.iter().enumerate() {
            if !(*v >= lower) || !v.is_finite() {
                let p = mesh.point(i);
                return Err(self.error(format!(
                    "{name} must be ≥ {lower:e}; found {v} at ({})",
                    p.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(f)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawField {
    Expr(String),
    Num(f64),
    File { file: String },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawScalar {
    Num(f64),
    Expr(String),
}

fn field_spec(src: &str, base: &Path, raw: &Spanned<RawField>) -> Result<FieldSpec> {
    let (line, column) = line_col(src, raw.span().start);
    match raw.get_ref() {
        RawField::Expr(s) => {
            let start = raw.span().start + 1;
            let (line, column) = line_col(src, start);
            let expr = Expr::parse(s).map_err(|e| Error::Config {
                line,
                column: column + e.column - 1,
                message: format!("bad expression `{s}`: {}", e.message),
            })?;
            Ok(FieldSpec::Expr(SourcedExpr { expr, line, column }))
        }
        RawField::Num(v) => Ok(FieldSpec::Expr(SourcedExpr {
            expr: Expr::parse(&format!("{v:e}")).expect("number literal"),
            line,
            column,
        })),
        RawField::File { file } => {
            let path = base.join(file);
            if !path.exists() {
                return Err(config_error(src, raw.span(), format!("file {} does not exist", path.display())));
            }
            Ok(FieldSpec::File { path, line, column })
        }
    }
}

fn tensor_exprs(src: &str, rows: &Spanned<Vec<Vec<Spanned<RawScalar>>>>, dim: usize) -> Result<Vec<Vec<SourcedExpr>>> {
    if rows.get_ref().len() != dim || rows.get_ref().iter().any(|r| r.len() != dim) {
        return Err(config_error(src, rows.span(), format!("tensor must be a {dim}×{dim} array")));
    }
    let mut out = Vec::new();
    for row in rows.get_ref() {
        let mut r = Vec::new();
        for entry in row {
            let (line, column) = line_col(src, entry.span().start);
            let e = match entry.get_ref() {
                RawScalar::Num(v) => SourcedExpr {
                    expr: Expr::parse(&format!("{v:e}")).expect("number literal"),
                    line,
                    column,
                },
                RawScalar::Expr(s) => SourcedExpr::parse(src, &Spanned::new(entry.span(), s.clone()))?,
            };
            r.push(e);
        }
        out.push(r);
    }
    for i in 0..dim {
        for j in 0..i {
            if out[i][j].expr.source().trim() != out[j][i].expr.source().trim() {
                let e = &out[i][j];
                return Err(e.error("tensor must be symmetric: entries (i,j) and (j,i) differ"));
            }
        }
    }
    Ok(out)
}

/// Samples a symmetric tensor expression on a mesh and checks ellipticity.
pub fn sample_tensor(mesh: &Mesh, entries: &[Vec<SourcedExpr>], c0: f64) -> Result<TensorField> {
    let d = mesh.dim;
    let t = TensorField::from_fn(mesh, |p| {
        let mut a = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = entries[i][j].expr.eval(p);
            }
        }
        for i in 0..d {
            for j in 0..i {
                let m = 0.5 * (a[i][j] + a[j][i]);
                a[i][j] = m;
                a[j][i] = m;
            }
        }
        a
    });
    t.check(c0).map_err(|e| entries[0][0].error(format!("tensor: {e}")))?;
    Ok(t)
}

/// Constant tensor value at a point.
pub fn tensor_at(entries: &[Vec<SourcedExpr>], p: &[f64]) -> Vec<Vec<f64>> {
    entries.iter().map(|r| r.iter().map(|e| e.expr.eval(p)).collect()).collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    shape: Spanned<String>,
    lengths: Option<Vec<f64>>,
    radius: Option<f64>,
    divisions: Spanned<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficients {
    gamma: Option<Spanned<RawField>>,
    kappa: Option<Spanned<RawField>>,
    tensor: Option<Spanned<Vec<Vec<Spanned<RawScalar>>>>>,
    lower_bound: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    h: Option<Spanned<String>>,
    h_tilde: Option<Spanned<String>>,
    power: Option<Spanned<String>>,
    envelope: Option<Spanned<String>>,
    epsilon: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTime {
    t_end: Spanned<f64>,
    dt: Spanned<f64>,
    stride: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tolerance: Option<Spanned<f64>>,
    cluster_rtol: Option<Spanned<f64>>,
    modes: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasure {
    map: Option<Spanned<String>>,
    probes: Option<Vec<Spanned<String>>>,
    powers: Option<Vec<Spanned<String>>>,
    impulse_probes: Option<usize>,
    impulse_dt: Option<Spanned<f64>>,
    impulse_t_end: Option<Spanned<f64>>,
    noise: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReconstruct {
    divisions: Option<Spanned<Vec<usize>>>,
    gamma_basis: Option<Vec<Spanned<String>>>,
    gamma_initial: Option<Vec<f64>>,
    kappa_basis: Option<Vec<Spanned<String>>>,
    tensor: Option<Spanned<Vec<Vec<Spanned<RawScalar>>>>>,
    tikhonov: Option<Spanned<f64>>,
    window: Option<Spanned<Vec<f64>>>,
    mode_budget: Option<usize>,
    clusters: Option<usize>,
    kappa_modes: Option<usize>,
    margin: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHalfspace {
    tensor: Spanned<Vec<Vec<Spanned<RawScalar>>>>,
    frequencies: Spanned<Vec<f64>>,
    depths: Spanned<Vec<f64>>,
    divisions: Option<[usize; 2]>,
    thickness: Option<Spanned<f64>>,
    a_nn: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCgo {
    gamma: Spanned<String>,
    xi: Spanned<Vec<f64>>,
    radii: Spanned<Vec<f64>>,
    grid: Option<usize>,
    probes: Option<usize>,
    basis: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output: Option<String>,
    domain: RawDomain,
    coefficients: Option<RawCoefficients>,
    source: Option<RawSource>,
    time: Option<RawTime>,
    solver: Option<RawSolver>,
    measure: Option<RawMeasure>,
    reconstruct: Option<toml::Value>,
    halfspace: Option<RawHalfspace>,
    cgo: Option<RawCgo>,
}

#[derive(Deserialize)]
struct ReconstructOnly {
    reconstruct: Option<RawReconstruct>,
}

/// Domain geometry.
#[derive(Clone, Debug, PartialEq)]
pub enum DomainSpec {
    Box { lengths: Vec<f64>, divisions: Vec<usize> },
    Disk { radius: f64, divisions: usize },
}

impl DomainSpec {
    pub fn build(&self) -> Result<Mesh> {
        match self {
            DomainSpec::Box { lengths, divisions } => build_box_mesh(lengths.len(), lengths, divisions),
            DomainSpec::Disk { radius, divisions } => build_disk_mesh(*radius, *divisions),
        }
    }

    pub fn with_divisions(&self, divisions: &[usize]) -> DomainSpec {
        match self {
            DomainSpec::Box { lengths, .. } => DomainSpec::Box {
                lengths: lengths.clone(),
                divisions: divisions.to_vec(),
            },
            DomainSpec::Disk { radius, .. } => DomainSpec::Disk {
                radius: *radius,
                divisions: divisions[0],
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainSpec::Box { lengths, .. } => lengths.len(),
            DomainSpec::Disk { .. } => 2,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            DomainSpec::Box { lengths, divisions } => serde_json::json!({"shape": "box", "lengths": lengths, "divisions": divisions}),
            DomainSpec::Disk { radius, divisions } => serde_json::json!({"shape": "disk", "radius": radius, "divisions": divisions}),
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Result<DomainSpec> {
        let bad = || Error::invalid("malformed domain description");
        let nums = |k: &str| -> Option<Vec<f64>> { v.get(k)?.as_array()?.iter().map(|x| x.as_f64()).collect() };
        match v.get("shape").and_then(|s| s.as_str()) {
            Some("box") => Ok(DomainSpec::Box {
                lengths: nums("lengths").ok_or_else(bad)?,
                divisions: nums("divisions").ok_or_else(bad)?.iter().map(|&d| d as usize).collect(),
            }),
            Some("disk") => Ok(DomainSpec::Disk {
                radius: v.get("radius").and_then(|x| x.as_f64()).ok_or_else(bad)?,
                divisions: v.get("divisions").and_then(|x| x.as_u64()).ok_or_else(bad)? as usize,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoefficientSpec {
    pub gamma: FieldSpec,
    pub kappa: FieldSpec,
    pub tensor: Vec<Vec<SourcedExpr>>,
    pub lower_bound: f64,
}

/// Sampled coefficients on a mesh.
pub struct Coefficients {
    pub gamma: ScalarField,
    pub kappa: ScalarField,
    pub tensor: TensorField,
}

impl CoefficientSpec {
    /// Samples γ, κ and A on the mesh and checks positivity and ellipticity
    /// before any solve.
    pub fn sample(&self, mesh: &Mesh) -> Result<Coefficients> {
        Ok(Coefficients {
            gamma: self.gamma.positive_field(mesh, "γ", self.lower_bound)?,
            kappa: self.kappa.positive_field(mesh, "κ", self.lower_bound)?,
            tensor: sample_tensor(mesh, &self.tensor, self.lower_bound)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SourceSpec {
    pub h: SourcedExpr,
    pub h_tilde: Option<SourcedExpr>,
    pub power: Option<SourcedExpr>,
    pub envelope: Envelope,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverSpec {
    pub tolerance: f64,
    pub cluster_rtol: f64,
    pub modes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Sigma,
    Xi,
}

#[derive(Clone, Debug)]
pub struct MeasureSpec {
    pub map: MapKind,
    pub probes: Vec<SourcedExpr>,
    /// Prescribed power densities for the Ξ map.
    pub powers: Vec<SourcedExpr>,
    pub impulse_probes: usize,
    pub impulse_dt: f64,
    pub impulse_t_end: f64,
    pub noise: f64,
}

#[derive(Clone, Debug)]
pub struct ReconstructSpec {
    pub divisions: Vec<usize>,
    pub gamma_basis: Vec<SourcedExpr>,
    pub gamma_initial: Vec<f64>,
    pub kappa_basis: Vec<SourcedExpr>,
    pub tensor: Vec<Vec<SourcedExpr>>,
    pub tikhonov: f64,
    pub window: [f64; 2],
    pub mode_budget: usize,
    pub clusters: usize,
    pub kappa_modes: usize,
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct HalfspaceSpec {
    pub tensor: Vec<Vec<f64>>,
    pub frequencies: Vec<f64>,
    pub depths: Vec<f64>,
    pub divisions: [usize; 2],
    pub thickness: f64,
    pub a_nn: f64,
}

#[derive(Clone, Debug)]
pub struct CgoSpec {
    pub gamma: SourcedExpr,
    pub xi: [f64; 3],
    pub radii: Vec<f64>,
    pub grid: usize,
    pub probes: usize,
    pub basis: usize,
}

/// Fully validated experiment configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub domain: DomainSpec,
    pub coefficients: Option<CoefficientSpec>,
    pub source: Option<SourceSpec>,
    pub time: Option<TimeGrid>,
    pub solver: SolverSpec,
    pub measure: Option<MeasureSpec>,
    pub halfspace: Option<HalfspaceSpec>,
    pub cgo: Option<CgoSpec>,
    /// SHA-256 of the configuration text.
    pub digest: String,
}

fn positive(src: &str, v: &Spanned<f64>, what: &str) -> Result<f64> {
    let x = *v.get_ref();
    if !(x > 0.0) || !x.is_finite() {
        return Err(config_error(src, v.span(), format!("{what} must be positive, found {x}")));
    }
    Ok(x)
}

fn exprs(src: &str, list: &[Spanned<String>]) -> Result<Vec<SourcedExpr>> {
    list.iter().map(|s| SourcedExpr::parse(src, s)).collect()
}

fn toml_error(src: &str, e: toml::de::Error) -> Error {
    let (line, column) = e.span().map_or((1, 1), |s| line_col(src, s.start));
    Error::Config {
        line,
        column,
        message: e.message().to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            column: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses and validates a configuration text; relative file references
    /// resolve against `base`.
    pub fn parse(src: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(src).map_err(|e| toml_error(src, e))?;
        let d = &raw.domain;
        let divs = d.divisions.get_ref().clone();
        let domain = match d.shape.get_ref().as_str() {
            "box" => {
                let lengths = d.lengths.clone().unwrap_or_else(|| vec![1.0; divs.len()]);
                if !(2..=3).contains(&lengths.len()) || lengths.len() != divs.len() {
                    return Err(config_error(src, d.divisions.span(), "box needs 2 or 3 lengths and as many divisions"));
                }
                if lengths.iter().any(|l| !(*l > 0.0)) {
                    return Err(config_error(src, d.shape.span(), "box lengths must be positive"));
                }
                if divs.iter().any(|&n| n < 2) {
                    return Err(config_error(src, d.divisions.span(), "divisions must be ≥ 2 per axis"));
                }
                DomainSpec::Box { lengths, divisions: divs }
            }
            "disk" => {
                let radius = d.radius.unwrap_or(1.0);
                if !(radius > 0.0) {
                    return Err(config_error(src, d.shape.span(), "disk radius must be positive"));
                }
                if divs.len() != 1 || divs[0] < 2 || divs[0] % 2 != 0 {
                    return Err(config_error(src, d.divisions.span(), "disk needs one even division count ≥ 2"));
                }
                DomainSpec::Disk { radius, divisions: divs[0] }
            }
            other => return Err(config_error(src, d.shape.span(), format!("unknown shape `{other}` (box or disk)"))),
        };
        let dim = domain.dim();

        let coefficients = match &raw.coefficients {
            None => None,
            Some(c) => {
                let lower_bound = match &c.lower_bound {
                    Some(v) => positive(src, v, "lower_bound")?,
                    None => 1e-8,
                };
                let one = || FieldSpec::Expr(SourcedExpr::inline("1").expect("constant"));
                let gamma = match &c.gamma {
                    Some(g) => field_spec(src, base, g)?,
                    None => one(),
                };
                let kappa = match &c.kappa {
                    Some(k) => field_spec(src, base, k)?,
                    None => one(),
                };
                let tensor = match &c.tensor {
                    Some(t) => tensor_exprs(src, t, dim)?,
                    None => identity_exprs(dim),
                };
                // constant coefficients can be checked without a mesh
                for (f, name) in [(&gamma, "γ"), (&kappa, "κ")] {
                    if let FieldSpec::Expr(e) = f {
                        if e.expr.is_constant() {
                            let v = e.expr.eval(&[]);
                            if !(v >= lower_bound) {
                                return Err(e.error(format!("{name} must be ≥ {lower_bound:e}; found constant {v}")));
                            }
                        }
                    }
                }
                Some(CoefficientSpec {
                    gamma,
                    kappa,
                    tensor,
                    lower_bound,
                })
            }
        };

        let source = match &raw.source {
            None => None,
            Some(s) => {
                let envelope = match s.envelope.as_ref().map(|e| e.get_ref().as_str()) {
                    None | Some("ramp") => Envelope::Ramp,
                    Some("impulse") => Envelope::Impulse,
                    Some("pulse") => {
                        let eps = match &s.epsilon {
                            Some(e) => positive(src, e, "epsilon")?,
                            None => 1e-3,
                        };
                        Envelope::Pulse { epsilon: eps }
                    }
                    Some(other) => {
                        return Err(config_error(
                            src,
                            s.envelope.as_ref().unwrap().span(),
                            format!("unknown envelope `{other}` (ramp, pulse or impulse)"),
                        ))
                    }
                };
                Some(SourceSpec {
                    h: match &s.h {
                        Some(h) => SourcedExpr::parse(src, h)?,
                        None => SourcedExpr::inline("x")?,
                    },
                    h_tilde: s.h_tilde.as_ref().map(|h| SourcedExpr::parse(src, h)).transpose()?,
                    power: s.power.as_ref().map(|h| SourcedExpr::parse(src, h)).transpose()?,
                    envelope,
                })
            }
        };

        let time = match &raw.time {
            None => None,
            Some(t) => {
                let dt = positive(src, &t.dt, "dt")?;
                let t_end = positive(src, &t.t_end, "t_end")?;
                Some(TimeGrid::new(t_end, dt).with_stride(t.stride.unwrap_or(1)))
            }
        };

        let solver = match &raw.solver {
            None => SolverSpec {
                tolerance: 1e-10,
                cluster_rtol: 1e-6,
                modes: 150,
            },
            Some(s) => SolverSpec {
                tolerance: match &s.tolerance {
                    Some(v) => positive(src, v, "tolerance")?,
                    None => 1e-10,
                },
                cluster_rtol: match &s.cluster_rtol {
                    Some(v) => positive(src, v, "cluster_rtol")?,
                    None => 1e-6,
                },
                modes: s.modes.unwrap_or(150).max(1),
            },
        };

        let measure = match &raw.measure {
            None => None,
            Some(m) => {
                let map = match m.map.as_ref().map(|s| s.get_ref().as_str()) {
                    None | Some("sigma") => MapKind::Sigma,
                    Some("xi") => MapKind::Xi,
                    Some(other) => {
                        return Err(config_error(src, m.map.as_ref().unwrap().span(), format!("unknown map `{other}` (sigma or xi)")))
                    }
                };
                let probes = match &m.probes {
                    Some(p) => exprs(src, p)?,
                    None => ["x", "y", "x^2 - y^2", "x*y"].iter().map(|s| SourcedExpr::inline(s)).collect::<Result<_>>()?,
                };
                let powers = match &m.powers {
                    Some(p) => exprs(src, p)?,
                    None => Vec::new(),
                };
                if map == MapKind::Xi && powers.is_empty() {
                    return Err(config_error(src, m.map.as_ref().unwrap().span(), "the xi map needs a `powers` list"));
                }
                Some(MeasureSpec {
                    map,
                    impulse_probes: m.impulse_probes.unwrap_or(5).min(probes.len()).max(1),
                    probes,
                    powers,
                    impulse_dt: match &m.impulse_dt {
                        Some(v) => positive(src, v, "impulse_dt")?,
                        None => 2e-3,
                    },
                    impulse_t_end: match &m.impulse_t_end {
                        Some(v) => positive(src, v, "impulse_t_end")?,
                        None => 1.0,
                    },
                    noise: match &m.noise {
                        Some(v) if *v.get_ref() < 0.0 => return Err(config_error(src, v.span(), "noise must be ≥ 0")),
                        Some(v) => *v.get_ref(),
                        None => 0.0,
                    },
                })
            }
        };

        // the reconstruct table is validated on its own so that errors in it
        // surface here too
        if raw.reconstruct.is_some() {
            ReconstructSpec::parse(src, dim)?;
        }

        let halfspace = match &raw.halfspace {
            None => None,
            Some(h) => {
                let tensor: Vec<Vec<f64>> = tensor_exprs(src, &h.tensor, 2)?
                    .iter()
                    .map(|r| r.iter().map(|e| e.expr.eval(&[])).collect())
                    .collect();
                if h.frequencies.get_ref().is_empty() || h.frequencies.get_ref().iter().any(|f| !(*f > 0.0)) {
                    return Err(config_error(src, h.frequencies.span(), "frequencies must be positive"));
                }
                let depths = h.depths.get_ref().clone();
                if depths.len() < 3 || depths.windows(2).any(|w| w[1] <= w[0]) || depths[0] <= 0.0 {
                    return Err(config_error(src, h.depths.span(), "need ≥ 3 strictly increasing positive depths"));
                }
                Some(HalfspaceSpec {
                    tensor,
                    frequencies: h.frequencies.get_ref().clone(),
                    depths,
                    divisions: h.divisions.unwrap_or([128, 128]),
                    thickness: match &h.thickness {
                        Some(v) => positive(src, v, "thickness")?,
                        None => 1.0,
                    },
                    a_nn: match &h.a_nn {
                        Some(v) => positive(src, v, "a_nn")?,
                        None => 1.0,
                    },
                })
            }
        };

        let cgo = match &raw.cgo {
            None => None,
            Some(c) => {
                let xi = c.xi.get_ref();
                if xi.len() != 3 || xi.iter().all(|v| *v == 0.0) {
                    return Err(config_error(src, c.xi.span(), "ξ must be a nonzero 3-vector"));
                }
                if c.radii.get_ref().is_empty() || c.radii.get_ref().iter().any(|r| !(*r > 0.0)) {
                    return Err(config_error(src, c.radii.span(), "radii must be positive"));
                }
                Some(CgoSpec {
                    gamma: SourcedExpr::parse(src, &c.gamma)?,
                    xi: [xi[0], xi[1], xi[2]],
                    radii: c.radii.get_ref().clone(),
                    grid: c.grid.unwrap_or(48).max(8),
                    probes: c.probes.unwrap_or(40),
                    basis: c.basis.unwrap_or(10),
                })
            }
        };

        Ok(ExperimentConfig {
            seed: raw.seed.unwrap_or(0),
            output: raw.output.map(|o| base.join(o)),
            domain,
            coefficients,
            source,
            time,
            solver,
            measure,
            halfspace,
            cgo,
            digest: crate::io::digest(src.as_bytes()),
        })
    }

    pub fn default_config() -> Self {
        Self::parse(DEFAULT_CONFIG, Path::new(".")).expect("built-in configuration is valid")
    }

    pub fn require_coefficients(&self) -> Result<&CoefficientSpec> {
        self.coefficients.as_ref().ok_or_else(|| Error::Config {
            line: 0,
            column: 0,
            message: "missing [coefficients] table".into(),
        })
    }
}

fn identity_exprs(dim: usize) -> Vec<Vec<SourcedExpr>> {
    (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| SourcedExpr::inline(if i == j { "1" } else { "0" }).expect("constant"))
                .collect()
        })
        .collect()
}

impl ReconstructSpec {
    /// Reads only the `[reconstruct]` table of a configuration text; every
    /// other table, including the coefficients, is ignored.
    pub fn parse(src: &str, dim: usize) -> Result<ReconstructSpec> {
        let raw: ReconstructOnly = toml::from_str(src).map_err(|e| toml_error(src, e))?;
        let r = raw.reconstruct.unwrap_or(RawReconstruct {
            divisions: None,
            gamma_basis: None,
            gamma_initial: None,
            kappa_basis: None,
            tensor: None,
            tikhonov: None,
            window: None,
            mode_budget: None,
            clusters: None,
            kappa_modes: None,
            margin: None,
        });
        let divisions = match &r.divisions {
            Some(d) => {
                if d.get_ref().iter().any(|&n| n < 2) {
                    return Err(config_error(src, d.span(), "divisions must be ≥ 2"));
                }
                d.get_ref().clone()
            }
            None => vec![32; dim],
        };
        let default_basis = || -> Result<Vec<SourcedExpr>> { Ok(vec![SourcedExpr::inline("1")?]) };
        let gamma_basis = match &r.gamma_basis {
            Some(b) => exprs(src, b)?,
            None => default_basis()?,
        };
        let kappa_basis = match &r.kappa_basis {
            Some(b) => exprs(src, b)?,
            None => default_basis()?,
        };
        let mut gamma_initial = r.gamma_initial.clone().unwrap_or_default();
        gamma_initial.resize(gamma_basis.len(), 0.0);
        if r.gamma_initial.is_none() {
            gamma_initial[0] = 1.0;
        }
        let window = match &r.window {
            Some(w) => {
                let v = w.get_ref();
                if v.len() != 2 || !(v[0] > 0.0) || v[1] <= v[0] {
                    return Err(config_error(src, w.span(), "window must be [t_min, t_max] with 0 < t_min < t_max"));
                }
                [v[0], v[1]]
            }
            None => [0.1, 1.0],
        };
        Ok(ReconstructSpec {
            divisions,
            gamma_basis,
            gamma_initial,
            kappa_basis,
            tensor: match &r.tensor {
                Some(t) => tensor_exprs(src, t, dim)?,
                None => identity_exprs(dim),
            },
            tikhonov: match &r.tikhonov {
                Some(v) => positive(src, v, "tikhonov")?,
                None => 1e-8,
            },
            window,
            mode_budget: r.mode_budget.unwrap_or(40).max(1),
            clusters: r.clusters.unwrap_or(5).max(1),
            kappa_modes: r.kappa_modes.unwrap_or(300).max(1),
            margin: match &r.margin {
                Some(v) if !(*v.get_ref() >= 0.0 && *v.get_ref() < 0.5) => {
                    return Err(config_error(src, v.span(), "margin must lie in [0, 0.5)"))
                }
                Some(v) => *v.get_ref(),
                None => 0.2,
            },
        })
    }

    pub fn from_file(path: &Path, dim: usize) -> Result<ReconstructSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            column: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text, dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ExperimentConfig::default_config();
        assert_eq!(c.domain.dim(), 2);
        assert!(c.coefficients.is_some());
        let r = ReconstructSpec::parse(DEFAULT_CONFIG, 2).unwrap();
        assert_eq!(r.gamma_basis.len(), 4);
        assert_eq!(r.gamma_initial, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn syntax_errors_have_line_and_column() {
        let src = "[domain]\nshape = \"box\"\ndivisions = [4, 4]\n[coefficients]\ngamma = \"1 + foo(x)\"\n";
        match ExperimentConfig::parse(src, Path::new(".")) {
            Err(Error::Config { line, column, .. }) => {
                assert_eq!(line, 5);
                // `gamma = "` is 9 characters, then `1 + ` precedes foo
                assert_eq!(column, 14);
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = "[domain]\nshape = \"box\"\ndivisions = [4, 4\n";
        assert!(matches!(ExperimentConfig::parse(bad, Path::new(".")), Err(Error::Config { line: 3, .. })));
    }

    #[test]
    fn non_positive_gamma_rejected_before_solving() {
        let src = "[domain]\nshape = \"box\"\ndivisions = [4, 4]\n[coefficients]\ngamma = \"-1\"\n";
        let e = ExperimentConfig::parse(src, Path::new(".")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let src = "[domain]\nshape = \"box\"\ndivisions = [4, 4]\n[coefficients]\ngamma = \"γ = -1\"\n";
        assert_eq!(ExperimentConfig::parse(src, Path::new(".")).unwrap_err().exit_code(), 2);
        let src = "[domain]\nshape = \"box\"\ndivisions = [4, 4]\n[coefficients]\ngamma = \"x - 0.5\"\n";
        let c = ExperimentConfig::parse(src, Path::new(".")).unwrap();
        let mesh = c.domain.build().unwrap();
        let e = c.coefficients.unwrap().sample(&mesh).err().unwrap();
        assert!(matches!(e, Error::Config { line: 5, .. }));
    }

    #[test]
    fn reconstruct_ignores_other_tables() {
        let src = "[coefficients]\ngamma = \"not valid (\"\n[reconstruct]\ndivisions = [8, 8]\n";
        let r = ReconstructSpec::parse(src, 2).unwrap();
        assert_eq!(r.divisions, vec![8, 8]);
    }

    #[test]
    fn unknown_keys_and_bad_tolerances() {
        let src = "[domain]\nshape = \"box\"\ndivisions = [4, 4]\nfoo = 1\n";
        assert!(ExperimentConfig::parse(src, Path::new(".")).is_err());
        let src = "[domain]\nshape = \"box\"\ndivisions = [4, 4]\n[solver]\ntolerance = 0.0\n";
        assert!(matches!(ExperimentConfig::parse(src, Path::new(".")), Err(Error::Config { line: 5, .. })));
    }
}
