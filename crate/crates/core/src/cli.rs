//! Command-line front end: problem files, verb dispatch and JSON reports.
//!
//! Every report is a JSON object with sorted keys holding the verb, the tool
//! version, the seed, the discretization, the parsed parameters, a SHA-256
//! digest of the problem file bytes plus parameters, and the results. Nothing
//! time-dependent is written, so identical inputs give identical bytes.
//!
//! Exit codes: 0 on success, 1 for usage and input-file errors, 2 for domain
//! errors raised by the numerical modules.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::multiplicity::{chain_residual, jordan_system_in, EigenRecord, NodalLayout};
use crate::nep::{self, NepOptions, Rectangle, Workspace};
use crate::pencil::{
    validate_problem, BCTerm, BoundaryRow, CoeffFn, Component, Diagnostic, Discretization, PencilOperator,
    PencilProblem, RowKind, Side, TrigTerm,
};
use crate::report::{self, eval_singular_on, singular_functions, WeightLine, DEFAULT_RE_HALFWIDTH};
use crate::sector::{
    self, CaseParams, GridSolution, NormFlavor, PolarGrid, SectorProblem2D, SideCondition,
};
use crate::C64;

// ---------------------------------------------------------------------------
// Problem files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FileError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("problem violates invariants: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
}

fn schema(path: &str, message: impl Into<String>) -> FileError {
    FileError::Schema { path: path.into(), message: message.into() }
}

/// A sector problem together with the grid named in its file.
#[derive(Debug, Clone)]
pub struct SectorSpec {
    pub problem: SectorProblem2D,
    pub grid: PolarGrid,
    pub rhs: String,
    pub dirichlet: String,
}

#[derive(Debug, Clone)]
pub enum ProblemFile {
    Pencil(PencilProblem),
    Sector(SectorSpec),
}

fn field<'v>(obj: &'v Value, path: &str, key: &str) -> Result<&'v Value, FileError> {
    match obj {
        Value::Object(m) => m.get(key).ok_or_else(|| schema(path, format!("missing key `{key}`"))),
        _ => Err(schema(path, "expected an object")),
    }
}

fn sub(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn num(v: &Value, path: &str) -> Result<f64, FileError> {
    v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| schema(path, "expected a finite number"))
}

fn uint(v: &Value, path: &str) -> Result<u64, FileError> {
    v.as_u64().ok_or_else(|| schema(path, "expected a non-negative integer"))
}

fn array<'v>(v: &'v Value, path: &str) -> Result<&'v Vec<Value>, FileError> {
    v.as_array().ok_or_else(|| schema(path, "expected an array"))
}

fn complex(v: &Value, path: &str) -> Result<C64, FileError> {
    match v {
        Value::Array(a) if a.len() == 2 => Ok(C64::new(num(&a[0], &format!("{path}[0]"))?, num(&a[1], &format!("{path}[1]"))?)),
        Value::Number(_) => Ok(C64::new(num(v, path)?, 0.0)),
        _ => Err(schema(path, "expected [re, im]")),
    }
}

fn cjson(z: C64) -> Value {
    json!([z.re, z.im])
}

fn parse_coeff(v: &Value, path: &str) -> Result<CoeffFn, FileError> {
    if let Some(t) = v.get("trig") {
        let tp = sub(path, "trig");
        let mut terms = Vec::new();
        for (i, e) in array(t, &tp)?.iter().enumerate() {
            let ep = format!("{tp}[{i}]");
            terms.push(TrigTerm {
                harmonic: uint(field(e, &ep, "harmonic")?, &sub(&ep, "harmonic"))? as u32,
                cos_amp: complex(field(e, &ep, "cos")?, &sub(&ep, "cos"))?,
                sin_amp: complex(field(e, &ep, "sin")?, &sub(&ep, "sin"))?,
            });
        }
        Ok(CoeffFn::TrigPoly(terms))
    } else {
        Ok(CoeffFn::Constant(complex(v, path)?))
    }
}

fn parse_operator(v: &Value, path: &str, default_order: Option<u32>) -> Result<PencilOperator, FileError> {
    let tp = sub(path, "terms");
    let mut terms = BTreeMap::new();
    let mut top = 0;
    for (i, e) in array(field(v, path, "terms")?, &tp)?.iter().enumerate() {
        let ep = format!("{tp}[{i}]");
        let dphi = uint(field(e, &ep, "dphi")?, &sub(&ep, "dphi"))? as u32;
        let lam = uint(field(e, &ep, "lam")?, &sub(&ep, "lam"))? as u32;
        let coeff = parse_coeff(field(e, &ep, "coeff")?, &sub(&ep, "coeff"))?;
        if terms.insert((dphi, lam), coeff).is_some() {
            return Err(schema(&ep, format!("duplicate term ({dphi}, {lam})")));
        }
        top = top.max(dphi + lam);
    }
    let order = match v.get("order") {
        Some(o) => uint(o, &sub(path, "order"))? as u32,
        None => default_order.unwrap_or(top),
    };
    Ok(PencilOperator { order, terms })
}

fn parse_pencil(v: &Value) -> Result<PencilProblem, FileError> {
    let m = uint(field(v, "", "m")?, "m")? as u32;
    let mut components = Vec::new();
    for (i, c) in array(field(v, "", "components")?, "components")?.iter().enumerate() {
        let cp = format!("components[{i}]");
        let iv = array(field(c, &cp, "interval")?, &sub(&cp, "interval"))?;
        if iv.len() != 2 {
            return Err(schema(&sub(&cp, "interval"), "expected [d1, d2]"));
        }
        let ip = sub(&cp, "interval");
        let interval = (num(&iv[0], &format!("{ip}[0]"))?, num(&iv[1], &format!("{ip}[1]"))?);
        let operator = parse_operator(field(c, &cp, "operator")?, &sub(&cp, "operator"), Some(2 * m))?;
        components.push(Component { interval, operator });
    }
    let mut rows = Vec::new();
    for (i, r) in array(field(v, "", "rows")?, "rows")?.iter().enumerate() {
        let rp = format!("rows[{i}]");
        let component = uint(field(r, &rp, "component")?, &sub(&rp, "component"))? as usize;
        let side = match field(r, &rp, "side")?.as_str() {
            Some("lower") => Side::Lower,
            Some("upper") => Side::Upper,
            _ => return Err(schema(&sub(&rp, "side"), "expected \"lower\" or \"upper\"")),
        };
        let row_order = uint(field(r, &rp, "row_order")?, &sub(&rp, "row_order"))? as u32;
        let kind = match r.get("kind").map(|k| k.as_str()) {
            None | Some(Some("standard")) => RowKind::Standard,
            Some(Some("periodic")) => RowKind::PeriodicMatch(row_order),
            _ => return Err(schema(&sub(&rp, "kind"), "expected \"standard\" or \"periodic\"")),
        };
        let tp = sub(&rp, "terms");
        let mut terms = Vec::new();
        for (k, t) in array(field(r, &rp, "terms")?, &tp)?.iter().enumerate() {
            let ep = format!("{tp}[{k}]");
            let source = uint(field(t, &ep, "source")?, &sub(&ep, "source"))? as usize;
            let shift = match t.get("shift") {
                Some(s) => num(s, &sub(&ep, "shift"))?,
                None => 0.0,
            };
            let chi = match t.get("chi") {
                Some(s) => num(s, &sub(&ep, "chi"))?,
                None => 1.0,
            };
            if chi <= 0.0 {
                return Err(schema(&sub(&ep, "chi"), "chi must be > 0"));
            }
            let op = parse_operator(field(t, &ep, "op")?, &sub(&ep, "op"), None)?;
            terms.push(BCTerm { source, shift, chi, op });
        }
        rows.push(BoundaryRow { component, side, row_order, terms, kind });
    }
    let p = PencilProblem { m, components, rows };
    let diags = validate_problem(&p);
    if diags.is_empty() {
        Ok(p)
    } else {
        Err(FileError::Invalid(diags))
    }
}

fn parse_sector(v: &Value) -> Result<SectorSpec, FileError> {
    let d = num(field(v, "", "d")?, "d")?;
    let radius = num(field(v, "", "R")?, "R")?;
    let c = match (v.get("c"), v.get("h"), v.get("p")) {
        (Some(c), None, None) => complex(c, "c")?,
        (None, Some(h), Some(p)) => {
            let (h, p) = (num(h, "h")?, num(p, "p")?);
            C64::from_polar(p * p, h)
        }
        (None, None, None) => C64::new(0.0, 0.0),
        _ => return Err(schema("c", "give either `c` or both `h` and `p`")),
    };
    let sides_v = array(field(v, "", "sides")?, "sides")?;
    if sides_v.len() != 2 {
        return Err(schema("sides", "expected two side conditions"));
    }
    let mut sides = [SideCondition { alpha: 0.0, shift: 0.0 }; 2];
    for (i, s) in sides_v.iter().enumerate() {
        let sp = format!("sides[{i}]");
        sides[i] = SideCondition {
            alpha: num(field(s, &sp, "alpha")?, &sub(&sp, "alpha"))?,
            shift: num(field(s, &sp, "shift")?, &sub(&sp, "shift"))?,
        };
    }
    let gv = field(v, "", "grid")?;
    let grid = PolarGrid::new(
        uint(field(gv, "grid", "n_r")?, "grid.n_r")? as usize,
        uint(field(gv, "grid", "n_a")?, "grid.n_a")? as usize,
        num(field(gv, "grid", "rho_g")?, "grid.rho_g")?,
    );
    let r0 = match v.get("r0") {
        Some(x) => num(x, "r0")?,
        None => 1e-4 * radius,
    };
    let name = |key: &str| -> Result<String, FileError> {
        match v.get(key) {
            None => Ok("zero".into()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(schema(key, "expected a built-in name")),
        }
    };
    let rhs_name = name("rhs")?;
    let dirichlet_name = name("dirichlet")?;

    let mut problem = SectorProblem2D {
        opening: d,
        radius,
        r0,
        c,
        sides,
        rhs: std::sync::Arc::new(|_, _| C64::new(0.0, 0.0)),
        dirichlet: std::sync::Arc::new(|_| C64::new(0.0, 0.0)),
    };
    let manufactured = || -> Result<SectorProblem2D, FileError> {
        let half = d / 2.0;
        if sides.iter().any(|s| (s.shift - half).abs() > 1e-12 * half.max(1.0)) {
            return Err(schema("sides", "smooth_compliant data needs both shifts equal to d/2"));
        }
        let params = CaseParams { opening: d, alpha1: sides[0].alpha, alpha2: sides[1].alpha, radius, c };
        sector::manufactured_case("smooth_compliant", &params)
            .map(|(sp, _)| sp)
            .map_err(|e| schema("", e.to_string()))
    };
    problem.rhs = match rhs_name.as_str() {
        "zero" => problem.rhs,
        "one" => std::sync::Arc::new(|_, _| C64::new(1.0, 0.0)),
        "smooth_compliant" => manufactured()?.rhs,
        "unit_bump" => sector::unit_bump(d, radius, &grid),
        other => return Err(schema("rhs", format!("unknown built-in `{other}` (zero, one, smooth_compliant, unit_bump)"))),
    };
    problem.dirichlet = match dirichlet_name.as_str() {
        "zero" => problem.dirichlet,
        "one" => std::sync::Arc::new(|_| C64::new(1.0, 0.0)),
        "sin2phi" => std::sync::Arc::new(|phi: f64| C64::new((2.0 * phi).sin(), 0.0)),
        "smooth_compliant" => manufactured()?.dirichlet,
        other => {
            return Err(schema("dirichlet", format!("unknown built-in `{other}` (zero, one, sin2phi, smooth_compliant)")))
        }
    };
    Ok(SectorSpec { problem, grid, rhs: rhs_name, dirichlet: dirichlet_name })
}

/// Parses a pencil problem (`m`, `components`, `rows`) or a sector problem (`d`, `R`, `sides`, `grid`).
pub fn parse_problem_file(text: &str) -> Result<ProblemFile, FileError> {
    let v: Value = serde_json::from_str(text).map_err(|e| FileError::Syntax(e.to_string()))?;
    if !v.is_object() {
        return Err(schema("", "expected a JSON object"));
    }
    if v.get("m").is_some() {
        parse_pencil(&v).map(ProblemFile::Pencil)
    } else if v.get("sides").is_some() {
        parse_sector(&v).map(ProblemFile::Sector)
    } else {
        Err(schema("", "neither a pencil problem (`m`) nor a sector problem (`sides`)"))
    }
}

fn coeff_json(c: &CoeffFn) -> Option<Value> {
    match c {
        CoeffFn::Constant(z) => Some(cjson(*z)),
        CoeffFn::TrigPoly(ts) => Some(json!({
            "trig": ts.iter().map(|t| json!({
                "harmonic": t.harmonic, "cos": cjson(t.cos_amp), "sin": cjson(t.sin_amp)
            })).collect::<Vec<_>>()
        })),
        CoeffFn::Callback(_) => None,
    }
}

fn operator_json(op: &PencilOperator) -> Option<Value> {
    let mut terms = Vec::new();
    for ((dphi, lam), c) in &op.terms {
        terms.push(json!({ "dphi": dphi, "lam": lam, "coeff": coeff_json(c)? }));
    }
    Some(json!({ "order": op.order, "terms": terms }))
}

/// File representation of a pencil problem; `None` if a coefficient is a callback.
pub fn problem_to_json(p: &PencilProblem) -> Option<Value> {
    let mut comps = Vec::new();
    for c in &p.components {
        comps.push(json!({ "interval": [c.interval.0, c.interval.1], "operator": operator_json(&c.operator)? }));
    }
    let mut rows = Vec::new();
    for r in &p.rows {
        let mut terms = Vec::new();
        for t in &r.terms {
            terms.push(json!({ "source": t.source, "shift": t.shift, "chi": t.chi, "op": operator_json(&t.op)? }));
        }
        rows.push(json!({
            "component": r.component,
            "side": match r.side { Side::Lower => "lower", Side::Upper => "upper" },
            "row_order": r.row_order,
            "kind": match r.kind { RowKind::Standard => "standard", RowKind::PeriodicMatch(_) => "periodic" },
            "terms": terms,
        }));
    }
    Some(json!({ "m": p.m, "components": comps, "rows": rows }))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "cone-pencil", version, about = "Operator pencils of nonlocal elliptic problems in plane angles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Problem file (JSON).
    #[arg(long)]
    pub problem: PathBuf,
    /// Report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct PencilFlags {
    /// Collocation nodes per component.
    #[arg(long, default_value_t = 48)]
    pub nphi: usize,
    /// Gauss–Legendre nodes per contour edge.
    #[arg(long, default_value_t = 128)]
    pub quad: usize,
    #[arg(long, default_value_t = 8)]
    pub probe_rank: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GridFlags {
    /// Override the file's ring count.
    #[arg(long)]
    pub nr: Option<usize>,
    /// Override the file's angular count.
    #[arg(long)]
    pub na: Option<usize>,
    /// Override the file's grading ratio.
    #[arg(long)]
    pub rho: Option<f64>,
    /// CSV sidecar path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlavorArg {
    H,
    E,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Eigenvalues inside a rectangle.
    Eigs {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pencil: PencilFlags,
        /// re_min re_max im_min im_max
        #[arg(long, num_args = 4, allow_negative_numbers = true, required = true)]
        rect: Vec<f64>,
    },
    /// Eigenvalues and Jordan data in the strip h2 < Im λ < h1.
    StripCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pencil: PencilFlags,
        #[arg(long, allow_negative_numbers = true)]
        h2: f64,
        #[arg(long, allow_negative_numbers = true)]
        h1: f64,
        #[arg(long, default_value_t = DEFAULT_RE_HALFWIDTH)]
        re_halfwidth: f64,
    },
    /// Canonical Jordan system at an eigenvalue.
    Jordan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pencil: PencilFlags,
        /// re im
        #[arg(long, num_args = 2, allow_negative_numbers = true, required = true)]
        lambda: Vec<f64>,
        /// Newton-refine the eigenvalue first.
        #[arg(long)]
        refine: bool,
    },
    /// Singular functions at an eigenvalue, sampled on a ring.
    Asym {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pencil: PencilFlags,
        #[arg(long, num_args = 2, allow_negative_numbers = true, required = true)]
        lambda: Vec<f64>,
        #[arg(long)]
        refine: bool,
        /// Ring radius of the samples.
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        /// Samples per component.
        #[arg(long, default_value_t = 9)]
        points: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fredholm verdict on the line Im λ = a + 1 - l - 2m.
    Verdict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pencil: PencilFlags,
        #[arg(long, allow_negative_numbers = true)]
        a: f64,
        #[arg(long)]
        l: u32,
        /// Defaults to the problem's m.
        #[arg(long)]
        m: Option<u32>,
        #[arg(long, default_value_t = DEFAULT_RE_HALFWIDTH)]
        re_halfwidth: f64,
    },
    /// Compares the spectrum with the mirrored adjoint spectrum.
    AdjointCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pencil: PencilFlags,
        #[arg(long, num_args = 4, allow_negative_numbers = true, required = true)]
        rect: Vec<f64>,
    },
    /// Finite-difference solve of a sector problem.
    SectorSolve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridFlags,
    },
    /// Vertex exponent from ring norms of a sector solution.
    ExponentFit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridFlags,
        /// r_lo r_hi; defaults to (r0, R/8).
        #[arg(long, num_args = 2)]
        window: Option<Vec<f64>>,
    },
    /// ‖u_p‖ for c = e^{ih}p² over a list of p.
    ResolventScan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridFlags,
        #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
        h: f64,
        #[arg(long, num_args = 1.., required = true)]
        p: Vec<f64>,
    },
    /// Convergence of a manufactured case over doubled grids starting at the file's grid.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridFlags,
        #[arg(long, default_value = "smooth_compliant")]
        case: String,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Weighted norm of a sector solution.
    Norm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridFlags,
        #[arg(long, allow_negative_numbers = true)]
        a: f64,
        #[arg(long)]
        k: u32,
        #[arg(long, value_enum)]
        flavor: FlavorArg,
        #[arg(long, num_args = 2)]
        window: Option<Vec<f64>>,
    },
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::Eigs { .. } => "eigs",
            Command::StripCheck { .. } => "strip-check",
            Command::Jordan { .. } => "jordan",
            Command::Asym { .. } => "asym",
            Command::Verdict { .. } => "verdict",
            Command::AdjointCheck { .. } => "adjoint-check",
            Command::SectorSolve { .. } => "sector-solve",
            Command::ExponentFit { .. } => "exponent-fit",
            Command::ResolventScan { .. } => "resolvent-scan",
            Command::Convergence { .. } => "convergence",
            Command::Norm { .. } => "norm",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Eigs { common, .. }
            | Command::StripCheck { common, .. }
            | Command::Jordan { common, .. }
            | Command::Asym { common, .. }
            | Command::Verdict { common, .. }
            | Command::AdjointCheck { common, .. }
            | Command::SectorSolve { common, .. }
            | Command::ExponentFit { common, .. }
            | Command::ResolventScan { common, .. }
            | Command::Convergence { common, .. }
            | Command::Norm { common, .. } => common,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Domain(_) => 2,
        }
    }
}

fn domain<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Domain(e.to_string())
}

/// A finished report plus CSV sidecars to write.
struct Output {
    discretization: Value,
    params: Value,
    results: Value,
    sidecars: Vec<(PathBuf, String)>,
}

fn options(pencil: &PencilFlags, seed: u64) -> NepOptions {
    NepOptions { quad_points: pencil.quad, probe_rank: pencil.probe_rank, seed, ..NepOptions::default() }
}

fn pencil_discretization(pencil: &PencilFlags, opts: &NepOptions) -> Value {
    json!({
        "n_phi": pencil.nphi,
        "quad_points": opts.quad_points,
        "probe_rank": opts.probe_rank,
        "moment_depth": opts.moment_depth,
        "rank_tol": opts.rank_tol,
        "residual_tol": opts.residual_tol,
    })
}

fn rect_of(v: &[f64]) -> Result<Rectangle, Failure> {
    Rectangle::new(v[0], v[1], v[2], v[3]).map_err(|e| Failure::Usage(e.to_string()))
}

fn record_json(rec: &EigenRecord, pm: Option<&crate::pencil::PencilMatrices>) -> Value {
    let mut v = json!({
        "lambda": cjson(rec.lambda),
        "geometric_mult": rec.geometric_mult,
        "algebraic_mult": rec.algebraic_mult,
        "ranks": rec.ranks(),
    });
    if let Some(pm) = pm {
        let res: Vec<f64> = rec.chains.iter().map(|c| chain_residual(pm, rec.lambda, c)).collect();
        v["chain_residuals"] = json!(res);
    }
    v
}

fn lambdas(v: &[C64]) -> Value {
    Value::Array(v.iter().map(|z| cjson(*z)).collect())
}

fn csv_text(header: &str, rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

fn pencil_of(file: ProblemFile) -> Result<PencilProblem, Failure> {
    match file {
        ProblemFile::Pencil(p) => Ok(p),
        ProblemFile::Sector(_) => Err(Failure::Usage("this verb needs a pencil problem file".into())),
    }
}

fn sector_of(file: ProblemFile, g: &GridFlags) -> Result<SectorSpec, Failure> {
    match file {
        ProblemFile::Sector(mut s) => {
            s.grid = PolarGrid::new(g.nr.unwrap_or(s.grid.n_r), g.na.unwrap_or(s.grid.n_a), g.rho.unwrap_or(s.grid.rho_g));
            Ok(s)
        }
        ProblemFile::Pencil(_) => Err(Failure::Usage("this verb needs a sector problem file".into())),
    }
}

fn grid_json(g: &PolarGrid) -> Value {
    json!({ "n_r": g.n_r, "n_a": g.n_a, "rho_g": g.rho_g })
}

fn solve_json(sol: &GridSolution) -> Value {
    json!({
        "unknowns": sol.diagnostics.unknowns,
        "bandwidth": sol.diagnostics.bandwidth,
        "relative_residual": sol.diagnostics.relative_residual,
        "condition_estimate": sol.diagnostics.condition_estimate,
        "l2_norm": sector::l2_norm(sol),
    })
}

fn ring_rows(sol: &GridSolution) -> Vec<Vec<f64>> {
    (0..=sol.grid.n_r).map(|k| vec![sol.r(k), sol.ring_norm(k)]).collect()
}

fn sidecar(path: &Option<PathBuf>, text: impl FnOnce() -> String) -> Vec<(PathBuf, String)> {
    match path {
        Some(p) => vec![(p.clone(), text())],
        None => vec![],
    }
}

fn execute(cmd: &Command, file: ProblemFile) -> Result<Output, Failure> {
    let seed = cmd.common().seed;
    match cmd {
        Command::Eigs { pencil, rect, .. } => {
            let p = pencil_of(file)?;
            let opts = options(pencil, seed);
            let d = Discretization::new(&p, pencil.nphi).map_err(|e| Failure::Usage(e.to_string()))?;
            let r = rect_of(rect)?;
            let est = nep::beyn_eigs(&p, &d, &r, &opts).map_err(domain)?;
            let list: Vec<Value> = est
                .iter()
                .map(|e| json!({ "lambda": cjson(e.lambda), "sigma_min": e.sigma_min, "resolution_stable": e.resolution_stable }))
                .collect();
            Ok(Output {
                discretization: pencil_discretization(pencil, &opts),
                params: json!({ "rect": rect }),
                results: json!({ "count": est.len(), "eigenvalues": list }),
                sidecars: vec![],
            })
        }
        Command::StripCheck { pencil, h2, h1, re_halfwidth, .. } => {
            let p = pencil_of(file)?;
            let opts = options(pencil, seed);
            let d = Discretization::new(&p, pencil.nphi).map_err(|e| Failure::Usage(e.to_string()))?;
            let scan = report::strip_scan(&p, &d, *h2, *h1, *re_halfwidth, &opts).map_err(domain)?;
            Ok(Output {
                discretization: pencil_discretization(pencil, &opts),
                params: json!({ "h2": h2, "h1": h1, "re_halfwidth": re_halfwidth }),
                results: json!({
                    "contour_top": scan.contour_top,
                    "records": scan.records.iter().map(|r| record_json(r, None)).collect::<Vec<_>>(),
                    "notes": scan.notes,
                }),
                sidecars: vec![],
            })
        }
        Command::Jordan { pencil, lambda, refine, .. } | Command::Asym { pencil, lambda, refine, .. } => {
            let p = pencil_of(file)?;
            let opts = options(pencil, seed);
            let d = Discretization::new(&p, pencil.nphi).map_err(|e| Failure::Usage(e.to_string()))?;
            let ws = Workspace::new(&p, &d).map_err(domain)?;
            let mut lam = C64::new(lambda[0], lambda[1]);
            if *refine {
                lam = nep::refine_in(&ws, lam, &opts).map_err(domain)?.lambda;
            }
            let rec = jordan_system_in(&ws.pm, NodalLayout::from_discretization(&d), lam, &opts).map_err(domain)?;
            let params = json!({ "lambda": lambda, "refine": refine });
            let discretization = pencil_discretization(pencil, &opts);
            if let Command::Asym { r, points, csv, .. } = cmd {
                if *points < 2 || !(*r > 0.0) {
                    return Err(Failure::Usage("asym needs --points >= 2 and --r > 0".into()));
                }
                let mut funcs = Vec::new();
                let mut rows = Vec::new();
                for (idx, f) in singular_functions(&rec).iter().enumerate() {
                    let mut samples = Vec::new();
                    for (j, comp) in p.components.iter().enumerate() {
                        let (a, b) = comp.interval;
                        for s in 0..*points {
                            let phi = a + (b - a) * s as f64 / (*points - 1) as f64;
                            let z = eval_singular_on(f, j, *r, phi).map_err(domain)?;
                            samples.push(json!({ "component": j, "phi": phi, "value": cjson(z) }));
                            rows.push(vec![idx as f64, j as f64, phi, z.re, z.im]);
                        }
                    }
                    funcs.push(json!({ "chain": f.chain, "k": f.k, "samples": samples }));
                }
                let mut params = params;
                params["r"] = json!(r);
                params["points"] = json!(points);
                return Ok(Output {
                    discretization,
                    params,
                    results: json!({ "record": record_json(&rec, Some(&ws.pm)), "singular_functions": funcs }),
                    sidecars: sidecar(csv, || csv_text("function,component,phi,re,im", rows.into_iter())),
                });
            }
            Ok(Output {
                discretization,
                params,
                results: json!({ "record": record_json(&rec, Some(&ws.pm)) }),
                sidecars: vec![],
            })
        }
        Command::Verdict { pencil, a, l, m, re_halfwidth, .. } => {
            let p = pencil_of(file)?;
            let opts = options(pencil, seed);
            let d = Discretization::new(&p, pencil.nphi).map_err(|e| Failure::Usage(e.to_string()))?;
            let wl = WeightLine::new(*a, *l, m.unwrap_or(p.m));
            let v = report::fredholm_verdict(&p, &d, &wl, *re_halfwidth, &opts).map_err(domain)?;
            Ok(Output {
                discretization: pencil_discretization(pencil, &opts),
                params: json!({ "a": a, "l": l, "m": wl.m, "re_halfwidth": re_halfwidth }),
                results: json!({
                    "status": v.status.as_str(),
                    "line_im": v.line.beta,
                    "witnesses": lambdas(&v.witnesses),
                    "notes": v.notes,
                }),
                sidecars: vec![],
            })
        }
        Command::AdjointCheck { pencil, rect, .. } => {
            let p = pencil_of(file)?;
            let opts = options(pencil, seed);
            let d = Discretization::new(&p, pencil.nphi).map_err(|e| Failure::Usage(e.to_string()))?;
            let r = rect_of(rect)?;
            let rep = report::adjoint_symmetry_check(&p, &d, &r, &opts).map_err(domain)?;
            let ar = rep.adjoint_rect;
            Ok(Output {
                discretization: pencil_discretization(pencil, &opts),
                params: json!({ "rect": rect }),
                results: json!({
                    "spectrum": lambdas(&rep.spectrum),
                    "adjoint_rect": [ar.re_min, ar.re_max, ar.im_min, ar.im_max],
                    "adjoint_spectrum": lambdas(&rep.adjoint_spectrum),
                    "mapped": lambdas(&rep.mapped),
                    "hausdorff": rep.hausdorff,
                }),
                sidecars: vec![],
            })
        }
        Command::SectorSolve { grid, .. } => {
            let s = sector_of(file, grid)?;
            let sol = sector::solve_sector(&s.problem, &s.grid).map_err(domain)?;
            let inner = (1..sol.grid.n_r).map(|k| sol.ring_norm(k)).collect::<Vec<_>>();
            Ok(Output {
                discretization: grid_json(&s.grid),
                params: json!({ "rhs": s.rhs, "dirichlet": s.dirichlet }),
                results: json!({
                    "solve": solve_json(&sol),
                    "side_residual": sector::side_residual(&s.problem, &sol),
                    "max_ring_norm": inner.iter().cloned().fold(0.0, f64::max),
                }),
                sidecars: sidecar(&grid.csv, || csv_text("r,l2_ring_norm", ring_rows(&sol).into_iter())),
            })
        }
        Command::ExponentFit { grid, window, .. } => {
            let s = sector_of(file, grid)?;
            let (lo, hi) = match window {
                Some(w) => (w[0], w[1]),
                None => (s.problem.r0, s.problem.radius / 8.0),
            };
            let sol = sector::solve_sector(&s.problem, &s.grid).map_err(domain)?;
            let fit = sector::fit_exponent(&sol, (lo, hi)).map_err(domain)?;
            let rows: Vec<Vec<f64>> = fit.radii.iter().zip(&fit.ring_norms).map(|(r, v)| vec![*r, *v]).collect();
            Ok(Output {
                discretization: grid_json(&s.grid),
                params: json!({ "window": [lo, hi], "rhs": s.rhs, "dirichlet": s.dirichlet }),
                results: json!({ "beta": fit.beta, "r2_fit": fit.r2_fit, "rings": fit.radii.len(), "solve": solve_json(&sol) }),
                sidecars: sidecar(&grid.csv, || csv_text("r,l2_ring_norm", rows.into_iter())),
            })
        }
        Command::ResolventScan { grid, h, p: ps, .. } => {
            let s = sector_of(file, grid)?;
            let rec = sector::resolvent_scan(&s.problem, *h, ps, &s.grid).map_err(domain)?;
            let rows: Vec<Vec<f64>> = rec.p_values.iter().zip(&rec.norms).map(|(p, n)| vec![*p, *n]).collect();
            Ok(Output {
                discretization: grid_json(&s.grid),
                params: json!({ "h": h, "p": ps, "rhs": s.rhs, "dirichlet": s.dirichlet }),
                results: json!({ "norms": rec.norms, "slope": rec.slope, "r2_fit": rec.r2_fit }),
                sidecars: sidecar(&grid.csv, || csv_text("p,l2_norm", rows.into_iter())),
            })
        }
        Command::Convergence { grid, case, levels, .. } => {
            let s = sector_of(file, grid)?;
            let sp = &s.problem;
            let half = sp.opening / 2.0;
            if sp.sides.iter().any(|c| (c.shift - half).abs() > 1e-12 * half.max(1.0)) {
                return Err(Failure::Usage("manufactured cases need both shifts equal to d/2".into()));
            }
            let params = CaseParams {
                opening: sp.opening,
                alpha1: sp.sides[0].alpha,
                alpha2: sp.sides[1].alpha,
                radius: sp.radius,
                c: sp.c,
            };
            let mut grids = vec![s.grid];
            for _ in 1..*levels {
                grids.push(grids.last().unwrap().refined());
            }
            let rec = sector::convergence_study(case, &params, &grids).map_err(domain)?;
            let rows: Vec<Vec<f64>> =
                rec.errors.iter().map(|e| vec![e.grid.n_r as f64, e.grid.n_a as f64, e.l2, e.max]).collect();
            Ok(Output {
                discretization: Value::Array(grids.iter().map(grid_json).collect()),
                params: json!({ "case": case, "levels": levels }),
                results: json!({
                    "errors": rec.errors.iter().map(|e| json!({ "grid": grid_json(&e.grid), "l2": e.l2, "max": e.max })).collect::<Vec<_>>(),
                    "l2_order": rec.l2_order,
                    "max_order": rec.max_order,
                }),
                sidecars: sidecar(&grid.csv, || csv_text("n_r,n_a,l2_error,max_error", rows.into_iter())),
            })
        }
        Command::Norm { grid, a, k, flavor, window, .. } => {
            let s = sector_of(file, grid)?;
            if *k > 2 {
                return Err(Failure::Usage("--k must be 0, 1 or 2".into()));
            }
            let sol = sector::solve_sector(&s.problem, &s.grid).map_err(domain)?;
            let fl = match flavor {
                FlavorArg::H => NormFlavor::H,
                FlavorArg::E => NormFlavor::E,
            };
            let w = window.as_ref().map(|w| (w[0], w[1]));
            let value = sector::weighted_norm(&sol, *a, *k, fl, w);
            Ok(Output {
                discretization: grid_json(&s.grid),
                params: json!({ "a": a, "k": k, "flavor": format!("{flavor:?}"), "window": window }),
                results: json!({ "norm": value, "solve": solve_json(&sol) }),
                sidecars: sidecar(&grid.csv, || csv_text("r,l2_ring_norm", ring_rows(&sol).into_iter())),
            })
        }
    }
}

fn digest(bytes: &[u8], params: &Value, discretization: &Value) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.update([0u8]);
    h.update(params.to_string().as_bytes());
    h.update([0u8]);
    h.update(discretization.to_string().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn run_command(cmd: &Command, stdout: &mut dyn Write) -> Result<(), Failure> {
    let path: &Path = &cmd.common().problem;
    let bytes = std::fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let file = parse_problem_file(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let out = execute(cmd, file)?;
    let report = json!({
        "verb": cmd.verb(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cmd.common().seed,
        "digest": digest(&bytes, &out.params, &out.discretization),
        "discretization": out.discretization,
        "params": out.params,
        "results": out.results,
    });
    let mut text = serde_json::to_string_pretty(&report).map_err(domain)?;
    text.push('\n');
    let write = |p: &Path, s: &str| std::fs::write(p, s).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())));
    match &cmd.common().out {
        Some(p) => write(p, &text)?,
        None => stdout.write_all(text.as_bytes()).map_err(|e| Failure::Usage(e.to_string()))?,
    }
    for (p, s) in &out.sidecars {
        write(p, s)?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match run_command(&cli.command, stdout) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {f}");
            f.code()
        }
    }
}
