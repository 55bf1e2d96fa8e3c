//! Finite differences for `-Δu + c·u = f` on a truncated sector with nonlocal
//! side conditions `u(r, 0) = α₁ u(r, s₁)` and `u(r, d) = α₂ u(r, d - s₂)`.
//!
//! The grid is uniform in `τ = ln r`, so rings are geometrically graded toward
//! the vertex: `r_k = R·ρ^{n_r - k}`, `k = 0..=n_r`. In these variables the
//! equation reads `-(u_ττ + u_φφ) + c·r²·u = r²·f` and is discretized with the
//! five-point stencil. Ring `n_r` carries the outer Dirichlet data. The
//! innermost ring `k = 0` closes the grid with `u = 0`; no node sits at `r = 0`.
//! Unknowns are ordered ring-major, so the matrix is banded with half-width `n_a + 1`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;

use crate::linalg::{BandError, BandMatrix};
use crate::multiplicity::jordan_system_in;
use crate::nep::{self, NepOptions, Workspace};
use crate::pencil::{builtin_problem, Discretization};
use crate::report::{eval_singular, singular_functions, SingularFunction};
use crate::C64;

pub type Field = Arc<dyn Fn(f64, f64) -> C64 + Send + Sync>;
pub type BoundaryData = Arc<dyn Fn(f64) -> C64 + Send + Sync>;

/// `u(side) - α·u(side ± shift) = 0`, the shift pointing into the sector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideCondition {
    pub alpha: f64,
    pub shift: f64,
}

#[derive(Clone)]
pub struct SectorProblem2D {
    pub opening: f64,
    pub radius: f64,
    /// Default lower end of exponent-fit windows.
    pub r0: f64,
    pub c: C64,
    pub sides: [SideCondition; 2],
    pub rhs: Field,
    pub dirichlet: BoundaryData,
}

impl std::fmt::Debug for SectorProblem2D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SectorProblem2D")
            .field("opening", &self.opening)
            .field("radius", &self.radius)
            .field("r0", &self.r0)
            .field("c", &self.c)
            .field("sides", &self.sides)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarGrid {
    pub n_r: usize,
    pub n_a: usize,
    pub rho_g: f64,
}

impl PolarGrid {
    pub fn new(n_r: usize, n_a: usize, rho_g: f64) -> Self {
        PolarGrid { n_r, n_a, rho_g }
    }

    /// Twice as many rings and angles over the same radial range.
    pub fn refined(&self) -> Self {
        PolarGrid { n_r: 2 * self.n_r, n_a: 2 * self.n_a, rho_g: self.rho_g.sqrt() }
    }

    pub fn dtau(&self) -> f64 {
        -self.rho_g.ln()
    }

    pub fn ring_radius(&self, radius: f64, k: usize) -> f64 {
        radius * self.rho_g.powi((self.n_r - k) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub unknowns: usize,
    pub bandwidth: usize,
    /// `‖A·u - b‖₂ / max(‖b‖₂, tiny)`.
    pub relative_residual: f64,
    /// Estimate of the 1-norm condition number.
    pub condition_estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub grid: PolarGrid,
    pub radius: f64,
    pub opening: f64,
    /// `values[k·(n_a+1) + j] = u(r_k, φ_j)`.
    pub values: Vec<C64>,
    pub diagnostics: SolveDiagnostics,
}

impl GridSolution {
    pub fn at(&self, k: usize, j: usize) -> C64 {
        self.values[k * (self.grid.n_a + 1) + j]
    }

    pub fn r(&self, k: usize) -> f64 {
        self.grid.ring_radius(self.radius, k)
    }

    pub fn phi(&self, j: usize) -> f64 {
        self.opening * j as f64 / self.grid.n_a as f64
    }

    /// Angular L² norm of ring `k` (trapezoid rule).
    pub fn ring_norm(&self, k: usize) -> f64 {
        let n = self.grid.n_a;
        let h = self.opening / n as f64;
        let s: f64 = (0..=n)
            .map(|j| {
                let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                w * self.at(k, j).norm_sqr()
            })
            .sum();
        (s * h).sqrt()
    }

    /// Replaces nodal values, keeping the grid (for evaluating known functions).
    pub fn with_values(&self, f: impl Fn(f64, f64) -> C64) -> GridSolution {
        let mut out = self.clone();
        for k in 0..=self.grid.n_r {
            for j in 0..=self.grid.n_a {
                out.values[k * (self.grid.n_a + 1) + j] = f(self.r(k), self.phi(j));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SectorError {
    #[error("invalid sector problem: {0}")]
    InvalidProblem(String),
    #[error("grid incompatible with the problem: {0}")]
    GridIncompatible(String),
    #[error("linear system is singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("fit window [{r_lo}, {r_hi}] contains {rings} rings; at least 4 are needed with r_hi <= R/4")]
    WindowTooNarrow { r_lo: f64, r_hi: f64, rings: usize },
    #[error("a scan needs at least 5 increasing parameter values (got {0})")]
    TooFewPoints(usize),
    #[error("resolvent scans need |h| < π/2 (got {0})")]
    BadAngle(f64),
    #[error("unknown manufactured case `{0}`")]
    UnknownCase(String),
    #[error("pencil computation failed: {0}")]
    Pencil(String),
}

fn validate(sp: &SectorProblem2D, grid: &PolarGrid) -> Result<Vec<usize>, SectorError> {
    if !(sp.opening > 0.0 && sp.opening < 2.0 * PI) {
        return Err(SectorError::InvalidProblem(format!("opening {} not in (0, 2π)", sp.opening)));
    }
    if !(sp.radius > 0.0 && sp.radius.is_finite()) {
        return Err(SectorError::InvalidProblem("radius must be positive".into()));
    }
    if !(sp.c.re.is_finite() && sp.c.im.is_finite()) {
        return Err(SectorError::InvalidProblem("c must be finite".into()));
    }
    if grid.n_r < 3 || grid.n_a < 2 || !(grid.rho_g > 0.0 && grid.rho_g < 1.0) {
        return Err(SectorError::GridIncompatible(format!("{grid:?}")));
    }
    let h = sp.opening / grid.n_a as f64;
    let mut offsets = Vec::new();
    for (i, s) in sp.sides.iter().enumerate() {
        if !s.alpha.is_finite() {
            return Err(SectorError::InvalidProblem(format!("side {i}: alpha must be finite")));
        }
        if !(s.shift > 0.0 && s.shift < sp.opening) {
            return Err(SectorError::InvalidProblem(format!("side {i}: shift {} not strictly inside", s.shift)));
        }
        let q = s.shift / h;
        let qi = q.round();
        if (q - qi).abs() > 1e-9 * q.max(1.0) {
            return Err(SectorError::GridIncompatible(format!(
                "side {i}: shift {} is not a multiple of the angular spacing {h}",
                s.shift
            )));
        }
        offsets.push(qi as usize);
    }
    Ok(offsets)
}

/// Solves the nonlocal sector problem on `grid`.
pub fn solve_sector(sp: &SectorProblem2D, grid: &PolarGrid) -> Result<GridSolution, SectorError> {
    let offsets = validate(sp, grid)?;
    let (nr, na) = (grid.n_r, grid.n_a);
    let width = na + 1;
    let n = (nr + 1) * width;
    let bw = width;
    let idx = |k: usize, j: usize| k * width + j;
    let dt = grid.dtau();
    let dp = sp.opening / na as f64;
    let (it2, ip2) = (1.0 / (dt * dt), 1.0 / (dp * dp));
    let one = C64::new(1.0, 0.0);

    let mut a = BandMatrix::zeros(n, bw, bw);
    let mut b = vec![C64::new(0.0, 0.0); n];
    for k in 0..=nr {
        let r = grid.ring_radius(sp.radius, k);
        for j in 0..=na {
            let row = idx(k, j);
            let phi = sp.opening * j as f64 / na as f64;
            if k == 0 {
                a.add(row, row, one);
            } else if k == nr {
                a.add(row, row, one);
                b[row] = (sp.dirichlet)(phi);
            } else if j == 0 {
                a.add(row, row, one);
                a.add(row, idx(k, offsets[0]), C64::new(-sp.sides[0].alpha, 0.0));
            } else if j == na {
                a.add(row, row, one);
                a.add(row, idx(k, na - offsets[1]), C64::new(-sp.sides[1].alpha, 0.0));
            } else {
                a.add(row, row, C64::new(2.0 * it2 + 2.0 * ip2, 0.0) + sp.c * (r * r));
                a.add(row, idx(k - 1, j), C64::new(-it2, 0.0));
                a.add(row, idx(k + 1, j), C64::new(-it2, 0.0));
                a.add(row, idx(k, j - 1), C64::new(-ip2, 0.0));
                a.add(row, idx(k, j + 1), C64::new(-ip2, 0.0));
                b[row] = (sp.rhs)(r, phi) * (r * r);
            }
        }
    }
    let norm_a = a.norm1();
    let lu = a.clone().lu().map_err(|BandError::Singular { .. }| SectorError::Singular { condition: f64::INFINITY })?;
    let u = lu.solve(&b);
    let condition = norm_a * lu.inverse_norm1_estimate();
    if !condition.is_finite() || condition > 1e15 {
        return Err(SectorError::Singular { condition });
    }
    let au = a.mul_vec(&u);
    let res: f64 = au.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let bnorm: f64 = b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    Ok(GridSolution {
        grid: *grid,
        radius: sp.radius,
        opening: sp.opening,
        values: u,
        diagnostics: SolveDiagnostics {
            unknowns: n,
            bandwidth: bw,
            relative_residual: res / bnorm.max(f64::MIN_POSITIVE),
            condition_estimate: condition,
        },
    })
}

/// Largest violation of the discrete side conditions on interior rings.
pub fn side_residual(sp: &SectorProblem2D, sol: &GridSolution) -> f64 {
    let na = sol.grid.n_a;
    let h = sp.opening / na as f64;
    let q0 = (sp.sides[0].shift / h).round() as usize;
    let q1 = (sp.sides[1].shift / h).round() as usize;
    (1..sol.grid.n_r)
        .map(|k| {
            let e0 = (sol.at(k, 0) - sol.at(k, q0) * sp.sides[0].alpha).norm();
            let e1 = (sol.at(k, na) - sol.at(k, na - q1) * sp.sides[1].alpha).norm();
            e0.max(e1)
        })
        .fold(0.0, f64::max)
}

/// Parameters of the manufactured cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseParams {
    pub opening: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub radius: f64,
    pub c: C64,
}

impl Default for CaseParams {
    fn default() -> Self {
        CaseParams { opening: PI / 2.0, alpha1: 0.5, alpha2: 0.5, radius: 1.0, c: C64::new(0.0, 0.0) }
    }
}

pub type Exact = Arc<dyn Fn(f64, f64) -> C64 + Send + Sync>;

/// Coefficients `(A, B)` making `w = 1 + A cos 2φ + B sin 2φ` satisfy both side rows
/// with shifts `d/2`.
pub fn compliant_profile(d: f64, a1: f64, a2: f64) -> Result<(f64, f64), SectorError> {
    let (cd, sd, c2, s2) = (d.cos(), d.sin(), (2.0 * d).cos(), (2.0 * d).sin());
    let m = [[1.0 - a1 * cd, -a1 * sd], [c2 - a2 * cd, s2 - a2 * sd]];
    let rhs = [a1 - 1.0, a2 - 1.0];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return Err(SectorError::InvalidProblem("no compliant r²-profile for these parameters".into()));
    }
    Ok(((rhs[0] * m[1][1] - m[0][1] * rhs[1]) / det, (m[0][0] * rhs[1] - rhs[0] * m[1][0]) / det))
}

/// Leading singular function of the ex21 pencil below the real axis, via the
/// pencil solver: refine near `-i·μ₀` and take the first chain's eigenvector.
pub fn leading_singular(params: &CaseParams, mu_guess: f64) -> Result<SingularFunction, SectorError> {
    let kv = [("d", params.opening), ("alpha1", params.alpha1), ("alpha2", params.alpha2)];
    let map = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let p = builtin_problem("ex21_sector", &map).map_err(|e| SectorError::Pencil(e.to_string()))?;
    let d = Discretization::new(&p, 48).map_err(|e| SectorError::Pencil(e.to_string()))?;
    let ws = Workspace::new(&p, &d).map_err(|e| SectorError::Pencil(e.to_string()))?;
    let opts = NepOptions::default();
    let est = nep::refine_in(&ws, C64::new(0.0, -mu_guess), &opts).map_err(|e| SectorError::Pencil(e.to_string()))?;
    let layout = crate::multiplicity::NodalLayout::from_discretization(&d);
    let rec = jordan_system_in(&ws.pm, layout, est.lambda, &opts).map_err(|e| SectorError::Pencil(e.to_string()))?;
    let mut f = singular_functions(&rec).into_iter().next().ok_or(SectorError::Pencil("empty record".into()))?;
    // Fix the phase so the profile is real and positive at the bisector.
    let mid = eval_singular(&f, 1.0, params.opening / 2.0).map_err(|e| SectorError::Pencil(e.to_string()))?;
    let phase = mid.conj() / mid.norm();
    for v in &mut f.profiles {
        *v *= phase;
    }
    Ok(f)
}

/// Manufactured problems with known solutions.
pub fn manufactured_case(name: &str, params: &CaseParams) -> Result<(SectorProblem2D, Exact), SectorError> {
    let d = params.opening;
    let (a, b) = compliant_profile(d, params.alpha1, params.alpha2)?;
    let w = move |phi: f64| 1.0 + a * (2.0 * phi).cos() + b * (2.0 * phi).sin();
    let c = params.c;
    let radius = params.radius;
    let sides = [
        SideCondition { alpha: params.alpha1, shift: d / 2.0 },
        SideCondition { alpha: params.alpha2, shift: d / 2.0 },
    ];
    let smooth = move |r: f64, phi: f64| C64::new(r * r * w(phi), 0.0);
    match name {
        "smooth_compliant" => {
            let exact: Exact = Arc::new(smooth);
            let sp = SectorProblem2D {
                opening: d,
                radius,
                r0: 1e-3 * radius,
                c,
                sides,
                // -Δ(r²) = -4 and r²cos 2φ, r²sin 2φ are harmonic.
                rhs: Arc::new(move |r, phi| C64::new(-4.0, 0.0) + c * smooth(r, phi)),
                dirichlet: Arc::new(move |phi| smooth(radius, phi)),
            };
            Ok((sp, exact))
        }
        "singular_leading" => {
            let f = Arc::new(leading_singular(params, 4.0 / 3.0)?);
            let g = f.clone();
            let sing = move |r: f64, phi: f64| C64::new(eval_singular(&g, r, phi).map(|z| z.re).unwrap_or(0.0), 0.0);
            let exact: Exact = Arc::new(move |r, phi| sing(r, phi) + smooth(r, phi));
            let e2 = exact.clone();
            let e3 = exact.clone();
            let sp = SectorProblem2D {
                opening: d,
                radius,
                r0: 1e-3 * radius,
                c,
                sides,
                rhs: Arc::new(move |r, phi| C64::new(-4.0, 0.0) + c * e2(r, phi)),
                dirichlet: Arc::new(move |phi| e3(radius, phi)),
            };
            Ok((sp, exact))
        }
        other => Err(SectorError::UnknownCase(other.into())),
    }
}

/// Errors of one grid in a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct GridError {
    pub grid: PolarGrid,
    pub l2: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRecord {
    pub errors: Vec<GridError>,
    /// `None` when the exact solution vanishes (nothing to converge to).
    pub l2_order: Option<f64>,
    pub max_order: Option<f64>,
}

/// Least-squares slope of `ys` against `xs`, with the coefficient of determination.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - (syy - slope * sxy) / syy };
    (slope, intercept, r2)
}

/// Area-weighted discrete L² norm over all nodes (trapezoid in both τ and φ).
pub fn l2_norm(sol: &GridSolution) -> f64 {
    let (nr, na) = (sol.grid.n_r, sol.grid.n_a);
    let (dt, dp) = (sol.grid.dtau(), sol.opening / na as f64);
    let mut s = 0.0;
    for k in 0..=nr {
        let r = sol.r(k);
        let wk = if k == 0 || k == nr { 0.5 } else { 1.0 };
        for j in 0..=na {
            let wj = if j == 0 || j == na { 0.5 } else { 1.0 };
            s += wk * wj * r * r * sol.at(k, j).norm_sqr();
        }
    }
    (s * dt * dp).sqrt()
}

fn grid_error(sol: &GridSolution, exact: &Exact) -> GridError {
    let diff = sol.with_values(|r, phi| exact(r, phi));
    let mut e = diff.clone();
    for (v, s) in e.values.iter_mut().zip(&sol.values) {
        *v -= s;
    }
    GridError { grid: sol.grid, l2: l2_norm(&e), max: e.values.iter().map(|z| z.norm()).fold(0.0, f64::max) }
}

/// Convergence of a manufactured case over successively doubled grids.
pub fn convergence_study(name: &str, params: &CaseParams, grids: &[PolarGrid]) -> Result<RateRecord, SectorError> {
    let (sp, exact) = manufactured_case(name, params)?;
    convergence_of(&sp, &exact, grids)
}

pub fn convergence_of(sp: &SectorProblem2D, exact: &Exact, grids: &[PolarGrid]) -> Result<RateRecord, SectorError> {
    if grids.len() < 3 {
        return Err(SectorError::TooFewPoints(grids.len()));
    }
    for w in grids.windows(2) {
        let ok = w[1].n_r == 2 * w[0].n_r
            && w[1].n_a == 2 * w[0].n_a
            && (w[1].rho_g - w[0].rho_g.sqrt()).abs() <= 1e-12;
        if !ok {
            return Err(SectorError::GridIncompatible(format!("{:?} does not refine {:?} by 2x", w[1], w[0])));
        }
    }
    let sols: Vec<Result<GridSolution, SectorError>> = grids.par_iter().map(|g| solve_sector(sp, g)).collect();
    let mut errors = Vec::new();
    for s in sols {
        errors.push(grid_error(&s?, exact));
    }
    let xs: Vec<f64> = errors.iter().map(|e| (e.grid.n_a as f64).log2()).collect();
    let order = |vals: Vec<f64>| {
        if vals.iter().all(|v| *v > 0.0) {
            let ys: Vec<f64> = vals.iter().map(|v| v.log2()).collect();
            Some(-fit_line(&xs, &ys).0)
        } else {
            None
        }
    };
    let l2_order = order(errors.iter().map(|e| e.l2).collect());
    let max_order = order(errors.iter().map(|e| e.max).collect());
    Ok(RateRecord { errors, l2_order, max_order })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentFit {
    pub beta: f64,
    pub r2_fit: f64,
    pub radii: Vec<f64>,
    pub ring_norms: Vec<f64>,
}

/// Slope of `log ‖u(r,·)‖` against `log r` over the rings in `[r_lo, r_hi]`.
pub fn fit_exponent(sol: &GridSolution, window: (f64, f64)) -> Result<ExponentFit, SectorError> {
    let (r_lo, r_hi) = window;
    let mut radii = Vec::new();
    let mut ring_norms = Vec::new();
    for k in 1..sol.grid.n_r {
        let r = sol.r(k);
        if r >= r_lo && r <= r_hi {
            radii.push(r);
            ring_norms.push(sol.ring_norm(k));
        }
    }
    if radii.len() < 4 || r_hi > sol.radius / 4.0 || ring_norms.iter().any(|v| *v <= 0.0) {
        return Err(SectorError::WindowTooNarrow { r_lo, r_hi, rings: radii.len() });
    }
    let xs: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = ring_norms.iter().map(|v| v.ln()).collect();
    let (beta, _, r2_fit) = fit_line(&xs, &ys);
    Ok(ExponentFit { beta, r2_fit, radii, ring_norms })
}

/// Smooth bump `(1 - s²)³` around `(0.55R, d/4)` with radius `0.2R`, normalized
/// so its discrete L² norm on `grid` is 1. It vanishes near both sides, on the
/// bisector and on the outer arc.
pub fn unit_bump(opening: f64, radius: f64, grid: &PolarGrid) -> Field {
    let (cx, cy) = (0.55 * radius * (opening / 4.0).cos(), 0.55 * radius * (opening / 4.0).sin());
    let width = 0.2 * radius * (opening / 4.0).sin().min(1.0) / (PI / 8.0).sin();
    let width = width.min(0.2 * radius);
    let raw = move |r: f64, phi: f64| {
        let (x, y) = (r * phi.cos(), r * phi.sin());
        let s2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (width * width);
        if s2 < 1.0 {
            (1.0 - s2).powi(3)
        } else {
            0.0
        }
    };
    let probe = GridSolution {
        grid: *grid,
        radius,
        opening,
        values: vec![C64::new(0.0, 0.0); (grid.n_r + 1) * (grid.n_a + 1)],
        diagnostics: SolveDiagnostics { unknowns: 0, bandwidth: 0, relative_residual: 0.0, condition_estimate: 0.0 },
    };
    let norm = l2_norm(&probe.with_values(|r, phi| C64::new(raw(r, phi), 0.0)));
    Arc::new(move |r, phi| C64::new(raw(r, phi) / norm, 0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub h: f64,
    pub p_values: Vec<f64>,
    pub norms: Vec<f64>,
    pub slope: f64,
    pub r2_fit: f64,
}

/// `‖u_p‖` for `c = e^{ih}p²` over `p_values`, with the log-log slope.
///
/// `base.rhs` is used as given; [`unit_bump`] provides a normalized choice.
pub fn resolvent_scan(
    base: &SectorProblem2D,
    h: f64,
    p_values: &[f64],
    grid: &PolarGrid,
) -> Result<ScanRecord, SectorError> {
    if p_values.len() < 5 || p_values.windows(2).any(|w| !(w[0] < w[1])) || p_values[0] <= 0.0 {
        return Err(SectorError::TooFewPoints(p_values.len()));
    }
    if !(h.abs() < PI / 2.0) {
        return Err(SectorError::BadAngle(h));
    }
    let sols: Vec<Result<f64, SectorError>> = p_values
        .par_iter()
        .map(|&p| {
            let mut sp = base.clone();
            sp.c = C64::from_polar(p * p, h);
            solve_sector(&sp, grid).map(|s| l2_norm(&s))
        })
        .collect();
    let mut norms = Vec::new();
    for s in sols {
        norms.push(s?);
    }
    let xs: Vec<f64> = p_values.iter().map(|p| p.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let (slope, _, r2_fit) = fit_line(&xs, &ys);
    Ok(ScanRecord { h, p_values: p_values.to_vec(), norms, slope, r2_fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormFlavor {
    /// Homogeneous weight `ρ^{2(a-k+|α|)}`.
    H,
    /// Weight `r^{2a}(r^{2(|α|-k)} + 1)`.
    E,
}

/// Squared weighted norm `Σ_{|α|≤k} ∫ weight·|D^α u|² dx` over rings in `window`.
///
/// Derivatives use centered differences in `(τ, φ)` (one-sided at grid edges);
/// the quadrature is midpoint cells in `τ` clipped to the window and trapezoid in `φ`.
pub fn weighted_norm_squared(
    sol: &GridSolution,
    a: f64,
    k: u32,
    flavor: NormFlavor,
    window: Option<(f64, f64)>,
) -> f64 {
    assert!(k <= 2, "weighted norms are defined for k <= 2");
    let (nr, na) = (sol.grid.n_r, sol.grid.n_a);
    let dt = sol.grid.dtau();
    let dp = sol.opening / na as f64;
    let tau0 = sol.radius.ln() - nr as f64 * dt;
    let (t_lo, t_hi) = match window {
        Some((lo, hi)) => (lo.ln(), hi.ln()),
        None => (tau0, sol.radius.ln()),
    };
    let u = |k: usize, j: usize| sol.at(k, j);
    let d_tau = |k: usize, j: usize| {
        if k == 0 {
            (u(1, j) - u(0, j)) / dt
        } else if k == nr {
            (u(nr, j) - u(nr - 1, j)) / dt
        } else {
            (u(k + 1, j) - u(k - 1, j)) / (2.0 * dt)
        }
    };
    let d_phi = |k: usize, j: usize| {
        if j == 0 {
            (u(k, 1) - u(k, 0)) / dp
        } else if j == na {
            (u(k, na) - u(k, na - 1)) / dp
        } else {
            (u(k, j + 1) - u(k, j - 1)) / (2.0 * dp)
        }
    };
    let clamp = |i: usize, n: usize| i.clamp(1, n - 1);
    let mut total = 0.0;
    for kk in 0..=nr {
        let tau = tau0 + kk as f64 * dt;
        let lo = (tau - 0.5 * dt).max(tau0).max(t_lo);
        let hi = (tau + 0.5 * dt).min(sol.radius.ln()).min(t_hi);
        if hi <= lo {
            continue;
        }
        let cell = hi - lo;
        let r = tau.exp();
        let weight = |order: u32| -> f64 {
            let o = order as f64;
            let kf = k as f64;
            match flavor {
                NormFlavor::H => r.powf(2.0 * (a - kf + o)),
                NormFlavor::E => r.powf(2.0 * a) * (r.powf(2.0 * (o - kf)) + 1.0),
            }
        };
        for j in 0..=na {
            let wj = if j == 0 || j == na { 0.5 } else { 1.0 };
            let phi = sol.opening * j as f64 / na as f64;
            let mut integrand = weight(0) * u(kk, j).norm_sqr();
            if k >= 1 {
                let grad = (d_tau(kk, j).norm_sqr() + d_phi(kk, j).norm_sqr()) / (r * r);
                integrand += weight(1) * grad;
            }
            if k >= 2 {
                let (kc, jc) = (clamp(kk, nr), clamp(j, na));
                let ut = d_tau(kc, jc);
                let up = d_phi(kc, jc);
                let utt = (u(kc + 1, jc) - 2.0 * u(kc, jc) + u(kc - 1, jc)) / (dt * dt);
                let upp = (u(kc, jc + 1) - 2.0 * u(kc, jc) + u(kc, jc - 1)) / (dp * dp);
                let utp = (u(kc + 1, jc + 1) - u(kc + 1, jc - 1) - u(kc - 1, jc + 1) + u(kc - 1, jc - 1))
                    / (4.0 * dt * dp);
                let r2 = r * r;
                let hrr = (utt - ut) / r2;
                let hrp = (utp - up) / r2;
                let hpp = (upp + ut) / r2;
                let (cs, sn) = (phi.cos(), phi.sin());
                let uxx = hrr * (cs * cs) - hrp * (2.0 * cs * sn) + hpp * (sn * sn);
                let uyy = hrr * (sn * sn) + hrp * (2.0 * cs * sn) + hpp * (cs * cs);
                let uxy = (hrr - hpp) * (cs * sn) + hrp * (cs * cs - sn * sn);
                integrand += weight(2) * (uxx.norm_sqr() + uxy.norm_sqr() + uyy.norm_sqr());
            }
            // dx = r dr dφ = r² dτ dφ.
            total += integrand * r * r * cell * wj * dp;
        }
    }
    total
}

/// Weighted norm: the square root of [`weighted_norm_squared`].
pub fn weighted_norm(sol: &GridSolution, a: f64, k: u32, flavor: NormFlavor, window: Option<(f64, f64)>) -> f64 {
    weighted_norm_squared(sol, a, k, flavor, window).sqrt()
}
