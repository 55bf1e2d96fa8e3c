//! Angular pencils of nonlocal elliptic problems and their collocation.
//!
//! A [`PencilProblem`] is a list of angular components `(d_{j1}, d_{j2})`, each
//! carrying an operator `Σ a_{α₁α₂}(φ) ∂_φ^{α₁} λ^{α₂}`, plus boundary rows that
//! may evaluate other components on shifted rays and carry the scale factor
//! `e^{(iλ - m_row) ln χ}`.
//!
//! Angular derivatives are plain `∂_φ` powers. With this convention `-Δ` in polar
//! form is `-∂_φ² + λ²`, i.e. the terms `{(2,0) → -1, (0,2) → +1}`.
//!
//! Matrix layout: unknowns and equations are ordered component-major, node-minor
//! (index `j·n_phi + i`). Boundary rows of side `lower` replace the equations at
//! local nodes `0, 1, …` in order of appearance; rows of side `upper` replace
//! `n_phi-1, n_phi-2, …`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::linalg::CMat;
use crate::{c, C64, I};

/// One harmonic of a trigonometric polynomial: `cos_amp·cos kφ + sin_amp·sin kφ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrigTerm {
    pub harmonic: u32,
    pub cos_amp: C64,
    pub sin_amp: C64,
}

pub type Callback = Arc<dyn Fn(f64) -> C64 + Send + Sync>;

/// Coefficient of a pencil term as a function of the angle.
#[derive(Clone)]
pub enum CoeffFn {
    Constant(C64),
    TrigPoly(Vec<TrigTerm>),
    Callback(Callback),
}

impl CoeffFn {
    pub fn eval(&self, phi: f64) -> C64 {
        match self {
            CoeffFn::Constant(v) => *v,
            CoeffFn::TrigPoly(ts) => ts
                .iter()
                .map(|t| {
                    let k = t.harmonic as f64;
                    t.cos_amp * (k * phi).cos() + t.sin_amp * (k * phi).sin()
                })
                .sum(),
            CoeffFn::Callback(f) => f(phi),
        }
    }

    pub fn constant(re: f64) -> Self {
        CoeffFn::Constant(c(re, 0.0))
    }

    /// Returns the coefficient with every value complex-conjugated.
    pub fn conj(&self) -> Self {
        match self {
            CoeffFn::Constant(v) => CoeffFn::Constant(v.conj()),
            CoeffFn::TrigPoly(ts) => CoeffFn::TrigPoly(
                ts.iter()
                    .map(|t| TrigTerm {
                        harmonic: t.harmonic,
                        cos_amp: t.cos_amp.conj(),
                        sin_amp: t.sin_amp.conj(),
                    })
                    .collect(),
            ),
            CoeffFn::Callback(f) => {
                let f = f.clone();
                CoeffFn::Callback(Arc::new(move |phi| f(phi).conj()))
            }
        }
    }

    fn is_finite(&self) -> bool {
        let ok = |z: &C64| z.re.is_finite() && z.im.is_finite();
        match self {
            CoeffFn::Constant(v) => ok(v),
            CoeffFn::TrigPoly(ts) => ts.iter().all(|t| ok(&t.cos_amp) && ok(&t.sin_amp)),
            CoeffFn::Callback(_) => true,
        }
    }
}

impl fmt::Debug for CoeffFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoeffFn::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            CoeffFn::TrigPoly(ts) => f.debug_tuple("TrigPoly").field(ts).finish(),
            CoeffFn::Callback(_) => f.write_str("Callback(..)"),
        }
    }
}

/// Callbacks compare by pointer identity.
impl PartialEq for CoeffFn {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (CoeffFn::Constant(a), CoeffFn::Constant(b)) => a == b,
            (CoeffFn::TrigPoly(a), CoeffFn::TrigPoly(b)) => a == b,
            (CoeffFn::Callback(a), CoeffFn::Callback(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// `Σ a_{α₁α₂}(φ) ∂_φ^{α₁} λ^{α₂}`, keyed by `(α₁, α₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PencilOperator {
    pub order: u32,
    pub terms: BTreeMap<(u32, u32), CoeffFn>,
}

impl PencilOperator {
    /// The polar form of `-Δ`: `-∂_φ² + λ²`.
    pub fn neg_laplacian() -> Self {
        let mut terms = BTreeMap::new();
        terms.insert((2, 0), CoeffFn::constant(-1.0));
        terms.insert((0, 2), CoeffFn::constant(1.0));
        PencilOperator { order: 2, terms }
    }

    /// `scale · ∂_φ^j` as a boundary operator of order `j`.
    pub fn derivative(j: u32, scale: f64) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert((j, 0), CoeffFn::constant(scale));
        PencilOperator { order: j, terms }
    }

    /// The evaluation operator `v ↦ v`.
    pub fn identity() -> Self {
        Self::derivative(0, 1.0)
    }

    pub fn conj(&self) -> Self {
        PencilOperator {
            order: self.order,
            terms: self.terms.iter().map(|(k, v)| (*k, v.conj())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BCTerm {
    pub source: usize,
    pub shift: f64,
    pub chi: f64,
    pub op: PencilOperator,
}

impl BCTerm {
    pub fn local(source: usize, op: PencilOperator) -> Self {
        BCTerm { source, shift: 0.0, chi: 1.0, op }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Standard,
    /// Matches `∂_φ^{j₀}` at both endpoints of a full-circle component.
    PeriodicMatch(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRow {
    pub component: usize,
    pub side: Side,
    pub row_order: u32,
    pub terms: Vec<BCTerm>,
    pub kind: RowKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub interval: (f64, f64),
    pub operator: PencilOperator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PencilProblem {
    pub m: u32,
    pub components: Vec<Component>,
    pub rows: Vec<BoundaryRow>,
}

impl PencilProblem {
    /// Single full-circle component whose rows are all periodic matches.
    pub fn is_full_circle_local(&self) -> bool {
        self.components.len() == 1
            && self.rows.iter().all(|r| matches!(r.kind, RowKind::PeriodicMatch(_)))
            && {
                let (a, b) = self.components[0].interval;
                ((b - a) - 2.0 * PI).abs() < 1e-12
            }
    }
}

/// A violated invariant of a [`PencilProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PencilError {
    #[error("invalid problem: {}", join_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("unknown built-in problem `{0}`")]
    UnknownBuiltin(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` out of range: {reason}")]
    BadParam { name: String, reason: String },
    #[error("symbol is not elliptic: {0}")]
    NonElliptic(String),
    #[error("discretization does not match the problem: {0}")]
    DimensionMismatch(String),
    #[error("principal coefficient vanishes at collocation node φ = {0}")]
    DegeneratePrincipal(f64),
}

fn join_diagnostics(ds: &[Diagnostic]) -> String {
    ds.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

fn diag(code: &'static str, message: String) -> Diagnostic {
    Diagnostic { code, message }
}

fn endpoint(iv: (f64, f64), side: Side) -> f64 {
    match side {
        Side::Lower => iv.0,
        Side::Upper => iv.1,
    }
}

/// Checks every structural invariant; an empty list means the problem is valid.
pub fn validate_problem(p: &PencilProblem) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if p.m == 0 {
        out.push(diag("order", "m must be at least 1".into()));
        return out;
    }
    if p.components.is_empty() {
        out.push(diag("components", "problem has no components".into()));
        return out;
    }
    let order = 2 * p.m;
    for (j, comp) in p.components.iter().enumerate() {
        let (a, b) = comp.interval;
        if !(a.is_finite() && b.is_finite() && a < b) {
            out.push(diag("interval", format!("component {j}: interval ({a}, {b}) must satisfy d1 < d2")));
            continue;
        }
        check_operator(&mut out, &comp.operator, order, &format!("component {j} operator"));
        match comp.operator.terms.get(&(order, 0)) {
            None => out.push(diag(
                "ellipticity",
                format!("component {j}: principal coefficient ({order}, 0) is missing"),
            )),
            Some(coef) => {
                let samples = 257;
                for s in 0..samples {
                    let phi = a + (b - a) * s as f64 / (samples - 1) as f64;
                    let v = coef.eval(phi);
                    if !(v.norm() > 1e-12) || !v.re.is_finite() || !v.im.is_finite() {
                        out.push(diag(
                            "ellipticity",
                            format!("component {j}: principal coefficient vanishes near φ = {phi}"),
                        ));
                        break;
                    }
                }
            }
        }
    }

    let n = p.components.len();
    let expected = 2 * p.m as usize * n;
    if p.rows.len() != expected {
        out.push(diag(
            "row count mismatch",
            format!("expected {expected} boundary rows (2mN), found {}", p.rows.len()),
        ));
    }
    let mut per_side: BTreeMap<(usize, Side), usize> = BTreeMap::new();
    let mut periodic_orders = Vec::new();
    for (r, row) in p.rows.iter().enumerate() {
        if row.component >= n {
            out.push(diag("row component", format!("row {r}: component {} does not exist", row.component)));
            continue;
        }
        *per_side.entry((row.component, row.side)).or_default() += 1;
        if row.row_order >= order {
            out.push(diag("row order", format!("row {r}: row_order {} must be < {order}", row.row_order)));
        }
        if row.terms.is_empty() {
            out.push(diag("row terms", format!("row {r}: no terms")));
        }
        if let RowKind::PeriodicMatch(j0) = row.kind {
            periodic_orders.push(j0);
            if j0 != row.row_order {
                out.push(diag("periodic row", format!("row {r}: matching order {j0} differs from row_order")));
            }
        }
        let own = p.components[row.component].interval;
        if !(own.0 < own.1) {
            continue;
        }
        let base = endpoint(own, row.side);
        for (t, term) in row.terms.iter().enumerate() {
            let loc = format!("row {r} term {t}");
            if term.source >= n {
                out.push(diag("term source", format!("{loc}: source component {} does not exist", term.source)));
                continue;
            }
            if !(term.chi.is_finite() && term.chi > 0.0) {
                out.push(diag("chi", format!("{loc}: chi must be > 0 (got {})", term.chi)));
            }
            if !term.shift.is_finite() {
                out.push(diag("shift", format!("{loc}: shift must be finite")));
                continue;
            }
            if term.op.order != row.row_order {
                out.push(diag(
                    "term order",
                    format!("{loc}: operator order {} differs from row_order {}", term.op.order, row.row_order),
                ));
            }
            check_operator(&mut out, &term.op, term.op.order, &loc);
            let local = term.source == row.component && term.shift == 0.0;
            if matches!(row.kind, RowKind::PeriodicMatch(_)) {
                if !local || term.chi != 1.0 {
                    out.push(diag("periodic row", format!("{loc}: periodic rows take only local terms")));
                }
                continue;
            }
            if local {
                if term.chi != 1.0 {
                    out.push(diag("local term", format!("{loc}: local term must have chi = 1")));
                }
                continue;
            }
            let src = p.components[term.source].interval;
            let theta = base + term.shift;
            if !(src.0 < theta && theta < src.1) {
                out.push(diag(
                    "shift angle not strictly interior",
                    format!(
                        "{loc}: evaluation angle {theta} not strictly inside source interval ({}, {})",
                        src.0, src.1
                    ),
                ));
            }
        }
    }
    for j in 0..n {
        for side in [Side::Lower, Side::Upper] {
            let cnt = per_side.get(&(j, side)).copied().unwrap_or(0);
            if cnt != p.m as usize && p.rows.len() == expected {
                out.push(diag(
                    "rows per side",
                    format!("component {j} side {side:?}: expected {} rows, found {cnt}", p.m),
                ));
            }
        }
    }
    if !periodic_orders.is_empty() {
        let full = p.components.len() == 1 && {
            let (a, b) = p.components[0].interval;
            ((b - a) - 2.0 * PI).abs() < 1e-12
        };
        let mut sorted = periodic_orders.clone();
        sorted.sort_unstable();
        let want: Vec<u32> = (0..order).collect();
        if !full || sorted != want || periodic_orders.len() != p.rows.len() {
            out.push(diag(
                "periodic row",
                "periodic matching needs one full-circle component with rows j0 = 0..2m-1".into(),
            ));
        }
    }
    out
}

fn check_operator(out: &mut Vec<Diagnostic>, op: &PencilOperator, order: u32, loc: &str) {
    if op.order != order {
        out.push(diag("operator order", format!("{loc}: order {} expected {order}", op.order)));
    }
    for (&(a1, a2), coef) in &op.terms {
        if a1 + a2 > op.order {
            out.push(diag(
                "term order",
                format!("{loc}: term ({a1}, {a2}) exceeds operator order {}", op.order),
            ));
        }
        if !coef.is_finite() {
            out.push(diag("finite", format!("{loc}: term ({a1}, {a2}) has a non-finite coefficient")));
        }
    }
}

fn param(params: &BTreeMap<String, f64>, key: &str) -> Result<f64, PencilError> {
    let v = *params.get(key).ok_or_else(|| PencilError::MissingParam(key.into()))?;
    if !v.is_finite() {
        return Err(PencilError::BadParam { name: key.into(), reason: "must be finite".into() });
    }
    Ok(v)
}

fn dirichlet_row(component: usize, side: Side) -> BoundaryRow {
    BoundaryRow {
        component,
        side,
        row_order: 0,
        terms: vec![BCTerm::local(component, PencilOperator::identity())],
        kind: RowKind::Standard,
    }
}

fn eval_term(source: usize, shift: f64, weight: f64) -> BCTerm {
    BCTerm { source, shift, chi: 1.0, op: PencilOperator::derivative(0, weight) }
}

/// Names accepted by [`builtin_problem`].
pub const BUILTIN_NAMES: [&str; 5] =
    ["dirichlet_laplace", "periodic_laplace", "ex21_sector", "ex6_quarter", "ex11_orbit4"];

/// Library of worked problems. Parameter keys: `d`, `alpha1`, `alpha2`,
/// `beta1`, `beta2`.
pub fn builtin_problem(name: &str, params: &BTreeMap<String, f64>) -> Result<PencilProblem, PencilError> {
    let lap = PencilOperator::neg_laplacian;
    let problem = match name {
        "dirichlet_laplace" => {
            let d = param(params, "d")?;
            if d <= 0.0 || d > 2.0 * PI {
                return Err(PencilError::BadParam { name: "d".into(), reason: "need 0 < d <= 2π".into() });
            }
            PencilProblem {
                m: 1,
                components: vec![Component { interval: (0.0, d), operator: lap() }],
                rows: vec![dirichlet_row(0, Side::Lower), dirichlet_row(0, Side::Upper)],
            }
        }
        "periodic_laplace" => PencilProblem {
            m: 1,
            components: vec![Component { interval: (0.0, 2.0 * PI), operator: lap() }],
            rows: periodic_rows(1),
        },
        "ex21_sector" => {
            let d = param(params, "d")?;
            let a1 = param(params, "alpha1")?;
            let a2 = param(params, "alpha2")?;
            if d <= 0.0 || d >= 2.0 * PI {
                return Err(PencilError::BadParam { name: "d".into(), reason: "need 0 < d < 2π".into() });
            }
            let row = |side: Side, alpha: f64, shift: f64| BoundaryRow {
                component: 0,
                side,
                row_order: 0,
                terms: vec![BCTerm::local(0, PencilOperator::identity()), eval_term(0, shift, -alpha)],
                kind: RowKind::Standard,
            };
            PencilProblem {
                m: 1,
                components: vec![Component { interval: (0.0, d), operator: lap() }],
                rows: vec![row(Side::Lower, a1, d / 2.0), row(Side::Upper, a2, -d / 2.0)],
            }
        }
        "ex6_quarter" => {
            let a1 = param(params, "alpha1")?;
            let a2 = param(params, "alpha2")?;
            let q = PI / 4.0;
            let row = |side: Side, alpha: f64, shift: f64| BoundaryRow {
                component: 0,
                side,
                row_order: 0,
                terms: vec![BCTerm::local(0, PencilOperator::identity()), eval_term(0, shift, -alpha)],
                kind: RowKind::Standard,
            };
            PencilProblem {
                m: 1,
                components: vec![Component { interval: (-q, q), operator: lap() }],
                rows: vec![row(Side::Lower, a1, q), row(Side::Upper, a2, -q)],
            }
        }
        "ex11_orbit4" => {
            let a1 = param(params, "alpha1")?;
            let a2 = param(params, "alpha2")?;
            let b1 = param(params, "beta1")?;
            let b2 = param(params, "beta2")?;
            let q = PI / 4.0;
            let first = (q, 5.0 * q);
            let second = (3.0 * q, 7.0 * q);
            let comps = vec![
                Component { interval: first, operator: lap() },
                Component { interval: first, operator: lap() },
                Component { interval: second, operator: lap() },
                Component { interval: second, operator: lap() },
            ];
            // The coupled rows sit where the other pair's interval is interior:
            // 5π/4 for components 1–2 and 3π/4 for components 3–4.
            let coupled = |j: usize, side: Side, others: [(usize, f64); 2]| BoundaryRow {
                component: j,
                side,
                row_order: 0,
                terms: vec![
                    BCTerm::local(j, PencilOperator::identity()),
                    eval_term(others[0].0, 0.0, others[0].1),
                    eval_term(others[1].0, 0.0, others[1].1),
                ],
                kind: RowKind::Standard,
            };
            PencilProblem {
                m: 1,
                components: comps,
                rows: vec![
                    dirichlet_row(0, Side::Lower),
                    coupled(0, Side::Upper, [(2, a1), (3, b1)]),
                    dirichlet_row(1, Side::Lower),
                    coupled(1, Side::Upper, [(2, b1), (3, a1)]),
                    coupled(2, Side::Lower, [(0, a2), (1, b2)]),
                    dirichlet_row(2, Side::Upper),
                    coupled(3, Side::Lower, [(0, b2), (1, a2)]),
                    dirichlet_row(3, Side::Upper),
                ],
            }
        }
        other => return Err(PencilError::UnknownBuiltin(other.into())),
    };
    Ok(problem)
}

/// Matching rows `∂_φ^{j₀}v(0) = ∂_φ^{j₀}v(2π)`, `j₀ = 0..2m-1`; the first `m`
/// occupy lower-side slots and the rest upper-side slots.
pub fn periodic_rows(m: u32) -> Vec<BoundaryRow> {
    (0..2 * m)
        .map(|j0| BoundaryRow {
            component: 0,
            side: if j0 < m { Side::Lower } else { Side::Upper },
            row_order: j0,
            terms: vec![BCTerm::local(0, PencilOperator::derivative(j0, 1.0))],
            kind: RowKind::PeriodicMatch(j0),
        })
        .collect()
}

/// Polar form of the second-order symbol `a20 ∂₁² + a11 ∂₁∂₂ + a02 ∂₂²`:
/// `A(r^{iλ}Φ) = r^{iλ-2} (Σ a_{α₁α₂}(φ) ∂_φ^{α₁} λ^{α₂}) Φ`.
pub fn polar_pencil_from_symbol(a20: C64, a11: C64, a02: C64) -> Result<PencilOperator, PencilError> {
    for z in [a20, a11, a02] {
        if !(z.re.is_finite() && z.im.is_finite()) {
            return Err(PencilError::NonElliptic("coefficients must be finite".into()));
        }
    }
    if a20.norm() == 0.0 {
        return Err(PencilError::NonElliptic("symbol vanishes at ξ = (1, 0)".into()));
    }
    // Real roots t of a20 t² + a11 t + a02 give real zeros ξ = (t, 1).
    let disc = (a11 * a11 - 4.0 * a20 * a02).sqrt();
    for root in [(-a11 + disc) / (2.0 * a20), (-a11 - disc) / (2.0 * a20)] {
        if root.im.abs() <= 1e-12 * (1.0 + root.norm()) {
            return Err(PencilError::NonElliptic(format!("symbol vanishes at ξ = ({}, 1)", root.re)));
        }
    }
    let zero = C64::new(0.0, 0.0);
    let tp = |h0: C64, cos2: C64, sin2: C64| {
        let mut ts = Vec::new();
        if h0 != zero {
            ts.push(TrigTerm { harmonic: 0, cos_amp: h0, sin_amp: zero });
        }
        if cos2 != zero || sin2 != zero {
            ts.push(TrigTerm { harmonic: 2, cos_amp: cos2, sin_amp: sin2 });
        }
        CoeffFn::TrigPoly(ts)
    };
    let sum = (a20 + a02) * 0.5;
    let diff = (a02 - a20) * 0.5;
    let mut terms = BTreeMap::new();
    terms.insert((2, 0), tp(sum, diff, -a11 * 0.5));
    terms.insert((1, 1), tp(zero, I * a11, I * (a02 - a20)));
    terms.insert((1, 0), tp(zero, -a11, a20 - a02));
    terms.insert((0, 2), tp(-sum, diff, -a11 * 0.5));
    terms.insert((0, 1), tp(zero, I * (a02 - a20), -I * a11));
    Ok(PencilOperator { order: 2, terms })
}

/// Collocation data of one component.
#[derive(Debug, Clone)]
pub struct ComponentGrid {
    pub interval: (f64, f64),
    /// Chebyshev points of the second kind, ascending, node 0 at `d1`.
    pub nodes: Vec<f64>,
    pub bary_weights: Vec<f64>,
    /// `diff_mats[k]` is the `k`-th derivative matrix; `diff_mats[0] = I`.
    pub diff_mats: Vec<DMatrix<f64>>,
}

impl ComponentGrid {
    pub fn new(interval: (f64, f64), n: usize, max_order: usize) -> Self {
        let (a, b) = interval;
        let nm1 = (n - 1) as f64;
        let nodes: Vec<f64> = (0..n)
            .map(|k| {
                if k == 0 {
                    a
                } else if k == n - 1 {
                    b
                } else {
                    a + (b - a) * 0.5 * (1.0 - (PI * k as f64 / nm1).cos())
                }
            })
            .collect();
        let bary_weights: Vec<f64> = (0..n)
            .map(|k| {
                let s = if k % 2 == 0 { 1.0 } else { -1.0 };
                if k == 0 || k == n - 1 {
                    0.5 * s
                } else {
                    s
                }
            })
            .collect();
        let mut d1 = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let mut diag = 0.0;
            for j in 0..n {
                if i != j {
                    let v = (bary_weights[j] / bary_weights[i]) / (nodes[i] - nodes[j]);
                    d1[(i, j)] = v;
                    diag -= v;
                }
            }
            d1[(i, i)] = diag;
        }
        let mut diff_mats = vec![DMatrix::<f64>::identity(n, n), d1.clone()];
        for _ in 2..=max_order {
            let mut next = &d1 * diff_mats.last().expect("nonempty");
            for i in 0..n {
                let off: f64 = (0..n).filter(|&j| j != i).map(|j| next[(i, j)]).sum();
                next[(i, i)] = -off;
            }
            diff_mats.push(next);
        }
        ComponentGrid { interval, nodes, bary_weights, diff_mats }
    }

    /// Barycentric interpolation row at `angle` (exact on polynomials of degree < n).
    pub fn interp_row(&self, angle: f64) -> Vec<f64> {
        let n = self.nodes.len();
        let mut row = vec![0.0; n];
        if let Some(k) = self.nodes.iter().position(|&x| x == angle) {
            row[k] = 1.0;
            return row;
        }
        let mut total = 0.0;
        for k in 0..n {
            let t = self.bary_weights[k] / (angle - self.nodes[k]);
            row[k] = t;
            total += t;
        }
        for v in &mut row {
            *v /= total;
        }
        row
    }

    /// Interpolates complex nodal values at `angle`.
    pub fn interpolate(&self, values: &[C64], angle: f64) -> C64 {
        self.interp_row(angle).iter().zip(values).map(|(w, v)| v * *w).sum()
    }
}

/// Per-component collocation grids for a problem.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub n_phi: usize,
    pub components: Vec<ComponentGrid>,
}

impl Discretization {
    pub fn new(p: &PencilProblem, n_phi: usize) -> Result<Self, PencilError> {
        let min = 2 * p.m as usize + 2;
        if n_phi < min {
            return Err(PencilError::DimensionMismatch(format!("n_phi = {n_phi} must be at least 2m+2 = {min}")));
        }
        let max_order = p
            .components
            .iter()
            .flat_map(|c| c.operator.terms.keys().map(|k| k.0))
            .chain(p.rows.iter().flat_map(|r| r.terms.iter().flat_map(|t| t.op.terms.keys().map(|k| k.0))))
            .max()
            .unwrap_or(0)
            .max(2 * p.m) as usize;
        let components: Vec<ComponentGrid> =
            p.components.iter().map(|c| ComponentGrid::new(c.interval, n_phi, max_order)).collect();
        let order = 2 * p.m;
        for (comp, grid) in p.components.iter().zip(&components) {
            if let Some(coef) = comp.operator.terms.get(&(order, 0)) {
                for &x in &grid.nodes {
                    if !(coef.eval(x).norm() > 1e-12) {
                        return Err(PencilError::DegeneratePrincipal(x));
                    }
                }
            }
        }
        Ok(Discretization { n_phi, components })
    }

    pub fn size(&self) -> usize {
        self.n_phi * self.components.len()
    }

    pub fn interp_row(&self, component: usize, angle: f64) -> Vec<f64> {
        self.components[component].interp_row(angle)
    }

    fn check(&self, p: &PencilProblem) -> Result<(), PencilError> {
        if self.components.len() != p.components.len() {
            return Err(PencilError::DimensionMismatch(format!(
                "{} grids for {} components",
                self.components.len(),
                p.components.len()
            )));
        }
        for (j, (g, c)) in self.components.iter().zip(&p.components).enumerate() {
            if g.interval != c.interval {
                return Err(PencilError::DimensionMismatch(format!("component {j}: interval differs")));
            }
            let need = p.components[j]
                .operator
                .terms
                .keys()
                .map(|k| k.0)
                .chain(p.rows.iter().flat_map(|r| r.terms.iter().flat_map(|t| t.op.terms.keys().map(|k| k.0))))
                .max()
                .unwrap_or(0) as usize;
            if g.diff_mats.len() <= need {
                return Err(PencilError::DimensionMismatch(format!("component {j}: derivative order {need} missing")));
            }
        }
        Ok(())
    }
}

/// One term `λ^q · e^{(iλ - m_row) L} · M` of the assembled pencil.
#[derive(Debug, Clone)]
pub struct PencilTerm {
    pub q: u32,
    pub ln_chi: f64,
    pub m_row: f64,
    pub matrix: CMat,
}

impl PencilTerm {
    /// `s`-th λ-derivative of the scalar factor.
    pub fn factor(&self, lambda: C64, s: u32) -> C64 {
        let base = if self.ln_chi == 0.0 {
            C64::new(1.0, 0.0)
        } else {
            ((I * lambda - self.m_row) * self.ln_chi).exp()
        };
        let il = I * self.ln_chi;
        let mut total = C64::new(0.0, 0.0);
        for t in 0..=s {
            let k = s - t;
            if k > self.q {
                continue;
            }
            if t > 0 && self.ln_chi == 0.0 {
                break;
            }
            let falling: f64 = ((self.q - k + 1)..=self.q).map(|v| v as f64).product();
            let poly = lambda.powu(self.q - k) * falling;
            total += poly * il.powu(t) * binomial(s, t);
        }
        total * base
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// λ-independent matrices of a problem: `T^{(s)}(λ) = Σ f^{(s)}(λ)·M`.
#[derive(Debug, Clone)]
pub struct PencilMatrices {
    pub size: usize,
    pub terms: Vec<PencilTerm>,
}

impl PencilMatrices {
    pub fn build(p: &PencilProblem, d: &Discretization) -> Result<Self, PencilError> {
        let diags = validate_problem(p);
        if !diags.is_empty() {
            return Err(PencilError::Invalid(diags));
        }
        d.check(p)?;
        let n = d.n_phi;
        let size = d.size();
        let mut groups: BTreeMap<(u32, u64, u64), CMat> = BTreeMap::new();
        fn slot(groups: &mut BTreeMap<(u32, u64, u64), CMat>, size: usize, q: u32, l: f64, mr: f64) -> &mut CMat {
            let key = (q, l.to_bits(), if l == 0.0 { 0 } else { mr.to_bits() });
            groups.entry(key).or_insert_with(|| CMat::zeros(size, size))
        }

        // Which local equation each boundary row replaces.
        let mut replaced: Vec<Vec<Option<usize>>> = vec![vec![None; n]; p.components.len()];
        let mut next_lower = vec![0usize; p.components.len()];
        let mut next_upper = vec![0usize; p.components.len()];
        for (r, row) in p.rows.iter().enumerate() {
            let j = row.component;
            let i = match row.side {
                Side::Lower => {
                    next_lower[j] += 1;
                    next_lower[j] - 1
                }
                Side::Upper => {
                    next_upper[j] += 1;
                    n - next_upper[j]
                }
            };
            replaced[j][i] = Some(r);
        }

        for (j, comp) in p.components.iter().enumerate() {
            let grid = &d.components[j];
            for i in 0..n {
                let eq = j * n + i;
                match replaced[j][i] {
                    None => {
                        let phi = grid.nodes[i];
                        for (&(a1, a2), coef) in &comp.operator.terms {
                            let a = coef.eval(phi);
                            if a == C64::new(0.0, 0.0) {
                                continue;
                            }
                            let dm = &grid.diff_mats[a1 as usize];
                            let mat = slot(&mut groups, size, a2, 0.0, 0.0);
                            for col in 0..n {
                                mat[(eq, j * n + col)] += a * dm[(i, col)];
                            }
                        }
                    }
                    Some(r) => {
                        let row = &p.rows[r];
                        for term in &row.terms {
                            let src = &d.components[term.source];
                            let periodic = matches!(row.kind, RowKind::PeriodicMatch(_));
                            let evals: Vec<(f64, f64)> = if periodic {
                                vec![(src.interval.0, 1.0), (src.interval.1, -1.0)]
                            } else {
                                vec![(endpoint(comp.interval, row.side) + term.shift, 1.0)]
                            };
                            let l = term.chi.ln();
                            for (theta, sign) in evals {
                                let w = src.interp_row(theta);
                                for (&(a1, a2), coef) in &term.op.terms {
                                    let a = coef.eval(theta) * sign;
                                    if a == C64::new(0.0, 0.0) {
                                        continue;
                                    }
                                    let dm = &src.diff_mats[a1 as usize];
                                    let mat = slot(&mut groups, size, a2, l, row.row_order as f64);
                                    for col in 0..n {
                                        let v: f64 = (0..n).map(|k| w[k] * dm[(k, col)]).sum();
                                        mat[(eq, term.source * n + col)] += a * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let terms = groups
            .into_iter()
            .map(|((q, l, mr), matrix)| PencilTerm {
                q,
                ln_chi: f64::from_bits(l),
                m_row: f64::from_bits(mr),
                matrix,
            })
            .collect();
        Ok(PencilMatrices { size, terms })
    }

    pub fn eval(&self, lambda: C64) -> CMat {
        self.derivative(lambda, 0)
    }

    /// Exact `s`-th λ-derivative (`s = 0` gives `T(λ)`).
    pub fn derivative(&self, lambda: C64, s: u32) -> CMat {
        let mut out = CMat::zeros(self.size, self.size);
        for t in &self.terms {
            let f = t.factor(lambda, s);
            if f != C64::new(0.0, 0.0) {
                out += &t.matrix * f;
            }
        }
        out
    }
}

/// `T(λ)` for problem `p` at discretization `d`.
pub fn assemble(p: &PencilProblem, d: &Discretization, lambda: C64) -> Result<CMat, PencilError> {
    Ok(PencilMatrices::build(p, d)?.eval(lambda))
}

/// Exact `s`-th λ-derivative `T^{(s)}(λ)`.
pub fn assemble_derivative(p: &PencilProblem, d: &Discretization, lambda: C64, s: u32) -> Result<CMat, PencilError> {
    Ok(PencilMatrices::build(p, d)?.derivative(lambda, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, CVec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn ex21(a1: f64, a2: f64) -> PencilProblem {
        builtin_problem("ex21_sector", &params(&[("d", PI / 2.0), ("alpha1", a1), ("alpha2", a2)])).unwrap()
    }

    fn samples(d: &Discretization, f: impl Fn(usize, f64) -> C64) -> CVec {
        let n = d.n_phi;
        CVec::from_fn(d.size(), |k, _| f(k / n, d.components[k / n].nodes[k % n]))
    }

    #[test]
    fn dirichlet_problem_is_valid() {
        let p = builtin_problem("dirichlet_laplace", &params(&[("d", PI)])).unwrap();
        assert!(validate_problem(&p).is_empty());
        let per = builtin_problem("periodic_laplace", &BTreeMap::new()).unwrap();
        assert!(validate_problem(&per).is_empty());
    }

    #[test]
    fn endpoint_shift_is_rejected() {
        let mut p = ex21(0.5, 0.5);
        p.rows[0].terms[1].shift = PI / 2.0;
        let ds = validate_problem(&p);
        assert_eq!(ds.len(), 1, "{ds:?}");
        assert_eq!(ds[0].code, "shift angle not strictly interior");
    }

    #[test]
    fn missing_row_is_rejected() {
        let mut p = builtin_problem("dirichlet_laplace", &params(&[("d", PI)])).unwrap();
        p.rows.pop();
        let ds = validate_problem(&p);
        assert_eq!(ds.len(), 1, "{ds:?}");
        assert_eq!(ds[0].code, "row count mismatch");
    }

    #[test]
    fn builtin_parameter_errors() {
        assert!(matches!(builtin_problem("nope", &BTreeMap::new()), Err(PencilError::UnknownBuiltin(_))));
        assert!(matches!(builtin_problem("ex21_sector", &params(&[("d", 1.0)])), Err(PencilError::MissingParam(_))));
        assert!(matches!(
            builtin_problem("dirichlet_laplace", &params(&[("d", -1.0)])),
            Err(PencilError::BadParam { .. })
        ));
    }

    #[test]
    fn orbit_problem_geometry() {
        let p = builtin_problem(
            "ex11_orbit4",
            &params(&[("alpha1", 0.3), ("beta1", 0.2), ("alpha2", 0.3), ("beta2", 0.2)]),
        )
        .unwrap();
        assert_eq!(p.components.len(), 4);
        assert_eq!(p.rows.len(), 8);
        assert!(validate_problem(&p).is_empty());
        for row in &p.rows {
            let base = endpoint(p.components[row.component].interval, row.side);
            for t in &row.terms {
                if t.source != row.component {
                    let (a, b) = p.components[t.source].interval;
                    assert!(a < base + t.shift && base + t.shift < b);
                }
            }
        }
    }

    #[test]
    fn ex21_row_on_constant_and_linear_functions() {
        let p = ex21(0.5, 0.5);
        let d = Discretization::new(&p, 16).unwrap();
        let t = assemble(&p, &d, C64::new(0.0, 0.0)).unwrap();
        let ones = samples(&d, |_, _| c(1.0, 0.0));
        assert!(((&t * &ones)[0] - c(0.5, 0.0)).norm() < 1e-13);
        let lin = samples(&d, |_, x| c(x, 0.0));
        let v = (&t * &lin)[0];
        assert!((v - c(-PI / 8.0, 0.0)).norm() < 1e-12, "{v}");
        assert!((v.re + 0.3926990817).abs() < 1e-10);
    }

    #[test]
    fn dirichlet_boundary_rows_are_unit_evaluations() {
        let p = builtin_problem("dirichlet_laplace", &params(&[("d", PI)])).unwrap();
        let d = Discretization::new(&p, 8).unwrap();
        let t = assemble(&p, &d, C64::new(0.0, 0.0)).unwrap();
        for (row, hot) in [(0usize, 0usize), (7, 7)] {
            for col in 0..8 {
                let want = if col == hot { 1.0 } else { 0.0 };
                assert_eq!(t[(row, col)], c(want, 0.0));
            }
        }
    }

    #[test]
    fn periodic_pencil_on_sines() {
        let p = builtin_problem("periodic_laplace", &BTreeMap::new()).unwrap();
        let d = Discretization::new(&p, 48).unwrap();
        let lam = c(0.3, -0.7);
        let t = assemble(&p, &d, lam).unwrap();
        for k in 1..5 {
            let kf = k as f64;
            let v = samples(&d, |_, x| c((kf * x).sin(), 0.0));
            let out = &t * &v;
            let n = d.n_phi;
            assert!(out[0].norm() < 1e-10 && out[n - 1].norm() < 1e-9, "{} {}", out[0], out[n - 1]);
            for i in 1..n - 1 {
                let want = (lam * lam + kf * kf) * (kf * d.components[0].nodes[i]).sin();
                assert!((out[i] - want).norm() < 1e-8, "k={k} i={i}: {} vs {want}", out[i]);
            }
        }
    }

    #[test]
    fn differentiation_and_interpolation_are_exact_on_polynomials() {
        let g = ComponentGrid::new((0.3, 2.1), 12, 3);
        for q in 0..12i32 {
            let vals: Vec<f64> = g.nodes.iter().map(|x| x.powi(q)).collect();
            for (k, dm) in g.diff_mats.iter().enumerate() {
                let k = k as i32;
                for i in 0..12 {
                    let got: f64 = (0..12).map(|j| dm[(i, j)] * vals[j]).sum();
                    let coef: f64 = ((q - k + 1)..=q).map(|v| v as f64).product();
                    let want = if k > q { 0.0 } else { coef * g.nodes[i].powi(q - k) };
                    assert!((got - want).abs() <= 1e-10 * 1e3 * (1.0 + want.abs()), "q={q} k={k}");
                }
            }
            let x = 1.234;
            let row = g.interp_row(x);
            let got: f64 = row.iter().zip(&vals).map(|(w, v)| w * v).sum();
            assert!((got - x.powi(q)).abs() < 1e-10 * (1.0 + x.powi(q)));
        }
    }

    #[test]
    fn symbol_of_negative_laplacian() {
        let op = polar_pencil_from_symbol(c(-1.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)).unwrap();
        for phi in [0.0, 0.7, 2.0] {
            assert!((op.terms[&(2, 0)].eval(phi) - c(-1.0, 0.0)).norm() < 1e-15);
            assert!((op.terms[&(0, 2)].eval(phi) - c(1.0, 0.0)).norm() < 1e-15);
            for k in [(1, 1), (1, 0), (0, 1)] {
                assert!(op.terms[&k].eval(phi).norm() < 1e-15);
            }
        }
        assert!(matches!(
            polar_pencil_from_symbol(c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)),
            Err(PencilError::NonElliptic(_))
        ));
        assert!(polar_pencil_from_symbol(c(1.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)).is_err());
    }

    /// Cartesian second derivatives of `u = z^a z̄^b = r^{iλ} e^{ikφ}` with
    /// `a = (iλ+k)/2`, `b = (iλ-k)/2`, via Wirtinger calculus.
    fn cartesian_apply(a20: C64, a11: C64, a02: C64, lam: C64, k: i32, r: f64, phi: f64) -> C64 {
        let z = C64::from_polar(r, phi);
        let zb = z.conj();
        let a = (I * lam + k as f64) * 0.5;
        let b = (I * lam - k as f64) * 0.5;
        let u = (I * lam * r.ln()).exp() * (I * (k as f64) * phi).exp();
        let p = a * (a - 1.0) / (z * z);
        let q = 2.0 * a * b / (r * r);
        let s = b * (b - 1.0) / (zb * zb);
        let uxx = (p + q + s) * u;
        let uyy = -(p - q + s) * u;
        let uxy = I * (p - s) * u;
        a20 * uxx + a11 * uxy + a02 * uyy
    }

    #[test]
    fn symbol_pencil_matches_cartesian_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a20, a11, a02) = (c(-1.0, 0.0), c(0.0, 0.0), c(-2.0, 0.0));
        let op = polar_pencil_from_symbol(a20, a11, a02).unwrap();
        let mut cases = vec![(a20, a11, a02, op)];
        let (b20, b11, b02) = (c(-1.0, 0.2), c(0.3, -0.6), c(-1.5, 0.1));
        cases.push((b20, b11, b02, polar_pencil_from_symbol(b20, b11, b02).unwrap()));
        for (a20, a11, a02, op) in cases {
            for _ in 0..20 {
                let r = rng.gen_range(0.3..3.0);
                let phi = rng.gen_range(-3.0..3.0);
                let lam = c(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                let k = rng.gen_range(-3..=3);
                let direct = cartesian_apply(a20, a11, a02, lam, k, r, phi);
                let ik = I * k as f64;
                let pencil: C64 = op
                    .terms
                    .iter()
                    .map(|(&(p1, p2), coef)| coef.eval(phi) * ik.powu(p1) * lam.powu(p2))
                    .sum::<C64>()
                    * (I * (k as f64) * phi).exp();
                let via = (I * lam * r.ln()).exp() * r.powi(-2) * pencil;
                assert!((direct - via).norm() <= 1e-10 * direct.norm().max(1.0), "{direct} vs {via}");
            }
        }
    }

    #[test]
    fn first_derivative_of_dirichlet_pencil() {
        let p = builtin_problem("dirichlet_laplace", &params(&[("d", PI)])).unwrap();
        let d = Discretization::new(&p, 10).unwrap();
        let lam = c(0.4, 1.3);
        let t1 = assemble_derivative(&p, &d, lam, 1).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let want = if i == j && i != 0 && i != 9 { 2.0 * lam } else { c(0.0, 0.0) };
                assert!((t1[(i, j)] - want).norm() < 1e-14);
            }
        }
        let t3 = assemble_derivative(&p, &d, lam, 3).unwrap();
        assert!(t3.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn scaled_nonlocal_term_has_second_order_central_differences() {
        let mut p = ex21(0.5, 0.5);
        p.rows[0].terms[1].chi = 2.0;
        p.rows[1].terms[1].chi = 0.5;
        let d = Discretization::new(&p, 12).unwrap();
        let pm = PencilMatrices::build(&p, &d).unwrap();
        let lam = c(0.3, 0.2);
        let exact = pm.derivative(lam, 1);
        let err = |h: f64| {
            let fd = (pm.eval(lam + h) - pm.eval(lam - h)) / c(2.0 * h, 0.0);
            max_abs(&(fd - &exact))
        };
        let (e1, e2) = (err(1e-2), err(1e-3));
        let order = (e1 / e2).log10();
        assert!(order > 1.9 && order < 2.1, "order {order} ({e1}, {e2})");
        assert!(err(1e-4) < 1e-6);
        // Second derivative against differences of the first.
        let t2 = pm.derivative(lam, 2);
        let h = 1e-4;
        let fd2 = (pm.derivative(lam + h, 1) - pm.derivative(lam - h, 1)) / c(2.0 * h, 0.0);
        assert!(max_abs(&(fd2 - t2)) < 1e-6);
    }

    #[test]
    fn reassembly_is_bit_identical() {
        let p = ex21(0.75, 0.5);
        let d = Discretization::new(&p, 20).unwrap();
        let a = assemble(&p, &d, c(0.1, -0.4)).unwrap();
        let b = assemble(&p, &d, c(0.1, -0.4)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn assembly_is_additive_in_coefficients(
            re1 in -2.0f64..2.0, im1 in -2.0f64..2.0, re2 in -2.0f64..2.0, im2 in -2.0f64..2.0,
            lre in -1.0f64..1.0, lim in -1.0f64..1.0,
        ) {
            let with_first_order = |z: C64| {
                let mut p = builtin_problem("dirichlet_laplace", &params(&[("d", 1.0)])).unwrap();
                p.components[0].operator.terms.insert((1, 0), CoeffFn::Constant(z));
                p.components[0].operator.terms.insert((0, 1), CoeffFn::TrigPoly(vec![
                    TrigTerm { harmonic: 1, cos_amp: z, sin_amp: z * 0.5 },
                ]));
                p
            };
            let (z1, z2) = (c(re1, im1), c(re2, im2));
            let lam = c(lre, lim);
            let base = with_first_order(c(0.0, 0.0));
            let d = Discretization::new(&base, 10).unwrap();
            let t0 = assemble(&base, &d, lam).unwrap();
            let t1 = assemble(&with_first_order(z1), &d, lam).unwrap() - &t0;
            let t2 = assemble(&with_first_order(z2), &d, lam).unwrap() - &t0;
            let t12 = assemble(&with_first_order(z1 + z2), &d, lam).unwrap() - &t0;
            prop_assert!(max_abs(&(t12 - t1 - t2)) < 1e-9);
        }
    }
}
