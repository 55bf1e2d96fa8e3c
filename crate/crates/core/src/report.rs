//! Verdicts on weight lines, strip scans, adjoint symmetry and singular functions.

use std::f64::consts::PI;

use crate::linalg::CVec;
use crate::multiplicity::{jordan_system_in, EigenRecord, MultiplicityError, NodalLayout};
use crate::nep::{self, LineVerdict, NepError, NepOptions, Rectangle, Workspace};
use crate::pencil::{
    periodic_rows, polar_pencil_from_symbol, Component, Discretization, PencilError, PencilOperator, PencilProblem,
};
use crate::{C64, I};

/// Default truncation of strips and lines in `Re λ`.
pub const DEFAULT_RE_HALFWIDTH: f64 = 10.0;

/// Weight line `Im λ = a + 1 - l - 2m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightLine {
    pub a: f64,
    pub l: u32,
    pub m: u32,
    pub beta: f64,
}

impl WeightLine {
    pub fn new(a: f64, l: u32, m: u32) -> Self {
        WeightLine { a, l, m, beta: a + 1.0 - l as f64 - 2.0 * m as f64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictStatus {
    Fredholm,
    NotFredholm,
    Inconclusive,
}

impl VerdictStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            VerdictStatus::Fredholm => "fredholm",
            VerdictStatus::NotFredholm => "not_fredholm",
            VerdictStatus::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub line: WeightLine,
    pub witnesses: Vec<C64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("line Im λ = {0} meets the spectrum")]
    LineNotClean(f64),
    #[error("unsupported problem class: {0}")]
    UnsupportedProblemClass(String),
    #[error("point (r = {r}, φ = {phi}) is outside the domain")]
    OutOfDomain { r: f64, phi: f64 },
    #[error("strip bounds must satisfy h2 < h1 (got {h2}, {h1})")]
    EmptyStrip { h2: f64, h1: f64 },
    #[error(transparent)]
    Nep(#[from] NepError),
    #[error(transparent)]
    Multiplicity(#[from] MultiplicityError),
    #[error(transparent)]
    Pencil(#[from] PencilError),
}

/// Fredholm verdict on the weight line of `wl`.
pub fn fredholm_verdict(
    p: &PencilProblem,
    d: &Discretization,
    wl: &WeightLine,
    re_halfwidth: f64,
    opts: &NepOptions,
) -> Result<Verdict, ReportError> {
    let ws = Workspace::new(p, d)?;
    let mut notes = vec![format!("line truncated to |Re λ| <= {re_halfwidth}")];
    let (status, witnesses) = match nep::line_free_in(&ws, wl.beta, re_halfwidth, opts)? {
        LineVerdict::Free => (VerdictStatus::Fredholm, Vec::new()),
        LineVerdict::EigenvalueFound(w) => {
            if p.is_full_circle_local() {
                notes.push("kernel trivial, image not closed".into());
            }
            (VerdictStatus::NotFredholm, w)
        }
        LineVerdict::Inconclusive(why) => {
            notes.push(why);
            (VerdictStatus::Inconclusive, Vec::new())
        }
    };
    Ok(Verdict { status, line: *wl, witnesses, notes })
}

/// Symbol `(a20, a11, a02)` recovered from a full-circle polar pencil, if it is one.
pub fn recover_symbol(p: &PencilProblem) -> Result<(C64, C64, C64), ReportError> {
    let unsupported = |why: &str| ReportError::UnsupportedProblemClass(why.into());
    if !p.is_full_circle_local() || p.m != 1 {
        return Err(unsupported("adjoints are defined only for single full-circle local pencils of order 2"));
    }
    let op = &p.components[0].operator;
    let principal = op.terms.get(&(2, 0)).ok_or_else(|| unsupported("missing principal term"))?;
    let a02 = principal.eval(0.0);
    let a20 = principal.eval(PI / 2.0);
    let a11 = a20 + a02 - 2.0 * principal.eval(PI / 4.0);
    let rebuilt = polar_pencil_from_symbol(a20, a11, a02).map_err(|e| unsupported(&e.to_string()))?;
    let scale = a20.norm() + a11.norm() + a02.norm();
    let keys: std::collections::BTreeSet<(u32, u32)> =
        op.terms.keys().chain(rebuilt.terms.keys()).copied().collect();
    for k in keys {
        for s in 0..16 {
            let phi = 2.0 * PI * s as f64 / 16.0 + 0.1;
            let want = rebuilt.terms.get(&k).map(|c| c.eval(phi)).unwrap_or_default();
            let got = op.terms.get(&k).map(|c| c.eval(phi)).unwrap_or_default();
            if (want - got).norm() > 1e-10 * scale {
                return Err(unsupported("operator is not the polar form of a constant-coefficient symbol"));
            }
        }
    }
    Ok((a20, a11, a02))
}

/// Full-circle pencil of the symbol with conjugated coefficients.
pub fn adjoint_pencil(p: &PencilProblem) -> Result<PencilProblem, ReportError> {
    let (a20, a11, a02) = recover_symbol(p)?;
    let op = polar_pencil_from_symbol(a20.conj(), a11.conj(), a02.conj())?;
    Ok(full_circle(op, p.components[0].interval))
}

/// Periodic full-circle problem for a given order-2 operator.
pub fn full_circle(op: PencilOperator, interval: (f64, f64)) -> PencilProblem {
    PencilProblem { m: 1, components: vec![Component { interval, operator: op }], rows: periodic_rows(1) }
}

/// Hausdorff distance between finite point sets (0 for two empty sets).
pub fn hausdorff(a: &[C64], b: &[C64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let one_way = |x: &[C64], y: &[C64]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointReport {
    pub spectrum: Vec<C64>,
    pub adjoint_rect: Rectangle,
    pub adjoint_spectrum: Vec<C64>,
    /// Adjoint spectrum under `μ ↦ μ̄ - 2i(m-1)`.
    pub mapped: Vec<C64>,
    pub hausdorff: f64,
}

/// `λ ↦ λ̄ - 2i(m-1)`, an involution.
pub fn adjoint_map(lambda: C64, m: u32) -> C64 {
    lambda.conj() - 2.0 * I * (m as f64 - 1.0)
}

/// Compares the spectrum in `rect` with the mapped adjoint spectrum.
pub fn adjoint_symmetry_check(
    p: &PencilProblem,
    d: &Discretization,
    rect: &Rectangle,
    opts: &NepOptions,
) -> Result<AdjointReport, ReportError> {
    let adj = adjoint_pencil(p)?;
    let shift = 2.0 * (p.m as f64 - 1.0);
    let adjoint_rect = Rectangle::new(rect.re_min, rect.re_max, -rect.im_max - shift, -rect.im_min - shift)?;
    let spectrum: Vec<C64> = nep::beyn_eigs(p, d, rect, opts)?.into_iter().map(|e| e.lambda).collect();
    let d_adj = Discretization::new(&adj, d.n_phi)?;
    let adjoint_spectrum: Vec<C64> =
        nep::beyn_eigs(&adj, &d_adj, &adjoint_rect, opts)?.into_iter().map(|e| e.lambda).collect();
    let mut mapped: Vec<C64> = adjoint_spectrum.iter().map(|&z| adjoint_map(z, p.m)).collect();
    mapped.sort_by(|a, b| nep::cmp_lambda(*a, *b));
    let hausdorff = hausdorff(&spectrum, &mapped);
    Ok(AdjointReport { spectrum, adjoint_rect, adjoint_spectrum, mapped, hausdorff })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StripScan {
    pub h2: f64,
    pub h1: f64,
    /// Upper contour edge (above `h1` when `h1` itself meets the spectrum).
    pub contour_top: f64,
    pub re_halfwidth: f64,
    pub records: Vec<EigenRecord>,
    pub notes: Vec<String>,
}

/// Eigenvalues with `h2 < Im λ < h1`, `|Re λ| ≤ re_halfwidth`, with Jordan data.
///
/// The lower line must be eigenvalue-free. The strip is open at the top, so
/// eigenvalues on `Im λ = h1` are allowed: the contour is then lifted to a clean
/// line above `h1` and eigenvalues with `Im λ ≥ h1` are discarded.
pub fn strip_scan(
    p: &PencilProblem,
    d: &Discretization,
    h2: f64,
    h1: f64,
    re_halfwidth: f64,
    opts: &NepOptions,
) -> Result<StripScan, ReportError> {
    if !(h2 < h1) {
        return Err(ReportError::EmptyStrip { h2, h1 });
    }
    let ws = Workspace::new(p, d)?;
    let mut notes = vec![format!("strip truncated to |Re λ| <= {re_halfwidth}")];
    if nep::line_free_in(&ws, h2, re_halfwidth, opts)? != LineVerdict::Free {
        return Err(ReportError::LineNotClean(h2));
    }
    let mut contour_top = h1;
    if nep::line_free_in(&ws, h1, re_halfwidth, opts)? != LineVerdict::Free {
        let width = (h1 - h2).min(1.0);
        let mut lifted = None;
        for frac in [0.5, 0.3, 0.2, 0.1] {
            let top = h1 + frac * width;
            if nep::line_free_in(&ws, top, re_halfwidth, opts)? == LineVerdict::Free {
                lifted = Some(top);
                break;
            }
        }
        contour_top = lifted.ok_or(ReportError::LineNotClean(h1))?;
        notes.push(format!(
            "upper line Im λ = {h1} meets the spectrum; contour lifted to {contour_top}, eigenvalues with Im λ >= {h1} dropped"
        ));
    }
    let rect = Rectangle::new(-re_halfwidth, re_halfwidth, h2, contour_top)?;
    let layout = NodalLayout::from_discretization(d);
    let mut records = Vec::new();
    for est in nep::beyn_in(&ws, &rect, opts)? {
        if est.lambda.im >= h1 - 1e-6 * est.lambda.norm().max(1.0) {
            continue;
        }
        if !est.resolution_stable {
            notes.push(format!("dropped unresolved eigenvalue {}", est.lambda));
            continue;
        }
        records.push(jordan_system_in(&ws.pm, layout.clone(), est.lambda, opts)?);
    }
    Ok(StripScan { h2, h1, contour_top, re_halfwidth, records, notes })
}

/// `v(r, φ) = r^{iλ} Σ_{n=0}^{k} (i ln r)ⁿ/n! ψ^{k-n}(φ)` for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularFunction {
    pub lambda: C64,
    pub chain: usize,
    pub k: usize,
    /// `ψ⁰, …, ψ^k` as nodal vectors.
    pub profiles: Vec<CVec>,
    pub layout: NodalLayout,
}

pub fn singular_functions(record: &EigenRecord) -> Vec<SingularFunction> {
    let mut out = Vec::new();
    for (q, chain) in record.chains.iter().enumerate() {
        for k in 0..chain.rank() {
            out.push(SingularFunction {
                lambda: record.lambda,
                chain: q,
                k,
                profiles: chain.vectors[..=k].to_vec(),
                layout: record.layout.clone(),
            });
        }
    }
    out
}

/// Evaluates on the first component whose closed interval contains `φ`.
pub fn eval_singular(f: &SingularFunction, r: f64, phi: f64) -> Result<C64, ReportError> {
    let j = f
        .layout
        .grids
        .iter()
        .position(|g| g.interval.0 <= phi && phi <= g.interval.1)
        .ok_or(ReportError::OutOfDomain { r, phi })?;
    eval_singular_on(f, j, r, phi)
}

pub fn eval_singular_on(f: &SingularFunction, component: usize, r: f64, phi: f64) -> Result<C64, ReportError> {
    let grid = f.layout.grids.get(component).ok_or(ReportError::OutOfDomain { r, phi })?;
    if !(r > 0.0 && r.is_finite()) || !(grid.interval.0 <= phi && phi <= grid.interval.1) {
        return Err(ReportError::OutOfDomain { r, phi });
    }
    let log = I * r.ln();
    let mut sum = C64::new(0.0, 0.0);
    let mut term = C64::new(1.0, 0.0);
    for n in 0..=f.k {
        if n > 0 {
            term *= log / n as f64;
        }
        let values = f.layout.component(&f.profiles[f.k - n], component);
        sum += term * grid.interpolate(values, phi);
    }
    Ok((I * f.lambda * r.ln()).exp() * sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionReport {
    pub h2: f64,
    pub h1: f64,
    pub regularity_transfer: bool,
    pub message: String,
    pub scan: StripScan,
    pub obstructions: Vec<SingularFunction>,
}

/// Which singular terms separate regularity on weight `(a1, l1)` from `(a2, l2)`.
pub fn weight_transition_report(
    p: &PencilProblem,
    d: &Discretization,
    first: (f64, u32),
    second: (f64, u32),
    m: u32,
    re_halfwidth: f64,
    opts: &NepOptions,
) -> Result<TransitionReport, ReportError> {
    let ha = WeightLine::new(first.0, first.1, m).beta;
    let hb = WeightLine::new(second.0, second.1, m).beta;
    let (h2, h1) = if ha < hb { (ha, hb) } else { (hb, ha) };
    let scan = strip_scan(p, d, h2, h1, re_halfwidth, opts)?;
    let obstructions: Vec<SingularFunction> = scan.records.iter().flat_map(singular_functions).collect();
    let regularity_transfer = scan.records.is_empty();
    let message = if regularity_transfer {
        "regularity transfer holds".to_string()
    } else {
        format!("{} singular term(s) obstruct the transfer", obstructions.len())
    };
    Ok(TransitionReport { h2, h1, regularity_transfer, message, scan, obstructions })
}
