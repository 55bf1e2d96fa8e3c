//! Eigenvalues of the assembled pencil `T(λ)`: argument-principle counts,
//! block-Hankel contour extraction, Newton refinement and line scans.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::linalg::{self, CMat, Svd};
use crate::pencil::{Discretization, PencilError, PencilMatrices, PencilProblem};
use crate::quadrature::{gauss_legendre, rectangle_nodes, ContourNode};
use crate::{C64, I};

/// Axis-aligned rectangle in the λ-plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rectangle {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl Rectangle {
    pub fn new(re_min: f64, re_max: f64, im_min: f64, im_max: f64) -> Result<Self, NepError> {
        let r = Rectangle { re_min, re_max, im_min, im_max };
        let finite = [re_min, re_max, im_min, im_max].iter().all(|v| v.is_finite());
        if !finite || re_min >= re_max || im_min >= im_max {
            return Err(NepError::InvalidRectangle(r));
        }
        Ok(r)
    }

    pub fn contains(&self, z: C64) -> bool {
        self.re_min < z.re && z.re < self.re_max && self.im_min < z.im && z.im < self.im_max
    }

    fn center(&self) -> C64 {
        C64::new(0.5 * (self.re_min + self.re_max), 0.5 * (self.im_min + self.im_max))
    }

    fn half_diagonal(&self) -> f64 {
        0.5 * (self.re_max - self.re_min).hypot(self.im_max - self.im_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NepOptions {
    /// Gauss–Legendre nodes per rectangle edge.
    pub quad_points: usize,
    /// Number of random probe columns.
    pub probe_rank: usize,
    pub rank_tol: f64,
    pub residual_tol: f64,
    pub seed: u64,
    pub refine_steps: usize,
    /// Number of block-Hankel moment levels.
    pub moment_depth: usize,
}

impl Default for NepOptions {
    fn default() -> Self {
        NepOptions {
            quad_points: 128,
            probe_rank: 8,
            rank_tol: 1e-8,
            residual_tol: 1e-8,
            seed: 0,
            refine_steps: 20,
            moment_depth: 2,
        }
    }
}

impl NepOptions {
    pub fn validate(&self) -> Result<(), NepError> {
        let ok = self.quad_points > 0
            && self.probe_rank > 0
            && self.refine_steps > 0
            && self.moment_depth > 0
            && self.rank_tol > 0.0
            && self.rank_tol < 1.0
            && self.residual_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NepError::InvalidOptions(format!("{self:?}")))
        }
    }

    /// Largest eigenvalue count a rectangle may hold for extraction.
    pub fn capacity(&self) -> usize {
        (self.moment_depth * self.probe_rank).saturating_sub(2)
    }
}

/// Smallest singular value below which a contour node is rejected.
pub const CONTOUR_GUARD: f64 = 1e-6;
/// Newton refinement must land within `BASIN_RADIUS·max(1, |λ₀|)` of its start.
pub const BASIN_RADIUS: f64 = 0.5;
/// Half-height of the thin rectangle used by [`line_free`].
pub const LINE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenEstimate {
    pub lambda: C64,
    pub sigma_min: f64,
    pub resolution_stable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LineVerdict {
    Free,
    EigenvalueFound(Vec<C64>),
    Inconclusive(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NepError {
    #[error("contour passes within σ_min ≈ {sigma:.3e} of the spectrum at λ = {z}")]
    ContourTooClose { z: C64, sigma: f64 },
    #[error("winding number {raw} is not within 0.1 of an integer")]
    NonIntegerWinding { raw: C64 },
    #[error("rank decision is ambiguous: {0}")]
    RankAmbiguous(String),
    #[error("Newton refinement did not converge from {start} (last λ = {last}, σ_min = {sigma:.3e})")]
    NoConvergence { start: C64, last: C64, sigma: f64 },
    #[error("invalid rectangle {0:?}")]
    InvalidRectangle(Rectangle),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("re_halfwidth must be positive")]
    InvalidHalfwidth,
    #[error(transparent)]
    Pencil(#[from] PencilError),
}

/// A problem together with its assembled matrices at `n_phi` and `2·n_phi`.
pub struct Workspace<'a> {
    pub problem: &'a PencilProblem,
    pub n_phi: usize,
    pub pm: PencilMatrices,
    fine: std::sync::OnceLock<Result<PencilMatrices, PencilError>>,
}

impl<'a> Workspace<'a> {
    pub fn new(problem: &'a PencilProblem, d: &Discretization) -> Result<Self, NepError> {
        Ok(Workspace {
            problem,
            n_phi: d.n_phi,
            pm: PencilMatrices::build(problem, d)?,
            fine: std::sync::OnceLock::new(),
        })
    }

    /// Matrices at doubled resolution, built on first use.
    pub fn fine(&self) -> Result<&PencilMatrices, NepError> {
        let built = self.fine.get_or_init(|| {
            let d2 = Discretization::new(self.problem, 2 * self.n_phi)?;
            PencilMatrices::build(self.problem, &d2)
        });
        built.as_ref().map_err(|e| NepError::Pencil(e.clone()))
    }
}

struct NodeEval {
    trace: C64,
    tinv_v: Option<CMat>,
}

fn eval_node(pm: &PencilMatrices, z: C64, v: Option<&CMat>) -> Result<NodeEval, NepError> {
    let t = pm.eval(z);
    let inv = t.lu().try_inverse().ok_or(NepError::ContourTooClose { z, sigma: 0.0 })?;
    let guard = 1.0 / inv.norm();
    if !(guard >= CONTOUR_GUARD) {
        return Err(NepError::ContourTooClose { z, sigma: guard });
    }
    let t1 = pm.derivative(z, 1);
    let n = pm.size;
    let mut trace = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            trace += inv[(i, j)] * t1[(j, i)];
        }
    }
    Ok(NodeEval { trace, tinv_v: v.map(|v| &inv * v) })
}

fn evaluate_contour(
    pm: &PencilMatrices,
    nodes: &[ContourNode],
    v: Option<&CMat>,
) -> Result<Vec<NodeEval>, NepError> {
    // Parallel evaluation, collected in node order; callers reduce sequentially.
    nodes.par_iter().map(|nd| eval_node(pm, nd.z, v)).collect()
}

fn winding_from(nodes: &[ContourNode], evals: &[NodeEval]) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for (nd, ev) in nodes.iter().zip(evals) {
        s += nd.weight * ev.trace;
    }
    s / (2.0 * std::f64::consts::PI * I)
}

fn round_winding(raw: C64) -> Result<usize, NepError> {
    let k = raw.re.round();
    if (raw - C64::new(k, 0.0)).norm() > 0.1 || k < 0.0 {
        return Err(NepError::NonIntegerWinding { raw });
    }
    Ok(k as usize)
}

/// Raw value of `(1/2πi)∮ tr(T⁻¹T′) dλ` on the rectangle boundary.
pub fn winding_raw(ws: &Workspace, rect: &Rectangle, opts: &NepOptions) -> Result<C64, NepError> {
    let nodes = rectangle_nodes(rect.re_min, rect.re_max, rect.im_min, rect.im_max, opts.quad_points);
    let evals = evaluate_contour(&ws.pm, &nodes, None)?;
    Ok(winding_from(&nodes, &evals))
}

/// Number of eigenvalues (with algebraic multiplicity) inside `rect`.
pub fn count_in_rectangle(
    p: &PencilProblem,
    d: &Discretization,
    rect: &Rectangle,
    opts: &NepOptions,
) -> Result<usize, NepError> {
    opts.validate()?;
    let ws = Workspace::new(p, d)?;
    round_winding(winding_raw(&ws, rect, opts)?)
}

fn probe_matrix(n: usize, k: usize, seed: u64) -> CMat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = CMat::zeros(n, k);
    // Column-major fill keeps the stream order independent of matrix internals.
    for j in 0..k {
        for i in 0..n {
            let r: f64 = rng.gen::<f64>().sqrt();
            let th: f64 = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
            v[(i, j)] = C64::from_polar(r, th);
        }
    }
    v
}

/// Contour-integral eigenvalue extraction inside `rect`.
pub fn beyn_eigs(
    p: &PencilProblem,
    d: &Discretization,
    rect: &Rectangle,
    opts: &NepOptions,
) -> Result<Vec<EigenEstimate>, NepError> {
    opts.validate()?;
    let ws = Workspace::new(p, d)?;
    beyn_in(&ws, rect, opts)
}

pub fn beyn_in(ws: &Workspace, rect: &Rectangle, opts: &NepOptions) -> Result<Vec<EigenEstimate>, NepError> {
    let n = ws.pm.size;
    let pr = opts.probe_rank;
    let depth = opts.moment_depth;
    let v = probe_matrix(n, pr, opts.seed);
    let nodes = rectangle_nodes(rect.re_min, rect.re_max, rect.im_min, rect.im_max, opts.quad_points);
    let evals = evaluate_contour(&ws.pm, &nodes, Some(&v))?;
    let count = round_winding(winding_from(&nodes, &evals))?;
    if count == 0 {
        return Ok(Vec::new());
    }
    if count > opts.capacity() {
        return Err(NepError::RankAmbiguous(format!(
            "{count} eigenvalues exceed the probe capacity {} (raise probe_rank)",
            opts.capacity()
        )));
    }

    let center = rect.center();
    let scale = rect.half_diagonal();
    let mut moments = vec![CMat::zeros(n, pr); 2 * depth];
    for (nd, ev) in nodes.iter().zip(&evals) {
        let zeta = (nd.z - center) / scale;
        let tv = ev.tinv_v.as_ref().expect("probe requested");
        let mut w = nd.weight / (2.0 * std::f64::consts::PI * I);
        for m in moments.iter_mut() {
            *m += tv * w;
            w *= zeta;
        }
    }
    let hankel = |offset: usize| {
        let mut h = CMat::zeros(n * depth, pr * depth);
        for bi in 0..depth {
            for bj in 0..depth {
                h.view_mut((bi * n, bj * pr), (n, pr)).copy_from(&moments[bi + bj + offset]);
            }
        }
        h
    };
    let b0 = hankel(0);
    let b1 = hankel(1);
    let svd = Svd::new(&b0);
    let smax = svd.sigma_max();
    let thr = opts.rank_tol * smax;
    let rank = svd.rank(thr);
    if let Some(s) = svd.sigma.iter().find(|&&s| s > thr / 10.0 && s < thr * 10.0) {
        return Err(NepError::RankAmbiguous(format!(
            "singular value {s:.3e} within a factor 10 of the threshold {thr:.3e}"
        )));
    }
    if rank >= pr * depth {
        return Err(NepError::RankAmbiguous(format!("rank saturates the probe space ({rank})")));
    }
    if rank != count {
        return Err(NepError::RankAmbiguous(format!("moment rank {rank} differs from winding count {count}")));
    }
    let u0 = svd.u.columns(0, rank).into_owned();
    let w0 = svd.v.columns(0, rank).into_owned();
    let sinv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        rank,
        svd.sigma[..rank].iter().map(|s| C64::new(1.0 / s, 0.0)),
    ));
    let reduced = u0.adjoint() * &b1 * w0 * sinv;
    let mu = reduced.schur().unpack().1.diagonal();
    let raw: Vec<C64> = mu.iter().map(|m| center + m * scale).collect();
    postprocess(ws, rect, &raw, opts)
}

fn postprocess(ws: &Workspace, rect: &Rectangle, raw: &[C64], opts: &NepOptions) -> Result<Vec<EigenEstimate>, NepError> {
    let tol = opts.residual_tol;
    let mut refined = Vec::new();
    for &z in raw {
        match newton(&ws.pm, z, opts) {
            Ok((lam, _)) => refined.push(lam),
            Err(_) => {
                if linalg::sigma_min(&ws.pm.eval(z)) <= tol {
                    refined.push(z);
                }
            }
        }
    }
    refined.retain(|z| rect.contains(*z));
    refined.sort_by(|a, b| cmp_lambda(*a, *b));

    let mut clusters: Vec<Vec<C64>> = Vec::new();
    for z in refined {
        let radius = tol.sqrt() * z.norm().max(1.0);
        match clusters.iter_mut().find(|c| c.iter().any(|w| (w - z).norm() <= radius)) {
            Some(c) => c.push(z),
            None => clusters.push(vec![z]),
        }
    }
    let mut out = Vec::new();
    for c in clusters {
        let mean = c.iter().sum::<C64>() / c.len() as f64;
        let mut lam = mean;
        let mut sigma = linalg::sigma_min(&ws.pm.eval(lam));
        if sigma > tol {
            let (l, s) = newton(&ws.pm, mean, opts)?;
            lam = l;
            sigma = s;
        }
        let stable = resolution_stable(ws, lam, opts)?;
        out.push(EigenEstimate { lambda: lam, sigma_min: sigma, resolution_stable: stable });
    }
    out.sort_by(|a, b| cmp_lambda(a.lambda, b.lambda));
    Ok(out)
}

/// Orders eigenvalues by `(Im, Re)` ascending.
pub fn cmp_lambda(a: C64, b: C64) -> std::cmp::Ordering {
    a.im.total_cmp(&b.im).then(a.re.total_cmp(&b.re))
}

fn resolution_stable(ws: &Workspace, lam: C64, opts: &NepOptions) -> Result<bool, NepError> {
    let fine = ws.fine()?;
    if let Ok((l2, _)) = newton(fine, lam, opts) {
        if (l2 - lam).norm() <= 10.0 * opts.residual_tol {
            return Ok(true);
        }
    }
    // Multiple roots split under round-off; accept when λ stays singular.
    Ok(linalg::sigma_min(&fine.eval(lam)) <= opts.residual_tol)
}

/// Newton iteration on `1/tr(T⁻¹T′)` without the basin check.
fn newton(pm: &PencilMatrices, start: C64, opts: &NepOptions) -> Result<(C64, f64), NepError> {
    let mut lam = start;
    let mut sigma = f64::INFINITY;
    for step in 0..=opts.refine_steps {
        let t = pm.eval(lam);
        sigma = linalg::sigma_min(&t);
        if sigma <= opts.residual_tol {
            return Ok((lam, sigma));
        }
        if step == opts.refine_steps {
            break;
        }
        let lu = t.lu();
        let x = match lu.solve(&pm.derivative(lam, 1)) {
            Some(x) => x,
            None => return Ok((lam, 0.0)),
        };
        let y = lu.solve(&pm.derivative(lam, 2)).expect("same factorization");
        let tr = x.trace();
        let trp = y.trace() - (&x * &x).trace();
        let step = tr / trp;
        if !(step.re.is_finite() && step.im.is_finite()) {
            break;
        }
        lam += step;
    }
    Err(NepError::NoConvergence { start, last: lam, sigma })
}

/// Refines an eigenvalue estimate by Newton's method.
pub fn refine(p: &PencilProblem, d: &Discretization, lambda0: C64, opts: &NepOptions) -> Result<EigenEstimate, NepError> {
    opts.validate()?;
    let ws = Workspace::new(p, d)?;
    refine_in(&ws, lambda0, opts)
}

pub fn refine_in(ws: &Workspace, lambda0: C64, opts: &NepOptions) -> Result<EigenEstimate, NepError> {
    let (lam, sigma) = newton(&ws.pm, lambda0, opts)?;
    // A root far from the start belongs to another basin.
    if (lam - lambda0).norm() > BASIN_RADIUS * lambda0.norm().max(1.0) {
        return Err(NepError::NoConvergence { start: lambda0, last: lam, sigma });
    }
    let stable = resolution_stable(ws, lam, opts)?;
    Ok(EigenEstimate { lambda: lam, sigma_min: sigma, resolution_stable: stable })
}

/// Adaptive Gauss–Legendre integral of `tr(T⁻¹T′)` along the segment `a → b`.
fn adaptive_segment(pm: &PencilMatrices, a: C64, b: C64, depth: usize) -> Result<C64, NepError> {
    const N: usize = 16;
    let (x, w) = gauss_legendre(N);
    let rule = |a: C64, b: C64| -> Result<C64, NepError> {
        let mid = (a + b) * 0.5;
        let half = (b - a) * 0.5;
        let mut s = C64::new(0.0, 0.0);
        for (xi, wi) in x.iter().zip(&w) {
            s += half * *wi * eval_node(pm, mid + half * *xi, None)?.trace;
        }
        Ok(s)
    };
    fn go(
        rule: &dyn Fn(C64, C64) -> Result<C64, NepError>,
        a: C64,
        b: C64,
        whole: C64,
        depth: usize,
    ) -> Result<C64, NepError> {
        let m = (a + b) * 0.5;
        let left = rule(a, m)?;
        let right = rule(m, b)?;
        let refined = left + right;
        if (refined - whole).norm() <= 1e-10 * refined.norm().max(1.0) {
            return Ok(refined);
        }
        if depth == 0 {
            return Err(NepError::NonIntegerWinding { raw: refined / (2.0 * std::f64::consts::PI * I) });
        }
        Ok(go(rule, a, m, left, depth - 1)? + go(rule, m, b, right, depth - 1)?)
    }
    let whole = rule(a, b)?;
    go(&rule, a, b, whole, depth)
}

/// Argument-principle count on a thin rectangle with adaptive edge quadrature.
fn thin_count(pm: &PencilMatrices, rect: &Rectangle) -> Result<usize, NepError> {
    let corners = [
        C64::new(rect.re_min, rect.im_min),
        C64::new(rect.re_max, rect.im_min),
        C64::new(rect.re_max, rect.im_max),
        C64::new(rect.re_min, rect.im_max),
    ];
    let mut s = C64::new(0.0, 0.0);
    for e in 0..4 {
        s += adaptive_segment(pm, corners[e], corners[(e + 1) % 4], 24)?;
    }
    round_winding(s / (2.0 * std::f64::consts::PI * I))
}

/// Decides whether the segment `Im λ = beta`, `|Re λ| ≤ re_halfwidth` is free of eigenvalues.
pub fn line_free(
    p: &PencilProblem,
    d: &Discretization,
    beta: f64,
    re_halfwidth: f64,
    opts: &NepOptions,
) -> Result<LineVerdict, NepError> {
    opts.validate()?;
    let ws = Workspace::new(p, d)?;
    line_free_in(&ws, beta, re_halfwidth, opts)
}

pub fn line_free_in(ws: &Workspace, beta: f64, re_halfwidth: f64, opts: &NepOptions) -> Result<LineVerdict, NepError> {
    if !(re_halfwidth > 0.0 && re_halfwidth.is_finite()) || !beta.is_finite() {
        return Err(NepError::InvalidHalfwidth);
    }
    let half = (re_halfwidth / 0.05).ceil().max(20.0) as i64;
    let xs: Vec<f64> = (-half..=half).map(|k| re_halfwidth * k as f64 / half as f64).collect();
    let sig: Vec<f64> = xs
        .par_iter()
        .map(|&x| linalg::sigma_min(&ws.pm.eval(C64::new(x, beta))))
        .collect();
    let clean = sig.iter().all(|&s| s > 10.0 * opts.residual_tol);

    // Local minima of σ_min, smallest first, seed Newton for witnesses on the line.
    let mut minima: Vec<usize> = (0..sig.len())
        .filter(|&k| (k == 0 || sig[k] <= sig[k - 1]) && (k + 1 == sig.len() || sig[k] <= sig[k + 1]))
        .collect();
    minima.sort_by(|a, b| sig[*a].total_cmp(&sig[*b]).then(a.cmp(b)));
    minima.truncate(16);
    let mut witnesses: Vec<C64> = Vec::new();
    for k in minima {
        if let Ok((lam, _)) = newton(&ws.pm, C64::new(xs[k], beta), opts) {
            let on_line = (lam.im - beta).abs() <= 1e-6 * lam.norm().max(1.0);
            let inside = lam.re.abs() <= re_halfwidth * (1.0 + 1e-12);
            let tol = opts.residual_tol.sqrt() * lam.norm().max(1.0);
            if on_line && inside && !witnesses.iter().any(|w| (w - lam).norm() <= tol) {
                witnesses.push(lam);
            }
        }
    }
    witnesses.sort_by(|a, b| cmp_lambda(*a, *b));

    let thin = Rectangle {
        re_min: -re_halfwidth,
        re_max: re_halfwidth,
        im_min: beta - LINE_EPS,
        im_max: beta + LINE_EPS,
    };
    let count = thin_count(&ws.pm, &thin);
    Ok(match (&count, witnesses.is_empty()) {
        (Ok(0), true) if clean => LineVerdict::Free,
        (Ok(k), false) if *k > 0 => LineVerdict::EigenvalueFound(witnesses),
        (Err(_), false) => LineVerdict::EigenvalueFound(witnesses),
        (Ok(k), _) => LineVerdict::Inconclusive(format!(
            "thin count {k}, {} witness(es), σ_min clean: {clean}",
            witnesses.len()
        )),
        (Err(e), true) => LineVerdict::Inconclusive(format!("thin count failed ({e}) without a witness")),
    })
}

/// `σ_min(T(λ))` at the working discretization.
pub fn sigma_min_at(ws: &Workspace, lambda: C64) -> f64 {
    linalg::sigma_min(&ws.pm.eval(lambda))
}
