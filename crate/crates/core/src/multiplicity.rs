//! Nullspaces and canonical systems of Jordan chains at an eigenvalue.
//!
//! A Jordan chain `ψ⁰, …, ψ^{p-1}` satisfies `Σ_{s=0}^{k} T_s ψ^{k-s} = 0` for
//! `k < p`, where `T_s = T^{(s)}(λ)/s!`. The solution space `K_p` of these `p`
//! block-Toeplitz equations has dimension `Σ_i min(p_i, p)`, so the partial
//! multiplicities follow from the growth of `dim K_p`. Extending `K_p` to
//! `K_{p+1}` needs the right-hand side to be orthogonal to the left nullspace of
//! `T(λ)`. Associated vectors may be zero.

use crate::linalg::{self, CMat, CVec, Svd};
use crate::nep::NepOptions;
use crate::pencil::{Discretization, PencilError, PencilMatrices, PencilProblem};
use crate::C64;

/// Longest chain searched for before giving up.
pub const MAX_CHAIN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct JordanChain {
    /// `vectors[s]` is `ψ^s` over all components (component-major, node-minor).
    pub vectors: Vec<CVec>,
}

impl JordanChain {
    pub fn rank(&self) -> usize {
        self.vectors.len()
    }
}

/// Nodes and barycentric weights of one component, for evaluating profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalGrid {
    pub interval: (f64, f64),
    pub nodes: Vec<f64>,
    pub bary_weights: Vec<f64>,
}

impl NodalGrid {
    pub fn interpolate(&self, values: &[C64], angle: f64) -> C64 {
        if let Some(k) = self.nodes.iter().position(|&x| x == angle) {
            return values[k];
        }
        let mut num = C64::new(0.0, 0.0);
        let mut den = 0.0;
        for k in 0..self.nodes.len() {
            let t = self.bary_weights[k] / (angle - self.nodes[k]);
            num += values[k] * t;
            den += t;
        }
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodalLayout {
    pub n_phi: usize,
    pub grids: Vec<NodalGrid>,
}

impl NodalLayout {
    pub fn from_discretization(d: &Discretization) -> Self {
        NodalLayout {
            n_phi: d.n_phi,
            grids: d
                .components
                .iter()
                .map(|g| NodalGrid {
                    interval: g.interval,
                    nodes: g.nodes.clone(),
                    bary_weights: g.bary_weights.clone(),
                })
                .collect(),
        }
    }

    /// Nodal values of component `j` inside a full vector.
    pub fn component<'v>(&self, v: &'v CVec, j: usize) -> &'v [C64] {
        &v.as_slice()[j * self.n_phi..(j + 1) * self.n_phi]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenRecord {
    pub lambda: C64,
    pub geometric_mult: usize,
    /// Sorted by non-increasing rank.
    pub chains: Vec<JordanChain>,
    pub algebraic_mult: usize,
    pub layout: NodalLayout,
}

impl EigenRecord {
    pub fn ranks(&self) -> Vec<usize> {
        self.chains.iter().map(|c| c.rank()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MultiplicityError {
    #[error("λ = {lambda} is not an eigenvalue (σ_min = {sigma:.3e} > {tol:.1e})")]
    NotAnEigenvalue { lambda: C64, sigma: f64, tol: f64 },
    #[error(transparent)]
    Pencil(#[from] PencilError),
}

struct Local {
    t0: CMat,
    svd: Svd,
    thr: f64,
}

fn local(pm: &PencilMatrices, lambda: C64, tol: f64) -> Result<Local, MultiplicityError> {
    let t0 = pm.eval(lambda);
    let svd = Svd::new(&t0);
    let sigma = svd.sigma_min();
    if sigma > tol {
        return Err(MultiplicityError::NotAnEigenvalue { lambda, sigma, tol });
    }
    let thr = tol * svd.sigma_max();
    Ok(Local { t0, svd, thr })
}

/// Orthonormal basis of the numerical kernel `{σ ≤ tol·σ_max}` of `T(λ)`.
pub fn nullspace(p: &PencilProblem, d: &Discretization, lambda: C64, tol: f64) -> Result<Vec<CVec>, MultiplicityError> {
    let pm = PencilMatrices::build(p, d)?;
    nullspace_in(&pm, lambda, tol)
}

pub fn nullspace_in(pm: &PencilMatrices, lambda: C64, tol: f64) -> Result<Vec<CVec>, MultiplicityError> {
    let loc = local(pm, lambda, tol)?;
    let x = loc.svd.right_null(loc.thr, pm.size);
    Ok(x.column_iter().map(|c| c.into_owned()).collect())
}

/// Canonical system of Jordan chains at `λ`.
pub fn jordan_system(
    p: &PencilProblem,
    d: &Discretization,
    lambda: C64,
    opts: &NepOptions,
) -> Result<EigenRecord, MultiplicityError> {
    let pm = PencilMatrices::build(p, d)?;
    jordan_system_in(&pm, NodalLayout::from_discretization(d), lambda, opts)
}

pub fn jordan_system_in(
    pm: &PencilMatrices,
    layout: NodalLayout,
    lambda: C64,
    opts: &NepOptions,
) -> Result<EigenRecord, MultiplicityError> {
    let n = pm.size;
    let tol = opts.residual_tol;
    let loc = local(pm, lambda, tol)?;
    let x = loc.svd.right_null(loc.thr, n);
    let y = loc.svd.left_null(loc.thr, n);
    let q = x.ncols();
    let scale = loc.svd.sigma_max();

    // Taylor coefficients T_s = T^{(s)}/s!, computed on demand.
    let mut taylor: Vec<CMat> = vec![loc.t0.clone()];
    let mut factorial = 1.0;

    // K[p-1] holds an orthonormal basis of K_p as (p·n) × dim matrices.
    let mut spaces: Vec<CMat> = vec![x.clone()];
    let mut counts: Vec<usize> = vec![q];
    while spaces.len() < MAX_CHAIN {
        let level = spaces.len();
        while taylor.len() <= level {
            let s = taylor.len();
            factorial *= s as f64;
            taylor.push(pm.derivative(lambda, s as u32) / C64::new(factorial, 0.0));
        }
        let k = spaces.last().expect("nonempty");
        let dim = k.ncols();
        // R = -Σ_{s=1}^{level} T_s ψ^{level-s} for every basis chain.
        let mut r = CMat::zeros(n, dim);
        for s in 1..=level {
            let block = k.view(((level - s) * n, 0), (n, dim));
            r -= &taylor[s] * block;
        }
        let g = y.adjoint() * &r;
        let rnorm = linalg::norm2(&r);
        let g_thr = (tol * rnorm).max(1e3 * f64::EPSILON * scale);
        let coeffs = if g.nrows() == 0 {
            CMat::identity(dim, dim)
        } else {
            let gs = Svd::new(&g);
            gs.right_null(g_thr, dim)
        };
        let extendable = coeffs.ncols();
        let mut next = CMat::zeros((level + 1) * n, extendable + q);
        if extendable > 0 {
            let head = k * &coeffs;
            let tail = loc.svd.pinv_solve(&(&r * &coeffs), loc.thr);
            next.view_mut((0, 0), (level * n, extendable)).copy_from(&head);
            next.view_mut((level * n, 0), (n, extendable)).copy_from(&tail);
        }
        next.view_mut((level * n, extendable), (n, q)).copy_from(&x);
        let basis = linalg::orth(&next, 1e-10);
        let grown = basis.ncols() - k.ncols();
        if grown == 0 {
            break;
        }
        counts.push(grown);
        spaces.push(basis);
    }

    // counts[k] = #{i : p_i ≥ k+1}. Pick chains from the longest rank down.
    let mut chosen: Vec<CVec> = Vec::new();
    let mut chains: Vec<JordanChain> = Vec::new();
    for rank in (1..=counts.len()).rev() {
        let exactly = counts[rank - 1] - counts.get(rank).copied().unwrap_or(0);
        if exactly == 0 {
            continue;
        }
        let k = &spaces[rank - 1];
        let heads = k.view((0, 0), (n, k.ncols())).into_owned();
        let mut eig = linalg::orth(&heads, 1e-8);
        if !chosen.is_empty() {
            let prev = CMat::from_columns(&chosen);
            let prev = linalg::orth(&prev, 1e-12);
            let proj = &eig - &prev * (prev.adjoint() * &eig);
            eig = linalg::orth(&proj, 1e-8);
        }
        let hs = Svd::new(&heads);
        for col in eig.column_iter().take(exactly) {
            let target = CMat::from_column_slice(n, 1, col.as_slice());
            let c = hs.pinv_solve(&target, 1e-10 * hs.sigma_max());
            let chain = k * c;
            let head_norm = chain.view((0, 0), (n, 1)).norm();
            let vectors: Vec<CVec> = (0..rank)
                .map(|s| chain.view((s * n, 0), (n, 1)).column(0).into_owned() / C64::new(head_norm, 0.0))
                .collect();
            chosen.push(vectors[0].clone());
            chains.push(JordanChain { vectors });
        }
    }
    let algebraic_mult = chains.iter().map(|c| c.rank()).sum();
    Ok(EigenRecord { lambda, geometric_mult: q, chains, algebraic_mult, layout })
}

/// `max_k ‖Σ_{s=0}^{k} T_s ψ^{k-s}‖₂` over the levels of a chain.
pub fn chain_residual(pm: &PencilMatrices, lambda: C64, chain: &JordanChain) -> f64 {
    let mut taylor = Vec::new();
    let mut factorial = 1.0;
    for s in 0..chain.rank() {
        if s > 0 {
            factorial *= s as f64;
        }
        taylor.push(pm.derivative(lambda, s as u32) / C64::new(factorial, 0.0));
    }
    (0..chain.rank())
        .map(|k| {
            let mut acc = CVec::zeros(pm.size);
            for s in 0..=k {
                acc += &taylor[s] * &chain.vectors[k - s];
            }
            acc.norm()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pencil::builtin_problem;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn periodic() -> (PencilProblem, Discretization) {
        let p = builtin_problem("periodic_laplace", &BTreeMap::new()).unwrap();
        let d = Discretization::new(&p, 64).unwrap();
        (p, d)
    }

    fn samples(d: &Discretization, f: impl Fn(f64) -> f64) -> CMat {
        CMat::from_iterator(d.n_phi, 1, d.components[0].nodes.iter().map(|&x| C64::new(f(x), 0.0)))
    }

    fn span(vs: &[CVec]) -> CMat {
        linalg::orth(&CMat::from_columns(vs), 1e-12)
    }

    #[test]
    fn periodic_nullspaces() {
        let (p, d) = periodic();
        let ns = nullspace(&p, &d, C64::new(0.0, 1.0), 1e-8).unwrap();
        assert_eq!(ns.len(), 2);
        let want = linalg::orth(
            &CMat::from_columns(&[samples(&d, f64::sin).column(0), samples(&d, f64::cos).column(0)]),
            1e-12,
        );
        assert!(linalg::subspace_angle(&span(&ns), &want) < 1e-6);

        let ns = nullspace(&p, &d, C64::new(0.0, 0.0), 1e-8).unwrap();
        assert_eq!(ns.len(), 1);
        let v = &ns[0];
        assert!(v.iter().all(|z| (z - v[0]).norm() < 1e-10));

        assert!(matches!(
            nullspace(&p, &d, C64::new(0.0, 0.5), 1e-8),
            Err(MultiplicityError::NotAnEigenvalue { .. })
        ));
    }

    #[test]
    fn dirichlet_nullspace_is_sine() {
        let params: BTreeMap<String, f64> = [("d".to_string(), PI)].into_iter().collect();
        let p = builtin_problem("dirichlet_laplace", &params).unwrap();
        let d = Discretization::new(&p, 32).unwrap();
        let ns = nullspace(&p, &d, C64::new(0.0, 1.0), 1e-8).unwrap();
        assert_eq!(ns.len(), 1);
        let want = linalg::orth(&samples(&d, f64::sin), 1e-12);
        assert!(linalg::subspace_angle(&span(&ns), &want) < 1e-6);
        let rec = jordan_system(&p, &d, C64::new(0.0, 1.0), &NepOptions::default()).unwrap();
        assert_eq!(rec.ranks(), vec![1]);
    }

    #[test]
    fn periodic_jordan_structure() {
        let (p, d) = periodic();
        let pm = PencilMatrices::build(&p, &d).unwrap();
        let opts = NepOptions::default();
        let rec = jordan_system(&p, &d, C64::new(0.0, 0.0), &opts).unwrap();
        assert_eq!(rec.geometric_mult, 1);
        assert_eq!(rec.ranks(), vec![2]);
        assert_eq!(rec.algebraic_mult, 2);
        let chain = &rec.chains[0];
        assert!((chain.vectors[0].norm() - 1.0).abs() < 1e-12);
        // The associated vector is zero.
        assert!(chain.vectors[1].norm() < 1e-8, "{}", chain.vectors[1].norm());
        let tnorm = linalg::norm2(&pm.eval(C64::new(0.0, 0.0)));
        assert!(chain_residual(&pm, C64::new(0.0, 0.0), chain) <= 1e-7 * tnorm);

        for k in 1..=4 {
            let lam = C64::new(0.0, -(k as f64));
            let rec = jordan_system(&p, &d, lam, &opts).unwrap();
            assert_eq!(rec.ranks(), vec![1, 1], "k = {k}");
            let heads: Vec<CVec> = rec.chains.iter().map(|c| c.vectors[0].clone()).collect();
            let s = linalg::singular_values(&CMat::from_columns(&heads));
            assert!(s[1] >= 1e-6);
        }
    }

    #[test]
    fn shifted_pencil_keeps_ranks() {
        // λ ↦ λ - c by substitution: λ² → λ² - 2cλ + c².
        let (mut p, d) = periodic();
        let shift = 0.7;
        let op = &mut p.components[0].operator;
        op.terms.insert((0, 1), crate::pencil::CoeffFn::constant(-2.0 * shift));
        op.terms.insert((0, 0), crate::pencil::CoeffFn::constant(shift * shift));
        let rec = jordan_system(&p, &d, C64::new(shift, 0.0), &NepOptions::default()).unwrap();
        assert_eq!(rec.ranks(), vec![2]);
    }
}
