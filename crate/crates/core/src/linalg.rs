//! Dense and banded complex linear algebra used across the crate.

use nalgebra::{DMatrix, DVector};

use crate::C64;

pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Thin SVD with singular values sorted in descending order.
pub struct Svd {
    pub u: CMat,
    pub sigma: Vec<f64>,
    /// Right singular vectors as columns.
    pub v: CMat,
}

impl Svd {
    pub fn new(m: &CMat) -> Svd {
        let svd = nalgebra::SVD::new(m.clone(), true, true);
        let u = svd.u.expect("u requested");
        let v = svd.v_t.expect("v_t requested").adjoint();
        Svd {
            u,
            sigma: svd.singular_values.iter().copied().collect(),
            v,
        }
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma.last().copied().unwrap_or(0.0)
    }

    /// Number of singular values strictly above `thr`.
    pub fn rank(&self, thr: f64) -> usize {
        self.sigma.iter().filter(|&&s| s > thr).count()
    }

    /// Orthonormal basis of the right null space `{σ ≤ thr}` (including the
    /// rank-deficient columns when the matrix is wide).
    pub fn right_null(&self, thr: f64, ncols: usize) -> CMat {
        let r = self.rank(thr);
        if self.v.ncols() == ncols {
            return self.v.columns(r, ncols - r).into_owned();
        }
        // Wide matrix: the thin SVD does not carry the full right basis.
        let range = self.v.columns(0, r).into_owned();
        complement(&range, ncols)
    }

    /// Orthonormal basis of the left null space `{σ ≤ thr}`.
    pub fn left_null(&self, thr: f64, nrows: usize) -> CMat {
        let r = self.rank(thr);
        if self.u.ncols() == nrows {
            return self.u.columns(r, nrows - r).into_owned();
        }
        let range = self.u.columns(0, r).into_owned();
        complement(&range, nrows)
    }

    /// Minimum-norm least-squares solution, discarding `σ ≤ thr`.
    pub fn pinv_solve(&self, rhs: &CMat, thr: f64) -> CMat {
        let r = self.rank(thr);
        let mut out = CMat::zeros(self.v.nrows(), rhs.ncols());
        for k in 0..r {
            let coeff = self.u.column(k).adjoint() * rhs / C64::from(self.sigma[k]);
            out += self.v.column(k) * coeff;
        }
        out
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).expect("NaN singular value"));
    s
}

pub fn sigma_min(m: &CMat) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Orthonormal basis of the orthogonal complement of `range` (columns assumed
/// orthonormal) in `C^dim`.
pub fn complement(range: &CMat, dim: usize) -> CMat {
    let k = range.ncols();
    if k == 0 {
        return CMat::identity(dim, dim);
    }
    let proj = CMat::identity(dim, dim) - range * range.adjoint();
    let svd = Svd::new(&proj);
    svd.u.columns(0, dim - k).into_owned()
}

/// Orthonormal basis of the column span of `m`, with relative rank tolerance.
pub fn orth(m: &CMat, rel_tol: f64) -> CMat {
    if m.ncols() == 0 || m.nrows() == 0 {
        return CMat::zeros(m.nrows(), 0);
    }
    let svd = Svd::new(m);
    let thr = rel_tol * svd.sigma_max();
    let r = if svd.sigma_max() == 0.0 { 0 } else { svd.rank(thr) };
    svd.u.columns(0, r).into_owned()
}

/// Spectral norm.
pub fn norm2(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m)[0]
}

/// Largest entry modulus.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn norm_inf(m: &CMat) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest principal angle (radians) between the spans of two matrices with
/// orthonormal columns of equal count.
pub fn subspace_angle(a: &CMat, b: &CMat) -> f64 {
    let cross = a.adjoint() * b;
    let s = singular_values(&cross);
    let smallest = s.last().copied().unwrap_or(0.0).min(1.0);
    smallest.acos()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BandError {
    #[error("zero pivot in column {column}: matrix is singular")]
    Singular { column: usize },
}

/// Square complex band matrix in LAPACK `gbtrf` layout, with room for the
/// fill-in produced by partial pivoting.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<C64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        BandMatrix {
            n,
            kl,
            ku,
            ldab,
            ab: vec![C64::new(0.0, 0.0); ldab * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) + j * self.ldab
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        i <= j + self.kl && j <= i + self.ku
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        if self.in_band(i, j) {
            self.ab[self.idx(i, j)]
        } else {
            C64::new(0.0, 0.0)
        }
    }

    /// Adds `v` to entry `(i, j)`; panics outside the declared band.
    pub fn add(&mut self, i: usize, j: usize, v: C64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band kl={} ku={}", self.kl, self.ku);
        let k = self.idx(i, j);
        self.ab[k] += v;
    }

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for (i, yi) in y.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *yi += self.ab[self.idx(i, j)] * x[j];
            }
        }
        y
    }

    pub fn norm1(&self) -> f64 {
        (0..self.n)
            .map(|j| {
                let lo = j.saturating_sub(self.ku);
                let hi = (j + self.kl).min(self.n - 1);
                (lo..=hi).map(|i| self.ab[self.idx(i, j)].norm()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// LU factorization with partial pivoting.
    pub fn lu(mut self) -> Result<BandLu, BandError> {
        let n = self.n;
        let kl = self.kl;
        let kv = self.kl + self.ku;
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = -1.0;
            for r in 0..=km {
                let v = self.ab[self.idx(j + r, j)].norm();
                if v > best {
                    best = v;
                    jp = r;
                }
            }
            ipiv[j] = j + jp;
            if best == 0.0 {
                return Err(BandError::Singular { column: j });
            }
            ju = ju.max((j + self.ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = self.idx(j, c);
                    let b = self.idx(j + jp, c);
                    self.ab.swap(a, b);
                }
            }
            let piv = self.ab[self.idx(j, j)];
            for r in 1..=km {
                let k = self.idx(j + r, j);
                self.ab[k] /= piv;
            }
            for c in (j + 1)..=ju {
                let ujc = self.ab[self.idx(j, c)];
                if ujc == C64::new(0.0, 0.0) {
                    continue;
                }
                for r in 1..=km {
                    let l = self.ab[self.idx(j + r, j)];
                    let k = self.idx(j + r, c);
                    self.ab[k] -= l * ujc;
                }
            }
            debug_assert!(ju <= j + kv);
        }
        Ok(BandLu { m: self, ipiv })
    }
}

/// Band LU factors `P A = L U`.
#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    ipiv: Vec<usize>,
}

impl BandLu {
    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let m = &self.m;
        let n = m.n;
        let kv = m.kl + m.ku;
        let mut x = b.to_vec();
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                x.swap(j, p);
            }
            let km = m.kl.min(n - 1 - j);
            let xj = x[j];
            for r in 1..=km {
                x[j + r] -= m.ab[m.idx(j + r, j)] * xj;
            }
        }
        for j in (0..n).rev() {
            x[j] /= m.ab[m.idx(j, j)];
            let xj = x[j];
            for i in j.saturating_sub(kv)..j {
                x[i] -= m.ab[m.idx(i, j)] * xj;
            }
        }
        x
    }

    /// Solves `A^H x = b`.
    pub fn solve_adjoint(&self, b: &[C64]) -> Vec<C64> {
        let m = &self.m;
        let n = m.n;
        let kv = m.kl + m.ku;
        let mut x = b.to_vec();
        for j in 0..n {
            let mut s = x[j];
            for i in j.saturating_sub(kv)..j {
                s -= m.ab[m.idx(i, j)].conj() * x[i];
            }
            x[j] = s / m.ab[m.idx(j, j)].conj();
        }
        for j in (0..n.saturating_sub(1)).rev() {
            let km = m.kl.min(n - 1 - j);
            let mut s = x[j];
            for r in 1..=km {
                s -= m.ab[m.idx(j + r, j)].conj() * x[j + r];
            }
            x[j] = s;
            let p = self.ipiv[j];
            if p != j {
                x.swap(j, p);
            }
        }
        x
    }

    /// Hager–Higham estimate of `‖A⁻¹‖₁`.
    pub fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.m.n;
        let mut x = vec![C64::new(1.0 / n as f64, 0.0); n];
        let mut est = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve(&x);
            est = y.iter().map(|v| v.norm()).sum::<f64>();
            let xi: Vec<C64> = y
                .iter()
                .map(|v| if v.norm() > 0.0 { v / v.norm() } else { C64::new(1.0, 0.0) })
                .collect();
            let z = self.solve_adjoint(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.norm()))
                .fold((0, -1.0), |acc, t| if t.1 > acc.1 { t } else { acc });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| (a.conj() * b).re).sum();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x = vec![C64::new(0.0, 0.0); n];
            x[j] = C64::new(1.0, 0.0);
        }
        // Alternating-sign probe guards against the estimator's known blind spots.
        let alt: Vec<C64> = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                C64::new(s * (1.0 + i as f64 / (n.max(2) - 1) as f64), 0.0)
            })
            .collect();
        let y = self.solve(&alt);
        let alt_est = 2.0 * y.iter().map(|v| v.norm()).sum::<f64>() / (3.0 * n as f64);
        est.max(alt_est)
    }
}
