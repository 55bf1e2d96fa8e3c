//! Gauss–Legendre rules and contour parametrizations of rectangles.

use std::f64::consts::PI;

use crate::C64;

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                let (_, d) = legendre_with_derivative(n, x);
                dp = d;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// One node of a discretized contour: position `z` and the complex weight
/// `w · z'(t)` so that `∮ f dz ≈ Σ weight · f(z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourNode {
    pub z: C64,
    pub weight: C64,
}

/// Nodes of a straight segment `a → b` using an `n`-point Gauss–Legendre rule.
pub fn segment_nodes(a: C64, b: C64, n: usize) -> Vec<ContourNode> {
    let (x, w) = gauss_legendre(n);
    let mid = (a + b) * 0.5;
    let half = (b - a) * 0.5;
    x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| ContourNode {
            z: mid + half * xi,
            weight: half * wi,
        })
        .collect()
}

/// Fewest nodes a panel of an elongated rectangle receives.
pub const MIN_PANEL_POINTS: usize = 32;

/// Counter-clockwise boundary of the rectangle with `n` Gauss–Legendre nodes per edge.
///
/// Edges longer than the short side are split into panels no longer than it,
/// each with `max(⌈n/k⌉, MIN_PANEL_POINTS)` nodes, so poles near a long edge of
/// a thin rectangle are resolved as well as in a square.
pub fn rectangle_nodes(re_min: f64, re_max: f64, im_min: f64, im_max: f64, n: usize) -> Vec<ContourNode> {
    let corners = [
        C64::new(re_min, im_min),
        C64::new(re_max, im_min),
        C64::new(re_max, im_max),
        C64::new(re_min, im_max),
    ];
    let short = (re_max - re_min).min(im_max - im_min);
    let mut out = Vec::with_capacity(4 * n);
    for e in 0..4 {
        let (a, b) = (corners[e], corners[(e + 1) % 4]);
        let k = ((b - a).norm() / short * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let per = if k == 1 { n } else { n.div_ceil(k).max(MIN_PANEL_POINTS) };
        for j in 0..k {
            let pa = a + (b - a) * (j as f64 / k as f64);
            let pb = a + (b - a) * ((j + 1) as f64 / k as f64);
            out.extend(segment_nodes(pa, pb, per));
        }
    }
    out
}
