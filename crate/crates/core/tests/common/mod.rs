//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's numeric kernels: projections,
//! argmaxes, entropies and correspondence sets are recomputed from first
//! principles on plain slices.

#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;

use gleo::geometry::{sample_random_homography, HomographyConfig};
use gleo::{DenseMap, Homography};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut impl Rng, h: usize, w: usize) -> DenseMap<f64> {
    DenseMap::from_fn(h, w, |_, _| rng.gen_range(-2.0..2.0))
}

/// Random homography with the library's default magnitudes.
pub fn random_homography(rng: &mut ChaCha8Rng, side: usize) -> Homography {
    sample_random_homography(rng, &HomographyConfig::default(), (side, side)).unwrap()
}

/// `M · [x, y, 1]` dehomogenized, written out by hand.
pub fn project(m: &[[f64; 3]; 3], x: f64, y: f64) -> Option<(f64, f64)> {
    let xp = m[0][0] * x + m[0][1] * y + m[0][2];
    let yp = m[1][0] * x + m[1][1] * y + m[1][2];
    let zp = m[2][0] * x + m[2][1] * y + m[2][2];
    if zp.abs() < 1e-12 {
        return None;
    }
    Some((xp / zp, yp / zp))
}

/// 3×3 inverse via the adjugate.
pub fn invert(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * c(1, 2, 1, 2) - m[0][1] * c(1, 2, 0, 2) + m[0][2] * c(1, 2, 0, 1);
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for k in 0..3 {
            out[r][k] = adj[r][k] / det;
        }
    }
    out
}

/// Brightest pixel `(x, y)` inside cell `(i, j)`, first in row-major order on ties.
pub fn cell_argmax_point(m: &DenseMap<f64>, i: usize, j: usize) -> (usize, usize) {
    let mut best = (8 * j, 8 * i);
    for y in 8 * i..8 * i + 8 {
        for x in 8 * j..8 * j + 8 {
            if m.get(y, x) > m.get(best.1, best.0) {
                best = (x, y);
            }
        }
    }
    best
}

fn lands_in(m: &[[f64; 3]; 3], p: (usize, usize), cell: (usize, usize)) -> bool {
    match project(m, p.0 as f64, p.1 as f64) {
        Some((x, y)) => x >= 0.0 && y >= 0.0 && (y / 8.0).floor() == cell.0 as f64 && (x / 8.0).floor() == cell.1 as f64,
        None => false,
    }
}

/// Set A by testing both mutual-consistency conditions for every pair of cells.
pub fn exhaustive_correspondences(s1: &DenseMap<f64>, s2: &DenseMap<f64>, h: &Homography) -> BTreeSet<(usize, usize, usize, usize)> {
    let m = *h.matrix();
    let inv = invert(&m);
    let (rows, cols) = (s1.height() / 8, s1.width() / 8);
    let mut out = BTreeSet::new();
    for a in 0..rows {
        for b in 0..cols {
            let p1 = cell_argmax_point(s1, a, b);
            for c in 0..rows {
                for d in 0..cols {
                    let p2 = cell_argmax_point(s2, c, d);
                    if lands_in(&m, p1, (c, d)) && lands_in(&inv, p2, (a, b)) {
                        out.insert((a, b, c, d));
                    }
                }
            }
        }
    }
    out
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `−Σ p log q`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * b.ln()).sum::<f64>()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Random strictly positive 64-way distribution.
pub fn random_distribution(rng: &mut impl Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
    softmax(&z)
}

/// Max of per-entry relative errors (with an absolute floor) and the
/// norm-relative error between two gradient vectors.
pub fn relative_errors(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, f64) {
    let mut worst: f64 = 0.0;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (&a, &n) in analytic.iter().zip(numeric) {
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let norm = diff.sqrt() / f64::max(na, nn).sqrt().max(floor);
    (worst, norm)
}

/// Central finite differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + step;
            let up = f(&buf);
            buf[i] = x[i] - step;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}
