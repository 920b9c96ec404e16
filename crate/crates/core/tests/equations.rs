//! Formula-level checks for every stage of the loss and inference pipeline,
//! each against a hand computation or an independent oracle.

mod common;

use common::*;
use gleo::grid::{build_correspondence_set, grid_argmax, grid_to_image_coords, to_grid_tensor, CorrespondenceSet, Quad};
use gleo::inference::{upsample_weights, weighted_score_map};
use gleo::losses::{
    certainty_matrices, cross_entropy_matrices, gle_loss, le_loss, local_certainty_loss, softmax_slices,
    weighted_le_loss, GridDistributions, GridMatrix, LossOptions, SignConvention,
};
use gleo::{DenseMap, Homography};
use rand::Rng;

const TOL: f64 = 1e-10;
const LN64: f64 = 4.158_883_083_359_672;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

fn set_of(list: &[(usize, usize, usize, usize)]) -> CorrespondenceSet {
    CorrespondenceSet {
        quads: list.iter().map(|&(a, b, c, d)| Quad { a, b, c, d }).collect(),
        coords_1: vec![(0, 0); list.len()],
        coords_2: vec![(0, 0); list.len()],
    }
}

fn dists(rows: usize, cols: usize, cells: &[Vec<f64>]) -> GridDistributions<f64> {
    GridDistributions::from_probs(rows, cols, cells.concat()).unwrap()
}

fn uniform() -> Vec<f64> {
    vec![1.0 / 64.0; 64]
}

// Grid argmax

#[test]
fn argmax_single_peak() {
    let mut m = DenseMap::filled(8, 8, 0.0f64);
    m.set(1, 2, 1.0);
    assert_eq!(grid_argmax(&to_grid_tensor(&m).unwrap()).get(0, 0), 10);
}

#[test]
fn argmax_ties_take_lowest_index() {
    let g = to_grid_tensor(&DenseMap::filled(16, 8, 0.3f64)).unwrap();
    let idx = grid_argmax(&g);
    assert_eq!((idx.get(0, 0), idx.get(1, 0)), (0, 0));
    let mut m = DenseMap::filled(8, 8, 0.0f64);
    m.set(7, 7, 2.0);
    m.set(5, 1, 2.0);
    assert_eq!(grid_argmax(&to_grid_tensor(&m).unwrap()).get(0, 0), 41);
}

#[test]
fn argmax_matches_linear_scan() {
    let mut r = rng(1);
    for _ in 0..50 {
        // Few distinct levels so ties are common.
        let m = DenseMap::from_fn(24, 32, |_, _| r.gen_range(0..5) as f64);
        let idx = grid_argmax(&to_grid_tensor(&m).unwrap());
        for i in 0..3 {
            for j in 0..4 {
                let (x, y) = cell_argmax_point(&m, i, j);
                assert_eq!(idx.get(i, j), (y - 8 * i) * 8 + (x - 8 * j));
                assert_eq!(idx.point(i, j), (x, y));
            }
        }
    }
}

// Cell index to pixel, and set A

#[test]
fn cell_index_to_pixel() {
    assert_eq!(grid_to_image_coords(0, 0, 0).unwrap(), (0, 0));
    assert_eq!(grid_to_image_coords(63, 2, 3).unwrap(), (31, 23));
    assert_eq!(grid_to_image_coords(10, 1, 0).unwrap(), (2, 9));
    assert!(grid_to_image_coords(64, 0, 0).is_err());
}

#[test]
fn identity_pairs_every_cell_with_itself() {
    let m = random_map(&mut rng(2), 32, 24);
    let a = build_correspondence_set(&m, &m, &Homography::identity()).unwrap();
    let expect: Vec<Quad> = (0..4).flat_map(|i| (0..3).map(move |j| Quad { a: i, b: j, c: i, d: j })).collect();
    assert_eq!(a.quads, expect);
}

#[test]
fn one_cell_translation_shifts_by_one_column() {
    let s1 = random_map(&mut rng(3), 24, 32);
    let s2 = DenseMap::from_fn(24, 32, |y, x| if x >= 8 { s1.get(y, x - 8) } else { -10.0 });
    let a = build_correspondence_set(&s1, &s2, &Homography::translation(8.0, 0.0)).unwrap();
    let got: Vec<_> = a.quads.iter().map(|q| (q.a, q.b, q.c, q.d)).collect();
    let expect: Vec<_> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j, i, j + 1))).collect();
    assert_eq!(got, expect);
}

#[test]
fn correspondence_matches_exhaustive_oracle_and_is_mutual() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (s1, s2) = (random_map(&mut r, 32, 32), random_map(&mut r, 32, 32));
        let h = random_homography(&mut r, 32);
        let a = build_correspondence_set(&s1, &s2, &h).unwrap();
        let got: std::collections::BTreeSet<_> = a.quads.iter().map(|q| (q.a, q.b, q.c, q.d)).collect();
        assert_eq!(got.len(), a.len());
        assert_eq!(got, exhaustive_correspondences(&s1, &s2, &h));
        for (q, (&p1, &p2)) in a.quads.iter().zip(a.coords_1.iter().zip(&a.coords_2)) {
            assert_eq!(p1, cell_argmax_point(&s1, q.a, q.b));
            assert_eq!(p2, cell_argmax_point(&s2, q.c, q.d));
        }
    }
}

// Point projection

#[test]
fn projection_examples() {
    let p = [5.0, 7.0];
    assert_eq!(Homography::identity().project(p).unwrap(), [5.0, 7.0]);
    assert_eq!(Homography::translation(2.0, 3.0).project(p).unwrap(), [7.0, 10.0]);
    assert_eq!(Homography::scaling(2.0, 2.0).unwrap().project(p).unwrap(), [10.0, 14.0]);
}

#[test]
fn projection_matches_hand_dehomogenization() {
    let mut r = rng(5);
    for _ in 0..200 {
        let h = random_homography(&mut r, 64);
        let (x, y) = (r.gen_range(0.0..64.0), r.gen_range(0.0..64.0));
        let [px, py] = h.project([x, y]).unwrap();
        let (ox, oy) = project(h.matrix(), x, y).unwrap();
        assert!(close(px, ox) && close(py, oy));
    }
}

#[test]
fn projection_round_trips_through_inverse() {
    let mut r = rng(6);
    for _ in 0..200 {
        let h = random_homography(&mut r, 64);
        let inv = h.inverse().unwrap();
        let p = [r.gen_range(0.0..64.0), r.gen_range(0.0..64.0)];
        let q = inv.project(h.project(p).unwrap()).unwrap();
        assert!((q[0] - p[0]).abs() < 1e-6 && (q[1] - p[1]).abs() < 1e-6);
    }
    let at_infinity = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
    assert!(at_infinity.project([-1.0, 0.0]).is_err());
}

// Softmax slices

#[test]
fn softmax_of_equal_cell_is_uniform() {
    let d = softmax_slices(&to_grid_tensor(&DenseMap::filled(8, 16, -1.5f64)).unwrap());
    for j in 0..2 {
        assert!(d.cell(0, j).iter().all(|&p| close(p, 1.0 / 64.0)));
    }
}

#[test]
fn softmax_with_dominant_entry() {
    let mut m = DenseMap::filled(8, 8, 1.0f64);
    m.set(4, 4, 21.0);
    let d = softmax_slices(&to_grid_tensor(&m).unwrap());
    let p = d.cell(0, 0)[36];
    assert!(close(p, 20f64.exp() / (20f64.exp() + 63.0)));
    assert!(p > 0.999999);
}

#[test]
fn softmax_matches_direct_exponentials() {
    let m = random_map(&mut rng(7), 16, 24);
    let g = to_grid_tensor(&m).unwrap();
    let d = softmax_slices(&g);
    for i in 0..2 {
        for j in 0..3 {
            let expect = softmax(g.cell(i, j));
            let got = d.cell(i, j);
            assert!(close(got.iter().sum(), 1.0));
            for k in 0..64 {
                assert!(close(got[k], expect[k]));
                assert!(close(d.log_cell(i, j)[k], expect[k].ln()));
            }
        }
    }
}

// Similarity matrices

#[test]
fn similarity_of_uniform_is_twice_ln64() {
    let u = dists(1, 1, &[uniform()]);
    let (e1, e2) = cross_entropy_matrices(&u, &u, &u, &u, SignConvention::Symmetric).unwrap();
    assert!(close(e1.get(0, 0), 2.0 * LN64) && close(e2.get(0, 0), 2.0 * LN64));
}

#[test]
fn similarity_of_equal_distributions_is_twice_entropy() {
    let mut r = rng(8);
    for _ in 0..20 {
        let p = random_distribution(&mut r);
        let d = dists(1, 1, &[p.clone()]);
        let (e1, e2) = cross_entropy_matrices(&d, &d, &d, &d, SignConvention::Symmetric).unwrap();
        assert!(close(e1.get(0, 0), 2.0 * entropy(&p)));
        assert!(close(e2.get(0, 0), 2.0 * entropy(&p)));
    }
}

#[test]
fn similarity_matches_hand_summation() {
    let mut peaked = vec![0.5 / 63.0; 64];
    peaked[0] = 0.5;
    let u = dists(1, 1, &[uniform()]);
    let vt = dists(1, 1, &[peaked.clone()]);
    let (e1, _) = cross_entropy_matrices(&u, &vt, &u, &u, SignConvention::Symmetric).unwrap();
    let mut expect = 0.0;
    for k in 0..64 {
        expect -= (1.0 / 64.0) * peaked[k].ln() + peaked[k] * (1.0f64 / 64.0).ln();
    }
    assert!(close(e1.get(0, 0), expect));

    let mut r = rng(9);
    let cells: Vec<Vec<Vec<f64>>> = (0..4).map(|_| (0..6).map(|_| random_distribution(&mut r)).collect()).collect();
    let [u, vt, v, ut] = [0, 1, 2, 3].map(|n| dists(2, 3, &cells[n]));
    for signs in [SignConvention::Symmetric, SignConvention::Negated] {
        let sigma = if signs == SignConvention::Symmetric { 1.0 } else { -1.0 };
        let (e1, e2) = cross_entropy_matrices(&u, &vt, &v, &ut, signs).unwrap();
        for c in 0..6 {
            let (i, j) = (c / 3, c % 3);
            let x1 = cross_entropy(&cells[0][c], &cells[1][c]) + cross_entropy(&cells[1][c], &cells[0][c]);
            let x2 = cross_entropy(&cells[2][c], &cells[3][c]) + sigma * cross_entropy(&cells[3][c], &cells[2][c]);
            assert!(close(e1.get(i, j), x1) && close(e2.get(i, j), x2));
        }
    }
}

// LE loss

#[test]
fn le_of_empty_set_is_flagged_zero() {
    let e = GridMatrix { rows: 1, cols: 1, values: vec![3.0f64] };
    let l = le_loss(&e, &e, &CorrespondenceSet::default()).unwrap();
    assert_eq!(l.value, 0.0);
    assert!(l.no_correspondence && !l.is_differentiable);
}

#[test]
fn le_of_single_uniform_quad_is_ln64() {
    let e = GridMatrix { rows: 1, cols: 1, values: vec![2.0 * LN64] };
    assert!(close(le_loss(&e, &e, &set_of(&[(0, 0, 0, 0)])).unwrap().value, LN64));
}

#[test]
fn le_matches_scalar_resummation() {
    let mut r = rng(10);
    let e1 = GridMatrix { rows: 4, cols: 4, values: (0..16).map(|_| r.gen_range(0.0..9.0)).collect() };
    let e2 = GridMatrix { rows: 4, cols: 4, values: (0..16).map(|_| r.gen_range(0.0..9.0)).collect() };
    let list: Vec<_> = (0..7).map(|_| (r.gen_range(0..4), r.gen_range(0..4), r.gen_range(0..4), r.gen_range(0..4))).collect();
    let mut total = 0.0;
    for &(a, b, c, d) in &list {
        total += e1.values[a * 4 + b] + e2.values[c * 4 + d];
    }
    let got = le_loss(&e1, &e2, &set_of(&list)).unwrap().value;
    assert!(close(got, total / (4.0 * list.len() as f64)));
}

// Guider-weighted LE

#[test]
fn weighted_le_with_unit_weights_is_le() {
    let e1 = GridMatrix { rows: 2, cols: 2, values: vec![1.0f64, 2.0, 3.0, 4.0] };
    let e2 = GridMatrix { rows: 2, cols: 2, values: vec![0.5, 1.5, 2.5, 3.5] };
    let a = set_of(&[(0, 0, 1, 1), (1, 0, 0, 1), (0, 1, 0, 0)]);
    let ones = DenseMap::filled(2, 2, 1.0f64);
    let plain = le_loss(&e1, &e2, &a).unwrap().value;
    let w = weighted_le_loss(&e1, &e2, &a, &ones, &ones).unwrap().value;
    // ε in the denominator perturbs the result by about ε/ΣW relative.
    assert!((w - plain).abs() <= plain * 1e-8 / 3.0 + TOL);
    assert!(close(w, (1.0 + 3.5 + 3.0 + 1.5 + 2.0 + 0.5) / (4.0 * (3.0 + 1e-8))));
}

#[test]
fn weighted_le_with_zero_weights_is_zero() {
    let e = GridMatrix { rows: 1, cols: 2, values: vec![5.0, 7.0] };
    let zeros = DenseMap::filled(1, 2, 0.0);
    let l = weighted_le_loss(&e, &e, &set_of(&[(0, 0, 0, 1), (0, 1, 0, 0)]), &zeros, &zeros).unwrap();
    assert_eq!(l.value, 0.0);
    assert!(!l.no_correspondence);
}

#[test]
fn weighted_le_two_quads_by_hand() {
    let e1 = GridMatrix { rows: 1, cols: 2, values: vec![2.0, 6.0] };
    let e2 = GridMatrix { rows: 1, cols: 2, values: vec![1.0, 3.0] };
    let w1 = DenseMap::new(1, 2, vec![0.5, 0.8]).unwrap();
    let w2 = DenseMap::new(1, 2, vec![0.25, 1.0]).unwrap();
    // x1 = (0,0,0,1): E = 2 + 3, W = 0.5·1.0. x2 = (0,1,0,0): E = 6 + 1, W = 0.8·0.25.
    let expect = (5.0 * 0.5 + 7.0 * 0.2) / (4.0 * (0.7 + 1e-8));
    let got = weighted_le_loss(&e1, &e2, &set_of(&[(0, 0, 0, 1), (0, 1, 0, 0)]), &w1, &w2).unwrap().value;
    assert!(close(got, expect));
}

// Certainty matrices

#[test]
fn certainty_of_uniform_is_twice_ln64() {
    let u = dists(1, 2, &[uniform(), uniform()]);
    let (c1, c2) = certainty_matrices(&u, &u, &u, &u, SignConvention::Symmetric).unwrap();
    for j in 0..2 {
        assert!(close(c1.get(0, j), 2.0 * LN64) && close(c2.get(0, j), 2.0 * LN64));
    }
}

#[test]
fn certainty_of_one_hot_is_zero() {
    let mut hot = vec![0.0; 64];
    hot[17] = 1.0;
    let d = dists(1, 1, &[hot]);
    let (c1, c2) = certainty_matrices(&d, &d, &d, &d, SignConvention::Symmetric).unwrap();
    assert_eq!((c1.get(0, 0), c2.get(0, 0)), (0.0, 0.0));
}

#[test]
fn certainty_matches_entropy_summation() {
    let mut r = rng(11);
    let cells: Vec<Vec<Vec<f64>>> = (0..4).map(|_| (0..4).map(|_| random_distribution(&mut r)).collect()).collect();
    let [u, vt, v, ut] = [0, 1, 2, 3].map(|n| dists(2, 2, &cells[n]));
    for signs in [SignConvention::Symmetric, SignConvention::Negated] {
        let sigma = if signs == SignConvention::Symmetric { 1.0 } else { -1.0 };
        let (c1, c2) = certainty_matrices(&u, &vt, &v, &ut, signs).unwrap();
        for c in 0..4 {
            let (i, j) = (c / 2, c % 2);
            assert!(close(c1.get(i, j), entropy(&cells[0][c]) + entropy(&cells[1][c])));
            assert!(close(c2.get(i, j), entropy(&cells[2][c]) + sigma * entropy(&cells[3][c])));
            assert!(c1.get(i, j) >= 0.0 && c1.get(i, j) <= 2.0 * LN64);
        }
    }
}

// Local certainty loss

#[test]
fn local_certainty_with_half_weights_cancels() {
    let c = GridMatrix { rows: 1, cols: 2, values: vec![3.0, 5.0] };
    let w = DenseMap::filled(1, 2, 0.5f64.sqrt());
    let l = local_certainty_loss(&c, &c, &set_of(&[(0, 0, 0, 1), (0, 1, 0, 0)]), &w, &w).unwrap();
    assert!(close(l.value, 0.0));
}

#[test]
fn local_certainty_with_unit_weights_drops_second_term() {
    let c1 = GridMatrix { rows: 1, cols: 2, values: vec![3.0, 5.0] };
    let c2 = GridMatrix { rows: 1, cols: 2, values: vec![1.0, 2.0] };
    let ones = DenseMap::filled(1, 2, 1.0);
    let l = local_certainty_loss(&c1, &c2, &set_of(&[(0, 0, 0, 1), (0, 1, 0, 0)]), &ones, &ones).unwrap();
    assert!(close(l.value, (3.0 + 2.0 + 5.0 + 1.0) / (4.0 * (2.0 + 1e-8))));
}

#[test]
fn local_certainty_two_quads_by_hand() {
    let c1 = GridMatrix { rows: 1, cols: 2, values: vec![2.0, 6.0] };
    let c2 = GridMatrix { rows: 1, cols: 2, values: vec![1.0, 3.0] };
    let w1 = DenseMap::new(1, 2, vec![0.5, 0.8]).unwrap();
    let w2 = DenseMap::new(1, 2, vec![0.25, 1.0]).unwrap();
    // C sums 5 and 7, weights 0.5 and 0.2, complements 0.5 and 0.8.
    let pos = (5.0 * 0.5 + 7.0 * 0.2) / (4.0 * (0.7 + 1e-8));
    let neg = (5.0 * 0.5 + 7.0 * 0.8) / (4.0 * (1.3 + 1e-8));
    let got = local_certainty_loss(&c1, &c2, &set_of(&[(0, 0, 0, 1), (0, 1, 0, 0)]), &w1, &w2).unwrap().value;
    assert!(close(got, pos - neg));
}

// GLE

fn random_weights(r: &mut impl Rng, h: usize, w: usize) -> DenseMap<f64> {
    DenseMap::from_fn(h, w, |_, _| r.gen_range(0.05..0.95))
}

#[test]
fn gle_is_sum_of_components() {
    let mut r = rng(12);
    for _ in 0..10 {
        let (s1, s2) = (random_map(&mut r, 32, 32), random_map(&mut r, 32, 32));
        let h = random_homography(&mut r, 32);
        let (w1, w2) = (random_weights(&mut r, 4, 4), random_weights(&mut r, 4, 4));
        let g = gle_loss(&s1, &s2, &w1, &w2, &h, &LossOptions::default()).unwrap();
        if g.total.no_correspondence {
            assert_eq!(g.total.value, 0.0);
            continue;
        }
        assert_eq!(g.total.value, g.weighted_le.value + g.local_certainty.value);
    }
}

#[test]
fn gle_on_uniform_identical_maps_with_half_weights() {
    let s = DenseMap::filled(16, 16, 0.25f64);
    let w = DenseMap::filled(2, 2, 0.5f64.sqrt());
    let g = gle_loss(&s, &s, &w, &w, &Homography::identity(), &LossOptions::default()).unwrap();
    // Every quad has E1 + E2 = 4 ln 64 and W_x = 1/2, so L_le^W = ln 64 · (2 / (2 + 2ε)).
    let le = 4.0 * LN64 * 2.0 / (4.0 * (2.0 + 1e-8));
    assert!(close(g.weighted_le.value, le));
    assert!(close(g.local_certainty.value, 0.0));
    assert!(close(g.total.value, le));
}

#[test]
fn gle_under_identity_matches_cellwise_oracle() {
    let mut r = rng(13);
    let (s1, s2) = (random_map(&mut r, 24, 24), random_map(&mut r, 24, 24));
    let (w1, w2) = (random_weights(&mut r, 3, 3), random_weights(&mut r, 3, 3));
    let g = gle_loss(&s1, &s2, &w1, &w2, &Homography::identity(), &LossOptions::default()).unwrap();
    let a = build_correspondence_set(&s1, &s2, &Homography::identity()).unwrap();
    let (g1, g2) = (to_grid_tensor(&s1).unwrap(), to_grid_tensor(&s2).unwrap());
    let (mut ew, mut cw, mut cn, mut sw, mut sn) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for q in &a.quads {
        // Identity warp: u' = u and v' = v cellwise.
        let u1 = softmax(g1.cell(q.a, q.b));
        let v1 = softmax(g2.cell(q.a, q.b));
        let v2 = softmax(g2.cell(q.c, q.d));
        let u2 = softmax(g1.cell(q.c, q.d));
        let e = cross_entropy(&u1, &v1) + cross_entropy(&v1, &u1) + cross_entropy(&v2, &u2) + cross_entropy(&u2, &v2);
        let c = entropy(&u1) + entropy(&v1) + entropy(&v2) + entropy(&u2);
        let w = w1.get(q.a, q.b) * w2.get(q.c, q.d);
        ew += e * w;
        cw += c * w;
        cn += c * (1.0 - w);
        sw += w;
        sn += 1.0 - w;
    }
    let le = ew / (4.0 * (sw + 1e-8));
    let lc = cw / (4.0 * (sw + 1e-8)) - cn / (4.0 * (sn + 1e-8));
    assert!(!a.is_empty());
    assert!(close(g.weighted_le.value, le));
    assert!(close(g.local_certainty.value, lc));
    assert!(close(g.total.value, le + lc));
}

// Weighted score map

#[test]
fn weighted_map_with_unit_and_zero_weights() {
    let s = random_map(&mut rng(14), 16, 24);
    assert_eq!(weighted_score_map(&s, &DenseMap::filled(2, 3, 1.0)).unwrap(), s);
    let z = weighted_score_map(&s, &DenseMap::filled(2, 3, 0.0)).unwrap();
    assert!(z.as_slice().iter().all(|&v| v == 0.0));
    assert!(weighted_score_map(&s, &DenseMap::filled(3, 3, 1.0)).is_err());
}

#[test]
fn weight_upsampling_by_hand() {
    let w = DenseMap::new(2, 2, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
    let up = upsample_weights(&w);
    assert_eq!(up.dims(), (16, 16));
    // Pixel p samples the grid at (p + 0.5) / 8 − 0.5, clamped to [0, 1].
    assert!(close(up.get(3, 3), 0.0));
    assert!(close(up.get(12, 12), 3.0));
    // p = 4 → 0.0625: top 0.0625, bottom 2.0625.
    assert!(close(up.get(4, 4), 0.0625 * 0.9375 + 2.0625 * 0.0625));
    // p = 8 → 0.5625: top 0.5625, bottom 2.5625.
    assert!(close(up.get(8, 8), 0.5625 * 0.4375 + 2.5625 * 0.5625));
}

#[test]
fn weighted_map_is_elementwise_product() {
    let mut r = rng(15);
    let s = random_map(&mut r, 16, 16);
    let w = DenseMap::new(2, 2, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
    let sw = weighted_score_map(&s, &w).unwrap();
    let up = upsample_weights(&w);
    for y in 0..16 {
        for x in 0..16 {
            assert!(close(sw.get(y, x), s.get(y, x) * up.get(y, x)));
        }
    }
    assert!(close(sw.get(8, 8), s.get(8, 8) * 1.6875));
}
