mod common;

use common::*;
use gleo::inference::{detect, read_keypoints, top_k_keypoints, weighted_score_map, write_keypoints, Keypoint, DEFAULT_TOP_K};
use gleo::model::{Detector, ModelConfig};
use gleo::synth::synth_scene;
use gleo::DenseMap;
use proptest::prelude::*;
use rand::Rng;

fn full_sort(s: &DenseMap<f64>, k: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..s.height() {
        for x in 0..s.width() {
            all.push((s.get(y, x), y, x));
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().take(k).map(|(_, y, x)| (x, y)).collect()
}

fn xy(kps: &[Keypoint]) -> Vec<(usize, usize)> {
    kps.iter().map(|k| (k.x, k.y)).collect()
}

#[test]
fn default_top_k_is_3000() {
    assert_eq!(DEFAULT_TOP_K, 3000);
}

#[test]
fn all_pixels_when_k_exceeds_map() {
    let s = random_map(&mut rng(1), 8, 16);
    let kps = top_k_keypoints(&s, 1000, 0);
    assert_eq!(xy(&kps), full_sort(&s, 128));
}

#[test]
fn impulse_gives_single_keypoint() {
    let mut s = DenseMap::filled(16, 16, 0.0f64);
    s.set(5, 9, 2.0);
    let kps = top_k_keypoints(&s, 5, 0);
    assert_eq!((kps[0].x, kps[0].y, kps[0].score), (9, 5, 2.0));
    assert!(kps[1..].iter().all(|k| k.score == 0.0));
    // On the flat background only the first pixel in row-major order
    // outranks its tied neighbours.
    let kps = top_k_keypoints(&s, 5, 3);
    assert_eq!(xy(&kps), vec![(9, 5), (0, 0)]);
}

#[test]
fn ties_broken_by_row_then_column() {
    let s = DenseMap::from_fn(8, 8, |y, x| ((x + y) % 3) as f64);
    assert_eq!(xy(&top_k_keypoints(&s, 20, 0)), full_sort(&s, 20));
}

#[test]
fn guider_zero_block_removes_keypoints() {
    // A 3×3 block of zero weights leaves the centre cell with no support.
    let mut r = rng(2);
    let mut s = DenseMap::from_fn(48, 48, |_, _| r.gen_range(0.1..1.0));
    for y in 16..24 {
        for x in 16..24 {
            s.set(y, x, 10.0 + r.gen_range(0.0..1.0));
        }
    }
    let ones = DenseMap::filled(6, 6, 1.0);
    let inside = |k: &Keypoint| (16..24).contains(&k.x) && (16..24).contains(&k.y);
    let before = top_k_keypoints(&weighted_score_map(&s, &ones).unwrap(), 50, 0);
    assert!(before.iter().filter(|k| inside(k)).count() == 50);
    let mut w = ones.clone();
    for i in 1..4 {
        for j in 1..4 {
            w.set(i, j, 0.0);
        }
    }
    let sw = weighted_score_map(&s, &w).unwrap();
    for y in 16..24 {
        for x in 16..24 {
            assert_eq!(sw.get(y, x), 0.0);
        }
    }
    let after = top_k_keypoints(&sw, 50, 0);
    assert!(after.iter().all(|k| !inside(k) && k.score > 0.0));
}

#[test]
fn detect_is_deterministic_and_in_bounds() {
    let det = Detector::<f32>::init(&ModelConfig::tiny(), 3).unwrap();
    let img = synth_scene::<f32, _>(&mut rng(4), 64, 80);
    let a = detect(&img, &det, 200, 0).unwrap();
    let b = detect(&img, &det, 200, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 200);
    assert!(a.iter().all(|k| k.x < 80 && k.y < 64 && k.score >= 0.0));
    assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn keypoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let kps = top_k_keypoints(&random_map(&mut rng(5), 16, 16).map(f64::abs), 30, 0);
    let path = dir.path().join("k.csv");
    write_keypoints(&path, &kps).unwrap();
    let back = read_keypoints(&path).unwrap();
    assert_eq!(xy(&back), xy(&kps));
    for (a, b) in back.iter().zip(&kps) {
        assert!((a.score - b.score).abs() <= 5e-7);
    }
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("x,y,score\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_matches_full_sort(seed in any::<u64>(), k in 1usize..300) {
        let mut r = rng(seed);
        // Coarse values so ties are frequent.
        let s = DenseMap::from_fn(16, 16, |_, _| r.gen_range(0..20) as f64 / 4.0);
        prop_assert_eq!(xy(&top_k_keypoints(&s, k, 0)), full_sort(&s, k));
    }

    #[test]
    fn positive_scaling_keeps_ranking(seed in any::<u64>(), c in 0.01f64..100.0, k in 1usize..100, nms in 0usize..4) {
        let s = random_map(&mut rng(seed), 16, 24).map(f64::abs);
        let a = top_k_keypoints(&s, k, nms);
        let b = top_k_keypoints(&s.map(|v| v * c), k, nms);
        prop_assert_eq!(xy(&a), xy(&b));
    }

    #[test]
    fn nms_survivors_are_local_maxima(seed in any::<u64>(), radius in 1usize..5) {
        let s = random_map(&mut rng(seed), 24, 24);
        let kps = top_k_keypoints(&s, 1000, radius);
        for k in &kps {
            for y in k.y.saturating_sub(radius)..=(k.y + radius).min(23) {
                for x in k.x.saturating_sub(radius)..=(k.x + radius).min(23) {
                    prop_assert!(s.get(y, x) <= s.get(k.y, k.x));
                }
            }
        }
        // Survivors are pairwise farther apart than the radius (Chebyshev).
        for (i, a) in kps.iter().enumerate() {
            for b in &kps[i + 1..] {
                prop_assert!(a.x.abs_diff(b.x) > radius || a.y.abs_diff(b.y) > radius);
            }
        }
    }
}
