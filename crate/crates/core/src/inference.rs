//! Guider-weighted score maps and ranked keypoint extraction.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::CELL;
use crate::map::{DenseMap, Image, ScoreMap, WeightMap};
use crate::model::Detector;
use crate::scalar::Scalar;

/// Number of keypoints kept per image unless told otherwise.
pub const DEFAULT_TOP_K: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

pub type KeypointList = Vec<Keypoint>;

/// Source coordinate and blend factor along one axis for upsampling a grid
/// of `n` cells by 8 (pixel centres aligned, edges clamped).
fn upsample_tap(p: usize, n: usize) -> (usize, usize, f64) {
    let s = ((p as f64 + 0.5) / CELL as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear 8× upsampling of a grid-resolution weight map.
pub fn upsample_weights<T: Scalar>(w: &WeightMap<T>) -> DenseMap<T> {
    let (h, wd) = w.dims();
    let ys: Vec<_> = (0..h * CELL).map(|y| upsample_tap(y, h)).collect();
    let xs: Vec<_> = (0..wd * CELL).map(|x| upsample_tap(x, wd)).collect();
    DenseMap::from_fn(h * CELL, wd * CELL, |y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let (fy, fx) = (T::lit(fy), T::lit(fx));
        let top = w.get(y0, x0) * (T::one() - fx) + w.get(y0, x1) * fx;
        let bottom = w.get(y1, x0) * (T::one() - fx) + w.get(y1, x1) * fx;
        top * (T::one() - fy) + bottom * fy
    })
}

/// `S_w = Int(W) ⊙ S`.
pub fn weighted_score_map<T: Scalar>(s: &ScoreMap<T>, w: &WeightMap<T>) -> Result<ScoreMap<T>> {
    if w.height() == 0 || w.width() == 0 || s.dims() != (w.height() * CELL, w.width() * CELL) {
        return Err(Error::Shape(format!("score map {:?} does not match weight map {:?} at stride 8", s.dims(), w.dims())));
    }
    let up = upsample_weights(w);
    let data = s.as_slice().iter().zip(up.as_slice()).map(|(&a, &b)| a * b).collect();
    DenseMap::new(s.height(), s.width(), data)
}

/// Ranking order: score descending, then row, then column.
fn rank(a: &Keypoint, b: &Keypoint) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x))
}

/// Whether `(y, x)` outranks every other pixel within `radius`.
fn is_local_max<T: Scalar>(s: &ScoreMap<T>, y: usize, x: usize, radius: usize) -> bool {
    let v = s.get(y, x);
    let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(s.height() - 1));
    let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(s.width() - 1));
    for qy in y0..=y1 {
        for qx in x0..=x1 {
            let q = s.get(qy, qx);
            if q > v || (q == v && (qy, qx) < (y, x)) {
                return false;
            }
        }
    }
    true
}

/// The `k` highest-scoring pixels. With `nms_radius > 0` only pixels that
/// outrank their `(2r+1)²` neighbourhood are eligible.
pub fn top_k_keypoints<T: Scalar>(s: &ScoreMap<T>, k: usize, nms_radius: usize) -> KeypointList {
    let mut kps: Vec<Keypoint> = Vec::with_capacity(s.height() * s.width());
    for y in 0..s.height() {
        for x in 0..s.width() {
            if nms_radius == 0 || is_local_max(s, y, x, nms_radius) {
                kps.push(Keypoint { x, y, score: s.get(y, x).as_f64() });
            }
        }
    }
    if k < kps.len() {
        kps.select_nth_unstable_by(k, rank);
        kps.truncate(k);
    }
    kps.sort_by(rank);
    kps
}

/// Forward pass, guider weighting and top-k selection.
pub fn detect<T: Scalar>(img: &Image<T>, detector: &Detector<T>, k: usize, nms_radius: usize) -> Result<KeypointList> {
    let out = detector.forward(img)?;
    let sw = weighted_score_map(&out.score_map, &out.weight_map)?;
    Ok(top_k_keypoints(&sw, k, nms_radius))
}

/// CSV with header `x,y,score`, one row per keypoint in rank order.
pub fn keypoints_to_csv(kps: &[Keypoint]) -> String {
    let mut s = String::from("x,y,score\n");
    for kp in kps {
        writeln!(s, "{},{},{:.6}", kp.x, kp.y, kp.score).expect("writing to a String");
    }
    s
}

pub fn write_keypoints(path: impl AsRef<Path>, kps: &[Keypoint]) -> Result<()> {
    std::fs::write(path.as_ref(), keypoints_to_csv(kps))?;
    Ok(())
}

pub fn parse_keypoints(text: &str) -> Result<KeypointList> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,score") {
        return Err(Error::Format("keypoint file must start with the header x,y,score".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("keypoint row {}: {l:?}", i + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(Keypoint {
                x: f[0].parse().map_err(|_| bad())?,
                y: f[1].parse().map_err(|_| bad())?,
                score: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_keypoints(path: impl AsRef<Path>) -> Result<KeypointList> {
    parse_keypoints(&std::fs::read_to_string(path.as_ref())?)
}
