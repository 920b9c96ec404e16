//! Repeatability, descriptor matching accuracy and HPatches-style dataset
//! evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::inference::{detect, write_keypoints, Keypoint, KeypointList};
use crate::map::{DenseMap, Image};
use crate::model::Detector;
use crate::scalar::Scalar;

/// Side of the square patch behind the baseline descriptor.
pub const PATCH: usize = 32;

fn in_bounds(p: [f64; 2], dims: (usize, usize)) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (dims.1 - 1) as f64 && p[1] <= (dims.0 - 1) as f64
}

fn xy(kp: &Keypoint) -> [f64; 2] {
    [kp.x as f64, kp.y as f64]
}

/// Keypoints of `kps` whose projection by `h` lands inside `dims`.
pub fn shared_region(kps: &[Keypoint], h: &Homography, dims: (usize, usize)) -> Vec<(Keypoint, [f64; 2])> {
    kps.iter().filter_map(|kp| h.project(xy(kp)).ok().filter(|&p| in_bounds(p, dims)).map(|p| (*kp, p))).collect()
}

/// Repeatability at each threshold in `eps`, or `None` when either image has
/// no keypoint inside the shared region.
///
/// Keypoints of `a` are projected into `b` by `h`; pairs are matched
/// one-to-one greedily by increasing distance, and the match count is
/// divided by the smaller of the two shared-region keypoint counts.
pub fn repeatability(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h: &Homography,
    dims_a: (usize, usize),
    dims_b: (usize, usize),
    eps: &[f64],
) -> Result<Vec<Option<f64>>> {
    let inv = h.inverse()?;
    let a = shared_region(kps_a, h, dims_b);
    let b: Vec<Keypoint> = shared_region(kps_b, &inv, dims_a).into_iter().map(|(kp, _)| kp).collect();
    if a.is_empty() || b.is_empty() {
        return Ok(vec![None; eps.len()]);
    }
    let max_eps = eps.iter().copied().fold(0.0f64, f64::max);
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (ia, (_, pa)) in a.iter().enumerate() {
        for (ib, kb) in b.iter().enumerate() {
            let d = ((pa[0] - kb.x as f64).powi(2) + (pa[1] - kb.y as f64).powi(2)).sqrt();
            if d <= max_eps {
                cand.push((d, ia, ib));
            }
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let denom = a.len().min(b.len()) as f64;
    Ok(eps
        .iter()
        .map(|&e| {
            let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
            let mut n = 0usize;
            for &(_, ia, ib) in cand.iter().take_while(|c| c.0 <= e) {
                if !used_a[ia] && !used_b[ib] {
                    used_a[ia] = true;
                    used_b[ib] = true;
                    n += 1;
                }
            }
            Some(n as f64 / denom)
        })
        .collect())
}

/// Row-major descriptor matrix; rows flagged invalid never take part in
/// matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptors {
    pub dim: usize,
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl Descriptors {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Builds from rows; all-zero rows are marked invalid.
    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("descriptor rows differ in length".into()));
        }
        let valid = rows.iter().map(|r| r.iter().any(|&v| v != 0.0)).collect();
        Ok(Self { dim, data: rows.concat(), valid })
    }

    /// One descriptor per line, whitespace-separated values.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<f32>().map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display()))))
                    .collect::<Result<Vec<f32>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }
}

/// Zero-padded `32 × 32` grayscale patch around each keypoint, mean-removed
/// and scaled to unit norm. Constant patches are flagged invalid.
pub fn baseline_descriptor<T: Scalar>(img: &DenseMap<T>, kps: &[Keypoint]) -> Descriptors {
    let n = PATCH * PATCH;
    let mut data = vec![0f32; kps.len() * n];
    let mut valid = vec![false; kps.len()];
    let half = (PATCH / 2) as isize;
    for (i, kp) in kps.iter().enumerate() {
        let mut patch = vec![0f64; n];
        for dy in 0..PATCH {
            let y = kp.y as isize + dy as isize - half;
            if y < 0 || y >= img.height() as isize {
                continue;
            }
            for dx in 0..PATCH {
                let x = kp.x as isize + dx as isize - half;
                if x >= 0 && x < img.width() as isize {
                    patch[dy * PATCH + dx] = img.get(y as usize, x as usize).as_f64();
                }
            }
        }
        let mean = patch.iter().sum::<f64>() / n as f64;
        let norm = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        if norm > 1e-6 {
            valid[i] = true;
            for (d, v) in data[i * n..(i + 1) * n].iter_mut().zip(&patch) {
                *d = ((v - mean) / norm) as f32;
            }
        }
    }
    Descriptors { dim: n, data, valid }
}

/// For every valid descriptor of `a`, the index of its nearest valid
/// descriptor of `b` (Euclidean; ties go to the lower index).
pub fn nn_match(a: &Descriptors, b: &Descriptors) -> Result<Vec<(usize, usize)>> {
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    if a.dim != b.dim {
        return Err(Error::Shape(format!("descriptor dims {} vs {}", a.dim, b.dim)));
    }
    let (na, nb, d) = (a.len(), b.len(), a.dim);
    let mut dots = vec![0f32; na * nb];
    // dots = A · Bᵀ
    f32::gemm(na, d, nb, 1.0, &a.data, (d as isize, 1), &b.data, (1, d as isize), 0.0, &mut dots, (nb as isize, 1));
    let sq = |m: &Descriptors, i: usize| m.row(i).iter().map(|&v| v * v).sum::<f32>();
    let nb_sq: Vec<f32> = (0..nb).map(|j| sq(b, j)).collect();
    let mut out = Vec::new();
    for i in (0..na).filter(|&i| a.valid[i]) {
        let na_sq = sq(a, i);
        let mut best: Option<(f32, usize)> = None;
        for j in (0..nb).filter(|&j| b.valid[j]) {
            let dist = (na_sq + nb_sq[j] - 2.0 * dots[i * nb + j]).max(0.0);
            if best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        if let Some((_, j)) = best {
            out.push((i, j));
        }
    }
    Ok(out)
}

/// Fraction of matches whose reprojection error is within each threshold,
/// or `None` without matches.
pub fn mma(kps_a: &[Keypoint], kps_b: &[Keypoint], matches: &[(usize, usize)], h: &Homography, eps: &[f64]) -> Vec<Option<f64>> {
    if matches.is_empty() {
        return vec![None; eps.len()];
    }
    let errors: Vec<f64> = matches
        .iter()
        .map(|&(i, j)| {
            h.project(xy(&kps_a[i]))
                .map(|p| ((p[0] - kps_b[j].x as f64).powi(2) + (p[1] - kps_b[j].y as f64).powi(2)).sqrt())
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    eps.iter()
        .map(|&e| Some(errors.iter().filter(|&&d| d <= e).count() as f64 / errors.len() as f64))
        .collect()
}

/// `k` distinct pixels drawn uniformly from a `dims` image, score 0.
pub fn random_keypoints<R: Rng + ?Sized>(rng: &mut R, dims: (usize, usize), k: usize) -> KeypointList {
    let n = dims.0 * dims.1;
    sample(rng, n, k.min(n)).into_iter().map(|i| Keypoint { x: i % dims.1, y: i / dims.1, score: 0.0 }).collect()
}

/// Anything that turns an image into ranked keypoints.
pub trait KeypointDetector: Sync {
    fn detect(&self, img: &Image<f32>) -> Result<KeypointList>;
}

/// A trained network with its top-k and NMS settings.
pub struct NetworkDetector<'a, T> {
    pub detector: &'a Detector<T>,
    pub top_k: usize,
    pub nms_radius: usize,
}

impl<T: Scalar> KeypointDetector for NetworkDetector<'_, T> {
    fn detect(&self, img: &Image<f32>) -> Result<KeypointList> {
        detect(&img.cast(), self.detector, self.top_k, self.nms_radius)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Illumination,
    Viewpoint,
}

impl SequenceKind {
    pub fn of(name: &str) -> Option<Self> {
        if name.starts_with("i_") {
            Some(Self::Illumination)
        } else if name.starts_with("v_") {
            Some(Self::Viewpoint)
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Illumination => "illumination",
            Self::Viewpoint => "viewpoint",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub eps: Vec<f64>,
    /// Sequences to leave out.
    pub exclude: Vec<String>,
    /// Read descriptors from `<dir>/<sequence>/<n>.desc` instead of the
    /// baseline patches; rows follow the keypoint order.
    pub descriptors: Option<PathBuf>,
    /// Write each image's keypoints to `<dir>/<sequence>/<n>.csv`.
    pub keypoint_dump: Option<PathBuf>,
    /// Worker threads over sequences.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { eps: vec![1.0, 3.0], exclude: Vec::new(), descriptors: None, keypoint_dump: None, jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub sequence: String,
    pub kind: SequenceKind,
    /// Index `k` of the pair `1 ↔ k`.
    pub target: usize,
    pub repeatability: Vec<Option<f64>>,
    pub mma: Vec<Option<f64>>,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub pairs: usize,
    /// Mean over pairs where the value is defined, per threshold.
    pub repeatability: Vec<Option<f64>>,
    pub mma: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSequence {
    pub sequence: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eps: Vec<f64>,
    /// How repeatability counts are normalized.
    pub normalization: String,
    /// Keys `illumination`, `viewpoint`, `overall` (categories without pairs
    /// are omitted).
    pub categories: BTreeMap<String, CategoryMetrics>,
    pub pairs: Vec<PairResult>,
    pub skipped: Vec<SkippedSequence>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

fn fmt_eps(e: f64) -> String {
    format!("{e}")
}

impl MetricReport {
    pub fn aggregate(eps: Vec<f64>, pairs: Vec<PairResult>, skipped: Vec<SkippedSequence>) -> Self {
        let mut categories = BTreeMap::new();
        let groups: [(&str, Option<SequenceKind>); 3] =
            [("illumination", Some(SequenceKind::Illumination)), ("viewpoint", Some(SequenceKind::Viewpoint)), ("overall", None)];
        for (name, kind) in groups {
            let sel: Vec<&PairResult> = pairs.iter().filter(|p| kind.is_none_or(|k| p.kind == k)).collect();
            if sel.is_empty() {
                continue;
            }
            let per = |f: &dyn Fn(&PairResult) -> &Vec<Option<f64>>| -> Vec<Option<f64>> {
                (0..eps.len()).map(|e| mean_defined(sel.iter().map(|p| f(p)[e]))).collect()
            };
            categories.insert(
                name.to_string(),
                CategoryMetrics { pairs: sel.len(), repeatability: per(&|p| &p.repeatability), mma: per(&|p| &p.mma) },
            );
        }
        Self { eps, normalization: "min".into(), categories, pairs, skipped }
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# repeatability = greedy one-to-one matches / min(shared-region keypoint counts)\n");
        let eps: Vec<String> = self.eps.iter().map(|&e| fmt_eps(e)).collect();
        writeln!(s, "eps={}", eps.join(",")).ok();
        writeln!(s, "normalization={}", self.normalization).ok();
        for (name, c) in &self.categories {
            writeln!(s, "{name}.pairs={}", c.pairs).ok();
            for (i, e) in eps.iter().enumerate() {
                writeln!(s, "{name}.rep@{e}={}", fmt_opt(c.repeatability[i])).ok();
            }
            for (i, e) in eps.iter().enumerate() {
                writeln!(s, "{name}.mma@{e}={}", fmt_opt(c.mma[i])).ok();
            }
        }
        writeln!(s, "skipped={}", self.skipped.len()).ok();
        for sk in &self.skipped {
            writeln!(s, "skipped.{}={}", sk.sequence, sk.reason).ok();
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sequence names listed one per line (`#` starts a comment).
pub fn load_exclude_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path.as_ref())?
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_stem().and_then(|s| s.to_str()) == Some(stem)
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm" | "pnm" | "jpg" | "jpeg"))
        })
        .collect();
    found.sort();
    found.into_iter().next()
}

struct Sequence {
    name: String,
    kind: SequenceKind,
    images: Vec<Image<f32>>,
    homographies: Vec<Homography>,
}

fn load_sequence(dir: &Path, name: &str) -> std::result::Result<Sequence, String> {
    let kind = SequenceKind::of(name).ok_or("name does not start with i_ or v_")?;
    let mut images = Vec::with_capacity(6);
    for k in 1..=6 {
        let path = find_image(dir, &k.to_string()).ok_or_else(|| format!("missing image {k}"))?;
        let img = Image::<f32>::load(&path).map_err(|e| format!("image {k}: {e}"))?;
        images.push(img.crop_to_grid().map_err(|e| format!("image {k}: {e}"))?);
    }
    let mut homographies = Vec::with_capacity(5);
    for k in 2..=6 {
        let path = dir.join(format!("H_1_{k}"));
        if !path.exists() {
            return Err(format!("missing H_1_{k}"));
        }
        homographies.push(Homography::load(&path).map_err(|e| format!("H_1_{k}: {e}"))?);
    }
    Ok(Sequence { name: name.to_string(), kind, images, homographies })
}

fn evaluate_sequence(seq: &Sequence, det: &dyn KeypointDetector, opts: &EvalOptions) -> Result<Vec<PairResult>> {
    let kps: Vec<KeypointList> = seq.images.iter().map(|img| det.detect(img)).collect::<Result<_>>()?;
    if let Some(dir) = &opts.keypoint_dump {
        let d = dir.join(&seq.name);
        std::fs::create_dir_all(&d)?;
        for (i, k) in kps.iter().enumerate() {
            write_keypoints(d.join(format!("{}.csv", i + 1)), k)?;
        }
    }
    let descs: Vec<Descriptors> = match &opts.descriptors {
        Some(dir) => (1..=6)
            .map(|i| {
                let d = Descriptors::load(dir.join(&seq.name).join(format!("{i}.desc")))?;
                if d.len() != kps[i - 1].len() {
                    return Err(Error::Format(format!(
                        "{}/{i}.desc has {} rows for {} keypoints",
                        seq.name,
                        d.len(),
                        kps[i - 1].len()
                    )));
                }
                Ok(d)
            })
            .collect::<Result<_>>()?,
        None => seq.images.iter().zip(&kps).map(|(img, k)| baseline_descriptor(&img.to_gray(), k)).collect(),
    };
    let mut out = Vec::with_capacity(5);
    for (t, h) in seq.homographies.iter().enumerate() {
        let k = t + 1;
        let rep = repeatability(&kps[0], &kps[k], h, seq.images[0].dims(), seq.images[k].dims(), &opts.eps)?;
        let matches = nn_match(&descs[0], &descs[k])?;
        let m = mma(&kps[0], &kps[k], &matches, h, &opts.eps);
        out.push(PairResult {
            sequence: seq.name.clone(),
            kind: seq.kind,
            target: k + 1,
            repeatability: rep,
            mma: m,
            keypoints_a: kps[0].len(),
            keypoints_b: kps[k].len(),
            matches: matches.len(),
        });
    }
    Ok(out)
}

/// Evaluates `det` on every sequence directory under `root`. Malformed
/// sequences are skipped and listed in the report; a dataset without any
/// usable sequence is an error.
pub fn evaluate_dataset(det: &dyn KeypointDetector, root: &Path, opts: &EvalOptions) -> Result<MetricReport> {
    if opts.eps.is_empty() || opts.eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::InvalidArgument("thresholds must be finite and nonnegative".into()));
    }
    let mut names: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| !opts.exclude.contains(n))
        .collect();
    names.sort();
    let mut skipped = Vec::new();
    let mut sequences = Vec::new();
    for name in &names {
        match load_sequence(&root.join(name), name) {
            Ok(s) => sequences.push(s),
            Err(reason) => {
                log::warn!("skipping sequence {name}: {reason}");
                skipped.push(SkippedSequence { sequence: name.clone(), reason });
            }
        }
    }
    if sequences.is_empty() {
        let listed: Vec<String> = skipped.iter().map(|s| format!("{} ({})", s.sequence, s.reason)).collect();
        return Err(Error::Format(format!(
            "no usable sequences under {}{}{}",
            root.display(),
            if listed.is_empty() { "" } else { ": " },
            listed.join(", ")
        )));
    }
    let jobs = opts.jobs.max(1).min(sequences.len());
    let results: Vec<Result<Vec<PairResult>>> = if jobs == 1 {
        sequences.iter().map(|s| evaluate_sequence(s, det, opts)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<PairResult>>>> = (0..sequences.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (w, chunk) in slots.chunks_mut(sequences.len().div_ceil(jobs)).enumerate() {
                let base = w * sequences.len().div_ceil(jobs);
                let seqs = &sequences;
                scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(evaluate_sequence(&seqs[base + i], det, opts));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };
    let mut pairs = Vec::new();
    for r in results {
        pairs.extend(r?);
    }
    Ok(MetricReport::aggregate(opts.eps.clone(), pairs, skipped))
}
