//! Training objectives on grid-cell response distributions.
//!
//! Every cell of a score map is turned into a 64-way softmax distribution.
//! Corresponding cells of two views (set A) are compared with a symmetric
//! cross-entropy (`E`) and scored for sharpness with their Shannon entropies
//! (`C`). Guider weights decide which cells count, and push confident cells
//! to sharpen while low-weight cells flatten.
//!
//! Naming used below, for a pair of score maps `S1`, `S2` related by `H`:
//!
//! | tensor | source                    | distribution |
//! |--------|---------------------------|--------------|
//! | `g1`   | `S1`                      | `u`          |
//! | `g2t`  | `S2` warped into frame 1  | `v'`         |
//! | `g2`   | `S2`                      | `v`          |
//! | `g1t`  | `S1` warped into frame 2  | `u'`         |
//!
//! Gradients never flow through the argmax selection that builds set A, only
//! through the softmax distributions and the weights.

use crate::error::{Error, Result};
use crate::geometry::{Homography, WarpPlan};
use crate::grid::{build_correspondence_set, to_grid_tensor, CorrespondenceSet, GridTensor, CELL_AREA};
use crate::map::{ScoreMap, WeightMap};
use crate::scalar::Scalar;

/// Guard added to every weighted-mean denominator.
pub const WEIGHT_EPS: f64 = 1e-8;

/// Sign applied to the second summand of the image-2 rows of the `E` and `C`
/// matrices. `Symmetric` mirrors the image-1 rows; `Negated` flips it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignConvention {
    #[default]
    Symmetric,
    Negated,
}

impl SignConvention {
    fn sigma<T: Scalar>(self) -> T {
        match self {
            SignConvention::Symmetric => T::one(),
            SignConvention::Negated => -T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub signs: SignConvention,
    /// Weight of the peakiness regularizer in RegMSE.
    pub regmse_lambda: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { signs: SignConvention::Symmetric, regmse_lambda: 1.0 }
    }
}

/// Scalar loss plus bookkeeping flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    /// Set A was empty; the value is the guard value and no step should be taken.
    pub no_correspondence: bool,
    /// Whether gradients w.r.t. score (and weight) maps are available.
    pub is_differentiable: bool,
}

impl<T: Scalar> LossValue<T> {
    fn of(value: T) -> Self {
        Self { value, no_correspondence: false, is_differentiable: true }
    }

    fn empty() -> Self {
        Self { value: T::zero(), no_correspondence: true, is_differentiable: false }
    }
}

/// Per-cell 64-way distributions with their logarithms, cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDistributions<T> {
    rows: usize,
    cols: usize,
    probs: Vec<T>,
    log_probs: Vec<T>,
}

impl<T: Scalar> GridDistributions<T> {
    /// Injects explicit distributions (each 64-block must sum to 1). Zero
    /// probabilities are allowed; `0 · log 0` is taken as 0 downstream.
    pub fn from_probs(rows: usize, cols: usize, probs: Vec<T>) -> Result<Self> {
        if probs.len() != rows * cols * CELL_AREA {
            return Err(Error::Shape(format!("{} probabilities for a {rows}x{cols} grid", probs.len())));
        }
        for cell in probs.chunks_exact(CELL_AREA) {
            let total: T = cell.iter().copied().sum();
            if cell.iter().any(|&p| p < T::zero() || !p.is_finite()) || (total - T::one()).abs() > T::lit(1e-6) {
                return Err(Error::InvalidArgument("cell is not a probability distribution".into()));
            }
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self { rows, cols, probs, log_probs })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let s = (i * self.cols + j) * CELL_AREA;
        &self.probs[s..s + CELL_AREA]
    }

    #[inline]
    pub fn log_cell(&self, i: usize, j: usize) -> &[T] {
        let s = (i * self.cols + j) * CELL_AREA;
        &self.log_probs[s..s + CELL_AREA]
    }
}

/// Numerically stable softmax over the 64 entries of every cell.
pub fn softmax_slices<T: Scalar>(g: &GridTensor<T>) -> GridDistributions<T> {
    let n = g.rows() * g.cols() * CELL_AREA;
    let mut probs = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    for cell in g.cells() {
        let max = cell.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = cell.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        for &z in cell {
            let lp = z - max - log_sum;
            log_probs.push(lp);
            probs.push(lp.exp());
        }
    }
    GridDistributions { rows: g.rows(), cols: g.cols(), probs, log_probs }
}

/// `h × w` matrix of per-cell scalars (similarity `E` or certainty `C`).
#[derive(Debug, Clone, PartialEq)]
pub struct GridMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

pub type SimilarityMatrix<T> = GridMatrix<T>;
pub type CertaintyMatrix<T> = GridMatrix<T>;

impl<T: Scalar> GridMatrix<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }
}

/// `Σ_k p_k · log q_k` with `0 · log 0 = 0`.
#[inline]
fn dot_xlogy<T: Scalar>(p: &[T], log_q: &[T]) -> T {
    p.iter().zip(log_q).map(|(&a, &b)| if a == T::zero() { T::zero() } else { a * b }).sum()
}

fn check_same_grid<T: Scalar>(ds: &[&GridDistributions<T>]) -> Result<(usize, usize)> {
    let (r, c) = (ds[0].rows, ds[0].cols);
    if ds.iter().any(|d| (d.rows, d.cols) != (r, c)) {
        return Err(Error::Shape("distribution grids differ in size".into()));
    }
    Ok((r, c))
}

/// Local similarity matrices
/// `E1 = −Σ(u·log v' + v'·log u)` and `E2 = −Σ(v·log u' ± u'·log v)`.
pub fn cross_entropy_matrices<T: Scalar>(
    u: &GridDistributions<T>,
    v_t: &GridDistributions<T>,
    v: &GridDistributions<T>,
    u_t: &GridDistributions<T>,
    signs: SignConvention,
) -> Result<(SimilarityMatrix<T>, SimilarityMatrix<T>)> {
    let (rows, cols) = check_same_grid(&[u, v_t, v, u_t])?;
    let sigma: T = signs.sigma();
    let mut e1 = Vec::with_capacity(rows * cols);
    let mut e2 = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            e1.push(-(dot_xlogy(u.cell(i, j), v_t.log_cell(i, j)) + dot_xlogy(v_t.cell(i, j), u.log_cell(i, j))));
            e2.push(-(dot_xlogy(v.cell(i, j), u_t.log_cell(i, j)) + sigma * dot_xlogy(u_t.cell(i, j), v.log_cell(i, j))));
        }
    }
    Ok((GridMatrix { rows, cols, values: e1 }, GridMatrix { rows, cols, values: e2 }))
}

/// Certainty matrices `C1 = H(u) + H(v')` and `C2 = H(v) ± H(u')`.
pub fn certainty_matrices<T: Scalar>(
    u: &GridDistributions<T>,
    v_t: &GridDistributions<T>,
    v: &GridDistributions<T>,
    u_t: &GridDistributions<T>,
    signs: SignConvention,
) -> Result<(CertaintyMatrix<T>, CertaintyMatrix<T>)> {
    let (rows, cols) = check_same_grid(&[u, v_t, v, u_t])?;
    let sigma: T = signs.sigma();
    let ent = |d: &GridDistributions<T>, i, j| -dot_xlogy(d.cell(i, j), d.log_cell(i, j));
    let mut c1 = Vec::with_capacity(rows * cols);
    let mut c2 = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            c1.push(ent(u, i, j) + ent(v_t, i, j));
            c2.push(ent(v, i, j) + sigma * ent(u_t, i, j));
        }
    }
    Ok((GridMatrix { rows, cols, values: c1 }, GridMatrix { rows, cols, values: c2 }))
}

fn check_set_fits<T: Scalar>(m1: &GridMatrix<T>, m2: &GridMatrix<T>, a: &CorrespondenceSet) -> Result<()> {
    for q in &a.quads {
        if q.a >= m1.rows || q.b >= m1.cols || q.c >= m2.rows || q.d >= m2.cols {
            return Err(Error::Shape(format!("quad {q:?} outside {}x{} grid", m1.rows, m1.cols)));
        }
    }
    Ok(())
}

/// Per-quad sums `E1[a,b] + E2[c,d]` (or the `C` analogue).
fn pair_sums<T: Scalar>(m1: &GridMatrix<T>, m2: &GridMatrix<T>, a: &CorrespondenceSet) -> Result<Vec<T>> {
    check_set_fits(m1, m2, a)?;
    Ok(a.quads.iter().map(|q| m1.get(q.a, q.b) + m2.get(q.c, q.d)).collect())
}

/// Per-quad products `W1[a,b] · W2[c,d]`.
fn pair_weights<T: Scalar>(w1: &WeightMap<T>, w2: &WeightMap<T>, a: &CorrespondenceSet) -> Result<Vec<T>> {
    a.quads
        .iter()
        .map(|q| {
            if q.a >= w1.height() || q.b >= w1.width() || q.c >= w2.height() || q.d >= w2.width() {
                return Err(Error::Shape(format!(
                    "quad {q:?} outside weight maps {:?} / {:?}",
                    w1.dims(),
                    w2.dims()
                )));
            }
            Ok(w1.get(q.a, q.b) * w2.get(q.c, q.d))
        })
        .collect()
}

/// `Σ s_x w_x / (4 (Σ w_x + ε))`.
fn weighted_quarter_mean<T: Scalar>(sums: &[T], weights: &[T]) -> T {
    let num: T = sums.iter().zip(weights).map(|(&s, &w)| s * w).sum();
    let den: T = weights.iter().copied().sum::<T>() + T::lit(WEIGHT_EPS);
    num / (T::lit(4.0) * den)
}

/// `(1 / 4|A|) Σ_x (E1x + E2x)`.
pub fn le_loss<T: Scalar>(
    e1: &SimilarityMatrix<T>,
    e2: &SimilarityMatrix<T>,
    a: &CorrespondenceSet,
) -> Result<LossValue<T>> {
    if a.is_empty() {
        return Ok(LossValue::empty());
    }
    let sums = pair_sums(e1, e2, a)?;
    let total: T = sums.into_iter().sum();
    Ok(LossValue::of(total / (T::lit(4.0) * T::from_usize_lossy(a.len()))))
}

/// Guider-weighted LE loss with `W_x = W1[a,b] · W2[c,d]`.
pub fn weighted_le_loss<T: Scalar>(
    e1: &SimilarityMatrix<T>,
    e2: &SimilarityMatrix<T>,
    a: &CorrespondenceSet,
    w1: &WeightMap<T>,
    w2: &WeightMap<T>,
) -> Result<LossValue<T>> {
    if a.is_empty() {
        return Ok(LossValue::empty());
    }
    let sums = pair_sums(e1, e2, a)?;
    let weights = pair_weights(w1, w2, a)?;
    Ok(LossValue::of(weighted_quarter_mean(&sums, &weights)))
}

/// Local certainty loss: weighted mean certainty over high-weight cells minus
/// the `(1 − W)`-weighted mean over low-weight cells.
pub fn local_certainty_loss<T: Scalar>(
    c1: &CertaintyMatrix<T>,
    c2: &CertaintyMatrix<T>,
    a: &CorrespondenceSet,
    w1: &WeightMap<T>,
    w2: &WeightMap<T>,
) -> Result<LossValue<T>> {
    if a.is_empty() {
        return Ok(LossValue::empty());
    }
    let sums = pair_sums(c1, c2, a)?;
    let weights = pair_weights(w1, w2, a)?;
    let inverse: Vec<T> = weights.iter().map(|&w| T::one() - w).collect();
    Ok(LossValue::of(weighted_quarter_mean(&sums, &weights) - weighted_quarter_mean(&sums, &inverse)))
}

/// Everything derived from one pair of score maps that the losses need:
/// the four grid tensors, their distributions, the warps used to align them
/// and set A.
#[derive(Debug, Clone)]
pub struct AlignedPair<T> {
    pub set: CorrespondenceSet,
    forward: WarpPlan,
    backward: WarpPlan,
    g1: GridTensor<T>,
    g2: GridTensor<T>,
    g1t: GridTensor<T>,
    g2t: GridTensor<T>,
    u: GridDistributions<T>,
    v: GridDistributions<T>,
    u_t: GridDistributions<T>,
    v_t: GridDistributions<T>,
}

impl<T: Scalar> AlignedPair<T> {
    /// Aligns the maps and builds set A from their per-cell argmaxes.
    pub fn new(s1: &ScoreMap<T>, s2: &ScoreMap<T>, h: &Homography) -> Result<Self> {
        let set = build_correspondence_set(s1, s2, h)?;
        Self::with_set(s1, s2, h, set)
    }

    /// Same as [`new`](Self::new) but with a caller-supplied set A, e.g. to
    /// hold the selection fixed while probing gradients numerically.
    pub fn with_set(s1: &ScoreMap<T>, s2: &ScoreMap<T>, h: &Homography, set: CorrespondenceSet) -> Result<Self> {
        if s1.dims() != s2.dims() {
            return Err(Error::Shape(format!("score maps {:?} vs {:?}", s1.dims(), s2.dims())));
        }
        let dims = s1.dims();
        let forward = WarpPlan::new(h, dims, dims)?;
        let backward = WarpPlan::new(&h.inverse()?, dims, dims)?;
        let g1 = to_grid_tensor(s1)?;
        let g2 = to_grid_tensor(s2)?;
        let g1t = to_grid_tensor(&forward.apply(s1)?)?;
        let g2t = to_grid_tensor(&backward.apply(s2)?)?;
        let (u, v, u_t, v_t) = (softmax_slices(&g1), softmax_slices(&g2), softmax_slices(&g1t), softmax_slices(&g2t));
        Ok(Self { set, forward, backward, g1, g2, g1t, g2t, u, v, u_t, v_t })
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.g1.rows(), self.g1.cols())
    }

    /// `(u, v', v, u')`.
    pub fn distributions(&self) -> (&GridDistributions<T>, &GridDistributions<T>, &GridDistributions<T>, &GridDistributions<T>) {
        (&self.u, &self.v_t, &self.v, &self.u_t)
    }

    pub fn similarity(&self, signs: SignConvention) -> Result<(SimilarityMatrix<T>, SimilarityMatrix<T>)> {
        cross_entropy_matrices(&self.u, &self.v_t, &self.v, &self.u_t, signs)
    }

    pub fn certainty(&self, signs: SignConvention) -> Result<(CertaintyMatrix<T>, CertaintyMatrix<T>)> {
        certainty_matrices(&self.u, &self.v_t, &self.v, &self.u_t, signs)
    }

    fn check_weights(&self, w1: &WeightMap<T>, w2: &WeightMap<T>) -> Result<()> {
        let g = self.grid_dims();
        if w1.dims() != g || w2.dims() != g {
            return Err(Error::Shape(format!(
                "weight maps {:?} / {:?} must match grid {:?}",
                w1.dims(),
                w2.dims(),
                g
            )));
        }
        Ok(())
    }
}

/// The two GLE components and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GleLoss<T> {
    pub weighted_le: LossValue<T>,
    pub local_certainty: LossValue<T>,
    pub total: LossValue<T>,
}

/// Guided local-entropy loss `L_le^W + L_lc^W` for one image pair.
pub fn gle_loss<T: Scalar>(
    s1: &ScoreMap<T>,
    s2: &ScoreMap<T>,
    w1: &WeightMap<T>,
    w2: &WeightMap<T>,
    h: &Homography,
    opts: &LossOptions,
) -> Result<GleLoss<T>> {
    gle_from_pair(&AlignedPair::new(s1, s2, h)?, w1, w2, opts)
}

pub fn gle_from_pair<T: Scalar>(
    pair: &AlignedPair<T>,
    w1: &WeightMap<T>,
    w2: &WeightMap<T>,
    opts: &LossOptions,
) -> Result<GleLoss<T>> {
    pair.check_weights(w1, w2)?;
    let (e1, e2) = pair.similarity(opts.signs)?;
    let (c1, c2) = pair.certainty(opts.signs)?;
    let weighted_le = weighted_le_loss(&e1, &e2, &pair.set, w1, w2)?;
    let local_certainty = local_certainty_loss(&c1, &c2, &pair.set, w1, w2)?;
    let total = if pair.set.is_empty() {
        LossValue::empty()
    } else {
        LossValue::of(weighted_le.value + local_certainty.value)
    };
    Ok(GleLoss { weighted_le, local_certainty, total })
}

/// Unweighted LE loss for one image pair.
pub fn le_pair_loss<T: Scalar>(s1: &ScoreMap<T>, s2: &ScoreMap<T>, h: &Homography, opts: &LossOptions) -> Result<LossValue<T>> {
    le_from_pair(&AlignedPair::new(s1, s2, h)?, opts)
}

pub fn le_from_pair<T: Scalar>(pair: &AlignedPair<T>, opts: &LossOptions) -> Result<LossValue<T>> {
    let (e1, e2) = pair.similarity(opts.signs)?;
    le_loss(&e1, &e2, &pair.set)
}

/// MSE between aligned responses at the selected points of set A, minus
/// `λ` times the mean per-cell `(max − mean)` response of both maps.
pub fn regmse_loss<T: Scalar>(s1: &ScoreMap<T>, s2: &ScoreMap<T>, h: &Homography, opts: &LossOptions) -> Result<LossValue<T>> {
    regmse_from_pair(&AlignedPair::new(s1, s2, h)?, opts)
}

pub fn regmse_from_pair<T: Scalar>(pair: &AlignedPair<T>, opts: &LossOptions) -> Result<LossValue<T>> {
    let (mse, reg) = regmse_terms(pair);
    let value = mse - T::lit(opts.regmse_lambda) * reg;
    Ok(LossValue { value, no_correspondence: pair.set.is_empty(), is_differentiable: true })
}

#[inline]
fn cell_offset(cols: usize, i: usize, j: usize, k: usize) -> usize {
    (i * cols + j) * CELL_AREA + k
}

fn argmax(cell: &[impl Scalar]) -> usize {
    let mut best = 0;
    for k in 1..cell.len() {
        if cell[k] > cell[best] {
            best = k;
        }
    }
    best
}

fn local_k(p: (usize, usize)) -> (usize, usize, usize) {
    let (x, y) = p;
    (y / 8, x / 8, (y % 8) * 8 + x % 8)
}

/// `(mse, peakiness)` terms of RegMSE.
fn regmse_terms<T: Scalar>(pair: &AlignedPair<T>) -> (T, T) {
    let mut mse = T::zero();
    for (p1, p2) in pair.set.coords_1.iter().zip(&pair.set.coords_2) {
        let (i, j, k) = local_k(*p1);
        let d1 = pair.g1.get(k, i, j) - pair.g2t.get(k, i, j);
        let (i, j, k) = local_k(*p2);
        let d2 = pair.g2.get(k, i, j) - pair.g1t.get(k, i, j);
        mse += d1 * d1 + d2 * d2;
    }
    if !pair.set.is_empty() {
        mse /= T::lit(2.0) * T::from_usize_lossy(pair.set.len());
    }
    let peak = |g: &GridTensor<T>| -> T {
        g.cells()
            .map(|c| {
                let max = c.iter().copied().fold(T::neg_infinity(), T::max);
                let mean = c.iter().copied().sum::<T>() / T::lit(CELL_AREA as f64);
                max - mean
            })
            .sum()
    };
    let n_cells = T::from_usize_lossy(2 * pair.g1.rows() * pair.g1.cols());
    (mse, (peak(&pair.g1) + peak(&pair.g2)) / n_cells)
}

/// Which objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Gle,
    Le,
    #[serde(rename = "regmse")]
    RegMse,
}

impl Objective {
    pub fn uses_weights(self) -> bool {
        matches!(self, Objective::Gle)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Gle => "gle",
            Objective::Le => "le",
            Objective::RegMse => "regmse",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gle" => Ok(Objective::Gle),
            "le" => Ok(Objective::Le),
            "regmse" => Ok(Objective::RegMse),
            other => Err(Error::InvalidArgument(format!("unknown loss {other:?} (expected gle, le or regmse)"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Gradients of a loss w.r.t. its map inputs.
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub score_1: ScoreMap<T>,
    pub score_2: ScoreMap<T>,
    /// Present only for objectives that use guider weights.
    pub weight_1: Option<WeightMap<T>>,
    pub weight_2: Option<WeightMap<T>>,
}

/// Result of [`evaluate_objective`].
#[derive(Debug, Clone)]
pub struct ObjectiveOutput<T> {
    pub loss: LossValue<T>,
    /// `Σ_x W_x` over set A (GLE only, zero otherwise).
    pub weight_mass: T,
    pub grads: Option<LossGrads<T>>,
}

/// Grid-space gradient accumulators for `g1, g2t, g2, g1t`.
struct GridGrads<T> {
    g1: Vec<T>,
    g2t: Vec<T>,
    g2: Vec<T>,
    g1t: Vec<T>,
}

impl<T: Scalar> GridGrads<T> {
    fn zeros(n: usize) -> Self {
        Self { g1: vec![T::zero(); n], g2t: vec![T::zero(); n], g2: vec![T::zero(); n], g1t: vec![T::zero(); n] }
    }

    fn into_maps(self, pair: &AlignedPair<T>) -> Result<(ScoreMap<T>, ScoreMap<T>)> {
        let (r, c) = pair.grid_dims();
        let map = |v: Vec<T>| GridTensor::from_cells(r, c, v).to_map();
        let mut s1 = map(self.g1);
        s1.add_assign(&pair.forward.apply_transpose(&map(self.g1t))?)?;
        let mut s2 = map(self.g2);
        s2.add_assign(&pair.backward.apply_transpose(&map(self.g2t))?)?;
        Ok((s1, s2))
    }
}

/// Adds `coef · ∂X/∂z` for `X = −Σ p·log q` to the logit gradients of both
/// arguments (`p = softmax(z_p)`, `q = softmax(z_q)`).
fn add_cross_grad<T: Scalar>(coef: T, p: &[T], q: &[T], lq: &[T], gp: &mut [T], gq: &mut [T]) {
    let mean: T = p.iter().zip(lq).map(|(&a, &b)| a * b).sum();
    for k in 0..CELL_AREA {
        gp[k] -= coef * p[k] * (lq[k] - mean);
        gq[k] -= coef * (p[k] - q[k]);
    }
}

/// Adds `coef · ∂H(p)/∂z` for the Shannon entropy `H(p) = −Σ p·log p`.
fn add_entropy_grad<T: Scalar>(coef: T, p: &[T], lp: &[T], gp: &mut [T]) {
    let mean: T = p.iter().zip(lp).map(|(&a, &b)| a * b).sum();
    for k in 0..CELL_AREA {
        gp[k] -= coef * p[k] * (lp[k] - mean);
    }
}

fn split2<'a, T>(a: &'a mut [T], b: &'a mut [T], off_a: usize, off_b: usize) -> (&'a mut [T], &'a mut [T]) {
    (&mut a[off_a..off_a + CELL_AREA], &mut b[off_b..off_b + CELL_AREA])
}

/// Evaluates `objective` on an aligned pair, optionally with gradients.
/// `weights` must be given (at grid resolution) for [`Objective::Gle`].
pub fn evaluate_objective<T: Scalar>(
    objective: Objective,
    pair: &AlignedPair<T>,
    weights: Option<(&WeightMap<T>, &WeightMap<T>)>,
    opts: &LossOptions,
    want_grad: bool,
) -> Result<ObjectiveOutput<T>> {
    match objective {
        Objective::Gle => {
            let (w1, w2) = weights.ok_or_else(|| Error::InvalidArgument("GLE needs guider weight maps".into()))?;
            let gle = gle_from_pair(pair, w1, w2, opts)?;
            let weight_mass = pair_weights(w1, w2, &pair.set)?.into_iter().sum();
            let grads = if want_grad && !pair.set.is_empty() { Some(gle_grads(pair, w1, w2, opts, GleTerms::ALL)?) } else { None };
            Ok(ObjectiveOutput { loss: gle.total, weight_mass, grads })
        }
        Objective::Le => {
            let loss = le_from_pair(pair, opts)?;
            let grads = if want_grad && !pair.set.is_empty() { Some(le_grads(pair, opts)?) } else { None };
            Ok(ObjectiveOutput { loss, weight_mass: T::zero(), grads })
        }
        Objective::RegMse => {
            let loss = regmse_from_pair(pair, opts)?;
            let grads = if want_grad { Some(regmse_grads(pair, opts)?) } else { None };
            Ok(ObjectiveOutput { loss, weight_mass: T::zero(), grads })
        }
    }
}

/// Accumulates `α·(E1 + E2) + β·(C1 + C2)` gradients for one quad.
fn add_quad_grads<T: Scalar>(
    pair: &AlignedPair<T>,
    gg: &mut GridGrads<T>,
    q: &crate::grid::Quad,
    alpha: T,
    beta: T,
    sigma: T,
) {
    let cols = pair.g1.cols();
    let o1 = cell_offset(cols, q.a, q.b, 0);
    let o2 = cell_offset(cols, q.c, q.d, 0);
    let (u, lu) = (pair.u.cell(q.a, q.b), pair.u.log_cell(q.a, q.b));
    let (vt, lvt) = (pair.v_t.cell(q.a, q.b), pair.v_t.log_cell(q.a, q.b));
    let (v, lv) = (pair.v.cell(q.c, q.d), pair.v.log_cell(q.c, q.d));
    let (ut, lut) = (pair.u_t.cell(q.c, q.d), pair.u_t.log_cell(q.c, q.d));

    if alpha != T::zero() {
        let (gu, gvt) = split2(&mut gg.g1, &mut gg.g2t, o1, o1);
        // E1 = X(u, v') + X(v', u)
        add_cross_grad(alpha, u, vt, lvt, gu, gvt);
        add_cross_grad(alpha, vt, u, lu, gvt, gu);
        let (gv, gut) = split2(&mut gg.g2, &mut gg.g1t, o2, o2);
        // E2 = X(v, u') + σ X(u', v)
        add_cross_grad(alpha, v, ut, lut, gv, gut);
        add_cross_grad(alpha * sigma, ut, v, lv, gut, gv);
    }
    if beta != T::zero() {
        add_entropy_grad(beta, u, lu, &mut gg.g1[o1..o1 + CELL_AREA]);
        add_entropy_grad(beta, vt, lvt, &mut gg.g2t[o1..o1 + CELL_AREA]);
        add_entropy_grad(beta, v, lv, &mut gg.g2[o2..o2 + CELL_AREA]);
        add_entropy_grad(beta * sigma, ut, lut, &mut gg.g1t[o2..o2 + CELL_AREA]);
    }
}

fn le_grads<T: Scalar>(pair: &AlignedPair<T>, opts: &LossOptions) -> Result<LossGrads<T>> {
    let n = pair.g1.rows() * pair.g1.cols() * CELL_AREA;
    let mut gg = GridGrads::zeros(n);
    let alpha = T::one() / (T::lit(4.0) * T::from_usize_lossy(pair.set.len()));
    let sigma = opts.signs.sigma();
    for q in &pair.set.quads {
        add_quad_grads(pair, &mut gg, q, alpha, T::zero(), sigma);
    }
    let (score_1, score_2) = gg.into_maps(pair)?;
    Ok(LossGrads { score_1, score_2, weight_1: None, weight_2: None })
}

/// Which parts of the GLE loss to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GleTerms {
    pub weighted_le: bool,
    pub local_certainty: bool,
}

impl GleTerms {
    pub const ALL: Self = Self { weighted_le: true, local_certainty: true };
    pub const WEIGHTED_LE: Self = Self { weighted_le: true, local_certainty: false };
    pub const LOCAL_CERTAINTY: Self = Self { weighted_le: false, local_certainty: true };
}

/// Gradients of the selected GLE terms w.r.t. both score maps and both
/// weight maps. Set A is taken from `pair` and held fixed.
pub fn gle_grads<T: Scalar>(
    pair: &AlignedPair<T>,
    w1: &WeightMap<T>,
    w2: &WeightMap<T>,
    opts: &LossOptions,
    terms: GleTerms,
) -> Result<LossGrads<T>> {
    pair.check_weights(w1, w2)?;
    let set = &pair.set;
    let (e1, e2) = pair.similarity(opts.signs)?;
    let (c1, c2) = pair.certainty(opts.signs)?;
    let e = pair_sums(&e1, &e2, set)?;
    let c = pair_sums(&c1, &c2, set)?;
    let w = pair_weights(w1, w2, set)?;

    let four = T::lit(4.0);
    let eps = T::lit(WEIGHT_EPS);
    let den_w = w.iter().copied().sum::<T>() + eps;
    let den_inv = w.iter().map(|&x| T::one() - x).sum::<T>() + eps;
    let num_e: T = e.iter().zip(&w).map(|(&a, &b)| a * b).sum();
    let num_c: T = c.iter().zip(&w).map(|(&a, &b)| a * b).sum();
    let num_c_inv: T = c.iter().zip(&w).map(|(&a, &b)| a * (T::one() - b)).sum();

    let n = pair.g1.rows() * pair.g1.cols() * CELL_AREA;
    let mut gg = GridGrads::zeros(n);
    let mut gw1 = WeightMap::zeros(w1.height(), w1.width());
    let mut gw2 = WeightMap::zeros(w2.height(), w2.width());
    let sigma = opts.signs.sigma();
    let on = |b: bool| if b { T::one() } else { T::zero() };
    let (k_le, k_lc) = (on(terms.weighted_le), on(terms.local_certainty));
    for (x, q) in set.quads.iter().enumerate() {
        let alpha = k_le * w[x] / (four * den_w);
        let beta = k_lc * (w[x] / (four * den_w) - (T::one() - w[x]) / (four * den_inv));
        add_quad_grads(pair, &mut gg, q, alpha, beta, sigma);

        // ∂L/∂W_x for L = L_le^W + L_lc^W.
        let d_le = e[x] / (four * den_w) - num_e / (four * den_w * den_w);
        let d_lc_pos = c[x] / (four * den_w) - num_c / (four * den_w * den_w);
        let d_lc_neg = c[x] / (four * den_inv) - num_c_inv / (four * den_inv * den_inv);
        let d_wx = k_le * d_le + k_lc * (d_lc_pos + d_lc_neg);
        let (wa, wb) = (w1.get(q.a, q.b), w2.get(q.c, q.d));
        gw1.set(q.a, q.b, gw1.get(q.a, q.b) + d_wx * wb);
        gw2.set(q.c, q.d, gw2.get(q.c, q.d) + d_wx * wa);
    }
    let (score_1, score_2) = gg.into_maps(pair)?;
    Ok(LossGrads { score_1, score_2, weight_1: Some(gw1), weight_2: Some(gw2) })
}

fn regmse_grads<T: Scalar>(pair: &AlignedPair<T>, opts: &LossOptions) -> Result<LossGrads<T>> {
    let (rows, cols) = pair.grid_dims();
    let n = rows * cols * CELL_AREA;
    let mut gg = GridGrads::zeros(n);
    if !pair.set.is_empty() {
        let scale = T::one() / T::from_usize_lossy(pair.set.len());
        for (p1, p2) in pair.set.coords_1.iter().zip(&pair.set.coords_2) {
            let (i, j, k) = local_k(*p1);
            let o = cell_offset(cols, i, j, k);
            let d1 = pair.g1.get(k, i, j) - pair.g2t.get(k, i, j);
            gg.g1[o] += scale * d1;
            gg.g2t[o] -= scale * d1;
            let (i, j, k) = local_k(*p2);
            let o = cell_offset(cols, i, j, k);
            let d2 = pair.g2.get(k, i, j) - pair.g1t.get(k, i, j);
            gg.g2[o] += scale * d2;
            gg.g1t[o] -= scale * d2;
        }
    }
    // −λ/(2R) · Σ (max − mean) over both maps.
    let coef = -T::lit(opts.regmse_lambda) / T::from_usize_lossy(2 * rows * cols);
    let mean_share = coef / T::lit(CELL_AREA as f64);
    for (g, acc) in [(&pair.g1, &mut gg.g1), (&pair.g2, &mut gg.g2)] {
        for (ci, cell) in g.cells().enumerate() {
            let base = ci * CELL_AREA;
            for v in &mut acc[base..base + CELL_AREA] {
                *v -= mean_share;
            }
            acc[base + argmax(cell)] += coef;
        }
    }
    let (score_1, score_2) = gg.into_maps(pair)?;
    Ok(LossGrads { score_1, score_2, weight_1: None, weight_2: None })
}
