//! Projective geometry: homographies, bilinear warping and augmentation
//! sampling.
//!
//! Pixel convention: `x` is the column, `y` the row, both 0-based with the
//! origin at the centre of the top-left pixel.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::map::{DenseMap, Image};
use crate::scalar::Scalar;

const DET_EPS: f64 = 1e-8;
const Z_EPS: f64 = 1e-12;

/// Invertible 3×3 projective transform acting on `[x, y, 1]ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    /// Builds a homography, normalizing so that `m[2][2] = 1` when it is not
    /// (numerically) zero.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("homography entry".into()));
        }
        let mut m = m;
        let s = m[2][2];
        if s.abs() > Z_EPS {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let h = Self { m };
        let det = h.det();
        if det.abs() <= DET_EPS {
            return Err(Error::Singular(det.abs()));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]] }
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        Self::new([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= DET_EPS {
            return Err(Error::Singular(det.abs()));
        }
        let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
            [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
            [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for (r, row) in adj.iter().enumerate() {
            for (col, v) in row.iter().enumerate() {
                inv[r][col] = v / det;
            }
        }
        Self::new(inv)
    }

    /// Matrix product `self · other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        Self::new(out)
    }

    /// Maps a pixel coordinate: `[x'/z', y'/z']` with `[x',y',z'] = H·[x,y,1]ᵀ`.
    pub fn project(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let m = &self.m;
        let xp = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2];
        let yp = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2];
        let zp = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if zp.abs() < Z_EPS {
            return Err(Error::PointAtInfinity(zp.abs()));
        }
        Ok([xp / zp, yp / zp])
    }

    /// Solves the homography mapping four source points onto four
    /// destination points (direct linear transform with `h33 = 1`).
    pub fn from_correspondences(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let ([x, y], [u, v]) = (src[i], dst[i]);
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v, v];
        }
        for col in 0..8 {
            let pivot = (col..8)
                .max_by(|&r0, &r1| a[r0][col].abs().total_cmp(&a[r1][col].abs()))
                .expect("non-empty range");
            if a[pivot][col].abs() < 1e-12 {
                return Err(Error::Singular(0.0));
            }
            a.swap(col, pivot);
            for row in 0..8 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    if f != 0.0 {
                        for c in col..9 {
                            a[row][c] -= f * a[col][c];
                        }
                    }
                }
            }
        }
        let h: Vec<f64> = (0..8).map(|r| a[r][8] / a[r][r]).collect();
        Self::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    }

    /// Reads the 3×3 whitespace-separated text format used by HPatches
    /// `H_1_X` files.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        std::fs::read_to_string(path.as_ref())?.parse()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_string())?;
        Ok(())
    }
}

impl FromStr for Homography {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let vals = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("homography value {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 9 {
            return Err(Error::Format(format!("homography needs 9 values, found {}", vals.len())));
        }
        Self::new([[vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], [vals[6], vals[7], vals[8]]])
    }
}

impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.m {
            writeln!(f, "{:e} {:e} {:e}", row[0], row[1], row[2])?;
        }
        Ok(())
    }
}

/// A linear resampling operator: every output pixel is a bilinear blend of
/// at most four source pixels. Keeping the taps around makes the transpose
/// (needed to backpropagate through a warp) trivial.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    src_dims: (usize, usize),
    out_dims: (usize, usize),
    taps: Vec<[(u32, f64); 4]>,
    valid: Vec<bool>,
}

impl WarpPlan {
    /// Plan for `out(q) = src(H⁻¹ q)`, i.e. moving content forward by `h`.
    pub fn new(h: &Homography, src_dims: (usize, usize), out_dims: (usize, usize)) -> Result<Self> {
        let inv = h.inverse()?;
        let (sh, sw) = src_dims;
        let (oh, ow) = out_dims;
        let mut taps = Vec::with_capacity(oh * ow);
        let mut valid = Vec::with_capacity(oh * ow);
        let (max_x, max_y) = (sw as f64 - 1.0, sh as f64 - 1.0);
        for y in 0..oh {
            for x in 0..ow {
                let src = inv.project([x as f64, y as f64]).ok();
                match src {
                    Some([sx, sy]) if sw > 0 && sh > 0 && sx >= 0.0 && sy >= 0.0 && sx <= max_x && sy <= max_y => {
                        let (x0, y0) = (sx.floor(), sy.floor());
                        let (fx, fy) = (sx - x0, sy - y0);
                        let (x0, y0) = (x0 as usize, y0 as usize);
                        let x1 = (x0 + 1).min(sw - 1);
                        let y1 = (y0 + 1).min(sh - 1);
                        let idx = |yy: usize, xx: usize| (yy * sw + xx) as u32;
                        taps.push([
                            (idx(y0, x0), (1.0 - fx) * (1.0 - fy)),
                            (idx(y0, x1), fx * (1.0 - fy)),
                            (idx(y1, x0), (1.0 - fx) * fy),
                            (idx(y1, x1), fx * fy),
                        ]);
                        valid.push(true);
                    }
                    _ => {
                        taps.push([(0, 0.0); 4]);
                        valid.push(false);
                    }
                }
            }
        }
        Ok(Self { src_dims, out_dims, taps, valid })
    }

    pub fn out_dims(&self) -> (usize, usize) {
        self.out_dims
    }

    pub fn src_dims(&self) -> (usize, usize) {
        self.src_dims
    }

    pub fn mask(&self) -> DenseMap<bool> {
        DenseMap::new(self.out_dims.0, self.out_dims.1, self.valid.clone()).expect("plan dims consistent")
    }

    pub fn apply<T: Scalar>(&self, src: &DenseMap<T>) -> Result<DenseMap<T>> {
        if src.dims() != self.src_dims {
            return Err(Error::Shape(format!("warp source {:?}, plan expects {:?}", src.dims(), self.src_dims)));
        }
        let s = src.as_slice();
        let data = self
            .taps
            .iter()
            .zip(&self.valid)
            .map(|(t, &ok)| {
                if !ok {
                    return T::zero();
                }
                // Zero-weight taps are skipped so exact integer shifts stay exact.
                t.iter().filter(|(_, w)| *w != 0.0).map(|&(i, w)| T::lit(w) * s[i as usize]).sum()
            })
            .collect();
        DenseMap::new(self.out_dims.0, self.out_dims.1, data)
    }

    /// Adjoint of [`apply`](Self::apply): scatters output-space gradients
    /// back onto the source grid.
    pub fn apply_transpose<T: Scalar>(&self, grad_out: &DenseMap<T>) -> Result<DenseMap<T>> {
        if grad_out.dims() != self.out_dims {
            return Err(Error::Shape(format!("warp gradient {:?}, plan expects {:?}", grad_out.dims(), self.out_dims)));
        }
        let mut out = DenseMap::zeros(self.src_dims.0, self.src_dims.1);
        let dst = out.as_mut_slice();
        for ((t, &ok), &g) in self.taps.iter().zip(&self.valid).zip(grad_out.as_slice()) {
            if ok && g != T::zero() {
                for &(i, w) in t {
                    if w != 0.0 {
                        dst[i as usize] += T::lit(w) * g;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn apply_image<T: Scalar>(&self, img: &Image<T>) -> Result<Image<T>> {
        let chans = (0..img.channels()).map(|c| self.apply(&img.channel(c))).collect::<Result<Vec<_>>>()?;
        Image::from_channels(&chans)
    }
}

/// Output of [`warp_map`].
#[derive(Debug, Clone)]
pub struct WarpedMap<T> {
    pub map: DenseMap<T>,
    pub mask: DenseMap<bool>,
}

/// Bilinearly resamples `m` under `h` onto an `out_size` grid. Pixels whose
/// preimage falls outside the source are zero and masked invalid.
pub fn warp_map<T: Scalar>(m: &DenseMap<T>, h: &Homography, out_size: (usize, usize)) -> Result<WarpedMap<T>> {
    let plan = WarpPlan::new(h, m.dims(), out_size)?;
    Ok(WarpedMap { map: plan.apply(m)?, mask: plan.mask() })
}

/// Magnitudes for [`sample_random_homography`]. All zero yields the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyConfig {
    /// Maximum relative scale change; the scale factor is log-uniform in
    /// `[1/(1+s), 1+s]`.
    pub scale: f64,
    /// Maximum rotation about the image centre, radians.
    pub rotation: f64,
    /// Maximum translation as a fraction of the image side.
    pub translation: f64,
    /// Maximum independent corner displacement as a fraction of the image side.
    pub perspective: f64,
}

impl Default for HomographyConfig {
    fn default() -> Self {
        Self { scale: 0.15, rotation: 15f64.to_radians(), translation: 0.08, perspective: 0.06 }
    }
}

impl HomographyConfig {
    pub fn zero() -> Self {
        Self { scale: 0.0, rotation: 0.0, translation: 0.0, perspective: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.scale, self.rotation, self.translation, self.perspective];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("homography magnitudes must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, mag: f64) -> f64 {
    if mag > 0.0 {
        rng.gen_range(-mag..=mag)
    } else {
        0.0
    }
}

/// Draws a random homography for an image of `dims = (height, width)`:
/// scale and rotation about the centre, a translation, then independent
/// corner perturbations. Degenerate draws (near-singular, or folding any
/// image corner behind the camera) are rejected and redrawn.
pub fn sample_random_homography<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &HomographyConfig,
    dims: (usize, usize),
) -> Result<Homography> {
    cfg.validate()?;
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let corners = [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]];
    for _ in 0..100 {
        let log_s = symmetric(rng, (1.0 + cfg.scale).ln());
        let theta = symmetric(rng, cfg.rotation);
        let tx = symmetric(rng, cfg.translation) * w;
        let ty = symmetric(rng, cfg.translation) * h;
        let (s, c) = (log_s.exp() * theta.sin(), log_s.exp() * theta.cos());
        // T(c + t) · R(θ) · S(s) · T(-c)
        let affine = Homography::new([
            [c, -s, cx + tx - c * cx + s * cy],
            [s, c, cy + ty - s * cx - c * cy],
            [0.0, 0.0, 1.0],
        ])?;
        let candidate = if cfg.perspective > 0.0 {
            let mut moved = corners;
            for p in moved.iter_mut() {
                p[0] += symmetric(rng, cfg.perspective) * w;
                p[1] += symmetric(rng, cfg.perspective) * h;
            }
            match Homography::from_correspondences(&corners, &moved).and_then(|p| affine.compose(&p)) {
                Ok(hm) => hm,
                Err(_) => continue,
            }
        } else {
            affine
        };
        let m = candidate.matrix();
        let folds = corners.iter().any(|p| m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] <= 1e-3);
        if !folds && candidate.det().abs() > DET_EPS {
            return Ok(candidate);
        }
    }
    Err(Error::InvalidArgument("could not draw a non-degenerate homography".into()))
}

/// Ranges for [`photometric_augment`]. All zero leaves images untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricConfig {
    /// Additive brightness offset drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1-c, 1+c]`, applied about mid-gray.
    pub contrast: f64,
    /// Per-channel gain drawn from `[1-g, 1+g]`.
    pub color: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self { brightness: 0.15, contrast: 0.3, color: 0.1 }
    }
}

impl PhotometricConfig {
    pub fn zero() -> Self {
        Self { brightness: 0.0, contrast: 0.0, color: 0.0 }
    }
}

/// Concrete adjustment applied by [`photometric_augment`]:
/// `out = clip(contrast · gain_c · x + 0.5·(1 − contrast) + brightness)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    pub gains: Vec<f64>,
}

impl PhotometricParams {
    pub fn apply<T: Scalar>(&self, img: &Image<T>) -> Image<T> {
        let mut out = img.clone();
        let offset = T::lit(0.5 * (1.0 - self.contrast) + self.brightness);
        let chans = img.channels();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let g = self.gains.get(i % chans).copied().unwrap_or(1.0);
            let scaled = T::lit(self.contrast * g) * *v + offset;
            *v = scaled.max(T::zero()).min(T::one());
        }
        out
    }
}

pub fn sample_photometric<R: Rng + ?Sized>(rng: &mut R, cfg: &PhotometricConfig, channels: usize) -> PhotometricParams {
    let brightness = symmetric(rng, cfg.brightness);
    let contrast = 1.0 + symmetric(rng, cfg.contrast);
    let gains = (0..channels).map(|_| 1.0 + symmetric(rng, cfg.color)).collect();
    PhotometricParams { brightness, contrast, gains }
}

/// Random brightness / contrast / colour jitter, clipped to `[0, 1]`.
pub fn photometric_augment<T: Scalar, R: Rng + ?Sized>(img: &Image<T>, rng: &mut R, cfg: &PhotometricConfig) -> Image<T> {
    sample_photometric(rng, cfg, img.channels()).apply(img)
}
