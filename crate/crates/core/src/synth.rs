//! Procedural training and test imagery: polygons, checkerboards, line
//! crossings and blobs over noisy gradients.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{sample_photometric, sample_random_homography, Homography, HomographyConfig, PhotometricConfig, WarpPlan};
use crate::map::{DenseMap, Image};
use crate::scalar::Scalar;

/// Supersampling offsets for anti-aliased shape edges.
const SUBPIXELS: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Blends `value` with weight `coverage(x, y)` over the bounding box.
    fn paint(&mut self, bbox: (f64, f64, f64, f64), value: f64, coverage: impl Fn(f64, f64) -> f64) {
        let (x0, y0, x1, y1) = bbox;
        let xa = x0.floor().max(0.0) as usize;
        let ya = y0.floor().max(0.0) as usize;
        let xb = (x1.ceil().max(0.0) as usize).min(self.w.saturating_sub(1));
        let yb = (y1.ceil().max(0.0) as usize).min(self.h.saturating_sub(1));
        for y in ya..=yb {
            for x in xa..=xb {
                let a = coverage(x as f64, y as f64);
                if a > 0.0 {
                    let p = &mut self.px[y * self.w + x];
                    *p = (1.0 - a) * *p + a * value;
                }
            }
        }
    }
}

fn supersample(f: impl Fn(f64, f64) -> bool) -> impl Fn(f64, f64) -> f64 {
    move |x, y| SUBPIXELS.iter().filter(|(dx, dy)| f(x + dx, y + dy)).count() as f64 / SUBPIXELS.len() as f64
}

fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// An intensity well separated from `bg`.
fn contrasting<R: Rng + ?Sized>(rng: &mut R, bg: f64) -> f64 {
    let delta = rng.gen_range(0.25..0.6);
    if (bg + delta <= 1.0 && rng.gen_bool(0.5)) || bg - delta < 0.0 {
        (bg + delta).min(1.0)
    } else {
        bg - delta
    }
}

fn draw_polygon<R: Rng + ?Sized>(c: &mut Canvas, rng: &mut R, bg: f64) {
    let scale = c.h.min(c.w) as f64;
    let (cx, cy) = (rng.gen_range(0.0..c.w as f64), rng.gen_range(0.0..c.h as f64));
    let r = rng.gen_range(0.06..0.2) * scale;
    let n = rng.gen_range(3..=6);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    let poly: Vec<(f64, f64)> = angles
        .iter()
        .map(|&a| {
            let rr = r * rng.gen_range(0.5..1.0);
            (cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect();
    let value = contrasting(rng, bg);
    c.paint((cx - r, cy - r, cx + r, cy + r), value, supersample(|x, y| inside_polygon(&poly, x, y)));
}

fn draw_checkerboard<R: Rng + ?Sized>(c: &mut Canvas, rng: &mut R, bg: f64) {
    let (cx, cy) = (rng.gen_range(0.0..c.w as f64), rng.gen_range(0.0..c.h as f64));
    let cell = rng.gen_range(6.0..14.0);
    let half = cell * rng.gen_range(1..=3) as f64;
    let theta = rng.gen_range(0.0..PI / 2.0);
    let (ct, st) = (theta.cos(), theta.sin());
    let (dark, light) = (contrasting(rng, 0.9).min(bg), contrasting(rng, 0.1).max(bg));
    let reach = half * 1.5;
    let bbox = (cx - reach, cy - reach, cx + reach, cy + reach);
    let square = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (ct * dx + st * dy, -st * dx + ct * dy);
        (u.abs() <= half && v.abs() <= half).then(|| ((u / cell).floor() + (v / cell).floor()) as i64 % 2 == 0)
    };
    c.paint(bbox, dark, supersample(|x, y| square(x, y).is_some()));
    c.paint(bbox, light, supersample(|x, y| square(x, y) == Some(true)));
}

fn draw_lines<R: Rng + ?Sized>(c: &mut Canvas, rng: &mut R, bg: f64) {
    let scale = c.h.min(c.w) as f64;
    let (cx, cy) = (rng.gen_range(0.0..c.w as f64), rng.gen_range(0.0..c.h as f64));
    let value = contrasting(rng, bg);
    let n = rng.gen_range(2..=3);
    let base = rng.gen_range(0.0..PI);
    for i in 0..n {
        let a = base + i as f64 * PI / n as f64 + rng.gen_range(-0.2..0.2);
        let (l1, l2) = (rng.gen_range(0.05..0.25) * scale, rng.gen_range(0.05..0.25) * scale);
        let p0 = (cx - l1 * a.cos(), cy - l1 * a.sin());
        let p1 = (cx + l2 * a.cos(), cy + l2 * a.sin());
        let t = rng.gen_range(0.8..1.6);
        let bbox = (p0.0.min(p1.0) - t, p0.1.min(p1.1) - t, p0.0.max(p1.0) + t, p0.1.max(p1.1) + t);
        c.paint(bbox, value, supersample(|x, y| segment_distance((x, y), p0, p1) <= t));
    }
}

fn draw_blob<R: Rng + ?Sized>(c: &mut Canvas, rng: &mut R, bg: f64) {
    let (cx, cy) = (rng.gen_range(0.0..c.w as f64), rng.gen_range(0.0..c.h as f64));
    let (sx, sy): (f64, f64) = (rng.gen_range(3.0..10.0), rng.gen_range(3.0..10.0));
    let theta = rng.gen_range(0.0..PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let value = contrasting(rng, bg);
    let reach = 3.0 * sx.max(sy);
    c.paint((cx - reach, cy - reach, cx + reach, cy + reach), value, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (ct * dx + st * dy, -st * dx + ct * dy);
        (-0.5 * ((u / sx).powi(2) + (v / sy).powi(2))).exp()
    });
}

/// Renders one `height × width` grayscale scene.
pub fn synth_scene<T: Scalar, R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Image<T> {
    let bg = rng.gen_range(0.25..0.75);
    let (gx, gy) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let noise = rng.gen_range(0.005..0.03);
    let px = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64 / height as f64, (i % width) as f64 / width as f64);
            bg + gx * (x - 0.5) + gy * (y - 0.5)
        })
        .collect();
    let mut canvas = Canvas { h: height, w: width, px };
    let area = (height * width) as f64 / (128.0 * 128.0);
    let n_shapes = ((area * rng.gen_range(5.0..9.0)).round() as usize).max(2);
    draw_polygon(&mut canvas, rng, bg);
    for _ in 1..n_shapes {
        match rng.gen_range(0..4) {
            0 => draw_polygon(&mut canvas, rng, bg),
            1 => draw_checkerboard(&mut canvas, rng, bg),
            2 => draw_lines(&mut canvas, rng, bg),
            _ => draw_blob(&mut canvas, rng, bg),
        }
    }
    let data = canvas.px.iter().map(|&v| T::lit((v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0))).collect();
    Image::new(height, width, 1, data).expect("sized above")
}

/// `n` square synthetic images of side `size` (a multiple of 8).
pub fn synth_shapes<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, size: usize) -> Result<Vec<Image<T>>> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::NotGridAligned { height: size, width: size });
    }
    Ok((0..n).map(|_| synth_scene(rng, size, size)).collect())
}

/// Image `b` of a synthetic pair rendered from a larger scene, so the warp
/// leaves no empty borders.
#[derive(Debug, Clone)]
pub struct SynthPair<T> {
    pub image_a: Image<T>,
    pub image_b: Image<T>,
    pub homography: Homography,
}

/// Renders a `size × size` view of a scene and a second view related by a
/// random homography, with photometric jitter on the second view.
pub fn synth_pair<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    hcfg: &HomographyConfig,
    pcfg: &PhotometricConfig,
) -> Result<SynthPair<T>> {
    let margin = size / 2;
    let big: Image<T> = synth_scene(rng, size + 2 * margin, size + 2 * margin);
    let image_a = big.crop(margin, margin, size, size)?;
    let homography = sample_random_homography(rng, hcfg, (size, size))?;
    let m = margin as f64;
    let from_big = homography.compose(&Homography::translation(-m, -m))?;
    let plan = WarpPlan::new(&from_big, big.dims(), (size, size))?;
    let warped = plan.apply_image(&big)?;
    let image_b = sample_photometric(rng, pcfg, warped.channels()).apply(&warped);
    Ok(SynthPair { image_a, image_b, homography })
}

/// Writes a toy dataset in HPatches layout: `i_*` sequences vary only
/// photometrically (identity homographies), `v_*` sequences add random
/// homographies.
pub fn write_toy_hpatches<R: Rng + ?Sized>(
    rng: &mut R,
    dir: &Path,
    sequences_per_kind: usize,
    size: usize,
) -> Result<()> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::NotGridAligned { height: size, width: size });
    }
    for kind in ["i", "v"] {
        for s in 0..sequences_per_kind {
            let seq = dir.join(format!("{kind}_synth{s:02}"));
            std::fs::create_dir_all(&seq)?;
            let margin = size / 2;
            let big: Image<f32> = synth_scene(rng, size + 2 * margin, size + 2 * margin);
            big.crop(margin, margin, size, size)?.save(seq.join("1.png"))?;
            let m = margin as f64;
            for k in 2..=6 {
                let h = if kind == "i" {
                    Homography::identity()
                } else {
                    sample_random_homography(rng, &HomographyConfig::default(), (size, size))?
                };
                let pcfg = if kind == "i" { PhotometricConfig { brightness: 0.2, contrast: 0.4, color: 0.0 } } else { PhotometricConfig::zero() };
                let plan = WarpPlan::new(&h.compose(&Homography::translation(-m, -m))?, big.dims(), (size, size))?;
                let img = sample_photometric(rng, &pcfg, 1).apply(&plan.apply_image(&big)?);
                img.save(seq.join(format!("{k}.png")))?;
                h.save(seq.join(format!("H_1_{k}")))?;
            }
        }
    }
    Ok(())
}

/// Mean absolute intensity difference between horizontally adjacent pixels.
pub fn texture_energy<T: Scalar>(m: &DenseMap<T>) -> f64 {
    let mut s = 0.0;
    for y in 0..m.height() {
        for x in 1..m.width() {
            s += (m.get(y, x).as_f64() - m.get(y, x - 1).as_f64()).abs();
        }
    }
    s / (m.height() * m.width().saturating_sub(1)).max(1) as f64
}
