//! Dense 2-D maps and multi-channel images.

use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense map of `height × width` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel detector response.
pub type ScoreMap<T> = DenseMap<T>;
/// Per-grid-cell guider weight.
pub type WeightMap<T> = DenseMap<T>;

impl<T: Copy> DenseMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{}x{} map needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// The `height × width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!("crop {height}x{width}+{top}+{left} exceeds {}x{}", self.height, self.width)));
        }
        Ok(Self::from_fn(height, width, |y, x| self.get(top + y, left + x)))
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> DenseMap<U> {
        DenseMap { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl<T: Scalar> DenseMap<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> DenseMap<U> {
        self.map(|v| U::lit(v.as_f64()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Min-max normalized 8-bit grayscale rendering. A constant map renders
    /// as uniform mid-gray, except an all-zero map which renders black.
    pub fn to_gray_image(&self) -> GrayImage {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
        let range = hi - lo;
        let constant_level = if hi == 0.0 && lo == 0.0 { 0u8 } else { 128u8 };
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(y as usize, x as usize).as_f64();
            if !(range > 0.0) {
                Luma([constant_level])
            } else {
                Luma([(((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8])
            }
        })
    }
}

/// Interleaved `height × width × channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_gray(map: &DenseMap<T>) -> Self {
        Self { height: map.height(), width: map.width(), channels: 1, data: map.as_slice().to_vec() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> DenseMap<T> {
        DenseMap::from_fn(self.height, self.width, |y, x| self.get(y, x, c))
    }

    pub fn from_channels(channels: &[DenseMap<T>]) -> Result<Self> {
        let first = channels.first().ok_or_else(|| Error::InvalidArgument("no channels".into()))?;
        let (h, w) = first.dims();
        if channels.iter().any(|c| c.dims() != (h, w)) {
            return Err(Error::Shape("channel dimensions differ".into()));
        }
        let n = channels.len();
        let mut data = vec![T::zero(); h * w * n];
        for (c, map) in channels.iter().enumerate() {
            for (i, &v) in map.as_slice().iter().enumerate() {
                data[i * n + c] = v;
            }
        }
        Ok(Self { height: h, width: w, channels: n, data })
    }

    /// Luma (ITU-R 601) for 3+ channels, channel mean otherwise.
    pub fn to_gray(&self) -> DenseMap<T> {
        if self.channels >= 3 {
            let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
            DenseMap::from_fn(self.height, self.width, |y, x| {
                r * self.get(y, x, 0) + g * self.get(y, x, 1) + b * self.get(y, x, 2)
            })
        } else {
            let inv = T::one() / T::from_usize_lossy(self.channels);
            DenseMap::from_fn(self.height, self.width, |y, x| {
                (0..self.channels).map(|c| self.get(y, x, c)).sum::<T>() * inv
            })
        }
    }

    /// Top-left crop.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Self { height, width, channels: self.channels, data })
    }

    /// Largest top-left crop whose sides are multiples of 8.
    pub fn crop_to_grid(&self) -> Result<Self> {
        let h = self.height / 8 * 8;
        let w = self.width / 8 * 8;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("{}x{} image is smaller than one 8x8 cell", self.height, self.width)));
        }
        self.crop(0, 0, h, w)
    }

    /// Extends the bottom and right edges by replication up to the next
    /// multiples of 8.
    pub fn pad_to_grid(&self) -> Self {
        let h = self.height.div_ceil(8).max(1) * 8;
        let w = self.width.div_ceil(8).max(1) * 8;
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in 0..h {
            let sy = y.min(self.height - 1);
            for x in 0..w {
                let sx = x.min(self.width - 1);
                let start = (sy * self.width + sx) * self.channels;
                data.extend_from_slice(&self.data[start..start + self.channels]);
            }
        }
        Self { height: h, width: w, channels: self.channels, data }
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, data): (usize, Vec<T>) = match img {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
                let g = img.to_luma32f();
                (1, g.into_raw().into_iter().map(|v| T::lit(v as f64)).collect())
            }
            _ => {
                let rgb = img.to_rgb32f();
                (3, rgb.into_raw().into_iter().map(|v| T::lit(v as f64)).collect())
            }
        };
        Self { height: h, width: w, channels, data }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Ok(Self::from_dynamic(&img))
    }

    /// Saves as 8-bit PNG/PPM/etc. depending on the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let to_u8 = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let dynimg = match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| Luma([to_u8(self.get(y as usize, x as usize, 0))]))),
            _ => DynamicImage::ImageRgb8(image::RgbImage::from_fn(w, h, |x, y| {
                let (y, x) = (y as usize, x as usize);
                let c = |i: usize| to_u8(self.get(y, x, i.min(self.channels - 1)));
                image::Rgb([c(0), c(1), c(2)])
            })),
        };
        dynimg.save(path.as_ref())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_map_rejects_wrong_length() {
        assert!(DenseMap::new(2, 3, vec![0.0f64; 5]).is_err());
        let m = DenseMap::new(2, 3, (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(m.get(1, 2), 5.0);
    }

    #[test]
    fn gray_render_of_constant_map_is_uniform() {
        let img = DenseMap::filled(4, 5, 0.3f32).to_gray_image();
        assert!(img.pixels().all(|p| p.0[0] == 128));
        let black = DenseMap::<f32>::zeros(4, 5).to_gray_image();
        assert!(black.pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn channels_round_trip() {
        let a = DenseMap::from_fn(3, 4, |y, x| (y * 4 + x) as f32 / 12.0);
        let b = a.map(|v| 1.0 - v);
        let img = Image::from_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(img.channel(0), a);
        assert_eq!(img.channel(1), b);
        let gray = img.to_gray();
        assert!((gray.get(1, 1) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pad_to_grid_replicates_edges() {
        let img = Image::from_gray(&DenseMap::from_fn(5, 9, |y, x| (y * 9 + x) as f32));
        let p = img.pad_to_grid();
        assert_eq!(p.dims(), (8, 16));
        assert_eq!(p.get(2, 3, 0), img.get(2, 3, 0));
        assert_eq!(p.get(7, 15, 0), img.get(4, 8, 0));
        assert_eq!(p.crop(0, 0, 5, 9).unwrap(), img);
    }

    #[test]
    fn crop_to_grid_keeps_top_left() {
        let img = Image::from_gray(&DenseMap::from_fn(19, 21, |y, x| (y * 21 + x) as f64));
        let c = img.crop_to_grid().unwrap();
        assert_eq!(c.dims(), (16, 16));
        assert_eq!(c.get(3, 5, 0), img.get(3, 5, 0));
        assert!(Image::from_gray(&DenseMap::<f64>::zeros(7, 30)).crop_to_grid().is_err());
    }
}
