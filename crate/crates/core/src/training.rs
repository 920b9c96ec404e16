//! Training pairs and the single-epoch optimization loop.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{photometric_augment, sample_random_homography, Homography, HomographyConfig, PhotometricConfig, WarpPlan};
use crate::grid::CELL;
use crate::losses::{evaluate_objective, AlignedPair, LossOptions, Objective, SignConvention};
use crate::map::{DenseMap, Image};
use crate::model::{Detector, ModelConfig};
use crate::nn::{Adam, Tape, Tensor};
use crate::scalar::Scalar;

pub use crate::synth::{synth_pair, synth_scene, synth_shapes, write_toy_hpatches, SynthPair};

/// Two views of one scene related by a known homography.
#[derive(Debug, Clone)]
pub struct ImagePair<T> {
    pub image_a: Image<T>,
    pub image_b: Image<T>,
    /// Maps image-a pixels to image-b pixels.
    pub homography: Homography,
    /// Pixels of `image_b` covered by the warped `image_a`.
    pub valid_mask_b: DenseMap<bool>,
}

/// Geometry and photometry of generated pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConfig {
    /// Side of the square random crop; `None` keeps the whole image
    /// (trimmed to multiples of 8).
    pub crop: Option<usize>,
    pub homography: HomographyConfig,
    pub photometric: PhotometricConfig,
}

impl PairConfig {
    pub fn zero() -> Self {
        Self { crop: None, homography: HomographyConfig::zero(), photometric: PhotometricConfig::zero() }
    }
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { crop: None, homography: HomographyConfig::default(), photometric: PhotometricConfig::default() }
    }
}

/// Crops `img`, warps it by a random homography and jitters the result.
pub fn make_training_pair<T: Scalar, R: Rng + ?Sized>(img: &Image<T>, rng: &mut R, cfg: &PairConfig) -> Result<ImagePair<T>> {
    let image_a = match cfg.crop {
        Some(side) => {
            if side == 0 || side % CELL != 0 {
                return Err(Error::NotGridAligned { height: side, width: side });
            }
            let (h, w) = img.dims();
            if h < side || w < side {
                return Err(Error::Shape(format!("{h}x{w} image is smaller than the {side}x{side} crop")));
            }
            let top = if h > side { rng.gen_range(0..=h - side) } else { 0 };
            let left = if w > side { rng.gen_range(0..=w - side) } else { 0 };
            img.crop(top, left, side, side)?
        }
        None => img.crop_to_grid()?,
    };
    let dims = image_a.dims();
    let homography = sample_random_homography(rng, &cfg.homography, dims)?;
    let plan = WarpPlan::new(&homography, dims, dims)?;
    let warped = plan.apply_image(&image_a)?;
    let image_b = photometric_augment(&warped, rng, &cfg.photometric);
    Ok(ImagePair { image_a, image_b, homography, valid_mask_b: plan.mask() })
}

/// Everything that controls a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub objective: Objective,
    pub seed: u64,
    pub learning_rate: f64,
    /// Side of the square training crops.
    pub image_size: usize,
    pub homography: HomographyConfig,
    pub photometric: PhotometricConfig,
    pub model: ModelConfig,
    /// Write an intermediate checkpoint every this many iterations (0: never).
    pub checkpoint_every: usize,
    pub signs: SignConvention,
    /// Number of synthetic images generated for `--data synth`.
    pub synth_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            objective: Objective::Gle,
            seed: 0,
            learning_rate: 1e-3,
            image_size: 256,
            homography: HomographyConfig::default(),
            photometric: PhotometricConfig::default(),
            model: ModelConfig::tiny(),
            checkpoint_every: 0,
            signs: SignConvention::Symmetric,
            synth_images: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.image_size == 0 || self.image_size % CELL != 0 {
            return Err(Error::InvalidArgument(format!("image_size {} is not a positive multiple of 8", self.image_size)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        self.model.validate()
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig { crop: Some(self.image_size), homography: self.homography, photometric: self.photometric }
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path.as_ref())?)?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V>
        where
            V::Err: fmt::Display,
        {
            v.parse().map_err(|e| Error::Format(format!("{key}: {e}")))
        }
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "loss" => self.objective = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "lr" | "learning_rate" => self.learning_rate = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "synth_images" => self.synth_images = num(key, value)?,
            "backbone" => self.model = ModelConfig::preset(value)?,
            "hom_scale" => self.homography.scale = num(key, value)?,
            "hom_rotation_deg" => self.homography.rotation = num::<f64>(key, value)?.to_radians(),
            "hom_translation" => self.homography.translation = num(key, value)?,
            "hom_perspective" => self.homography.perspective = num(key, value)?,
            "brightness" => self.photometric.brightness = num(key, value)?,
            "contrast" => self.photometric.contrast = num(key, value)?,
            "color" => self.photometric.color = num(key, value)?,
            "negated_signs" => {
                self.signs = if num::<bool>(key, value)? { SignConvention::Negated } else { SignConvention::Symmetric }
            }
            other => return Err(Error::Format(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iterations={}", self.iterations)?;
        writeln!(f, "loss={}", self.objective)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "lr={}", self.learning_rate)?;
        writeln!(f, "image_size={}", self.image_size)?;
        writeln!(f, "checkpoint_every={}", self.checkpoint_every)?;
        writeln!(f, "synth_images={}", self.synth_images)?;
        writeln!(f, "hom_scale={}", self.homography.scale)?;
        writeln!(f, "hom_rotation_deg={}", self.homography.rotation.to_degrees())?;
        writeln!(f, "hom_translation={}", self.homography.translation)?;
        writeln!(f, "hom_perspective={}", self.homography.perspective)?;
        writeln!(f, "brightness={}", self.photometric.brightness)?;
        writeln!(f, "contrast={}", self.photometric.contrast)?;
        writeln!(f, "color={}", self.photometric.color)?;
        writeln!(f, "negated_signs={}", self.signs == SignConvention::Negated)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    /// `|A|` for the iteration's pair.
    pub correspondences: usize,
    /// `Σ W_x` over set A (GLE only).
    pub weight_mass: f64,
    /// Whether parameters were updated.
    pub stepped: bool,
    /// Seconds since the start of training.
    pub elapsed: f64,
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited JSON, one [`TrainRecord`] per iteration.
    pub log: Option<PathBuf>,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// Synthetic training images for `cfg`.
pub fn synth_dataset<T: Scalar>(cfg: &TrainConfig) -> Result<Vec<Image<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    synth_shapes(&mut rng, cfg.synth_images, cfg.image_size)
}

/// Runs one forward/backward/update step and returns its log record.
pub struct Trainer<T> {
    pub detector: Detector<T>,
    optimizer: Adam<T>,
    cfg: TrainConfig,
    opts: LossOptions,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let detector = Detector::init(&cfg.model, cfg.seed)?;
        let optimizer = Adam::new(&detector.params, cfg.learning_rate);
        let opts = LossOptions { signs: cfg.signs, ..LossOptions::default() };
        Ok(Self { detector, optimizer, cfg: cfg.clone(), opts })
    }

    /// Loss, `|A|` and weight mass of one pair, updating parameters when
    /// set A is nonempty.
    pub fn step(&mut self, pair: &ImagePair<T>) -> Result<(f64, usize, f64, bool)> {
        let det = &self.detector;
        let mut tape_a = Tape::new(&det.params);
        let mut tape_b = Tape::new(&det.params);
        let va = det.record(&mut tape_a, &pair.image_a)?;
        let vb = det.record(&mut tape_b, &pair.image_b)?;
        let as_map = |t: &Tensor<T>| DenseMap::new(t.shape()[1], t.shape()[2], t.data().to_vec());
        let (s1, s2) = (as_map(tape_a.value(va.score))?, as_map(tape_b.value(vb.score))?);
        let (w1, w2) = (as_map(tape_a.value(va.weight))?, as_map(tape_b.value(vb.weight))?);
        let aligned = AlignedPair::new(&s1, &s2, &pair.homography)?;
        let weights = self.cfg.objective.uses_weights().then_some((&w1, &w2));
        let out = evaluate_objective(self.cfg.objective, &aligned, weights, &self.opts, true)?;
        let loss = out.loss.value.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{} loss is {loss}", self.cfg.objective)));
        }
        let n = aligned.set.len();
        let stepped = n > 0 && out.grads.is_some();
        if stepped {
            let g = out.grads.expect("checked above");
            let mut grads = det.params.zero_grads();
            let tensor = |m: DenseMap<T>| Tensor::new(vec![1, m.height(), m.width()], m.into_vec());
            let mut seeds_a = vec![(va.score, tensor(g.score_1)?)];
            let mut seeds_b = vec![(vb.score, tensor(g.score_2)?)];
            if let (Some(gw1), Some(gw2)) = (g.weight_1, g.weight_2) {
                seeds_a.push((va.weight, tensor(gw1)?));
                seeds_b.push((vb.weight, tensor(gw2)?));
            }
            tape_a.backward(seeds_a, &mut grads)?;
            tape_b.backward(seeds_b, &mut grads)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite("parameter gradients".into()));
            }
            drop(tape_a);
            drop(tape_b);
            self.optimizer.step(&mut self.detector.params, &grads);
        }
        Ok((loss, n, out.weight_mass.as_f64(), stepped))
    }
}

/// Trains a detector from scratch on `images` for `cfg.iterations` steps,
/// one randomly drawn image (and one generated pair) per step.
pub fn train<T: Scalar>(images: &[Image<T>], cfg: &TrainConfig, outputs: &TrainOutputs) -> Result<(Detector<T>, Vec<TrainRecord>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one image".into()));
    }
    let mut trainer = Trainer::new(cfg)?;
    let pair_cfg = cfg.pair_config();
    let mut log_file = match &outputs.log {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, it);
        let idx = rng.gen_range(0..images.len());
        let pair = make_training_pair(&images[idx], &mut rng, &pair_cfg)?;
        let (loss, n, mass, stepped) = trainer.step(&pair).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg} at iteration {it} (seed {}, stream {}, image {idx})",
                cfg.seed,
                it + 1
            )),
            other => other,
        })?;
        let rec = TrainRecord { iteration: it, loss, correspondences: n, weight_mass: mass, stepped, elapsed: start.elapsed().as_secs_f64() };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
        }
        log::debug!("iter {it} loss {loss:.5} |A| {n} stepped {stepped}");
        records.push(rec);
        if let Some(path) = &outputs.checkpoint {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations {
                trainer.detector.save(periodic_checkpoint_path(path, it + 1))?;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(path) = &outputs.checkpoint {
        trainer.detector.save(path)?;
    }
    Ok((trainer.detector, records))
}

/// `model.ckpt` → `model.ckpt.iter500`.
pub fn periodic_checkpoint_path(path: &Path, iteration: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".iter{iteration}"));
    PathBuf::from(s)
}

/// Reads every decodable image in `dir` (sorted by file name).
pub fn load_image_dir<T: Scalar>(dir: &Path) -> Result<Vec<Image<T>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "pgm" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    paths.iter().map(Image::load).collect()
}
