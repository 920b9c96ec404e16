//! The detector network: a plain convolutional backbone producing features
//! at strides 1, 2, 4 and 8, a guider head yielding one weight per 8×8 cell,
//! and a UNet-style head yielding the full-resolution score map.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{check_grid_aligned, CELL};
use crate::map::{DenseMap, Image, ScoreMap, WeightMap};
use crate::nn::{Conv2d, InstanceNorm, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Backbone output channels per block (strides 1, 2, 4, 8).
    pub backbone_channels: [usize; 4],
    /// 3×3 convolutions per backbone block.
    pub backbone_convs: [usize; 4],
    /// Head encoder widths per level; decoder widths halve per up-step.
    pub head_channels: [usize; 4],
    pub guider_channels: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            backbone_channels: [16, 32, 64, 128],
            backbone_convs: [1, 1, 1, 1],
            head_channels: [8, 16, 32, 64],
            guider_channels: 64,
        }
    }

    /// Block widths and depths of the first four VGG-16 blocks.
    pub fn vgg16_shape() -> Self {
        Self {
            backbone_channels: [64, 128, 256, 512],
            backbone_convs: [2, 2, 3, 3],
            head_channels: [32, 64, 128, 256],
            guider_channels: 256,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "vgg16" | "vgg16-shape" => Ok(Self::vgg16_shape()),
            other => Err(Error::InvalidArgument(format!("unknown backbone {other:?} (expected tiny or vgg16-shape)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.backbone_channels.iter().chain(&self.backbone_convs).chain(&self.head_channels);
        if all.copied().any(|c| c == 0) || self.guider_channels == 0 {
            return Err(Error::InvalidArgument(format!("model config has a zero width or depth: {self}")));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn parse4(key: &str, s: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{key}: {e}")))?;
    v.try_into().map_err(|v: Vec<usize>| Error::Format(format!("{key}: expected 4 values, got {}", v.len())))
}

/// `key=value` lines, one per field.
impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "backbone_channels={}", join(&self.backbone_channels))?;
        writeln!(f, "backbone_convs={}", join(&self.backbone_convs))?;
        writeln!(f, "head_channels={}", join(&self.head_channels))?;
        writeln!(f, "guider_channels={}", self.guider_channels)
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = Self::tiny();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "backbone_channels" => cfg.backbone_channels = parse4(k, v)?,
                "backbone_convs" => cfg.backbone_convs = parse4(k, v)?,
                "head_channels" => cfg.head_channels = parse4(k, v)?,
                "guider_channels" => cfg.guider_channels = v.parse().map_err(|e| Error::Format(format!("{k}: {e}")))?,
                other => return Err(Error::Format(format!("unknown model key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    conv: Conv2d,
    norm: InstanceNorm,
}

impl ConvBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, k);
        let norm = InstanceNorm::new(store, &format!("{name}.norm"), cout);
        Self { conv, norm }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, &self.conv)?;
        let y = tape.instance_norm(y, &self.norm)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug, Clone)]
struct Layers {
    backbone: Vec<Vec<Conv2d>>,
    down: Vec<ConvBlock>,
    up: Vec<ConvBlock>,
    head_out: Conv2d,
    guider: ConvBlock,
    guider_out: Conv2d,
}

fn build_layers<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Layers {
    let mut backbone = Vec::new();
    let mut cin = 1;
    for (b, (&c, &n)) in cfg.backbone_channels.iter().zip(&cfg.backbone_convs).enumerate() {
        let mut convs = Vec::new();
        for i in 0..n {
            convs.push(Conv2d::new(store, rng, &format!("backbone.block{b}.conv{i}"), cin, c, 3));
            cin = c;
        }
        backbone.push(convs);
    }
    let hc = cfg.head_channels;
    let bc = cfg.backbone_channels;
    let mut down = Vec::new();
    for l in 0..4 {
        let cin = if l == 0 { bc[0] } else { hc[l - 1] + bc[l] };
        down.push(ConvBlock::new(store, rng, &format!("head.down{l}"), cin, hc[l], 3));
    }
    let mut up = Vec::new();
    let mut width = hc[3];
    for l in (0..3).rev() {
        let out = (width / 2).max(1);
        up.push(ConvBlock::new(store, rng, &format!("head.up{l}"), width + hc[l], out, 3));
        width = out;
    }
    let head_out = Conv2d::new(store, rng, "head.out", width, 1, 1);
    let guider = ConvBlock::new(store, rng, "guider.block", bc[3], cfg.guider_channels, 3);
    let guider_out = Conv2d::new(store, rng, "guider.out", cfg.guider_channels, 1, 1);
    Layers { backbone, down, up, head_out, guider, guider_out }
}

/// Tape handles of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Backbone features at strides 1, 2, 4, 8.
    pub features: [Var; 4],
    /// `1 × H × W` score map.
    pub score: Var,
    /// `1 × H/8 × W/8` weight map.
    pub weight: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput<T> {
    pub score_map: ScoreMap<T>,
    pub weight_map: WeightMap<T>,
}

/// Network weights together with their architecture.
#[derive(Debug, Clone)]
pub struct Detector<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Grayscale `1 × H × W` input tensor.
pub fn image_tensor<T: Scalar>(img: &Image<T>) -> Result<Tensor<T>> {
    let (h, w) = img.dims();
    check_grid_aligned(h, w)?;
    Tensor::new(vec![1, h, w], img.to_gray().into_vec())
}

fn to_map<T: Scalar>(t: &Tensor<T>) -> Result<DenseMap<T>> {
    let s = t.shape();
    DenseMap::new(s[1], s[2], t.data().to_vec())
}

impl<T: Scalar> Detector<T> {
    /// Deterministic Kaiming-uniform initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = build_layers(cfg, &mut params, &mut rng);
        Ok(Self { config: cfg.clone(), params, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Records the forward pass of `img` on `tape`.
    pub fn record<'p>(&'p self, tape: &mut Tape<'p, T>, img: &Image<T>) -> Result<ForwardVars> {
        let x = tape.input(image_tensor(img)?);
        let mut h = x;
        let mut feats = Vec::with_capacity(4);
        for (b, convs) in self.layers.backbone.iter().enumerate() {
            if b > 0 {
                h = tape.max_pool2(h)?;
            }
            for conv in convs {
                let y = tape.conv2d(h, conv)?;
                h = tape.relu(y);
            }
            feats.push(h);
        }
        let mut enc = Vec::with_capacity(4);
        for (l, block) in self.layers.down.iter().enumerate() {
            let inp = if l == 0 {
                feats[0]
            } else {
                let p = tape.max_pool2(enc[l - 1])?;
                tape.concat(p, feats[l])?
            };
            enc.push(block.apply(tape, inp)?);
        }
        let mut u = enc[3];
        for (block, l) in self.layers.up.iter().zip((0..3).rev()) {
            let up = tape.upsample2(u);
            let cat = tape.concat(up, enc[l])?;
            u = block.apply(tape, cat)?;
        }
        let s = tape.conv2d(u, &self.layers.head_out)?;
        let score = tape.relu(s);
        let g = self.layers.guider.apply(tape, feats[3])?;
        let g = tape.conv2d(g, &self.layers.guider_out)?;
        let weight = tape.sigmoid(g);
        Ok(ForwardVars { features: [feats[0], feats[1], feats[2], feats[3]], score, weight })
    }

    /// Score and weight maps of `img`, whose sides must be multiples of 8.
    pub fn forward(&self, img: &Image<T>) -> Result<DetectorOutput<T>> {
        let mut tape = Tape::inference(&self.params);
        let vars = self.record(&mut tape, img)?;
        Ok(DetectorOutput { score_map: to_map(tape.value(vars.score))?, weight_map: to_map(tape.value(vars.weight))? })
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        let mut out = Detector::<U>::init(&self.config, 0).expect("config validated at construction");
        for (dst, src) in out.params.iter_mut().zip(self.params.iter()) {
            for (d, s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }

    /// Writes a checkpoint (parameters stored as little-endian `f32`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_bytes(&mut buf, self.config.to_string().as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            write_bytes(&mut buf, p.name.as_bytes());
            buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint, checking every tensor name and shape against the
    /// architecture described by its embedded config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a detector checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let cfg: ModelConfig = cfg_text.parse()?;
        let mut det = Self::init(&cfg, 0)?;
        let n = r.u32()? as usize;
        if n != det.params.len() {
            return Err(Error::Format(format!("checkpoint has {n} tensors, config expects {}", det.params.len())));
        }
        for p in det.params.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| Error::Format(e.to_string()))?;
            if name != p.name {
                return Err(Error::Format(format!("expected tensor {}, found {name}", p.name)));
            }
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            if shape != p.value.shape() {
                return Err(Error::Format(format!("{name}: shape {shape:?}, config expects {:?}", p.value.shape())));
            }
            for v in p.value.data_mut() {
                let b = r.take(4)?;
                let x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                if !x.is_finite() {
                    return Err(Error::Format(format!("{name}: non-finite value")));
                }
                *v = T::lit(x as f64);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(det)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GLEOCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn write_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Grid dimensions `(H/8, W/8)` of an `H × W` input.
pub fn weight_dims(height: usize, width: usize) -> (usize, usize) {
    (height / CELL, width / CELL)
}
