//! Minimal reverse-mode autodiff for single-image convolutional networks.
//!
//! Activations are `C × H × W` tensors (batch size one). A [`Tape`] records
//! the forward pass; [`Tape::backward`] replays it in reverse, seeded with
//! output gradients, and accumulates parameter gradients into [`ParamGrads`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(C, H, W)` of a rank-3 activation.
    fn chw(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 3);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter whose name starts with
    /// `prefix` (in store order).
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        ParamGrads { grads: self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()))
    }

    fn slot(&mut self, id: ParamId) -> &mut [T] {
        self.grads[id.0].data_mut()
    }
}

/// 2-D convolution with square kernel, symmetric zero padding and bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<T> = (0..out_channels * fan_in).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![out_channels, in_channels, kernel, kernel], w).expect("sized above"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel, stride: 1, padding: kernel / 2 }
    }
}

/// Per-channel instance normalization with learned affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::new(vec![channels], vec![T::one(); channels]).expect("sized"));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, channels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Conv { x: Var, layer: Conv2d, cols: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    Norm { x: Var, layer: InstanceNorm, xhat: Vec<T>, inv_std: Vec<T> },
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample { x: Var },
    Concat { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> (Vec<T>, usize, usize) {
    let (c, h, w) = x.chw();
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let n = oh * ow;
    let mut col = vec![T::zero(); c * k * k * n];
    let src = x.data();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // ix = ox + kx - pad must lie in [0, w).
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(ow);
                        if lo < hi {
                            let start = lo + kx - pad;
                            out_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

fn col2im<T: Scalar>(col: &[T], shape: (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Vec<T> {
    let (c, h, w) = shape;
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let n = oh * ow;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Records a forward pass over parameters borrowed from a [`ParamStore`].
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    /// When false, buffers needed only for backward are not kept.
    record: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), record: true }
    }

    /// A tape for inference only; [`backward`](Self::backward) is unavailable.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), record: false }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn conv2d(&mut self, x: Var, layer: &Conv2d) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 || xv.shape()[0] != layer.in_channels {
            return Err(Error::Shape(format!("conv expects {} channels, got {:?}", layer.in_channels, xv.shape())));
        }
        let (col, oh, ow) = im2col(xv, layer.kernel, layer.stride, layer.padding);
        let n = oh * ow;
        let kk = layer.in_channels * layer.kernel * layer.kernel;
        let w = self.params.get(layer.weight).data();
        let b = self.params.get(layer.bias).data();
        let mut out = vec![T::zero(); layer.out_channels * n];
        for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
        T::gemm(layer.out_channels, kk, n, T::one(), w, (kk as isize, 1), &col, (n as isize, 1), T::one(), &mut out, (n as isize, 1));
        let value = Tensor::new(vec![layer.out_channels, oh, ow], out)?;
        let cols = if self.record { col } else { Vec::new() };
        Ok(self.push(value, Op::Conv { x, layer: *layer, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor { shape: xv.shape().to_vec(), data };
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let value = Tensor { shape: xv.shape().to_vec(), data };
        self.push(value, Op::Sigmoid(x))
    }

    pub fn instance_norm(&mut self, x: Var, layer: &InstanceNorm) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        if c != layer.channels {
            return Err(Error::Shape(format!("norm expects {} channels, got {c}", layer.channels)));
        }
        let n = h * w;
        let gamma = self.params.get(layer.gamma).data();
        let beta = self.params.get(layer.beta).data();
        let inv_n = T::one() / T::from_usize_lossy(n);
        let mut out = vec![T::zero(); c * n];
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let src = &xv.data()[ch * n..(ch + 1) * n];
            let mean = src.iter().copied().sum::<T>() * inv_n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let is = T::one() / (var + T::lit(InstanceNorm::EPS)).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let xh = (src[i] - mean) * is;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = gamma[ch] * xh + beta[ch];
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        let (xhat, inv_std) = if self.record { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(value, Op::Norm { x, layer: *layer, xhat, inv_std }))
    }

    /// 2×2 max pooling with stride 2 (sides must be even).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("max pool needs even sides, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        let src = xv.data();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    out.push(src[best]);
                    arg.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, arg }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let (oh, ow) = (2 * h, 2 * w);
        let src = xv.data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let srow = &src[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                let drow = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / 2];
                }
            }
        }
        let value = Tensor { shape: vec![c, oh, ow], data: out };
        self.push(value, Op::Upsample { x })
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape()[1..] != bv.shape()[1..] {
            return Err(Error::Shape(format!("concat {:?} with {:?}", av.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let shape = vec![av.shape()[0] + bv.shape()[0], av.shape()[1], av.shape()[2]];
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Propagates `seeds` (gradients of the loss w.r.t. recorded values)
    /// back through the tape, adding parameter gradients to `grads`.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>, grads: &mut ParamGrads<T>) -> Result<()> {
        if !self.record {
            return Err(Error::InvalidArgument("backward on an inference tape".into()));
        }
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, t) in seeds {
            if t.shape() != self.value(v).shape() {
                return Err(Error::Shape(format!("seed {:?} for value {:?}", t.shape(), self.value(v).shape())));
            }
            accumulate(&mut g[v.0], t.into_data());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, layer, cols } => {
                    let (oc, oh, ow) = node.value.chw();
                    let n = oh * ow;
                    let kk = layer.in_channels * layer.kernel * layer.kernel;
                    {
                        let db = grads.slot(layer.bias);
                        for (co, row) in dy.chunks_exact(n).enumerate() {
                            db[co] += row.iter().copied().sum::<T>();
                        }
                    }
                    // dW += dY · colᵀ
                    T::gemm(oc, n, kk, T::one(), &dy, (n as isize, 1), cols, (1, n as isize), T::one(), grads.slot(layer.weight), (kk as isize, 1));
                    if matches!(self.nodes[x.0].op, Op::Input) {
                        continue;
                    }
                    // dcol = Wᵀ · dY
                    let w = self.params.get(layer.weight).data();
                    let mut dcol = vec![T::zero(); kk * n];
                    T::gemm(kk, oc, n, T::one(), w, (1, kk as isize), &dy, (n as isize, 1), T::zero(), &mut dcol, (n as isize, 1));
                    let xs = self.nodes[x.0].value.chw();
                    let dx = col2im(&dcol, xs, layer.kernel, layer.stride, layer.padding);
                    accumulate(&mut g[x.0], dx);
                }
                Op::Relu(x) => {
                    let dx = dy.iter().zip(node.value.data()).map(|(&d, &y)| if y > T::zero() { d } else { T::zero() }).collect();
                    accumulate(&mut g[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let dx = dy.iter().zip(node.value.data()).map(|(&d, &y)| d * y * (T::one() - y)).collect();
                    accumulate(&mut g[x.0], dx);
                }
                Op::Norm { x, layer, xhat, inv_std } => {
                    let (c, h, w) = node.value.chw();
                    let n = h * w;
                    let nf = T::from_usize_lossy(n);
                    let gamma = self.params.get(layer.gamma).data().to_vec();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); c * n];
                    for ch in 0..c {
                        let dyc = &dy[ch * n..(ch + 1) * n];
                        let xh = &xhat[ch * n..(ch + 1) * n];
                        let sum_dy: T = dyc.iter().copied().sum();
                        let sum_dy_xh: T = dyc.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        dgamma[ch] = sum_dy_xh;
                        dbeta[ch] = sum_dy;
                        let k = gamma[ch] * inv_std[ch] / nf;
                        for i in 0..n {
                            dx[ch * n + i] = k * (nf * dyc[i] - sum_dy - xh[i] * sum_dy_xh);
                        }
                    }
                    for (d, v) in grads.slot(layer.gamma).iter_mut().zip(dgamma) {
                        *d += v;
                    }
                    for (d, v) in grads.slot(layer.beta).iter_mut().zip(dbeta) {
                        *d += v;
                    }
                    accumulate(&mut g[x.0], dx);
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                    for (&a, &d) in arg.iter().zip(&dy) {
                        dx[a as usize] += d;
                    }
                    accumulate(&mut g[x.0], dx);
                }
                Op::Upsample { x } => {
                    let (c, h, w) = self.nodes[x.0].value.chw();
                    let ow = 2 * w;
                    let mut dx = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for oy in 0..2 * h {
                            for ox in 0..ow {
                                dx[(ch * h + oy / 2) * w + ox / 2] += dy[(ch * 2 * h + oy) * ow + ox];
                            }
                        }
                    }
                    accumulate(&mut g[x.0], dx);
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].value.len();
                    accumulate(&mut g[a.0], dy[..na].to_vec());
                    accumulate(&mut g[b.0], dy[na..].to_vec());
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, v: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(v) {
                *e += x;
            }
        }
        None => *slot = Some(v),
    }
}


/// Adam optimizer state for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. Parameters whose gradient history is all zero are left
    /// bit-for-bit unchanged.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((p, g), m), v) in params.params.iter_mut().zip(&grads.grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.value.data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                if *m != T::zero() {
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}
