//! Small fully convolutional Q-network with hand-written backpropagation.
//!
//! Per input view there are three towers (colour, depth, goal mask; each fed
//! three channels). A tower starts with `downsample` plain 3x3 blocks (the
//! first one always present, stride 2 while downsampling) followed by
//! densely connected stride-1 blocks whose outputs are concatenated. The
//! three tower outputs are concatenated and passed through
//! BN → ReLU → 1x1 conv → BN → ReLU → 1x1 conv, then bilinearly upsampled
//! back to the input resolution. Everything is `f64`.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::rng::{normal, seeded};

const BN_EPS: f64 = 1e-5;

/// NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn sample(&self, i: usize) -> &[f64] {
        let s = self.c * self.plane();
        &self.data[i * s..(i + 1) * s]
    }

    fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.c * self.plane();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

/// Concatenates along channels.
fn concat(parts: &[&Tensor]) -> Tensor {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|t| t.c).sum();
    let mut out = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        let dst = out.sample_mut(i);
        let mut off = 0;
        for p in parts {
            let src = p.sample(i);
            dst[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    out
}

/// Inverse of [`concat`] for gradients.
fn split(t: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let mut outs: Vec<Tensor> = channels.iter().map(|&c| Tensor::zeros(t.n, c, t.h, t.w)).collect();
    let plane = t.plane();
    for i in 0..t.n {
        let src = t.sample(i);
        let mut off = 0;
        for o in outs.iter_mut() {
            let len = o.c * plane;
            o.sample_mut(i).copy_from_slice(&src[off..off + len]);
            off += len;
        }
    }
    outs
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

/// Trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// `C[m,n] (+)= A[m,k] B[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices holding at least the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    weight: Param,
    bias: Param,
}

struct ConvCache {
    /// Per-sample column matrices `[in_c*k*k, oh*ow]` (the input itself for 1x1).
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv {
    fn new(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self {
            in_c,
            out_c,
            k,
            stride,
            weight: Param::new((0..out_c * in_c * k * k).map(|_| normal(rng) * std).collect()),
            bias: Param::new(vec![0.0; out_c]),
        }
    }

    fn out_size(&self, s: usize) -> usize {
        let pad = self.k / 2;
        (s + 2 * pad - self.k) / self.stride + 1
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, cols: &mut [f64]) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let pad = (self.k / 2) as isize;
        let p = oh * ow;
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let pad = (self.k / 2) as isize;
        let p = oh * ow;
        for c in 0..self.in_c {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let p = oh * ow;
        let kk = self.in_c * self.k * self.k;
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        let pointwise = self.k == 1 && self.stride == 1;
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; x.n * kk * p] };
        for i in 0..x.n {
            let col: &[f64] = if pointwise {
                x.sample(i)
            } else {
                let c = &mut cols[i * kk * p..(i + 1) * kk * p];
                self.im2col(x.sample(i), x.h, x.w, c);
                c
            };
            let dst = out.sample_mut(i);
            for (o, b) in self.bias.value.iter().enumerate() {
                dst[o * p..(o + 1) * p].fill(*b);
            }
            gemm(self.out_c, kk, p, &self.weight.value, kk as isize, 1, col, p as isize, 1, 1.0, dst);
        }
        if pointwise {
            cols = x.data.clone();
        }
        (
            out,
            ConvCache {
                cols,
                in_h: x.h,
                in_w: x.w,
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    fn backward(&mut self, dy: &Tensor, cache: &ConvCache, need_dx: bool) -> Option<Tensor> {
        let p = dy.plane();
        let kk = self.in_c * self.k * self.k;
        let mut dx = need_dx.then(|| Tensor::zeros(dy.n, self.in_c, cache.in_h, cache.in_w));
        let mut dcols = vec![0.0; kk * p];
        for i in 0..dy.n {
            let g = dy.sample(i);
            let col = &cache.cols[i * kk * p..(i + 1) * kk * p];
            for (o, db) in self.bias.grad.iter_mut().enumerate() {
                *db += g[o * p..(o + 1) * p].iter().sum::<f64>();
            }
            // dW[o, j] += sum_p g[o, p] * col[j, p]
            gemm(self.out_c, p, kk, g, p as isize, 1, col, 1, p as isize, 1.0, &mut self.weight.grad);
            if let Some(dx) = dx.as_mut() {
                // dcols[j, p] = sum_o W[o, j] g[o, p]
                gemm(kk, self.out_c, p, &self.weight.value, 1, kk as isize, g, p as isize, 1, 0.0, &mut dcols);
                if self.k == 1 && self.stride == 1 {
                    dx.sample_mut(i).copy_from_slice(&dcols);
                } else {
                    self.col2im(&dcols, cache.in_h, cache.in_w, dx.sample_mut(i));
                }
            }
        }
        dx
    }

    fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: Param,
    beta: Param,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    batch_var: Vec<f64>,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; c]),
            beta: Param::new(vec![0.0; c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> (Tensor, BnCache) {
        let (n, c, plane) = (x.n, x.c, x.plane());
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut unbiased = vec![0.0; c];
        if train {
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += x.data[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let m = s / count;
                let mut q = 0.0;
                for i in 0..n {
                    q += x.data[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = q / count;
                unbiased[ch] = if count > 1.0 { q / (count - 1.0) } else { var[ch] };
            }
        } else {
            mean.copy_from_slice(&self.running_mean);
            var.copy_from_slice(&self.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = Tensor::zeros(n, c, x.h, x.w);
        let mut xhat = if train { vec![0.0; x.data.len()] } else { Vec::new() };
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for j in base..base + plane {
                    let xh = (x.data[j] - mean[ch]) * inv_std[ch];
                    if train {
                        xhat[j] = xh;
                    }
                    out.data[j] = g * xh + b;
                }
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: unbiased,
            },
        )
    }

    /// Train-mode backward (batch statistics).
    fn backward(&mut self, dy: &Tensor, cache: &BnCache) -> Tensor {
        let (n, c, plane) = (dy.n, dy.c, dy.plane());
        let count = (n * plane) as f64;
        let mut dx = Tensor::zeros(n, c, dy.h, dy.w);
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    sum_dy += dy.data[j];
                    sum_dy_xhat += dy.data[j] * cache.xhat[j];
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let scale = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    dx.data[j] = scale * (count * dy.data[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    fn update_running(&mut self, cache: &BnCache, momentum: f64) {
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] = (1.0 - momentum) * self.running_mean[ch] + momentum * cache.batch_mean[ch];
            self.running_var[ch] = (1.0 - momentum) * self.running_var[ch] + momentum * cache.batch_var[ch];
        }
    }

    fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    fn params(&self) -> [&Param; 2] {
        [&self.gamma, &self.beta]
    }
}

fn relu(mut x: Tensor) -> Tensor {
    for v in x.data.iter_mut() {
        *v = v.max(0.0);
    }
    x
}

/// Zeroes gradient where the ReLU output was not positive.
fn relu_backward(mut dy: Tensor, y: &Tensor) -> Tensor {
    for (d, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dy
}

/// Conv → BN → ReLU.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv: Conv,
    bn: BatchNorm,
}

struct BlockCache {
    conv: ConvCache,
    bn: BnCache,
    out: Tensor,
}

impl Block {
    fn forward(&self, x: &Tensor, train: bool) -> (Tensor, BlockCache) {
        let (z, conv) = self.conv.forward(x);
        let (z, bn) = self.bn.forward(&z, train);
        let out = relu(z);
        (out.clone(), BlockCache { conv, bn, out })
    }

    fn backward(&mut self, dy: Tensor, cache: &BlockCache, need_dx: bool) -> Option<Tensor> {
        let d = relu_backward(dy, &cache.out);
        let d = self.bn.backward(&d, &cache.bn);
        self.conv.backward(&d, &cache.conv, need_dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Tower {
    plain: Vec<Block>,
    dense: Vec<Block>,
}

struct TowerCache {
    plain: Vec<BlockCache>,
    dense: Vec<BlockCache>,
    /// Channel counts of the concatenated features.
    widths: Vec<usize>,
}

impl Tower {
    fn new(arch: &Architecture, rng: &mut impl Rng) -> Self {
        let n_plain = arch.downsample.max(1);
        let width = arch.tower_width;
        let plain = (0..n_plain)
            .map(|i| Block {
                conv: Conv::new(if i == 0 { 3 } else { width }, width, 3, if i < arch.downsample { 2 } else { 1 }, rng),
                bn: BatchNorm::new(width),
            })
            .collect();
        let dense = (0..arch.tower_depth - n_plain)
            .map(|j| Block {
                conv: Conv::new(width * (j + 1), width, 3, 1, rng),
                bn: BatchNorm::new(width),
            })
            .collect();
        Self { plain, dense }
    }

    fn forward(&self, x: &Tensor, train: bool) -> (Tensor, TowerCache) {
        let mut h = x.clone();
        let mut plain = Vec::with_capacity(self.plain.len());
        for b in &self.plain {
            let (o, c) = b.forward(&h, train);
            h = o;
            plain.push(c);
        }
        let mut feats = vec![h];
        let mut dense = Vec::with_capacity(self.dense.len());
        for b in &self.dense {
            let refs: Vec<&Tensor> = feats.iter().collect();
            let inp = concat(&refs);
            let (o, c) = b.forward(&inp, train);
            feats.push(o);
            dense.push(c);
        }
        let widths = feats.iter().map(|f| f.c).collect();
        let refs: Vec<&Tensor> = feats.iter().collect();
        (concat(&refs), TowerCache { plain, dense, widths })
    }

    fn backward(&mut self, dy: &Tensor, cache: &TowerCache) {
        let mut grads = split(dy, &cache.widths);
        for j in (0..self.dense.len()).rev() {
            let g = grads[j + 1].clone();
            let dx = self.dense[j].backward(g, &cache.dense[j], true).expect("dense input gradient");
            let parts = split(&dx, &cache.widths[..=j]);
            for (acc, p) in grads.iter_mut().zip(parts.iter()) {
                add_into(acc, p);
            }
        }
        let mut g = grads.swap_remove(0);
        for i in (0..self.plain.len()).rev() {
            match self.plain[i].backward(g, &cache.plain[i], i > 0) {
                Some(d) => g = d,
                None => break,
            }
        }
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.plain.iter_mut().chain(self.dense.iter_mut())
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.plain.iter().chain(self.dense.iter())
    }

    fn out_channels(&self, width: usize) -> usize {
        width * (self.dense.len() + 1)
    }
}

/// Bilinear upsampling by an integer factor, half-pixel aligned, edge clamped.
fn upsample_weights(out: usize, factor: usize, input: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample(x: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return x.clone();
    }
    let (oh, ow) = (x.h * factor, x.w * factor);
    let wy = upsample_weights(oh, factor, x.h);
    let wx = upsample_weights(ow, factor, x.w);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut out.data[nc * oh * ow..(nc + 1) * oh * ow];
        for (y, &(y0, y1, ly)) in wy.iter().enumerate() {
            for (xx, &(x0, x1, lx)) in wx.iter().enumerate() {
                let top = src[y0 * x.w + x0] * (1.0 - lx) + src[y0 * x.w + x1] * lx;
                let bot = src[y1 * x.w + x0] * (1.0 - lx) + src[y1 * x.w + x1] * lx;
                dst[y * ow + xx] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

fn upsample_backward(dy: &Tensor, factor: usize, in_h: usize, in_w: usize) -> Tensor {
    if factor == 1 {
        return dy.clone();
    }
    let wy = upsample_weights(dy.h, factor, in_h);
    let wx = upsample_weights(dy.w, factor, in_w);
    let mut dx = Tensor::zeros(dy.n, dy.c, in_h, in_w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * in_h * in_w..(nc + 1) * in_h * in_w];
        for (y, &(y0, y1, ly)) in wy.iter().enumerate() {
            for (xx, &(x0, x1, lx)) in wx.iter().enumerate() {
                let g = src[y * dy.w + xx];
                dst[y0 * in_w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dst[y0 * in_w + x1] += g * (1.0 - ly) * lx;
                dst[y1 * in_w + x0] += g * ly * (1.0 - lx);
                dst[y1 * in_w + x1] += g * ly * lx;
            }
        }
    }
    dx
}

/// Architecture-defining subset of [`NetworkConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub resolution: usize,
    pub tower_depth: usize,
    pub downsample: usize,
    pub tower_width: usize,
    pub head_channels: usize,
}

impl From<&NetworkConfig> for Architecture {
    fn from(c: &NetworkConfig) -> Self {
        Self {
            resolution: c.resolution,
            tower_depth: c.tower_depth,
            downsample: c.downsample,
            tower_width: c.tower_width,
            head_channels: c.head_channels,
        }
    }
}

/// Batch of network inputs: colour, replicated depth and replicated goal
/// mask, each `[n, 3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub color: Tensor,
    pub depth: Tensor,
    pub mask: Tensor,
}

impl NetInput {
    pub fn batch(&self) -> usize {
        self.color.n
    }

    pub fn resolution(&self) -> usize {
        self.color.h
    }

    /// Stacks single-sample inputs.
    pub fn stack(items: &[&NetInput]) -> NetInput {
        let cat = |f: fn(&NetInput) -> &Tensor| {
            let first = f(items[0]);
            let mut t = Tensor::zeros(0, first.c, first.h, first.w);
            for it in items {
                let s = f(it);
                t.n += s.n;
                t.data.extend_from_slice(&s.data);
            }
            t
        };
        NetInput {
            color: cat(|x| &x.color),
            depth: cat(|x| &x.depth),
            mask: cat(|x| &x.mask),
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One supervised pixel: the network output at `(u, v)` of sample `index` is
/// regressed to `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTarget {
    pub index: usize,
    pub u: usize,
    pub v: usize,
    pub target: f64,
}

pub fn huber(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

fn huber_grad(e: f64, delta: f64) -> f64 {
    e.clamp(-delta, delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub arch: Architecture,
    towers: Vec<Tower>,
    head_bn1: BatchNorm,
    head_conv1: Conv,
    head_bn2: BatchNorm,
    head_conv2: Conv,
    pub bn_momentum: f64,
    /// Number of optimizer updates applied.
    pub adam_steps: u64,
}

struct NetCache {
    towers: Vec<TowerCache>,
    bn1: BnCache,
    relu1: Tensor,
    conv1: ConvCache,
    bn2: BnCache,
    relu2: Tensor,
    conv2: ConvCache,
    low_h: usize,
    low_w: usize,
}

impl QNet {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        Self::with_seed(Architecture::from(cfg), cfg.bn_momentum, cfg.init_seed)
    }

    pub fn with_seed(arch: Architecture, bn_momentum: f64, seed: u64) -> Result<Self> {
        if arch.tower_depth == 0 || arch.downsample > arch.tower_depth || arch.resolution % (1 << arch.downsample) != 0 {
            return Err(Error::Config(format!("inconsistent network architecture {arch:?}")));
        }
        let mut rng = seeded(seed);
        let towers: Vec<Tower> = (0..3).map(|_| Tower::new(&arch, &mut rng)).collect();
        let feat = 3 * towers[0].out_channels(arch.tower_width);
        Ok(Self {
            arch,
            head_bn1: BatchNorm::new(feat),
            head_conv1: Conv::new(feat, arch.head_channels, 1, 1, &mut rng),
            head_bn2: BatchNorm::new(arch.head_channels),
            head_conv2: Conv::new(arch.head_channels, 1, 1, 1, &mut rng),
            towers,
            bn_momentum,
            adam_steps: 0,
        })
    }

    fn check(&self, input: &NetInput) -> Result<()> {
        let r = self.arch.resolution;
        for t in [&input.color, &input.depth, &input.mask] {
            if t.c != 3 || t.h != r || t.w != r || t.n != input.color.n {
                return Err(Error::Shape(format!(
                    "network expects [n, 3, {r}, {r}] inputs, got [{}, {}, {}, {}]",
                    t.n, t.c, t.h, t.w
                )));
            }
        }
        Ok(())
    }

    fn forward_cached(&self, input: &NetInput, train: bool) -> (Tensor, NetCache) {
        let mut outs = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for (tower, x) in self.towers.iter().zip([&input.color, &input.depth, &input.mask]) {
            let (o, c) = tower.forward(x, train);
            outs.push(o);
            caches.push(c);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let feat = concat(&refs);
        let (low_h, low_w) = (feat.h, feat.w);
        let (z, bn1) = self.head_bn1.forward(&feat, train);
        let relu1 = relu(z);
        let (z, conv1) = self.head_conv1.forward(&relu1);
        let (z, bn2) = self.head_bn2.forward(&z, train);
        let relu2 = relu(z);
        let (z, conv2) = self.head_conv2.forward(&relu2);
        let out = upsample(&z, 1 << self.arch.downsample);
        (
            out,
            NetCache {
                towers: caches,
                bn1,
                relu1,
                conv1,
                bn2,
                relu2,
                conv2,
                low_h,
                low_w,
            },
        )
    }

    /// Inference-mode forward (running BN statistics): `[n, 1, H, W]`.
    pub fn forward(&self, input: &NetInput) -> Result<Tensor> {
        self.check(input)?;
        Ok(self.forward_cached(input, false).0)
    }

    fn backward(&mut self, dy: &Tensor, cache: &NetCache) {
        let d = upsample_backward(dy, 1 << self.arch.downsample, cache.low_h, cache.low_w);
        let d = self.head_conv2.backward(&d, &cache.conv2, true).expect("head input gradient");
        let d = relu_backward(d, &cache.relu2);
        let d = self.head_bn2.backward(&d, &cache.bn2);
        let d = self.head_conv1.backward(&d, &cache.conv1, true).expect("head input gradient");
        let d = relu_backward(d, &cache.relu1);
        let d = self.head_bn1.backward(&d, &cache.bn1);
        let width = self.arch.tower_width;
        let chans: Vec<usize> = self.towers.iter().map(|t| t.out_channels(width)).collect();
        let parts = split(&d, &chans);
        for ((tower, g), c) in self.towers.iter_mut().zip(parts.iter()).zip(cache.towers.iter()) {
            tower.backward(g, c);
        }
    }

    /// Train-mode (batch statistics) executed-pixel Huber loss, averaged over targets.
    pub fn loss(&self, input: &NetInput, targets: &[PixelTarget], delta: f64) -> Result<f64> {
        self.check(input)?;
        let (out, _) = self.forward_cached(input, true);
        Ok(Self::pixel_loss(&out, targets, delta).0)
    }

    fn pixel_loss(out: &Tensor, targets: &[PixelTarget], delta: f64) -> (f64, Tensor) {
        let mut grad = Tensor::zeros(out.n, out.c, out.h, out.w);
        let scale = 1.0 / targets.len() as f64;
        let mut loss = 0.0;
        for t in targets {
            let idx = (t.index * out.h + t.v) * out.w + t.u;
            let e = out.data[idx] - t.target;
            loss += huber(e, delta) * scale;
            grad.data[idx] += huber_grad(e, delta) * scale;
        }
        (loss, grad)
    }

    /// Clears gradients, then computes the loss and parameter gradients in
    /// train mode. Running statistics are left untouched.
    pub fn compute_gradients(&mut self, input: &NetInput, targets: &[PixelTarget], delta: f64) -> Result<f64> {
        Ok(self.gradients_with_cache(input, targets, delta)?.0)
    }

    fn gradients_with_cache(&mut self, input: &NetInput, targets: &[PixelTarget], delta: f64) -> Result<(f64, NetCache)> {
        self.check(input)?;
        for t in targets {
            if t.index >= input.batch() || t.u >= self.arch.resolution || t.v >= self.arch.resolution {
                return Err(Error::Shape(format!("target {t:?} outside the batch")));
            }
        }
        self.zero_grad();
        let (out, cache) = self.forward_cached(input, true);
        let (loss, grad) = Self::pixel_loss(&out, targets, delta);
        self.backward(&grad, &cache);
        Ok((loss, cache))
    }

    /// One optimizer step on the executed-pixel loss. A non-finite loss or
    /// gradient leaves the network unchanged and is reported as an error.
    pub fn train_step(&mut self, input: &NetInput, targets: &[PixelTarget], delta: f64, adam: &AdamConfig) -> Result<f64> {
        let (loss, cache) = self.gradients_with_cache(input, targets, delta)?;
        let finite = loss.is_finite() && self.params().iter().all(|p| p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            self.zero_grad();
            return Err(Error::InvalidAction(format!("non-finite loss {loss}; update rejected")));
        }
        self.update_running_stats(&cache);
        self.adam_update(adam);
        Ok(loss)
    }

    fn update_running_stats(&mut self, cache: &NetCache) {
        let m = self.bn_momentum;
        for (tower, tc) in self.towers.iter_mut().zip(&cache.towers) {
            for (b, c) in tower.plain.iter_mut().zip(&tc.plain) {
                b.bn.update_running(&c.bn, m);
            }
            for (b, c) in tower.dense.iter_mut().zip(&tc.dense) {
                b.bn.update_running(&c.bn, m);
            }
        }
        self.head_bn1.update_running(&cache.bn1, m);
        self.head_bn2.update_running(&cache.bn2, m);
    }

    fn adam_update(&mut self, cfg: &AdamConfig) {
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params_mut() {
            for i in 0..p.value.len() {
                let g = p.grad[i] + cfg.weight_decay * p.value[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.value[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Every trainable tensor in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for t in self.towers.iter_mut() {
            for b in t.blocks_mut() {
                out.extend(b.conv.params_mut());
                out.extend(b.bn.params_mut());
            }
        }
        out.extend(self.head_bn1.params_mut());
        out.extend(self.head_conv1.params_mut());
        out.extend(self.head_bn2.params_mut());
        out.extend(self.head_conv2.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for t in self.towers.iter() {
            for b in t.blocks() {
                out.extend(b.conv.params());
                out.extend(b.bn.params());
            }
        }
        out.extend(self.head_bn1.params());
        out.extend(self.head_conv1.params());
        out.extend(self.head_bn2.params());
        out.extend(self.head_conv2.params());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out: Vec<&BatchNorm> = self.towers.iter().flat_map(|t| t.blocks().map(|b| &b.bn)).collect();
        out.push(&self.head_bn1);
        out.push(&self.head_bn2);
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out: Vec<&mut BatchNorm> = self.towers.iter_mut().flat_map(|t| t.blocks_mut().map(|b| &mut b.bn)).collect();
        out.push(&mut self.head_bn1);
        out.push(&mut self.head_bn2);
        out
    }

    /// Flat state: parameter values, BN running statistics, Adam moments.
    pub fn export_state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params() {
            out.extend_from_slice(&p.value);
        }
        for bn in self.batch_norms() {
            out.extend_from_slice(&bn.running_mean);
            out.extend_from_slice(&bn.running_var);
        }
        for p in self.params() {
            out.extend_from_slice(&p.m);
            out.extend_from_slice(&p.v);
        }
        out
    }

    pub fn state_len(&self) -> usize {
        let params = self.parameter_count();
        let bn: usize = self.batch_norms().iter().map(|b| 2 * b.running_mean.len()).sum();
        3 * params + bn
    }

    /// Inverse of [`QNet::export_state`]; the network is untouched on error.
    pub fn import_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_len() {
            return Err(Error::Checkpoint(format!(
                "state holds {} values, architecture needs {}",
                state.len(),
                self.state_len()
            )));
        }
        let mut it = state.iter().copied();
        let mut take = |dst: &mut [f64]| {
            for d in dst.iter_mut() {
                *d = it.next().expect("length checked");
            }
        };
        for p in self.params_mut() {
            take(&mut p.value);
        }
        for bn in self.batch_norms_mut() {
            take(&mut bn.running_mean);
            take(&mut bn.running_var);
        }
        for p in self.params_mut() {
            take(&mut p.m);
            take(&mut p.v);
        }
        Ok(())
    }

    /// Digest of parameter values and running statistics.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        for bn in self.batch_norms() {
            for v in bn.running_mean.iter().chain(&bn.running_var) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}
