//! Spatial primitives over single-image feature maps of shape
//! `[channels, rows, cols]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{matmul, matmul_a_bt, matmul_at_b};
use super::layers::relu_backward_inplace;
use super::params::{Grads, ParamBuilder, ParamId, ParamRole, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn dims3<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(format!("expected a [C, H, W] map, got {s:?}"))),
    }
}

/// Cross-correlation with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    col: Vec<T>,
    in_shape: [usize; 3],
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn build<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = pb.he_uniform("weight", &[c_out, c_in, kernel, kernel], fan_in);
        let b = pb.constant("bias", &[c_out], 0.0, ParamRole::Trainable);
        Conv2d {
            w,
            b,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    /// "Same" padding for odd kernels.
    pub fn same<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self::build(pb, c_in, c_out, kernel, stride, kernel / 2)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col<T: Scalar>(&self, x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let p = oh * ow;
        let mut col = vec![T::zero(); c * k * k * p];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let p = oh * ow;
        let mut x = vec![T::zero(); c * h * w];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                x[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (c, h, w) = dims3(x)?;
        if c != self.c_in {
            return Err(Error::dim(format!("conv expects {} channels, got {}", self.c_in, c)));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::dim(format!("{h}×{w} map is smaller than the {0}×{0} kernel", self.kernel)));
        }
        let (oh, ow) = self.out_hw(h, w);
        let kk = c * self.kernel * self.kernel;
        let col = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            x.data().to_vec()
        } else {
            self.im2col(x.data(), c, h, w, oh, ow)
        };
        let mut y = matmul(p.get(self.w).data(), &col, self.c_out, kk, oh * ow);
        let bias = p.get(self.b).data();
        for (row, b) in y.chunks_mut(oh * ow).zip(bias) {
            row.iter_mut().for_each(|v| *v += *b);
        }
        Ok((
            Tensor::from_vec(&[self.c_out, oh, ow], y)?,
            ConvCache {
                col,
                in_shape: [c, h, w],
                out_hw: (oh, ow),
            },
        ))
    }

    pub fn backward<T: Scalar>(&self, p: &ParamSet<T>, cache: &ConvCache<T>, dy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let [c, h, w] = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let np = oh * ow;
        let kk = c * self.kernel * self.kernel;
        let dw = matmul_a_bt(dy.data(), &cache.col, self.c_out, np, kk);
        for (a, v) in g.get_mut(self.w).data_mut().iter_mut().zip(&dw) {
            *a += *v;
        }
        for (a, row) in g.get_mut(self.b).data_mut().iter_mut().zip(dy.data().chunks(np)) {
            *a += row.iter().copied().sum::<T>();
        }
        let dcol = matmul_at_b(p.get(self.w).data(), dy.data(), self.c_out, kk, np);
        let dx = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            dcol
        } else {
            self.col2im(&dcol, c, h, w, oh, ow)
        };
        Tensor::from_vec(&[c, h, w], dx).expect("shape")
    }
}

/// `ReLU(conv2(ReLU(conv1(x))) + shortcut(x))`; the shortcut is a strided
/// 1×1 projection when the shape changes, identity otherwise.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ResidualCache<T> {
    c1: ConvCache<T>,
    r1: Tensor<T>,
    c2: ConvCache<T>,
    cs: Option<ConvCache<T>>,
    out: Tensor<T>,
}

impl ResidualBlock {
    pub fn build<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, c_in: usize, c_out: usize, stride: usize) -> Self {
        let conv1 = pb.scoped("conv1", |pb| Conv2d::same(pb, c_in, c_out, 3, stride));
        let conv2 = pb.scoped("conv2", |pb| Conv2d::same(pb, c_out, c_out, 3, 1));
        let shortcut = (c_in != c_out || stride != 1).then(|| pb.scoped("shortcut", |pb| Conv2d::build(pb, c_in, c_out, 1, stride, 0)));
        ResidualBlock { conv1, conv2, shortcut }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ResidualCache<T>)> {
        let (mut r1, c1) = self.conv1.forward(p, x)?;
        relu_map(&mut r1);
        let (mut out, c2) = self.conv2.forward(p, &r1)?;
        let cs = match &self.shortcut {
            Some(s) => {
                let (sx, cs) = s.forward(p, x)?;
                out.add_assign(&sx);
                Some(cs)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        relu_map(&mut out);
        Ok((out.clone(), ResidualCache { c1, r1, c2, cs, out }))
    }

    pub fn backward<T: Scalar>(&self, p: &ParamSet<T>, cache: &ResidualCache<T>, dy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let mut d = dy.clone();
        relu_backward_inplace(cache.out.data(), d.data_mut());
        let mut dr1 = self.conv2.backward(p, &cache.c2, &d, g);
        relu_backward_inplace(cache.r1.data(), dr1.data_mut());
        let mut dx = self.conv1.backward(p, &cache.c1, &dr1, g);
        match (&self.shortcut, &cache.cs) {
            (Some(s), Some(cs)) => dx.add_assign(&s.backward(p, cs, &d, g)),
            _ => dx.add_assign(&d),
        }
        dx
    }
}

pub fn relu_map<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

fn pool_window(i: usize, inp: usize, out: usize) -> (usize, usize) {
    let start = i * inp / out;
    let end = ((i + 1) * inp).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling to exactly `out_h × out_w`; window `i` spans
/// `[⌊i·in/out⌋, ⌈(i+1)·in/out⌉)`.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x)?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::dim("adaptive pooling needs non-empty maps"));
    }
    let mut y = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        for i in 0..out_h {
            let (r0, r1) = pool_window(i, h, out_h);
            for j in 0..out_w {
                let (q0, q1) = pool_window(j, w, out_w);
                let mut s = T::zero();
                for r in r0..r1 {
                    for q in q0..q1 {
                        s += x.data()[(ci * h + r) * w + q];
                    }
                }
                y.push(s / T::lit(((r1 - r0) * (q1 - q0)) as f64));
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], y)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, in_shape: [usize; 3]) -> Tensor<T> {
    let [c, h, w] = in_shape;
    let (out_h, out_w) = (dy.shape()[1], dy.shape()[2]);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for i in 0..out_h {
            let (r0, r1) = pool_window(i, h, out_h);
            for j in 0..out_w {
                let (q0, q1) = pool_window(j, w, out_w);
                let v = dy.data()[(ci * out_h + i) * out_w + j] / T::lit(((r1 - r0) * (q1 - q0)) as f64);
                for r in r0..r1 {
                    for q in q0..q1 {
                        dx.data_mut()[(ci * h + r) * w + q] += v;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x)?;
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for r in 0..oh {
            let src = &x.data()[(ci * h + r / factor) * w..(ci * h + r / factor + 1) * w];
            for q in 0..ow {
                y.push(src[q / factor]);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], y)
}

pub fn upsample_nearest_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for r in 0..oh {
            for q in 0..ow {
                dx.data_mut()[(ci * h + r / factor) * w + q / factor] += dy.data()[(ci * oh + r) * ow + q];
            }
        }
    }
    dx
}

/// Channel-wise concatenation of equally sized maps.
pub fn concat_channels<T: Scalar>(maps: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (_, h, w) = dims3(maps[0])?;
    let mut data = Vec::new();
    let mut c = 0;
    for m in maps {
        let (mc, mh, mw) = dims3(m)?;
        if (mh, mw) != (h, w) {
            return Err(Error::dim(format!("cannot concatenate {mh}×{mw} with {h}×{w} maps")));
        }
        c += mc;
        data.extend_from_slice(m.data());
    }
    Tensor::from_vec(&[c, h, w], data)
}

pub fn split_channels<T: Scalar>(d: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let (h, w) = (d.shape()[1], d.shape()[2]);
    let mut out = Vec::with_capacity(channels.len());
    let mut off = 0;
    for &c in channels {
        let n = c * h * w;
        out.push(Tensor::from_vec(&[c, h, w], d.data()[off..off + n].to_vec()).expect("shape"));
        off += n;
    }
    out
}

/// Declarative description of one stack layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    Residual {
        out: usize,
        stride: usize,
    },
    AdaptivePool {
        rows: usize,
        cols: usize,
    },
    Upsample {
        factor: usize,
    },
}

#[derive(Debug, Clone)]
enum StackLayer {
    Conv(Conv2d, bool),
    Residual(ResidualBlock),
    Pool(usize, usize),
    Upsample(usize),
}

#[derive(Debug, Clone)]
enum StackCache<T> {
    Conv(ConvCache<T>, Option<Tensor<T>>),
    Residual(ResidualCache<T>),
    Pool([usize; 3]),
    Upsample,
}

/// Sequential stack of conv, residual, pooling and upsampling layers.
#[derive(Debug, Clone)]
pub struct ConvStack {
    layers: Vec<StackLayer>,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone)]
pub struct ConvStackCache<T> {
    caches: Vec<StackCache<T>>,
}

impl ConvStack {
    pub fn build<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, c_in: usize, specs: &[LayerSpec]) -> Result<Self> {
        let mut c = c_in;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{i}");
            layers.push(match *spec {
                LayerSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                    relu,
                } => {
                    if kernel == 0 || stride == 0 || out == 0 {
                        return Err(Error::Config(format!("invalid conv layer {i}: {spec:?}")));
                    }
                    let conv = pb.scoped(&name, |pb| Conv2d::build(pb, c, out, kernel, stride, padding));
                    c = out;
                    StackLayer::Conv(conv, relu)
                }
                LayerSpec::Residual { out, stride } => {
                    if stride == 0 || out == 0 {
                        return Err(Error::Config(format!("invalid residual layer {i}: {spec:?}")));
                    }
                    let block = pb.scoped(&name, |pb| ResidualBlock::build(pb, c, out, stride));
                    c = out;
                    StackLayer::Residual(block)
                }
                LayerSpec::AdaptivePool { rows, cols } => StackLayer::Pool(rows, cols),
                LayerSpec::Upsample { factor } => StackLayer::Upsample(factor),
            });
        }
        Ok(ConvStack { layers, c_in, c_out: c })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvStackCache<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            match layer {
                StackLayer::Conv(conv, relu) => {
                    let (mut y, c) = conv.forward(p, &h)?;
                    if *relu {
                        relu_map(&mut y);
                    }
                    caches.push(StackCache::Conv(c, relu.then(|| y.clone())));
                    h = y;
                }
                StackLayer::Residual(block) => {
                    let (y, c) = block.forward(p, &h)?;
                    caches.push(StackCache::Residual(c));
                    h = y;
                }
                StackLayer::Pool(r, q) => {
                    let (c, hh, ww) = dims3(&h)?;
                    caches.push(StackCache::Pool([c, hh, ww]));
                    h = adaptive_avg_pool(&h, *r, *q)?;
                }
                StackLayer::Upsample(f) => {
                    caches.push(StackCache::Upsample);
                    h = upsample_nearest(&h, *f)?;
                }
            }
        }
        Ok((h, ConvStackCache { caches }))
    }

    pub fn backward<T: Scalar>(&self, p: &ParamSet<T>, cache: &ConvStackCache<T>, dy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for (layer, c) in self.layers.iter().zip(&cache.caches).rev() {
            d = match (layer, c) {
                (StackLayer::Conv(conv, _), StackCache::Conv(cc, out)) => {
                    if let Some(out) = out {
                        relu_backward_inplace(out.data(), d.data_mut());
                    }
                    conv.backward(p, cc, &d, g)
                }
                (StackLayer::Residual(block), StackCache::Residual(rc)) => block.backward(p, rc, &d, g),
                (StackLayer::Pool(..), StackCache::Pool(shape)) => adaptive_avg_pool_backward(&d, *shape),
                (StackLayer::Upsample(f), StackCache::Upsample) => upsample_nearest_backward(&d, *f),
                _ => unreachable!("cache does not match layer"),
            };
        }
        d
    }
}

/// Inference-only forward through a built stack.
pub fn conv_stack_forward<T: Scalar>(stack: &ConvStack, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    stack.forward(params, x).map(|(y, _)| y)
}
