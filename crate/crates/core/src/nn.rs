//! Minimal CPU convolutional network runtime.
//!
//! A [`Model`] is compiled from an [`ArchitectureSpec`] into a flat list of
//! ops over one parameter buffer. Samples are processed one image at a time
//! (there is no batch normalization, so samples are independent); batch
//! gradients are reduced in a fixed order so results do not depend on the
//! thread count.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use thiserror::Error;

use crate::arch::{ArchError, ArchitectureSpec, LayerKind, Projection, Shape};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("input has {got} values, expected {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("weight archive: {0}")]
    Archive(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
struct ConvOp {
    layer: usize,
    weight: Range<usize>,
    bias: Range<usize>,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    save_shortcut: bool,
    shortcut: Option<Shortcut>,
}

#[derive(Debug, Clone)]
enum Shortcut {
    Identity,
    Projection {
        weight: Range<usize>,
        bias: Range<usize>,
        proj: Projection,
        h_in: usize,
        w_in: usize,
    },
}

#[derive(Debug, Clone)]
struct PoolOp {
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug, Clone)]
struct LinearOp {
    weight: Range<usize>,
    bias: Range<usize>,
    n_in: usize,
    n_out: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Conv(ConvOp),
    Pool(PoolOp),
    Flatten,
    Linear(LinearOp),
}

/// Named slice of the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

/// An instantiated network: architecture, compiled ops and weights.
#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchitectureSpec,
    ops: Vec<Op>,
    slots: Vec<ParamSlot>,
    pub params: Vec<f32>,
}

/// Something that maps one input image to class logits.
pub trait Predict {
    fn predict(&self, image: &[f32]) -> Vec<f32>;
}

impl Predict for Model {
    fn predict(&self, image: &[f32]) -> Vec<f32> {
        self.forward(image)
    }
}

/// Activations kept from a training forward pass.
pub struct ForwardCache {
    /// `acts[i]` is the input of op `i`; the last entry is the logits.
    acts: Vec<Vec<f32>>,
    /// im2col buffers for convolution ops.
    cols: Vec<Option<Vec<f32>>>,
    /// Argmax input positions for pooling ops.
    pool_argmax: Vec<Option<Vec<u32>>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f32] {
        self.acts.last().expect("non-empty")
    }
}

fn im2col(
    x: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    col: &mut [f32],
) {
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * hw_out;
                let dst = &mut col[row..row + hw_out];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut [f32],
) {
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * hw_out;
                let src = &col[row..row + hw_out];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha·a·b + beta·c` on row-major slices; `a` is m×k, `b` is k×n.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm a");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm b");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// `c += aᵀ·b` where `a` is k×m and `b` is k×n.
fn gemm_at(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let a = ArrayView2::from_shape((k, m), a).expect("gemm a");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm b");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(1.0, &a.t(), &b, 1.0, &mut c);
}

/// `c += a·bᵀ` where `a` is m×k and `b` is n×k.
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm a");
    let b = ArrayView2::from_shape((n, k), b).expect("gemm b");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(1.0, &a, &b.t(), 1.0, &mut c);
}

/// Samples every other position of a `(c, h, w)` map with the given stride.
fn subsample(x: &[f32], c: usize, h: usize, w: usize, stride: usize, h_out: usize, w_out: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h_out * w_out];
    for ch in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                out[(ch * h_out + oy) * w_out + ox] = x[(ch * h + oy * stride) * w + ox * stride];
            }
        }
    }
    out
}

impl Model {
    /// Compiles `arch` and initializes weights with He-normal draws from a
    /// seeded generator. Biases start at zero.
    pub fn new(arch: &ArchitectureSpec, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in &model.slots {
            if slot.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = slot.shape[1..].iter().product();
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut model.params[slot.range.clone()] {
                *v = normal.sample(&mut rng) as f32;
            }
        }
        Ok(model)
    }

    /// Compiles `arch` with every parameter set to zero.
    pub fn zeros(arch: &ArchitectureSpec) -> Result<Self, ModelError> {
        let trace = arch.trace().map_err(ArchError::Invalid)?;
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut alloc = |name: String, shape: Vec<usize>, slots: &mut Vec<ParamSlot>| {
            let len: usize = shape.iter().product();
            let range = offset..offset + len;
            offset += len;
            slots.push(ParamSlot {
                name,
                shape,
                range: range.clone(),
            });
            range
        };

        let last_linear = arch
            .layers
            .iter()
            .rposition(|l| l.kind == LayerKind::Linear)
            .unwrap_or(usize::MAX);
        let mut ops = Vec::with_capacity(arch.layers.len());
        for (i, l) in arch.layers.iter().enumerate() {
            let input = trace.inputs[i];
            let output = trace.outputs[i];
            let op = match l.kind {
                LayerKind::Convolution => {
                    let (Shape::Spatial { c: c_in, h: h_in, w: w_in }, Shape::Spatial { h: h_out, w: w_out, .. }) =
                        (input, output)
                    else {
                        unreachable!("validated convolution shapes")
                    };
                    let weight = alloc(
                        format!("layer{i}.weight"),
                        vec![l.out_channels, c_in, l.kernel_size, l.kernel_size],
                        &mut slots,
                    );
                    let bias = alloc(format!("layer{i}.bias"), vec![l.out_channels], &mut slots);
                    let block_start = trace.blocks.iter().find(|b| b.start == i);
                    let shortcut = trace.blocks.iter().find(|b| b.end == i).map(|b| match b.projection {
                        None => Shortcut::Identity,
                        Some(proj) => {
                            let Shape::Spatial { h, w, .. } = trace.inputs[b.start] else {
                                unreachable!("validated block input")
                            };
                            Shortcut::Projection {
                                weight: alloc(
                                    format!("layer{i}.shortcut.weight"),
                                    vec![proj.out_channels, proj.in_channels, 1, 1],
                                    &mut slots,
                                ),
                                bias: alloc(
                                    format!("layer{i}.shortcut.bias"),
                                    vec![proj.out_channels],
                                    &mut slots,
                                ),
                                proj,
                                h_in: h,
                                w_in: w,
                            }
                        }
                    });
                    Op::Conv(ConvOp {
                        layer: i,
                        weight,
                        bias,
                        c_in,
                        c_out: l.out_channels,
                        k: l.kernel_size,
                        stride: l.stride,
                        pad: l.padding,
                        h_in,
                        w_in,
                        h_out,
                        w_out,
                        save_shortcut: block_start.is_some(),
                        shortcut,
                    })
                }
                LayerKind::Pooling => {
                    let (Shape::Spatial { c, h: h_in, w: w_in }, Shape::Spatial { h: h_out, w: w_out, .. }) =
                        (input, output)
                    else {
                        unreachable!("validated pooling shapes")
                    };
                    Op::Pool(PoolOp {
                        c,
                        k: l.kernel_size,
                        stride: l.stride,
                        pad: l.padding,
                        h_in,
                        w_in,
                        h_out,
                        w_out,
                    })
                }
                LayerKind::Flatten => Op::Flatten,
                LayerKind::Linear => {
                    let n_in = input.len();
                    let weight = alloc(format!("layer{i}.weight"), vec![l.out_channels, n_in], &mut slots);
                    let bias = alloc(format!("layer{i}.bias"), vec![l.out_channels], &mut slots);
                    Op::Linear(LinearOp {
                        weight,
                        bias,
                        n_in,
                        n_out: l.out_channels,
                        relu: i != last_linear,
                    })
                }
            };
            ops.push(op);
        }
        let total = slots.last().map(|s| s.range.end).unwrap_or(0);
        Ok(Model {
            arch: arch.clone(),
            ops,
            slots,
            params: vec![0.0; total],
        })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Number of scalar parameters actually allocated.
    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_shape.volume()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Inference forward pass for one `(c, h, w)` image.
    pub fn forward(&self, image: &[f32]) -> Vec<f32> {
        self.run(image, None)
    }

    /// Training forward pass keeping everything backward needs.
    pub fn forward_train(&self, image: &[f32]) -> ForwardCache {
        let mut cache = ForwardCache {
            acts: Vec::with_capacity(self.ops.len() + 1),
            cols: vec![None; self.ops.len()],
            pool_argmax: vec![None; self.ops.len()],
        };
        let logits = self.run(image, Some(&mut cache));
        cache.acts.push(logits);
        cache
    }

    fn run(&self, image: &[f32], mut cache: Option<&mut ForwardCache>) -> Vec<f32> {
        assert_eq!(image.len(), self.input_len(), "image size");
        let p = &self.params;
        let mut x = image.to_vec();
        let mut saved: Option<Vec<f32>> = None;
        for (oi, op) in self.ops.iter().enumerate() {
            let y = match op {
                Op::Conv(c) => {
                    if c.save_shortcut {
                        saved = Some(x.clone());
                    }
                    let hw = c.h_out * c.w_out;
                    let kk = c.c_in * c.k * c.k;
                    let pointwise = c.k == 1 && c.stride == 1 && c.pad == 0;
                    let col = if pointwise {
                        x.clone()
                    } else {
                        let mut col = vec![0.0; kk * hw];
                        im2col(&x, c.c_in, c.h_in, c.w_in, c.k, c.stride, c.pad, c.h_out, c.w_out, &mut col);
                        col
                    };
                    let mut y = vec![0.0; c.c_out * hw];
                    for (o, &b) in p[c.bias.clone()].iter().enumerate() {
                        y[o * hw..(o + 1) * hw].fill(b);
                    }
                    gemm(c.c_out, kk, hw, &p[c.weight.clone()], &col, &mut y, 1.0);
                    if let Some(sc) = &c.shortcut {
                        let s = saved.take().expect("shortcut source saved");
                        match sc {
                            Shortcut::Identity => {
                                for (v, s) in y.iter_mut().zip(&s) {
                                    *v += s;
                                }
                            }
                            Shortcut::Projection { weight, bias, proj, h_in, w_in } => {
                                let sub = subsample(&s, proj.in_channels, *h_in, *w_in, proj.stride, c.h_out, c.w_out);
                                for (o, &b) in p[bias.clone()].iter().enumerate() {
                                    for v in &mut y[o * hw..(o + 1) * hw] {
                                        *v += b;
                                    }
                                }
                                gemm(proj.out_channels, proj.in_channels, hw, &p[weight.clone()], &sub, &mut y, 1.0);
                            }
                        }
                    }
                    for v in &mut y {
                        *v = v.max(0.0);
                    }
                    if let Some(cache) = cache.as_deref_mut() {
                        cache.cols[oi] = Some(col);
                    }
                    y
                }
                Op::Pool(pl) => {
                    let mut y = vec![f32::NEG_INFINITY; pl.c * pl.h_out * pl.w_out];
                    let mut arg = vec![0u32; y.len()];
                    for ch in 0..pl.c {
                        for oy in 0..pl.h_out {
                            for ox in 0..pl.w_out {
                                let oidx = (ch * pl.h_out + oy) * pl.w_out + ox;
                                let mut best = f32::NEG_INFINITY;
                                let mut best_idx = 0u32;
                                for ki in 0..pl.k {
                                    let iy = (oy * pl.stride + ki) as isize - pl.pad as isize;
                                    if iy < 0 || iy >= pl.h_in as isize {
                                        continue;
                                    }
                                    for kj in 0..pl.k {
                                        let ix = (ox * pl.stride + kj) as isize - pl.pad as isize;
                                        if ix < 0 || ix >= pl.w_in as isize {
                                            continue;
                                        }
                                        let idx = (ch * pl.h_in + iy as usize) * pl.w_in + ix as usize;
                                        if x[idx] > best {
                                            best = x[idx];
                                            best_idx = idx as u32;
                                        }
                                    }
                                }
                                y[oidx] = best;
                                arg[oidx] = best_idx;
                            }
                        }
                    }
                    if let Some(cache) = cache.as_deref_mut() {
                        cache.pool_argmax[oi] = Some(arg);
                    }
                    y
                }
                Op::Flatten => x.clone(),
                Op::Linear(l) => {
                    let mut y = p[l.bias.clone()].to_vec();
                    gemm(l.n_out, l.n_in, 1, &p[l.weight.clone()], &x, &mut y, 1.0);
                    if l.relu {
                        for v in &mut y {
                            *v = v.max(0.0);
                        }
                    }
                    y
                }
            };
            if let Some(cache) = cache.as_deref_mut() {
                cache.acts.push(std::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        x
    }

    /// Backpropagates `dlogits` through a cached forward pass, accumulating
    /// into `grad` (same layout as `params`).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f32], grad: &mut [f32]) {
        self.backward_with(cache, dlogits, grad, |_, _, _| {});
    }

    /// Like [`Model::backward`], additionally calling `on_conv(layer, act,
    /// dact)` with every convolution's output activation and its gradient.
    pub fn backward_with<F>(&self, cache: &ForwardCache, dlogits: &[f32], grad: &mut [f32], mut on_conv: F)
    where
        F: FnMut(usize, &[f32], &[f32]),
    {
        assert_eq!(grad.len(), self.params.len());
        let p = &self.params;
        let mut dy = dlogits.to_vec();
        // Gradient waiting to be added to the input of a block's first conv.
        let mut pending: Option<Vec<f32>> = None;
        for (oi, op) in self.ops.iter().enumerate().rev() {
            let x = &cache.acts[oi];
            let y = &cache.acts[oi + 1];
            let dx = match op {
                Op::Conv(c) => {
                    on_conv(c.layer, y, &dy);
                    let hw = c.h_out * c.w_out;
                    let kk = c.c_in * c.k * c.k;
                    let mut dz = dy;
                    for (d, &v) in dz.iter_mut().zip(y) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    if let Some(sc) = &c.shortcut {
                        match sc {
                            Shortcut::Identity => pending = Some(dz.clone()),
                            Shortcut::Projection { weight, bias, proj, h_in, w_in } => {
                                // Source activation is the input of the block's first conv.
                                let src = self.block_input(cache, oi);
                                let sub = subsample(src, proj.in_channels, *h_in, *w_in, proj.stride, c.h_out, c.w_out);
                                for (o, g) in grad[bias.clone()].iter_mut().enumerate() {
                                    *g += dz[o * hw..(o + 1) * hw].iter().sum::<f32>();
                                }
                                gemm_bt(proj.out_channels, hw, proj.in_channels, &dz, &sub, &mut grad[weight.clone()]);
                                let mut dsub = vec![0.0; proj.in_channels * hw];
                                gemm_at(proj.in_channels, proj.out_channels, hw, &p[weight.clone()], &dz, &mut dsub);
                                let mut dsrc = vec![0.0; proj.in_channels * h_in * w_in];
                                for ch in 0..proj.in_channels {
                                    for oy in 0..c.h_out {
                                        for ox in 0..c.w_out {
                                            dsrc[(ch * h_in + oy * proj.stride) * w_in + ox * proj.stride] +=
                                                dsub[(ch * c.h_out + oy) * c.w_out + ox];
                                        }
                                    }
                                }
                                pending = Some(dsrc);
                            }
                        }
                    }
                    for (o, g) in grad[c.bias.clone()].iter_mut().enumerate() {
                        *g += dz[o * hw..(o + 1) * hw].iter().sum::<f32>();
                    }
                    let col = cache.cols[oi].as_ref().expect("conv col cached");
                    gemm_bt(c.c_out, hw, kk, &dz, col, &mut grad[c.weight.clone()]);
                    let mut dcol = vec![0.0; kk * hw];
                    gemm_at(kk, c.c_out, hw, &p[c.weight.clone()], &dz, &mut dcol);
                    let pointwise = c.k == 1 && c.stride == 1 && c.pad == 0;
                    let mut dx = if pointwise {
                        dcol
                    } else {
                        let mut dx = vec![0.0; x.len()];
                        col2im(&dcol, c.c_in, c.h_in, c.w_in, c.k, c.stride, c.pad, c.h_out, c.w_out, &mut dx);
                        dx
                    };
                    if c.save_shortcut {
                        if let Some(extra) = pending.take() {
                            for (d, e) in dx.iter_mut().zip(&extra) {
                                *d += e;
                            }
                        }
                    }
                    dx
                }
                Op::Pool(_) => {
                    let arg = cache.pool_argmax[oi].as_ref().expect("pool argmax cached");
                    let mut dx = vec![0.0; x.len()];
                    for (&a, &d) in arg.iter().zip(&dy) {
                        dx[a as usize] += d;
                    }
                    dx
                }
                Op::Flatten => dy,
                Op::Linear(l) => {
                    let mut dz = dy;
                    if l.relu {
                        for (d, &v) in dz.iter_mut().zip(y) {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    for (g, d) in grad[l.bias.clone()].iter_mut().zip(&dz) {
                        *g += d;
                    }
                    gemm_bt(l.n_out, 1, l.n_in, &dz, x, &mut grad[l.weight.clone()]);
                    let mut dx = vec![0.0; l.n_in];
                    gemm_at(l.n_in, l.n_out, 1, &p[l.weight.clone()], &dz, &mut dx);
                    dx
                }
            };
            dy = dx;
        }
    }

    fn block_input<'a>(&self, cache: &'a ForwardCache, end_op: usize) -> &'a [f32] {
        let start = (0..=end_op)
            .rev()
            .find(|&i| matches!(&self.ops[i], Op::Conv(c) if c.save_shortcut))
            .expect("block start");
        &cache.acts[start]
    }

    /// Output activation (post-ReLU feature map) of every convolution layer,
    /// keyed by layer index.
    pub fn conv_outputs(&self, cache: &ForwardCache) -> HashMap<usize, Vec<f32>> {
        self.ops
            .iter()
            .enumerate()
            .filter_map(|(oi, op)| match op {
                Op::Conv(c) => Some((c.layer, cache.acts[oi + 1].clone())),
                _ => None,
            })
            .collect()
    }

    pub fn conv_layer_spatial(&self, layer: usize) -> Option<(usize, usize)> {
        self.ops.iter().find_map(|op| match op {
            Op::Conv(c) if c.layer == layer => Some((c.h_out, c.w_out)),
            _ => None,
        })
    }

    /// Writes weights as a safetensors archive, tensors keyed by slot name.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes: Vec<Vec<u8>> = self
            .slots
            .iter()
            .map(|s| self.params[s.range.clone()].iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views: Vec<(String, TensorView<'_>)> = self
            .slots
            .iter()
            .zip(&bytes)
            .map(|(s, b)| {
                let view = TensorView::new(Dtype::F32, s.shape.clone(), b).expect("consistent tensor");
                (s.name.clone(), view)
            })
            .collect();
        let mut meta = HashMap::new();
        meta.insert("arch".to_string(), serde_json::to_string(&self.arch).expect("arch json"));
        let data = safetensors::serialize(views, &Some(meta)).map_err(|e| ModelError::Archive(e.to_string()))?;
        std::fs::write(path, data).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads a weight archive written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let data = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (_, meta) = SafeTensors::read_metadata(&data).map_err(|e| ModelError::Archive(e.to_string()))?;
        let arch_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("arch"))
            .ok_or_else(|| ModelError::Archive("missing arch metadata".into()))?;
        let arch: ArchitectureSpec =
            serde_json::from_str(arch_json).map_err(|e| ModelError::Archive(e.to_string()))?;
        let tensors = SafeTensors::deserialize(&data).map_err(|e| ModelError::Archive(e.to_string()))?;
        let mut model = Model::zeros(&arch)?;
        for slot in model.slots.clone() {
            let t = tensors
                .tensor(&slot.name)
                .map_err(|e| ModelError::Archive(format!("{}: {e}", slot.name)))?;
            if t.shape() != slot.shape.as_slice() || t.dtype() != Dtype::F32 {
                return Err(ModelError::Archive(format!("{}: shape or dtype mismatch", slot.name)));
            }
            for (dst, chunk) in model.params[slot.range.clone()].iter_mut().zip(t.data().chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(model)
    }
}

/// SGD with classical momentum: `v ← μ·v + g + wd·w`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, len: usize) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn step_f32(&mut self, params: &mut [f32], grad: &[f32]) {
        for ((w, &g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            *v = self.momentum * *v + g as f64 + self.weight_decay * *w as f64;
            *w -= (self.learning_rate * *v) as f32;
        }
    }

    pub fn step_f64(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((w, &g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            *v = self.momentum * *v + g + self.weight_decay * *w;
            *w -= self.learning_rate * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin, count_parameters, derive_student, ActionVector, Family, InputShape, LayerDescriptor as L};

    fn tiny_residual() -> ArchitectureSpec {
        ArchitectureSpec::new(
            vec![
                L::conv3(3),
                L::conv3(3).with_skip(true, false),
                L::conv3(3).with_skip(false, true),
                L::conv(4, 3, 2, 1).with_skip(true, true),
                L::pool(2, 2),
                L::flatten(),
                L::linear(5),
                L::linear(3),
            ],
            InputShape { channels: 2, height: 6, width: 6 },
            3,
            Family::Residual,
        )
    }

    fn loss_and_grad(model: &Model, image: &[f32], dir: &[f32]) -> (f64, Vec<f32>) {
        let cache = model.forward_train(image);
        let loss: f64 = cache.logits().iter().zip(dir).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut grad = vec![0.0; model.params.len()];
        model.backward(&cache, dir, &mut grad);
        (loss, grad)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for arch in [tiny_residual(), {
            let mut a = builtin::desk(2);
            a.input_shape = InputShape { channels: 3, height: 8, width: 8 };
            a
        }] {
            let mut model = Model::new(&arch, 7).unwrap();
            for (i, v) in model.params.iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f32 - 3.0);
            }
            let image: Vec<f32> = (0..model.input_len()).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
            let dir: Vec<f32> = (0..arch.num_classes).map(|i| 1.0 + i as f32).collect();
            let (_, grad) = loss_and_grad(&model, &image, &dir);
            let eps = 5e-4f32;
            let (l0, _) = loss_and_grad(&model, &image, &dir);
            let (mut checked, mut kinks) = (0, 0);
            for idx in (0..model.params.len()).step_by(3) {
                let orig = model.params[idx];
                model.params[idx] = orig + eps;
                let (lp, _) = loss_and_grad(&model, &image, &dir);
                model.params[idx] = orig - eps;
                let (lm, _) = loss_and_grad(&model, &image, &dir);
                model.params[idx] = orig;
                // One-sided slopes disagree across a ReLU or max-pool switch.
                let right = (lp - l0) / eps as f64;
                let left = (l0 - lm) / eps as f64;
                if (right - left).abs() > 0.05 * (1.0 + right.abs().max(left.abs())) {
                    kinks += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * eps as f64);
                let g = grad[idx] as f64;
                assert!(
                    (fd - g).abs() <= 2e-2 * (1.0 + g.abs().max(fd.abs())),
                    "param {idx}: fd {fd} vs analytic {g}"
                );
                checked += 1;
            }
            assert!(kinks * 10 < checked, "{kinks} kinks vs {checked} smooth checks");
            assert!(checked > 10);
        }
    }

    #[test]
    fn parameter_count_matches_allocation() {
        for arch in [builtin::desk(2), builtin::desk_residual(4), builtin::vgg11(10), builtin::resnet18(100), tiny_residual()] {
            let model = Model::zeros(&arch).unwrap();
            let brute: usize = model.slots().iter().map(|s| s.shape.iter().product::<usize>()).sum();
            assert_eq!(brute, count_parameters(&arch).unwrap());
        }
    }

    #[test]
    fn projection_student_runs() {
        let t = builtin::desk_residual(2);
        let s = derive_student(&t, &ActionVector(vec![true, true, true, false, false])).unwrap();
        let m = Model::new(&s, 1).unwrap();
        let out = m.forward(&vec![0.5; m.input_len()]);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w");
        let m = Model::new(&tiny_residual(), 3).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Model::new(&builtin::desk(2), 11).unwrap();
        let b = Model::new(&builtin::desk(2), 11).unwrap();
        let c = Model::new(&builtin::desk(2), 12).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }
}
