//! 2-D convolution (cross-correlation) with zero padding.
//!
//! The forward pass lowers each sample to an im2col matrix and runs one GEMM
//! per sample; 1x1/stride-1 convolutions skip the lowering entirely. The
//! backward pass reuses the same lowering: bias grads are plain reductions,
//! weight grads are per-sample GEMMs reduced in batch order, and input grads
//! come from a transposed GEMM followed by col2im scatter. Work is split
//! across batch samples only, so the parallel and sequential paths are
//! bit-identical.

use super::{Element, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::RngState;

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn validate<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let (b, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4().map_err(|_| {
        Error::shape("conv2d", format!("weight must be rank 4 OxCxKxK, got {:?}", weight.shape()))
    })?;
    if kh != kw {
        return Err(Error::shape("conv2d", format!("kernel must be square, got {}x{}", kh, kw)));
    }
    if kh % 2 == 0 {
        return Err(Error::arg("conv2d", format!("kernel size {} must be odd", kh)));
    }
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input channel dim is {} but weight expects {}", c, wc),
        ));
    }
    if bias.shape() != [o] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} must be [{}] to match output channels", bias.shape(), o),
        ));
    }
    if stride == 0 {
        return Err(Error::arg("conv2d", "stride must be positive"));
    }
    let span_h = h + 2 * padding;
    let span_w = w + 2 * padding;
    if span_h < kh || span_w < kh {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {} exceeds padded input {}x{}", kh, span_h, span_w),
        ));
    }
    let oh = (span_h - kh) / stride + 1;
    let ow = (span_w - kh) / stride + 1;
    Ok(ConvDims { b, c, h, w, o, k: kh, oh, ow })
}

/// For a stride-1 tap offset `k - padding`, the output positions whose source
/// column stays in `[0, w)`: returns `(first_out, first_src, run_len)`.
fn tap_span(k: usize, padding: usize, out_len: usize, in_len: usize) -> (usize, usize, usize) {
    let lo = padding.saturating_sub(k);
    let hi = (in_len + padding).saturating_sub(k).min(out_len);
    if hi <= lo {
        (0, 0, 0)
    } else {
        (lo, lo + k - padding, hi - lo)
    }
}

/// Lowers one sample (`C x H x W` slice) into `cols` laid out
/// `(C·K·K) x (OH·OW)`; out-of-bounds taps are zero. Stride 1 copies each
/// output row as one contiguous span; other strides gather per element.
fn im2col<T: Element>(src: &[T], d: &ConvDims, stride: usize, padding: usize, cols: &mut [T]) {
    let p = d.oh * d.ow;
    if stride != 1 {
        cols.fill(T::zero());
    }
    for c in 0..d.c {
        let plane = &src[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((c * d.k + ky) * d.k + kx) * p;
                let row = &mut cols[row..row + p];
                if stride == 1 {
                    let (ox0, sx0, len) = tap_span(kx, padding, d.ow, d.w);
                    for oy in 0..d.oh {
                        let out = &mut row[oy * d.ow..(oy + 1) * d.ow];
                        let sy = (oy + ky) as isize - padding as isize;
                        if sy < 0 || sy >= d.h as isize || len == 0 {
                            out.fill(T::zero());
                            continue;
                        }
                        let sy = sy as usize;
                        out[..ox0].fill(T::zero());
                        out[ox0..ox0 + len]
                            .copy_from_slice(&plane[sy * d.w + sx0..sy * d.w + sx0 + len]);
                        out[ox0 + len..].fill(T::zero());
                    }
                    continue;
                }
                for oy in 0..d.oh {
                    let sy = (oy * stride + ky) as isize - padding as isize;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for ox in 0..d.ow {
                        let sx = (ox * stride + kx) as isize - padding as isize;
                        if sx < 0 || sx >= d.w as isize {
                            continue;
                        }
                        row[oy * d.ow + ox] = plane[sy * d.w + sx as usize];
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds `cols` back into one sample's plane.
/// Stride 1 adds contiguous spans; other strides scatter per element.
fn col2im<T: Element>(cols: &[T], d: &ConvDims, stride: usize, padding: usize, dst: &mut [T]) {
    let p = d.oh * d.ow;
    for c in 0..d.c {
        let plane = &mut dst[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((c * d.k + ky) * d.k + kx) * p;
                let row = &cols[row..row + p];
                if stride == 1 {
                    let (ox0, sx0, len) = tap_span(kx, padding, d.ow, d.w);
                    if len == 0 {
                        continue;
                    }
                    for oy in 0..d.oh {
                        let sy = (oy + ky) as isize - padding as isize;
                        if sy < 0 || sy >= d.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let src = &row[oy * d.ow + ox0..oy * d.ow + ox0 + len];
                        let out = &mut plane[sy * d.w + sx0..sy * d.w + sx0 + len];
                        for (dv, &sv) in out.iter_mut().zip(src) {
                            *dv = *dv + sv;
                        }
                    }
                    continue;
                }
                for oy in 0..d.oh {
                    let sy = (oy * stride + ky) as isize - padding as isize;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for ox in 0..d.ow {
                        let sx = (ox * stride + kx) as isize - padding as isize;
                        if sx < 0 || sx >= d.w as isize {
                            continue;
                        }
                        let idx = sy * d.w + sx as usize;
                        plane[idx] = plane[idx] + row[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(d: &ConvDims, stride: usize, padding: usize) -> bool {
    d.k == 1 && stride == 1 && padding == 0
}

/// Cross-correlation of `input` (`B x C x H x W`) with `weight`
/// (`O x C x K x K`) plus per-channel `bias`, zero padding.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = validate(input, weight, bias, stride, padding)?;
    let p = d.oh * d.ow;
    let ckk = d.c * d.k * d.k;
    let mut out = Tensor::zeros(vec![d.b, d.o, d.oh, d.ow]);
    let src = input.data();
    let wdat = weight.data();
    let bdat = bias.data();
    let pointwise = is_pointwise(&d, stride, padding);
    exec::for_each_chunk(out.data_mut(), d.o * p, |b, chunk| {
        let sample = &src[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        if pointwise {
            T::gemm(d.o, ckk, p, T::one(), wdat, sample, T::zero(), chunk);
        } else {
            let mut cols = vec![T::zero(); ckk * p];
            im2col(sample, &d, stride, padding, &mut cols);
            T::gemm(d.o, ckk, p, T::one(), wdat, &cols, T::zero(), chunk);
        }
        for (o, row) in chunk.chunks_mut(p).enumerate() {
            let bv = bdat[o];
            for v in row.iter_mut() {
                *v = *v + bv;
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct ConvGrads<T: Element> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let bias_probe = Tensor::zeros(vec![weight.shape()[0]]);
    let d = validate(input, weight, &bias_probe, stride, padding)?;
    if grad_out.shape() != [d.b, d.o, d.oh, d.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream shape {:?}, expected {:?}", grad_out.shape(), [d.b, d.o, d.oh, d.ow]),
        ));
    }
    let p = d.oh * d.ow;
    let ckk = d.c * d.k * d.k;
    let src = input.data();
    let gout = grad_out.data();
    let pointwise = is_pointwise(&d, stride, padding);

    // bias: plain per-channel reduction in batch order
    let mut gbias = Tensor::zeros(vec![d.o]);
    {
        let gb = gbias.data_mut();
        for b in 0..d.b {
            for o in 0..d.o {
                let row = &gout[(b * d.o + o) * p..(b * d.o + o + 1) * p];
                let mut acc = T::zero();
                for &v in row {
                    acc = acc + v;
                }
                gb[o] = gb[o] + acc;
            }
        }
    }

    // weight: per-sample GEMM gout_b · cols_b^T, reduced in batch order
    let per_sample: Vec<Vec<T>> = exec::map_indexed(d.b, |b| {
        let sample = &src[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        let gslice = &gout[b * d.o * p..(b + 1) * d.o * p];
        let mut colst = vec![T::zero(); p * ckk];
        if pointwise {
            transpose(sample, ckk, p, &mut colst);
        } else {
            let mut cols = vec![T::zero(); ckk * p];
            im2col(sample, &d, stride, padding, &mut cols);
            transpose(&cols, ckk, p, &mut colst);
        }
        let mut gw = vec![T::zero(); d.o * ckk];
        T::gemm(d.o, p, ckk, T::one(), gslice, &colst, T::zero(), &mut gw);
        gw
    });
    let mut gweight = Tensor::zeros(weight.shape().to_vec());
    {
        let gw = gweight.data_mut();
        for sample in &per_sample {
            for (dst, &v) in gw.iter_mut().zip(sample) {
                *dst = *dst + v;
            }
        }
    }

    // input: W^T · gout_b, then scatter back through the lowering
    let mut wt = vec![T::zero(); ckk * d.o];
    transpose(weight.data(), d.o, ckk, &mut wt);
    let mut ginput = Tensor::zeros(input.shape().to_vec());
    exec::for_each_chunk(ginput.data_mut(), d.c * d.h * d.w, |b, chunk| {
        let gslice = &gout[b * d.o * p..(b + 1) * d.o * p];
        if pointwise {
            T::gemm(ckk, d.o, p, T::one(), &wt, gslice, T::zero(), chunk);
        } else {
            let mut gcols = vec![T::zero(); ckk * p];
            T::gemm(ckk, d.o, p, T::one(), &wt, gslice, T::zero(), &mut gcols);
            col2im(&gcols, &d, stride, padding, chunk);
        }
    });

    Ok(ConvGrads { input: ginput, weight: gweight, bias: gbias })
}

/// `dst(cols x rows) = src(rows x cols)^T`, both row-major. Tiled so both
/// sides stay cache-resident on large matrices.
fn transpose<T: Element>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    debug_assert!(src.len() >= rows * cols && dst.len() >= rows * cols);
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        let r1 = (r0 + TILE).min(rows);
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Convolution layer: owns its parameters and the activation cache the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Element = f32> {
    weight: Parameter<T>,
    bias: Parameter<T>,
    stride: usize,
    padding: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    /// Kaiming-uniform weight init (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut RngState,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::uniform(vec![out_ch, in_ch, kernel, kernel], -bound, bound, rng);
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![out_ch])),
            stride,
            padding,
            cache: None,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, self.weight.value(), self.bias.value(), self.stride, self.padding)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, self.weight.value(), self.bias.value(), self.stride, self.padding)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| {
            Error::arg("conv2d", "backward called without a cached forward pass")
        })?;
        let grads =
            conv2d_backward(&x, self.weight.value(), grad_out, self.stride, self.padding)?;
        self.weight.accumulate_grad(grads.weight.data())?;
        self.bias.accumulate_grad(grads.bias.data())?;
        Ok(grads.input)
    }

    pub fn weight(&self) -> &Parameter<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Parameter<T> {
        &self.bias
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Element>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
            cache: None,
        }
    }
}
