//! Per-channel batch normalization for `B x C x H x W` activations.
//!
//! Train mode normalizes by batch statistics (biased variance) and maintains
//! exponential-moving-average running stats; infer mode applies the running
//! stats only. Channel reductions accumulate in f64 in a fixed order, so
//! results do not depend on batch size quirks or the parallel schedule
//! (channels are independent).

use super::{Element, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
struct BnCache<T: Element> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Element = f32> {
    gamma: Parameter<T>,
    beta: Parameter<T>,
    running_mean: Vec<T>,
    running_var: Vec<T>,
    momentum: f64,
    epsilon: f64,
    initialized: bool,
    cache: Option<BnCache<T>>,
}

pub const BN_DEFAULT_MOMENTUM: f64 = 0.1;
pub const BN_DEFAULT_EPSILON: f64 = 1e-5;

impl<T: Element> BatchNorm2d<T> {
    /// gamma = 1, beta = 0; running stats start at mean 0 / var 1 but are
    /// unusable for inference until a training pass (or an explicit set).
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(vec![channels], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_DEFAULT_MOMENTUM,
            epsilon: BN_DEFAULT_EPSILON,
            initialized: false,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Zeroes the per-channel scale so the layer initially emits only its
    /// (zero) shift. A residual branch closed by such a layer starts as a
    /// no-op, which keeps the output variance of nested skip sums bounded at
    /// initialization instead of compounding per unit.
    pub fn zero_scale(&mut self) {
        self.gamma.value_mut().data_mut().fill(T::zero());
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(
                "batchnorm2d",
                format!("input has {} channels, layer has {}", c, self.channels()),
            ));
        }
        Ok((b, c, h, w))
    }

    /// Normalizes by batch statistics, updates running stats, caches what the
    /// backward pass needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.check_input(x)?;
        let n = b * h * w;
        if n < 2 {
            return Err(Error::arg(
                "batchnorm2d",
                format!("train mode needs at least 2 values per channel, got {}", n),
            ));
        }
        let plane = h * w;
        let src = x.data();

        // per-channel mean/variance, f64 accumulation in fixed order
        let stats: Vec<(f64, f64)> = exec::map_indexed(c, |ch| {
            let mut sum = 0.0f64;
            for bi in 0..b {
                let s = &src[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                for &v in s {
                    sum += v.to_f64c();
                }
            }
            let mean = sum / n as f64;
            let mut ss = 0.0f64;
            for bi in 0..b {
                let s = &src[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                for &v in s {
                    let d = v.to_f64c() - mean;
                    ss += d * d;
                }
            }
            (mean, ss / n as f64)
        });

        let inv_std: Vec<T> =
            stats.iter().map(|&(_, var)| T::from_f64c(1.0 / (var + self.epsilon).sqrt())).collect();
        let mean_t: Vec<T> = stats.iter().map(|&(m, _)| T::from_f64c(m)).collect();

        let mut normalized = Tensor::zeros(x.shape().to_vec());
        let mut out = Tensor::zeros(x.shape().to_vec());
        {
            let norm = normalized.data_mut();
            exec::for_each_chunk(norm, plane, |i, chunk| {
                let ch = i % c;
                let base = i * plane;
                for (j, v) in chunk.iter_mut().enumerate() {
                    *v = (src[base + j] - mean_t[ch]) * inv_std[ch];
                }
            });
            let norm = normalized.data();
            let gamma = self.gamma.value().data();
            let beta = self.beta.value().data();
            exec::for_each_chunk(out.data_mut(), plane, |i, chunk| {
                let ch = i % c;
                let base = i * plane;
                for (j, v) in chunk.iter_mut().enumerate() {
                    *v = norm[base + j] * gamma[ch] + beta[ch];
                }
            });
        }

        let m = T::from_f64c(self.momentum);
        for ch in 0..c {
            let (bm, bv) = (T::from_f64c(stats[ch].0), T::from_f64c(stats[ch].1));
            self.running_mean[ch] = self.running_mean[ch] + m * (bm - self.running_mean[ch]);
            self.running_var[ch] = self.running_var[ch] + m * (bv - self.running_var[ch]);
        }
        self.initialized = true;
        self.cache = Some(BnCache { normalized, inv_std });
        Ok(out)
    }

    /// Applies running statistics; rejected until they exist.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = self.check_input(x)?;
        if !self.initialized {
            return Err(Error::arg(
                "batchnorm2d",
                "infer mode requires initialized running statistics",
            ));
        }
        let plane = h * w;
        let src = x.data();
        let gamma = self.gamma.value().data();
        let beta = self.beta.value().data();
        let scale: Vec<T> = (0..c)
            .map(|ch| {
                gamma[ch]
                    * T::from_f64c(1.0 / (self.running_var[ch].to_f64c() + self.epsilon).sqrt())
            })
            .collect();
        let mut out = Tensor::zeros(x.shape().to_vec());
        exec::for_each_chunk(out.data_mut(), plane, |i, chunk| {
            let ch = i % c;
            let base = i * plane;
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = (src[base + j] - self.running_mean[ch]) * scale[ch] + beta[ch];
            }
        });
        Ok(out)
    }

    /// Full batch-norm gradient through the cached train-mode statistics.
    /// Accumulates gamma/beta grads, returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::arg("batchnorm2d", "backward called without a cached train forward")
        })?;
        let (b, c, h, w) = self.check_input(grad_out)?;
        if grad_out.shape() != cache.normalized.shape() {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "upstream shape {:?} vs cached {:?}",
                    grad_out.shape(),
                    cache.normalized.shape()
                ),
            ));
        }
        let n = b * h * w;
        let plane = h * w;
        let g = grad_out.data();
        let xn = cache.normalized.data();

        // per-channel Σg and Σ(g·x̂)
        let sums: Vec<(f64, f64)> = exec::map_indexed(c, |ch| {
            let mut sg = 0.0f64;
            let mut sgx = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                for j in 0..plane {
                    let gv = g[base + j].to_f64c();
                    sg += gv;
                    sgx += gv * xn[base + j].to_f64c();
                }
            }
            (sg, sgx)
        });

        let dgamma: Vec<T> = sums.iter().map(|&(_, sgx)| T::from_f64c(sgx)).collect();
        let dbeta: Vec<T> = sums.iter().map(|&(sg, _)| T::from_f64c(sg)).collect();
        self.gamma.accumulate_grad(&dgamma)?;
        self.beta.accumulate_grad(&dbeta)?;

        let gamma = self.gamma.value().data();
        let nf = n as f64;
        let mean_g: Vec<T> = sums.iter().map(|&(sg, _)| T::from_f64c(sg / nf)).collect();
        let mean_gx: Vec<T> = sums.iter().map(|&(_, sgx)| T::from_f64c(sgx / nf)).collect();
        let mut gin = Tensor::zeros(grad_out.shape().to_vec());
        exec::for_each_chunk(gin.data_mut(), plane, |i, chunk| {
            let ch = i % c;
            let base = i * plane;
            let k = gamma[ch] * cache.inv_std[ch];
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = k * (g[base + j] - mean_g[ch] - xn[base + j] * mean_gx[ch]);
            }
        });
        Ok(gin)
    }

    /// Overrides running statistics (also marks them initialized). Length must
    /// match the channel count.
    pub fn set_running_stats(&mut self, mean: &[T], var: &[T]) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "running stats length {}/{} vs {} channels",
                    mean.len(),
                    var.len(),
                    self.channels()
                ),
            ));
        }
        self.running_mean.copy_from_slice(mean);
        self.running_var.copy_from_slice(var);
        self.initialized = true;
        Ok(())
    }

    pub fn running_stats(&self) -> (&[T], &[T]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn gamma(&self) -> &Parameter<T> {
        &self.gamma
    }

    pub fn gamma_mut(&mut self) -> &mut Parameter<T> {
        &mut self.gamma
    }

    pub fn beta(&self) -> &Parameter<T> {
        &self.beta
    }

    pub fn beta_mut(&mut self) -> &mut Parameter<T> {
        &mut self.beta
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn cast<U: Element>(&self) -> BatchNorm2d<U> {
        BatchNorm2d {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
            running_var: self.running_var.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
            momentum: self.momentum,
            epsilon: self.epsilon,
            initialized: self.initialized,
            cache: None,
        }
    }
}
