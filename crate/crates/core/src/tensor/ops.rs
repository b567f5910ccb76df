//! Pointwise and resampling kernels: ReLU, residual add, nearest-neighbour
//! 2x upsample, and the MSE training loss. Each forward has a matching
//! reverse-mode companion.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// `max(x, 0)` elementwise.
pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let v = x.data()[i];
        if v > T::zero() {
            v
        } else {
            T::zero()
        }
    })
}

/// Gradient of [`relu`]: passes upstream where the *input* was strictly
/// positive; the subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("input {:?} vs upstream {:?}", input.shape(), grad_out.shape()),
        ));
    }
    Ok(Tensor::from_fn(input.shape().to_vec(), |i| {
        if input.data()[i] > T::zero() {
            grad_out.data()[i]
        } else {
            T::zero()
        }
    }))
}

/// Elementwise sum of two same-shape tensors (the residual merge).
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + b.data()[i]))
}

/// Gradient of [`add`]: upstream flows unchanged to both operands.
pub fn add_backward<T: Element>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Nearest-neighbour 2x spatial upsample of a `B x C x H x W` tensor.
pub fn upsample_nearest2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * 2, w * 2);
    let src = x.data();
    let mut out = Tensor::zeros(vec![b, c, oh, ow]);
    let dst = out.data_mut();
    for bc in 0..b * c {
        let s = &src[bc * h * w..(bc + 1) * h * w];
        let d = &mut dst[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..oh {
            let sy = y / 2;
            for xq in 0..ow {
                d[y * ow + xq] = s[sy * w + xq / 2];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`upsample_nearest2x`]: each input cell receives the sum of its
/// four fan-out cells.
pub fn upsample_nearest2x_backward<T: Element>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, oh, ow) = grad_out.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape(
            "upsample_nearest2x_backward",
            format!("upstream spatial dims must be even, got {}x{}", oh, ow),
        ));
    }
    let (h, w) = (oh / 2, ow / 2);
    let src = grad_out.data();
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    let dst = out.data_mut();
    for bc in 0..b * c {
        let g = &src[bc * oh * ow..(bc + 1) * oh * ow];
        let d = &mut dst[bc * h * w..(bc + 1) * h * w];
        for y in 0..oh {
            for xq in 0..ow {
                d[(y / 2) * w + xq / 2] = d[(y / 2) * w + xq / 2] + g[y * ow + xq];
            }
        }
    }
    Ok(out)
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Element>(recon: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if recon.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", recon.shape(), target.shape()),
        ));
    }
    if recon.is_empty() {
        return Err(Error::EmptyInput { op: "mse_loss" });
    }
    let n = T::from_f64c(recon.len() as f64);
    let sum: T = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(&r, &t)| {
            let d = r - t;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Gradient of [`mse_loss`] with respect to `recon`: `2 (recon - target) / N`.
pub fn mse_loss_backward<T: Element>(recon: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if recon.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss_backward",
            format!("{:?} vs {:?}", recon.shape(), target.shape()),
        ));
    }
    if recon.is_empty() {
        return Err(Error::EmptyInput { op: "mse_loss_backward" });
    }
    let scale = T::from_f64c(2.0 / recon.len() as f64);
    Ok(Tensor::from_fn(recon.shape().to_vec(), |i| {
        (recon.data()[i] - target.data()[i]) * scale
    }))
}
