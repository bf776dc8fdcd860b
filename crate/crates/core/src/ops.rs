//! Differentiable building blocks composed from candle primitives.
//!
//! Everything here is built from ops that carry a backward pass in candle, so
//! gradients reach the input image through any composition of these helpers.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Row-wise softmax over the last dimension.
pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let exp = xs.broadcast_sub(&max)?.exp()?;
    let den = exp.sum_keepdim(D::Minus1)?;
    Ok(exp.broadcast_div(&den)?)
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let shifted = xs.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Exact GELU, 0.5·x·(1 + erf(x/√2)). Composed from `erf` because candle's
/// fused gelu_erf backward uses a 6-digit 1/√(2π), which shows up in
/// finite-difference checks where gradient terms cancel.
pub fn gelu(xs: &Tensor) -> Result<Tensor> {
    let cdf = ((xs / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok((xs * cdf)?.affine(0.5, 0.0)?)
}

/// Mean and population variance along `dim`, dimension removed.
pub fn mean_var(xs: &Tensor, dim: usize) -> Result<(Tensor, Tensor)> {
    let mean = xs.mean_keepdim(dim)?;
    let centered = xs.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean(dim)?;
    Ok((mean.squeeze(dim)?, var))
}

pub fn layer_norm(xs: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = xs.mean_keepdim(D::Minus1)?;
    let centered = xs.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.to_scalar::<f64>()?)
}

pub fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DTYPE)?.to_vec1::<f64>()?)
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn zero_scalar() -> Result<Tensor> {
    Ok(Tensor::new(0f64, &device())?)
}
