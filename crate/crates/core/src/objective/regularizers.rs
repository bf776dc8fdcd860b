//! Image priors and the BN-statistics regularizer.
//!
//! All image terms accept (C, H, W) or (B, C, H, W) tensors. Each is an
//! unnormalized sum over one image; batches report the mean over images.

use candle_core::Tensor;

use super::{ObjectiveWeights, Spread};
use crate::error::{invalid, Error, Result};
use crate::modelzoo::BnBatchStats;
use crate::ops::{device, zero_scalar};
use crate::statcapture::BNStatistics;

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match image.rank() {
        3 => Ok(image.unsqueeze(0)?),
        4 => Ok(image.clone()),
        r => Err(invalid(format!(
            "image tensor must be rank 3 or 4, got rank {r}"
        ))),
    }
}

fn per_image(sum: Tensor, batch: usize) -> Result<Tensor> {
    Ok((sum / batch as f64)?)
}

/// Horizontal and vertical neighbour differences.
fn neighbour_diffs(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(invalid(format!(
            "total variation needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let dx = (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?;
    let dy = (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?;
    Ok((dx, dy))
}

/// Anisotropic total variation with absolute differences.
pub fn tv1(image: &Tensor) -> Result<Tensor> {
    let x = as_batch(image)?;
    let (dx, dy) = neighbour_diffs(&x)?;
    per_image((dx.abs()?.sum_all()? + dy.abs()?.sum_all()?)?, x.dim(0)?)
}

/// Anisotropic total variation with squared differences.
pub fn tv2(image: &Tensor) -> Result<Tensor> {
    let x = as_batch(image)?;
    let (dx, dy) = neighbour_diffs(&x)?;
    per_image((dx.sqr()?.sum_all()? + dy.sqr()?.sum_all()?)?, x.dim(0)?)
}

/// Squared ℓ2 norm; optionally divided by the number of elements per image.
pub fn l2_penalty(image: &Tensor, per_element: bool) -> Result<Tensor> {
    let x = as_batch(image)?;
    let (b, c, h, w) = x.dims4()?;
    let sum = per_image(x.sqr()?.sum_all()?, b)?;
    if per_element {
        Ok((sum / (c * h * w) as f64)?)
    } else {
        Ok(sum)
    }
}

pub fn prior_regularizer(
    image: &Tensor,
    alpha1: f64,
    alpha2: f64,
    alpha3: f64,
    per_element_l2: bool,
) -> Result<Tensor> {
    let t1 = (tv1(image)? * alpha1)?;
    let t2 = (tv2(image)? * alpha2)?;
    let t3 = (l2_penalty(image, per_element_l2)? * alpha3)?;
    Ok(((t1 + t2)? + t3)?)
}

/// Squared differences across every internal patch seam: columns
/// `(jP - 1, jP)` and rows `(iP - 1, iP)`.
pub fn patch_regularizer(image: &Tensor, patch: usize) -> Result<Tensor> {
    let x = as_batch(image)?;
    let (b, _, h, w) = x.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!(
            "{h}x{w} image is not divisible into {patch}-pixel patches"
        )));
    }
    let mut total = zero_scalar()?;
    for (dim, len) in [(3usize, w), (2usize, h)] {
        let seams: Vec<u32> = (1..len / patch).map(|j| (j * patch) as u32).collect();
        if seams.is_empty() {
            continue;
        }
        let before: Vec<u32> = seams.iter().map(|s| s - 1).collect();
        let after = Tensor::new(seams.as_slice(), &device())?;
        let before = Tensor::new(before.as_slice(), &device())?;
        let diff = (x.index_select(&after, dim)? - x.index_select(&before, dim)?)?;
        total = (total + diff.sqr()?.sum_all()?)?;
    }
    per_image(total, b)
}

/// Σ_k ‖μ_k(batch) − μ_k(running)‖² + ‖s_k(batch) − s_k(running)‖² where `s` is
/// the variance by default.
pub fn verifier_regularizer(
    batch: &[BnBatchStats],
    running: &BNStatistics,
    spread: Spread,
) -> Result<Tensor> {
    if batch.len() != running.layers.len() {
        return Err(Error::LayerMismatch {
            expected: running.layers.iter().map(|l| l.id).collect(),
            found: (0..batch.len()).collect(),
        });
    }
    let mut total = zero_scalar()?;
    for (b, r) in batch.iter().zip(&running.layers) {
        let c = b.mean.elem_count();
        if r.mean.len() != c || r.spread.len() != c {
            return Err(Error::Shape {
                expected: format!("{} channels in BN layer {}", r.mean.len(), r.id),
                received: format!("{c}"),
            });
        }
        let mu = Tensor::new(r.mean.as_slice(), &device())?;
        let var = Tensor::new(r.spread.as_slice(), &device())?;
        let (batch_s, run_s) = match spread {
            Spread::Var => (b.var.clone(), var),
            Spread::Std => (b.var.sqrt()?, var.sqrt()?),
        };
        let term = ((&b.mean - mu)?.sqr()?.sum_all()? + (batch_s - run_s)?.sqr()?.sum_all()?)?;
        total = (total + term)?;
    }
    Ok(total)
}

/// β1·R_V + β2·R_patch + R_prior. `r_v` is the already computed verifier term
/// (zero when no verifier statistics are in play).
pub fn aggregated_regularizer(
    image: &Tensor,
    r_v: &Tensor,
    patch: usize,
    weights: &ObjectiveWeights,
    per_element_l2: bool,
) -> Result<Tensor> {
    let prior = prior_regularizer(
        image,
        weights.alpha1,
        weights.alpha2,
        weights.alpha3,
        per_element_l2,
    )?;
    let rv = (r_v * weights.beta1)?;
    let rp = (patch_regularizer(image, patch)? * weights.beta2)?;
    Ok(((rv + rp)? + prior)?)
}
