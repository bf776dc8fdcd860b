//! Task losses (sequence and class cross-entropy) and the layer-statistics
//! base feature losses.

use candle_core::Tensor;

use super::{SelectionRule, Spread};
use crate::error::{invalid, Error, Result};
use crate::modelzoo::{LayerActivations, LogitSequence};
use crate::ops::{self, device, mean_var};
use crate::statcapture::LayerStatistics;

/// Sequence cross-entropy on the answer window.
///
/// Under [`SelectionRule::HighestLogit`] each target token τ is scored at the
/// single position whose detached raw logit for τ is largest (lowest position
/// on ties). The selection carries no gradient; the log-probability does.
/// Per-token losses are averaged over the target tokens.
pub fn sce_loss(logits: &LogitSequence, target_ids: &[u32], rule: SelectionRule) -> Result<Tensor> {
    if target_ids.is_empty() {
        return Err(invalid(
            "sequence cross-entropy needs at least one target token",
        ));
    }
    let (positions, vocab) = logits.raw_logits.dims2()?;
    if let Some(bad) = target_ids.iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid(format!(
            "target id {bad} outside vocabulary of {vocab}"
        )));
    }
    if positions < target_ids.len() {
        return Err(invalid(format!(
            "{positions} output positions cannot cover {} target tokens",
            target_ids.len()
        )));
    }
    let detached = ops::flat(&logits.raw_logits.detach())?;
    let logp = ops::log_softmax_last(&logits.raw_logits)?;
    let mut terms = Vec::with_capacity(target_ids.len());
    for &tau in target_ids {
        let t = tau as usize;
        let rows: Vec<usize> = match rule {
            SelectionRule::HighestLogit => {
                let column: Vec<f64> = (0..positions).map(|p| detached[p * vocab + t]).collect();
                vec![ops::argmax(&column)]
            }
            SelectionRule::DecodedMatch => (0..positions)
                .filter(|&p| ops::argmax(&detached[p * vocab..(p + 1) * vocab]) == t)
                .collect(),
        };
        if rows.is_empty() {
            terms.push(ops::zero_scalar()?);
            continue;
        }
        let picked: Vec<Tensor> = rows
            .iter()
            .map(|&p| logp.get(p)?.get(t))
            .collect::<candle_core::Result<_>>()?;
        terms.push(Tensor::stack(&picked, 0)?.mean_all()?.neg()?);
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// Mean over the batch of `-log softmax(logits)[label]`; accepts (K) or (B, K).
pub fn ce_loss(logits: &Tensor, label: usize) -> Result<Tensor> {
    let logits = if logits.rank() == 1 {
        logits.unsqueeze(0)?
    } else {
        logits.clone()
    };
    let (b, k) = logits.dims2()?;
    if label >= k {
        return Err(invalid(format!("class label {label} outside {k} classes")));
    }
    let idx = Tensor::from_vec(vec![label as u32; b], (b, 1), &device())?;
    Ok(ops::log_softmax_last(&logits)?
        .gather(&idx, 1)?
        .mean_all()?
        .neg()?)
}

struct LayerMoments {
    mean: Tensor,
    var: Tensor,
    ref_mean: Tensor,
    ref_std: Tensor,
}

/// Per-image (B, Ω) token-axis moments paired with the reference vectors.
fn paired_moments(
    acts: &LayerActivations,
    reference: &LayerStatistics,
) -> Result<Vec<LayerMoments>> {
    if reference.layers.is_empty() {
        return Err(invalid("reference statistics contain no layers"));
    }
    let mut out = Vec::with_capacity(reference.layers.len());
    for layer in &reference.layers {
        let act = acts.get(&layer.id).ok_or_else(|| Error::LayerMismatch {
            expected: reference.layer_ids(),
            found: acts.keys().copied().collect(),
        })?;
        let (_, _, width) = act.dims3()?;
        if layer.mean.len() != width || layer.spread.len() != width {
            return Err(Error::Shape {
                expected: format!("{} channels at layer {}", layer.mean.len(), layer.id),
                received: format!("{width}"),
            });
        }
        let (mean, var) = mean_var(act, 1)?;
        out.push(LayerMoments {
            mean,
            var,
            ref_mean: Tensor::new(layer.mean.as_slice(), &device())?.unsqueeze(0)?,
            ref_std: Tensor::new(layer.spread.as_slice(), &device())?.unsqueeze(0)?,
        });
    }
    Ok(out)
}

/// Σ_l ‖μ(ẑ_l) − μ̄_l‖² + ‖σ(ẑ_l) − σ̄_l‖², per image then averaged over the batch.
pub fn base_loss_l2(
    acts: &LayerActivations,
    reference: &LayerStatistics,
    spread: Spread,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for m in paired_moments(acts, reference)? {
        let (s, s_ref) = match spread {
            Spread::Std => (m.var.sqrt()?, m.ref_std.clone()),
            Spread::Var => (m.var.clone(), m.ref_std.sqr()?),
        };
        let term = (m.mean.broadcast_sub(&m.ref_mean)?.sqr()?.sum(1)?
            + s.broadcast_sub(&s_ref)?.sqr()?.sum(1)?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer").mean_all()?)
}

/// Σ_l Σ_c KL(N(μ̂, σ̂²) ‖ N(μ̄, σ̄²)), per image then averaged over the batch.
pub fn base_loss_kl(acts: &LayerActivations, reference: &LayerStatistics) -> Result<Tensor> {
    for layer in &reference.layers {
        if layer.spread.iter().any(|&s| s <= 0.0) {
            return Err(invalid(format!(
                "reference layer {} has zero variance; the Gaussian is singular",
                layer.id
            )));
        }
    }
    let mut total: Option<Tensor> = None;
    for m in paired_moments(acts, reference)? {
        let ref_var = m.ref_std.sqr()?;
        // ln(σ̄/σ̂) = ½ ln σ̄² − ½ ln σ̂²
        let log_ratio = ((ref_var.log()?.broadcast_sub(&m.var.log()?))? * 0.5)?;
        let quad = (m
            .var
            .broadcast_add(&m.mean.broadcast_sub(&m.ref_mean)?.sqr()?)?)
        .broadcast_div(&(ref_var * 2.0)?)?;
        let term = ((log_ratio + quad)? - 0.5)?.sum(1)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer").mean_all()?)
}
