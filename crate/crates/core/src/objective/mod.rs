//! The inversion objective.
//!
//! `total = γ1·L_task + γ2·L_base + β1·R_V + β2·R_patch + R_prior` with
//! `R_prior = α1·TV1 + α2·TV2 + α3·ℓ2`. The task loss is the sequence
//! cross-entropy for VLMs or the class cross-entropy for classifiers. Every
//! function here is pure and differentiable with respect to the image.

mod losses;
mod regularizers;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use losses::{base_loss_kl, base_loss_l2, ce_loss, sce_loss};
pub use regularizers::{
    aggregated_regularizer, l2_penalty, patch_regularizer, prior_regularizer, tv1, tv2,
    verifier_regularizer,
};

use crate::error::{invalid, Error, Result};
use crate::modelzoo::{
    embed_text, lm_forward, LayerActivations, ModelSuite, MultimodalSequence, PromptSpec,
};
use crate::ops::{self, zero_scalar};
use crate::statcapture::{BNStatistics, LayerStatistics};

/// Scaling factors of the objective. All must be finite and nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl ObjectiveWeights {
    /// Only the task loss, at unit scale.
    pub fn task_only() -> Self {
        Self {
            gamma1: 1.0,
            ..Self::default()
        }
    }

    /// Every term at unit scale.
    pub fn unit() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
        }
    }

    /// Scales tuned for classifier inversion with a ViT-B/16 sized model.
    pub fn vit_tuned() -> Self {
        Self {
            gamma1: 0.3,
            gamma2: 5e-5,
            beta1: 1e-4,
            beta2: 4e-3,
            alpha1: 3e-4,
            alpha2: 1e-4,
            alpha3: 1e-5,
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!(
                    "weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Vlm,
    Vit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLossVariant {
    #[default]
    L2,
    Kl,
}

/// Which output positions score a target token in the sequence loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// The position with the highest detached logit for the token.
    #[default]
    HighestLogit,
    /// Every position whose detached argmax is the token; no loss when none is.
    DecodedMatch,
}

/// Spread statistic compared by a statistics-matching term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    Std,
    Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveOptions {
    #[serde(default = "default_base_spread")]
    pub base_spread: Spread,
    #[serde(default = "default_verifier_spread")]
    pub verifier_spread: Spread,
    #[serde(default)]
    pub l2_per_element: bool,
}

fn default_base_spread() -> Spread {
    Spread::Std
}

fn default_verifier_spread() -> Spread {
    Spread::Var
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            base_spread: Spread::Std,
            verifier_spread: Spread::Var,
            l2_per_element: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub mode: Mode,
    #[serde(default)]
    pub target_ids: Vec<u32>,
    #[serde(default)]
    pub class_label: Option<usize>,
    #[serde(default)]
    pub base_loss: BaseLossVariant,
    /// Length of the scored answer window; defaults to the target length.
    #[serde(default)]
    pub answer_len: Option<usize>,
    #[serde(default)]
    pub selection: SelectionRule,
}

impl TargetSpec {
    pub fn vlm(target_ids: Vec<u32>) -> Self {
        Self {
            mode: Mode::Vlm,
            target_ids,
            class_label: None,
            base_loss: BaseLossVariant::L2,
            answer_len: None,
            selection: SelectionRule::HighestLogit,
        }
    }

    pub fn vit(class_label: usize) -> Self {
        Self {
            mode: Mode::Vit,
            target_ids: Vec::new(),
            class_label: Some(class_label),
            base_loss: BaseLossVariant::L2,
            answer_len: None,
            selection: SelectionRule::HighestLogit,
        }
    }

    pub fn with_base_loss(mut self, variant: BaseLossVariant) -> Self {
        self.base_loss = variant;
        self
    }

    pub fn answer_window(&self) -> usize {
        self.answer_len
            .unwrap_or(self.target_ids.len())
            .max(self.target_ids.len())
            .max(1)
    }

    pub fn validate(&self, suite: &ModelSuite) -> Result<()> {
        match self.mode {
            Mode::Vlm => {
                if self.target_ids.is_empty() {
                    return Err(invalid("vlm target needs at least one token id"));
                }
                let v = suite.vocab().len();
                if let Some(bad) = self.target_ids.iter().find(|&&t| t as usize >= v) {
                    return Err(invalid(format!("target id {bad} outside vocabulary")));
                }
            }
            Mode::Vit => {
                let label = self
                    .class_label
                    .ok_or_else(|| invalid("vit target needs a class label"))?;
                let k = suite.classifier()?.num_classes();
                if label >= k {
                    return Err(invalid(format!("class label {label} outside {k} classes")));
                }
            }
        }
        Ok(())
    }
}

/// Itemized objective value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Task loss: sequence CE (vlm) or class CE (vit).
    pub l_sce: f64,
    pub l_base: f64,
    pub r_tv1: f64,
    pub r_tv2: f64,
    pub r_l2: f64,
    pub r_prior: f64,
    pub r_patch: f64,
    pub r_v: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 9] = [
        "l_sce", "l_base", "r_tv1", "r_tv2", "r_l2", "r_prior", "r_patch", "r_v", "total",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.l_sce,
            self.l_base,
            self.r_tv1,
            self.r_tv2,
            self.r_l2,
            self.r_prior,
            self.r_patch,
            self.r_v,
            self.total,
        ]
    }

    /// The weighted sum of the parts.
    pub fn recombine(&self, w: &ObjectiveWeights) -> f64 {
        let prior = w.alpha1 * self.r_tv1 + w.alpha2 * self.r_tv2 + w.alpha3 * self.r_l2;
        w.gamma1 * self.l_sce
            + w.gamma2 * self.l_base
            + w.beta1 * self.r_v
            + w.beta2 * self.r_patch
            + prior
    }
}

pub struct ObjectiveValue {
    pub breakdown: LossBreakdown,
    /// Differentiable scalar total.
    pub total: Tensor,
}

/// Reference statistics consumed by the objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceStats<'a> {
    pub encoder: Option<&'a LayerStatistics>,
    pub bn: Option<&'a BNStatistics>,
}

/// Embeds the prompt, appends `window - 1` greedily decoded answer tokens and
/// returns the logits at the `window` positions that predict the answer.
fn answer_logits(
    suite: &ModelSuite,
    prompt: &PromptSpec,
    image_tokens: &Tensor,
    window: usize,
) -> Result<crate::modelzoo::LogitSequence> {
    let text = embed_text(suite, prompt)?;
    let seq = MultimodalSequence::new(&text.embeddings, image_tokens)?;
    let prompt_len = seq.total_len();
    let mut full = seq.clone();
    for _ in 1..window {
        let logits = suite.lm.forward(&full.embeddings.detach())?;
        let last = logits.get(logits.dims()[0] - 1)?;
        let id = ops::argmax(&ops::flat(&last)?) as u32;
        full = full.extend(&suite.lm.embed_tokens(&[id])?.detach())?;
    }
    lm_forward(suite.lm.as_ref(), &full)?.narrow(prompt_len - 1, window)
}

/// Evaluates the full objective for a (B, C, H, W) image batch.
///
/// VLM mode requires a prompt and a batch of one image. Statistics-matching
/// terms are evaluated whenever their statistics are supplied and are an
/// error to omit when their weight is nonzero.
pub fn total_objective(
    suite: &ModelSuite,
    images: &Tensor,
    prompt: Option<&PromptSpec>,
    target: &TargetSpec,
    refs: ReferenceStats<'_>,
    weights: &ObjectiveWeights,
    opts: &ObjectiveOptions,
) -> Result<ObjectiveValue> {
    weights.validate()?;
    target.validate(suite)?;
    if refs.encoder.is_none() && weights.gamma2 > 0.0 {
        return Err(Error::Missing(
            "encoder reference statistics (gamma2 > 0)".into(),
        ));
    }
    if refs.bn.is_none() && weights.beta1 > 0.0 {
        return Err(Error::Missing("verifier BN statistics (beta1 > 0)".into()));
    }

    let (task, acts, patch): (Tensor, LayerActivations, usize) = match target.mode {
        Mode::Vlm => {
            let prompt = prompt.ok_or_else(|| Error::Missing("prompt for vlm mode".into()))?;
            if images.dim(0)? != 1 {
                return Err(invalid("vlm mode optimizes a single image"));
            }
            let enc = suite.encoder.forward(images)?;
            let logits = answer_logits(
                suite,
                prompt,
                &enc.tokens.squeeze(0)?,
                target.answer_window(),
            )?;
            let l = sce_loss(&logits, &target.target_ids, target.selection)?;
            (l, enc.activations, suite.encoder.patch_size())
        }
        Mode::Vit => {
            let classifier = suite.classifier()?;
            let out = classifier.forward(images)?;
            let label = target.class_label.expect("validated");
            (
                ce_loss(&out.logits, label)?,
                out.activations,
                classifier.patch_size(),
            )
        }
    };

    let l_base = match refs.encoder {
        Some(reference) => match target.base_loss {
            BaseLossVariant::L2 => base_loss_l2(&acts, reference, opts.base_spread)?,
            BaseLossVariant::Kl => base_loss_kl(&acts, reference)?,
        },
        None => zero_scalar()?,
    };
    let r_v = match refs.bn {
        Some(bn) => {
            let out = suite.verifier()?.forward(images)?;
            verifier_regularizer(&out.bn_stats, bn, opts.verifier_spread)?
        }
        None => zero_scalar()?,
    };
    let r_tv1 = tv1(images)?;
    let r_tv2 = tv2(images)?;
    let r_l2 = l2_penalty(images, opts.l2_per_element)?;
    let r_patch = patch_regularizer(images, patch)?;
    let r_prior =
        (((&r_tv1 * weights.alpha1)? + (&r_tv2 * weights.alpha2)?)? + (&r_l2 * weights.alpha3)?)?;

    let total = ((&task * weights.gamma1)? + (&l_base * weights.gamma2)?)?;
    let total = ((total + (&r_v * weights.beta1)?)? + (&r_patch * weights.beta2)?)?;
    let total = (total + &r_prior)?;

    let breakdown = LossBreakdown {
        l_sce: ops::scalar(&task)?,
        l_base: ops::scalar(&l_base)?,
        r_tv1: ops::scalar(&r_tv1)?,
        r_tv2: ops::scalar(&r_tv2)?,
        r_l2: ops::scalar(&r_l2)?,
        r_prior: ops::scalar(&r_prior)?,
        r_patch: ops::scalar(&r_patch)?,
        r_v: ops::scalar(&r_v)?,
        total: ops::scalar(&total)?,
    };
    Ok(ObjectiveValue { breakdown, total })
}
