//! Causal language model contract, the toy transformer LM, and the
//! sequence plumbing between text, image tokens and logits.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{Block, LayerNorm, Linear};
use super::params::{join, Init, ParamKind, Params};
use super::vocab::{Vocab, EOS};
use crate::error::{invalid, Error, Result};
use crate::ops::{self, device};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_positions: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            max_positions: 256,
        }
    }
}

/// `[text tokens, image tokens, answer tokens]` embedded to width Ω.
#[derive(Debug, Clone)]
pub struct MultimodalSequence {
    /// (T_total, Ω)
    pub embeddings: Tensor,
    pub text_len: usize,
    pub image_len: usize,
}

impl MultimodalSequence {
    pub fn new(text: &Tensor, image: &Tensor) -> Result<Self> {
        let (text_len, wt) = text.dims2()?;
        let (image_len, wi) = image.dims2()?;
        if wt != wi {
            return Err(Error::Shape {
                expected: format!("image token width {wt}"),
                received: format!("{wi}"),
            });
        }
        Ok(Self {
            embeddings: Tensor::cat(&[text, image], 0)?,
            text_len,
            image_len,
        })
    }

    pub fn total_len(&self) -> usize {
        self.embeddings.dims()[0]
    }

    /// Appends embedded answer tokens after the prompt.
    pub fn extend(&self, extra: &Tensor) -> Result<Self> {
        Ok(Self {
            embeddings: Tensor::cat(&[&self.embeddings, extra], 0)?,
            text_len: self.text_len,
            image_len: self.image_len,
        })
    }
}

/// Per-position next-token distributions.
#[derive(Debug, Clone)]
pub struct LogitSequence {
    /// (positions, V)
    pub raw_logits: Tensor,
    /// Row-wise softmax of `raw_logits`.
    pub probs: Tensor,
}

impl LogitSequence {
    pub fn from_raw(raw_logits: Tensor) -> Result<Self> {
        let probs = ops::softmax_last(&raw_logits)?;
        Ok(Self { raw_logits, probs })
    }

    pub fn positions(&self) -> usize {
        self.raw_logits.dims()[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.raw_logits.dims()[1]
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            raw_logits: self.raw_logits.narrow(0, start, len)?,
            probs: self.probs.narrow(0, start, len)?,
        })
    }
}

/// Frozen autoregressive language model contract (Φ).
pub trait LanguageModel: Params + Send + Sync {
    fn width(&self) -> usize;
    fn vocab(&self) -> &Vocab;
    /// (len, Ω) embeddings of token ids.
    fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor>;
    /// Raw (T, V) next-token logits; row `i` depends only on rows `..=i`.
    fn forward(&self, embeddings: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct ToyCausalLm {
    cfg: LmConfig,
    vocab: Vocab,
    tok_embed: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl ToyCausalLm {
    pub(crate) fn new(cfg: &LmConfig, init: &mut Init) -> Result<Self> {
        let vocab = Vocab::toy();
        if cfg.vocab_size != vocab.len() {
            return Err(invalid(format!(
                "toy vocabulary has {} entries, config asks for {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(invalid("width must be divisible by the head count"));
        }
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            tok_embed: init.normal(&[cfg.vocab_size, cfg.width], 0.5)?,
            pos: init.normal(&[cfg.max_positions, cfg.width], 0.1)?,
            blocks: (0..cfg.depth)
                .map(|_| Block::new(init, cfg.width, cfg.heads, cfg.mlp_ratio, true))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(init, cfg.width)?,
            head: Linear::new(init, cfg.width, cfg.vocab_size)?,
        })
    }
}

impl LanguageModel for ToyCausalLm {
    fn width(&self) -> usize {
        self.cfg.width
    }
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(invalid(format!("token id {bad} outside vocabulary")));
        }
        let idx = Tensor::new(ids, &device())?;
        Ok(self.tok_embed.index_select(&idx, 0)?)
    }
    fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (t, w) = embeddings.dims2()?;
        if w != self.cfg.width {
            return Err(Error::Shape {
                expected: format!("embedding width {}", self.cfg.width),
                received: format!("{w}"),
            });
        }
        if t > self.cfg.max_positions {
            return Err(invalid(format!(
                "sequence of {t} tokens exceeds {} positions",
                self.cfg.max_positions
            )));
        }
        let mut h = (embeddings + self.pos.narrow(0, 0, t)?)?.unsqueeze(0)?;
        for block in &self.blocks {
            h = block.forward(&h)?.hidden;
        }
        Ok(self.head.forward(&self.ln_f.forward(&h)?)?.squeeze(0)?)
    }
}

impl Params for ToyCausalLm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(
            &join(prefix, "tok_embed"),
            ParamKind::Weight,
            &self.tok_embed,
        );
        f(&join(prefix, "pos"), ParamKind::Weight, &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(
            &join(prefix, "tok_embed"),
            ParamKind::Weight,
            &mut self.tok_embed,
        );
        f(&join(prefix, "pos"), ParamKind::Weight, &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Runs the language model over a multimodal sequence; one row per position.
pub fn lm_forward(lm: &dyn LanguageModel, seq: &MultimodalSequence) -> Result<LogitSequence> {
    LogitSequence::from_raw(lm.forward(&seq.embeddings)?)
}

/// Greedy autoregressive decoding; ties resolve to the lowest token id.
///
/// Generation stops after an end token (which is kept) or `max_len` tokens.
/// Nothing here is differentiated.
pub fn greedy_decode(
    lm: &dyn LanguageModel,
    seq: &MultimodalSequence,
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(invalid("max_len must be at least 1"));
    }
    let mut embeddings = seq.embeddings.detach();
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let logits = lm.forward(&embeddings)?;
        let last = logits.get(logits.dims()[0] - 1)?;
        let id = ops::argmax(&ops::flat(&last)?) as u32;
        out.push(id);
        if id == EOS {
            break;
        }
        embeddings = Tensor::cat(&[&embeddings, &lm.embed_tokens(&[id])?.detach()], 0)?;
    }
    Ok(out)
}
