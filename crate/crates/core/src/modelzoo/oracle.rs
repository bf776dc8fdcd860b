//! Hand-wired differentiable VLM whose answer is the dominant colour channel.
//!
//! The encoder emits one token per patch: the per-channel patch mean plus an
//! indicator column that marks image tokens. At every position the language
//! model averages the image tokens seen so far and scores
//! `RED = gain * (m_R - (m_G + m_B) / 2)` (and symmetrically for GREEN and BLUE);
//! every other vocabulary logit is zero.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::lm::LanguageModel;
use super::params::{ParamKind, Params};
use super::vit::{check_batch_shape, patchify, EncoderOutput, LayerActivations, VisionEncoder};
use super::vocab::{Vocab, BLUE, GREEN, RED};
use crate::error::{invalid, Error, Result};
use crate::ops::device;

pub const ORACLE_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub image_size: usize,
    pub patch: usize,
    pub gain: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            gain: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleEncoder {
    cfg: OracleConfig,
}

impl OracleEncoder {
    pub fn new(cfg: &OracleConfig) -> Result<Self> {
        if cfg.patch == 0 || cfg.image_size % cfg.patch != 0 {
            return Err(invalid(
                "oracle image size must be divisible by the patch size",
            ));
        }
        Ok(Self { cfg: cfg.clone() })
    }
}

impl VisionEncoder for OracleEncoder {
    fn input_shape(&self) -> (usize, usize, usize) {
        (3, self.cfg.image_size, self.cfg.image_size)
    }
    fn patch_size(&self) -> usize {
        self.cfg.patch
    }
    fn token_width(&self) -> usize {
        ORACLE_WIDTH
    }
    fn layer_ids(&self) -> Vec<usize> {
        vec![0]
    }
    fn forward(&self, images: &Tensor) -> Result<EncoderOutput> {
        check_batch_shape(images, self.input_shape())?;
        let b = images.dim(0)?;
        let p = self.cfg.patch;
        let d = self.num_tokens();
        // (B, D, 3, P*P) -> per-channel patch means (B, D, 3)
        let means = patchify(images, p)?.reshape((b, d, 3, p * p))?.mean(3)?;
        let ones = Tensor::ones((b, d, 1), means.dtype(), &device())?;
        let tokens = Tensor::cat(&[&means, &ones], 2)?;
        let mut activations = LayerActivations::new();
        activations.insert(0, means);
        Ok(EncoderOutput {
            tokens,
            activations,
        })
    }
}

impl Params for OracleEncoder {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &Tensor)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {}
}

#[derive(Debug, Clone)]
pub struct OracleLm {
    vocab: Vocab,
    gain: f64,
}

impl OracleLm {
    pub fn new(cfg: &OracleConfig) -> Self {
        Self {
            vocab: Vocab::toy(),
            gain: cfg.gain,
        }
    }

    /// (3, V) map from colour scores to vocabulary logits.
    fn scatter(&self) -> Result<Tensor> {
        let v = self.vocab.len();
        let mut data = vec![0f64; 3 * v];
        for (row, id) in [RED, GREEN, BLUE].into_iter().enumerate() {
            data[row * v + id as usize] = 1.0;
        }
        Ok(Tensor::from_vec(data, (3, v), &device())?)
    }
}

impl LanguageModel for OracleLm {
    fn width(&self) -> usize {
        ORACLE_WIDTH
    }
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(invalid("no token ids to embed"));
        }
        Ok(Tensor::zeros(
            (ids.len(), ORACLE_WIDTH),
            crate::ops::DTYPE,
            &device(),
        )?)
    }
    fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (t, w) = embeddings.dims2()?;
        if w != ORACLE_WIDTH {
            return Err(Error::Shape {
                expected: format!("embedding width {ORACLE_WIDTH}"),
                received: format!("{w}"),
            });
        }
        // The indicator column is structural, never optimized: read it detached.
        let indicator = crate::ops::flat(&embeddings.narrow(1, 3, 1)?.detach())?;
        let mut tri = vec![0f64; t * t];
        let mut seen = 0f64;
        let mut counts = Vec::with_capacity(t);
        for i in 0..t {
            seen += indicator[i];
            counts.push(seen.max(1.0));
            for j in 0..=i {
                tri[i * t + j] = 1.0;
            }
        }
        let tri = Tensor::from_vec(tri, (t, t), &device())?;
        let counts = Tensor::from_vec(counts, (t, 1), &device())?;
        let ind = Tensor::from_vec(indicator, (t, 1), &device())?;
        let rgb = embeddings.narrow(1, 0, 3)?.broadcast_mul(&ind)?;
        let running_mean = tri.matmul(&rgb)?.broadcast_div(&counts)?;
        // g·(m_c − ½ Σ_{o≠c} m_o) = 1.5g·m_c − ½g·Σ m, symmetric in the channels so
        // equal means give bit-identical scores.
        let total = running_mean.sum_keepdim(1)?;
        let scores =
            (running_mean * (1.5 * self.gain))?.broadcast_sub(&(total * (0.5 * self.gain))?)?;
        Ok(scores.matmul(&self.scatter()?)?)
    }
}

impl Params for OracleLm {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &Tensor)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {}
}
