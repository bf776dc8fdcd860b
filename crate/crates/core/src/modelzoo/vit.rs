//! Toy vision transformer used both as the VLM vision encoder and as the
//! classification model for ViT-mode inversion.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{token_mean, Block, LayerNorm, Linear};
use super::params::{join, Init, ParamKind, Params};
use crate::error::{invalid, Error, Result};
use crate::ops::device;

/// Per tapped layer: (batch, D, Ω) activations of the patch tokens only.
pub type LayerActivations = BTreeMap<usize, Tensor>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Optional per-channel `(x - mean) / std` pre-layer; identity when absent.
    #[serde(default)]
    pub input_mean: Option<Vec<f64>>,
    #[serde(default)]
    pub input_std: Option<Vec<f64>>,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            image_size: 32,
            patch: 4,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            input_mean: None,
            input_std: None,
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.image_size, self.image_size)
    }

    /// Tap ids: 0 patch embedding, `1..=depth` MLP outputs, `depth + 1` final LayerNorm.
    pub fn layer_ids(&self) -> Vec<usize> {
        (0..=self.depth + 1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid("width must be divisible by the head count"));
        }
        for v in [&self.input_mean, &self.input_std].into_iter().flatten() {
            if v.len() != self.channels {
                return Err(invalid("input normalization needs one value per channel"));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_batch_shape(images: &Tensor, expected: (usize, usize, usize)) -> Result<()> {
    let dims = images.dims();
    if dims.len() != 4 || (dims[1], dims[2], dims[3]) != expected || dims[0] == 0 {
        return Err(Error::Shape {
            expected: format!("batch x {}x{}x{}", expected.0, expected.1, expected.2),
            received: format!("{dims:?}"),
        });
    }
    Ok(())
}

/// Splits (B, C, H, W) into (B, D, C·P·P) row-major patches.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, gh * gw, c * patch * patch))?)
}

#[derive(Debug, Clone)]
pub struct ToyVit {
    cfg: VitConfig,
    patch_embed: Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

pub struct VitOutput {
    /// Final-LayerNorm hidden states including the CLS token at index 0.
    pub hidden: Tensor,
    pub activations: LayerActivations,
}

impl ToyVit {
    pub(crate) fn new(cfg: &VitConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = cfg.channels * cfg.patch * cfg.patch;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(init, patch_dim, cfg.width)?,
            cls: init.normal(&[1, 1, cfg.width], 0.02)?,
            pos: init.normal(&[1, cfg.num_patches() + 1, cfg.width], 0.02)?,
            blocks: (0..cfg.depth)
                .map(|_| Block::new(init, cfg.width, cfg.heads, cfg.mlp_ratio, false))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(init, cfg.width)?,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        let c = self.cfg.channels;
        let mut x = images.clone();
        if let Some(mean) = &self.cfg.input_mean {
            let m = Tensor::from_vec(mean.clone(), (1, c, 1, 1), &device())?;
            x = x.broadcast_sub(&m)?;
        }
        if let Some(std) = &self.cfg.input_std {
            let s = Tensor::from_vec(std.clone(), (1, c, 1, 1), &device())?;
            x = x.broadcast_div(&s)?;
        }
        Ok(x)
    }

    pub fn forward(&self, images: &Tensor) -> Result<VitOutput> {
        check_batch_shape(images, self.cfg.input_shape())?;
        let b = images.dim(0)?;
        let d = self.cfg.num_patches();
        let w = self.cfg.width;
        let patches = patchify(&self.normalize(images)?, self.cfg.patch)?;
        let tokens = self
            .patch_embed
            .forward(&patches)?
            .broadcast_add(&self.pos.narrow(1, 1, d)?)?;
        let mut acts = LayerActivations::new();
        acts.insert(0, tokens.clone());
        let cls = (&self.cls + self.pos.narrow(1, 0, 1)?)?.broadcast_as((b, 1, w))?;
        let mut h = Tensor::cat(&[&cls, &tokens], 1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block.forward(&h)?;
            acts.insert(i + 1, out.mlp.narrow(1, 1, d)?);
            h = out.hidden;
        }
        let hidden = self.ln_f.forward(&h)?;
        acts.insert(self.cfg.depth + 1, hidden.narrow(1, 1, d)?);
        Ok(VitOutput {
            hidden,
            activations: acts,
        })
    }
}

impl Params for ToyVit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls"), ParamKind::Weight, &self.cls);
        f(&join(prefix, "pos"), ParamKind::Weight, &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls"), ParamKind::Weight, &mut self.cls);
        f(&join(prefix, "pos"), ParamKind::Weight, &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
    }
}

/// Output of a vision encoder on a batch.
pub struct EncoderOutput {
    /// (B, D, Ω) image tokens in the language model's embedding space.
    pub tokens: Tensor,
    pub activations: LayerActivations,
}

/// Frozen vision encoder contract (E in the inversion objective).
pub trait VisionEncoder: Params + Send + Sync {
    fn input_shape(&self) -> (usize, usize, usize);
    fn patch_size(&self) -> usize;
    /// Ω, the width of the emitted image tokens.
    fn token_width(&self) -> usize;
    fn layer_ids(&self) -> Vec<usize>;
    /// `images` is (B, C, H, W); differentiable with respect to pixels.
    fn forward(&self, images: &Tensor) -> Result<EncoderOutput>;

    fn num_tokens(&self) -> usize {
        let (_, h, w) = self.input_shape();
        (h / self.patch_size()) * (w / self.patch_size())
    }

    /// Pooled (B, Ω) image embedding.
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        token_mean(&self.forward(images)?.tokens)
    }
}

/// Toy ViT followed by a linear projector into the language model width.
#[derive(Debug, Clone)]
pub struct ToyVisionEncoder {
    vit: ToyVit,
    projector: Linear,
}

impl ToyVisionEncoder {
    pub(crate) fn new(cfg: &VitConfig, lm_width: usize, init: &mut Init) -> Result<Self> {
        let vit = ToyVit::new(cfg, init)?;
        let projector = Linear::new(init, cfg.width, lm_width)?;
        Ok(Self { vit, projector })
    }

    pub fn vit(&self) -> &ToyVit {
        &self.vit
    }
}

impl VisionEncoder for ToyVisionEncoder {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.vit.cfg.input_shape()
    }
    fn patch_size(&self) -> usize {
        self.vit.cfg.patch
    }
    fn token_width(&self) -> usize {
        self.projector.weight.dims()[1]
    }
    fn layer_ids(&self) -> Vec<usize> {
        self.vit.cfg.layer_ids()
    }
    fn forward(&self, images: &Tensor) -> Result<EncoderOutput> {
        let out = self.vit.forward(images)?;
        let d = self.vit.cfg.num_patches();
        let tokens = self.projector.forward(&out.hidden.narrow(1, 1, d)?)?;
        Ok(EncoderOutput {
            tokens,
            activations: out.activations,
        })
    }
}

impl Params for ToyVisionEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.vit.visit(&join(prefix, "vit"), f);
        self.projector.visit(&join(prefix, "projector"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.vit.visit_mut(&join(prefix, "vit"), f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
    }
}

pub struct ClassifierOutput {
    /// (B, K) class logits.
    pub logits: Tensor,
    pub activations: LayerActivations,
}

/// Frozen image classifier contract (f in ViT-mode inversion).
pub trait Classifier: Params + Send + Sync {
    fn input_shape(&self) -> (usize, usize, usize);
    fn patch_size(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn layer_ids(&self) -> Vec<usize>;
    fn forward(&self, images: &Tensor) -> Result<ClassifierOutput>;
}

/// Toy ViT with a linear head on the CLS token.
#[derive(Debug, Clone)]
pub struct ToyClassifier {
    vit: ToyVit,
    head: Linear,
}

impl ToyClassifier {
    pub(crate) fn new(cfg: &VitConfig, classes: usize, init: &mut Init) -> Result<Self> {
        let vit = ToyVit::new(cfg, init)?;
        let head = Linear::new(init, cfg.width, classes)?;
        Ok(Self { vit, head })
    }
}

impl Classifier for ToyClassifier {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.vit.cfg.input_shape()
    }
    fn patch_size(&self) -> usize {
        self.vit.cfg.patch
    }
    fn num_classes(&self) -> usize {
        self.head.weight.dims()[1]
    }
    fn layer_ids(&self) -> Vec<usize> {
        self.vit.cfg.layer_ids()
    }
    fn forward(&self, images: &Tensor) -> Result<ClassifierOutput> {
        let out = self.vit.forward(images)?;
        let cls = out.hidden.narrow(1, 0, 1)?.squeeze(1)?;
        let logits = self.head.forward(&cls)?;
        Ok(ClassifierOutput {
            logits,
            activations: out.activations,
        })
    }
}

impl Params for ToyClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.vit.visit(&join(prefix, "vit"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.vit.visit_mut(&join(prefix, "vit"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
