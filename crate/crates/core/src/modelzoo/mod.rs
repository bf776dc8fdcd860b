//! Frozen-model adapter contracts and the desk-scale model zoo.
//!
//! The zoo provides a seeded toy suite (ViT encoder, causal LM, BN verifier,
//! ViT classifier) and a hand-wired oracle VLM whose behaviour is known in
//! closed form. Every forward pass is a pure function of its inputs.

mod image;
mod layers;
mod lm;
mod oracle;
mod params;
pub mod train;
mod verifier;
mod vit;
mod vocab;
pub mod weights;

use std::fmt;
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use image::ImageTensor;
pub use lm::{
    greedy_decode, lm_forward, LanguageModel, LmConfig, LogitSequence, MultimodalSequence,
    ToyCausalLm,
};
pub use oracle::{OracleConfig, OracleEncoder, OracleLm, ORACLE_WIDTH};
pub use params::{checksum, freeze, make_trainable, param_count, ParamKind, Params};
pub use verifier::{
    BnBatchStats, BnMode, ToyVerifierCnn, Verifier, VerifierConfig, VerifierOutput,
};
pub use vit::{
    patchify, Classifier, ClassifierOutput, EncoderOutput, LayerActivations, ToyClassifier,
    ToyVisionEncoder, ToyVit, VisionEncoder, VitConfig,
};
pub use vocab::{
    PromptSpec, TokenSequence, Vocab, BLUE, BOS, EOS, FIRST_WORD, GREEN, IMAGE, PAD, RED,
    TOY_VOCAB_SIZE, UNK, VOCAB_VERSION,
};

use crate::error::{invalid, Error, Result};
use params::Init;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub vit: VitConfig,
    pub lm: LmConfig,
    pub verifier: VerifierConfig,
    pub classes: usize,
    pub vocab: String,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            lm: LmConfig::default(),
            verifier: VerifierConfig::default(),
            classes: 3,
            vocab: VOCAB_VERSION.to_string(),
        }
    }
}

impl ToyConfig {
    /// Same architecture at a different square input resolution.
    pub fn with_image_size(mut self, size: usize) -> Self {
        self.vit.image_size = size;
        self.verifier.image_size = size;
        self
    }
}

/// Architecture descriptor; hashed into weight files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuiteArch {
    Toy(ToyConfig),
    Oracle(OracleConfig),
}

impl SuiteArch {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("architecture serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Concrete toy models before they are frozen into a [`ModelSuite`].
#[derive(Debug, Clone)]
pub struct ToySuiteParts {
    pub config: ToyConfig,
    pub seed: u64,
    pub encoder: ToyVisionEncoder,
    pub lm: ToyCausalLm,
    pub verifier: ToyVerifierCnn,
    pub classifier: ToyClassifier,
}

fn component_seed(seed: u64, component: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ component.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl ToySuiteParts {
    pub fn new(config: &ToyConfig, seed: u64) -> Result<Self> {
        if config.vocab != VOCAB_VERSION {
            return Err(invalid(format!(
                "unknown vocabulary version {}",
                config.vocab
            )));
        }
        if config.verifier.classes != config.classes {
            return Err(invalid(
                "verifier and classifier must share the class count",
            ));
        }
        let encoder = ToyVisionEncoder::new(
            &config.vit,
            config.lm.width,
            &mut Init::new(component_seed(seed, 1)),
        )?;
        let lm = ToyCausalLm::new(&config.lm, &mut Init::new(component_seed(seed, 2)))?;
        let verifier =
            ToyVerifierCnn::new(&config.verifier, &mut Init::new(component_seed(seed, 3)))?;
        let classifier = ToyClassifier::new(
            &config.vit,
            config.classes,
            &mut Init::new(component_seed(seed, 4)),
        )?;
        Ok(Self {
            config: config.clone(),
            seed,
            encoder,
            lm,
            verifier,
            classifier,
        })
    }

    pub fn into_suite(self) -> ModelSuite {
        ModelSuite {
            arch: SuiteArch::Toy(self.config),
            seed: self.seed,
            encoder: Arc::new(self.encoder),
            lm: Arc::new(self.lm),
            verifier: Some(Arc::new(self.verifier)),
            classifier: Some(Arc::new(self.classifier)),
        }
    }
}

impl Params for ToySuiteParts {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.encoder.visit(&params::join(prefix, "encoder"), f);
        self.lm.visit(&params::join(prefix, "lm"), f);
        self.verifier.visit(&params::join(prefix, "verifier"), f);
        self.classifier
            .visit(&params::join(prefix, "classifier"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.encoder.visit_mut(&params::join(prefix, "encoder"), f);
        self.lm.visit_mut(&params::join(prefix, "lm"), f);
        self.verifier
            .visit_mut(&params::join(prefix, "verifier"), f);
        self.classifier
            .visit_mut(&params::join(prefix, "classifier"), f);
    }
}

/// A frozen set of adapters. Cloning shares the read-only weights.
#[derive(Clone)]
pub struct ModelSuite {
    arch: SuiteArch,
    seed: u64,
    pub encoder: Arc<dyn VisionEncoder>,
    pub lm: Arc<dyn LanguageModel>,
    pub verifier: Option<Arc<dyn Verifier>>,
    pub classifier: Option<Arc<dyn Classifier>>,
}

impl fmt::Debug for ModelSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSuite")
            .field("arch", &self.arch)
            .field("seed", &self.seed)
            .field("verifier", &self.verifier.is_some())
            .field("classifier", &self.classifier.is_some())
            .finish()
    }
}

impl ModelSuite {
    pub fn arch(&self) -> &SuiteArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.encoder.input_shape()
    }

    pub fn patch_size(&self) -> usize {
        self.encoder.patch_size()
    }

    pub fn vocab(&self) -> &Vocab {
        self.lm.vocab()
    }

    pub fn verifier(&self) -> Result<&dyn Verifier> {
        self.verifier
            .as_deref()
            .ok_or_else(|| Error::Missing("verifier network in suite".into()))
    }

    pub fn classifier(&self) -> Result<&dyn Classifier> {
        self.classifier
            .as_deref()
            .ok_or_else(|| Error::Missing("classifier in suite".into()))
    }

    /// Visits every parameter of every adapter in weight-file order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.encoder.visit("encoder", f);
        self.lm.visit("lm", f);
        if let Some(v) = &self.verifier {
            v.visit("verifier", f);
        }
        if let Some(c) = &self.classifier {
            c.visit("classifier", f);
        }
    }

    /// Checksum over all weights; used to prove the models stay frozen.
    pub fn weights_checksum(&self) -> String {
        struct Whole<'a>(&'a ModelSuite);
        impl Params for Whole<'_> {
            fn visit(&self, _: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
                self.0.visit(f)
            }
            fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {}
        }
        checksum(&Whole(self))
    }
}

/// Toy suite with the default architecture.
pub fn build_toy_suite(seed: u64) -> Result<ModelSuite> {
    build_toy_suite_with(&ToyConfig::default(), seed)
}

pub fn build_toy_suite_with(config: &ToyConfig, seed: u64) -> Result<ModelSuite> {
    Ok(ToySuiteParts::new(config, seed)?.into_suite())
}

pub fn build_oracle_vlm() -> Result<ModelSuite> {
    build_oracle_vlm_with(&OracleConfig::default())
}

pub fn build_oracle_vlm_with(config: &OracleConfig) -> Result<ModelSuite> {
    Ok(ModelSuite {
        arch: SuiteArch::Oracle(config.clone()),
        seed: 0,
        encoder: Arc::new(OracleEncoder::new(config)?),
        lm: Arc::new(OracleLm::new(config)),
        verifier: None,
        classifier: None,
    })
}

fn check_image(expected: (usize, usize, usize), image: &ImageTensor) -> Result<()> {
    if image.shape() != expected {
        return Err(Error::Shape {
            expected: format!("{}x{}x{}", expected.0, expected.1, expected.2),
            received: format!(
                "{}x{}x{}",
                image.shape().0,
                image.shape().1,
                image.shape().2
            ),
        });
    }
    Ok(())
}

/// Encodes one image: (D, Ω) tokens and per-layer (1, D, Ω_l) activations.
pub fn encode_image(
    encoder: &dyn VisionEncoder,
    image: &ImageTensor,
) -> Result<(Tensor, LayerActivations)> {
    check_image(encoder.input_shape(), image)?;
    let out = encoder.forward(&image.to_tensor()?.unsqueeze(0)?)?;
    Ok((out.tokens.squeeze(0)?, out.activations))
}

/// Tokenized and embedded prompt.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    /// `<bos>` followed by the rendered prompt.
    pub tokens: TokenSequence,
    /// Token ids of the target text alone.
    pub target_ids: Vec<u32>,
    /// (len, Ω)
    pub embeddings: Tensor,
}

pub fn embed_text(suite: &ModelSuite, prompt: &PromptSpec) -> Result<PromptEmbedding> {
    let vocab = suite.vocab();
    let rendered = prompt.render()?;
    let mut ids = vec![BOS];
    ids.extend(vocab.tokenize(&rendered)?);
    let target_ids = vocab.tokenize(&prompt.target)?;
    if target_ids.is_empty() {
        return Err(Error::Prompt("target text produced no tokens".into()));
    }
    let embeddings = suite.lm.embed_tokens(&ids)?;
    Ok(PromptEmbedding {
        tokens: TokenSequence::new(ids, vocab.len())?,
        target_ids,
        embeddings,
    })
}

/// Greedy answer of the VLM to `prompt` about `image`, as token ids.
pub fn describe_image(
    suite: &ModelSuite,
    image: &ImageTensor,
    prompt: &PromptSpec,
    max_len: usize,
) -> Result<Vec<u32>> {
    let text = embed_text(suite, prompt)?;
    let (tokens, _) = encode_image(suite.encoder.as_ref(), image)?;
    let seq = MultimodalSequence::new(&text.embeddings, &tokens.detach())?;
    greedy_decode(suite.lm.as_ref(), &seq, max_len)
}

/// Inference-mode verifier pass over a batch of images.
pub fn verifier_forward(verifier: &dyn Verifier, images: &[ImageTensor]) -> Result<VerifierOutput> {
    if images.is_empty() {
        return Err(invalid("verifier needs a non-empty batch"));
    }
    for img in images {
        check_image(verifier.input_shape(), img)?;
    }
    verifier.forward(&ImageTensor::stack(images)?)
}

/// Class logits (K) for one image.
pub fn classifier_forward(classifier: &dyn Classifier, image: &ImageTensor) -> Result<Tensor> {
    check_image(classifier.input_shape(), image)?;
    Ok(classifier
        .forward(&image.to_tensor()?.unsqueeze(0)?)?
        .logits
        .squeeze(0)?)
}

#[cfg(test)]
mod tests;
