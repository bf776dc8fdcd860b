//! Batch-norm equipped toy CNN: the verifier network behind the BN-statistics
//! regularizer and the top-k evaluation.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{join, Init, ParamKind, Params};
use super::vit::check_batch_shape;
use crate::error::{invalid, Result};
use crate::ops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    pub channels: usize,
    pub image_size: usize,
    /// Output channels of each conv→BN→ReLU stage.
    pub stages: Vec<usize>,
    pub classes: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            image_size: 32,
            stages: vec![8, 16, 32],
            classes: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Per-channel statistics of one BN layer's input over batch × spatial axes.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

pub struct VerifierOutput {
    /// (B, K)
    pub logits: Tensor,
    /// One entry per BN layer in definition order.
    pub bn_stats: Vec<BnBatchStats>,
    /// (B, F) globally pooled features before the head.
    pub features: Tensor,
    /// Post-activation output of every stage.
    pub stage_outputs: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with running statistics.
    Inference,
    /// Normalize with batch statistics (training).
    Train,
}

/// Frozen verifier contract (F).
pub trait Verifier: Params + Send + Sync {
    fn input_shape(&self) -> (usize, usize, usize);
    fn num_classes(&self) -> usize;
    /// Inference-mode forward; running statistics are never touched.
    fn forward(&self, images: &Tensor) -> Result<VerifierOutput>;
    /// Stored (running mean, running variance) per BN layer.
    fn running_stats(&self) -> Result<Vec<(Vec<f64>, Vec<f64>)>>;
}

#[derive(Debug, Clone)]
struct Stage {
    weight: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct ToyVerifierCnn {
    cfg: VerifierConfig,
    stages: Vec<Stage>,
    head: Linear,
}

impl ToyVerifierCnn {
    pub(crate) fn new(cfg: &VerifierConfig, init: &mut Init) -> Result<Self> {
        if cfg.stages.is_empty() {
            return Err(invalid("verifier needs at least one stage"));
        }
        let downsamples = cfg.stages.len() - 1;
        if cfg.image_size % (1 << downsamples) != 0 {
            return Err(invalid(
                "verifier image size must survive the pooling stages",
            ));
        }
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut cin = cfg.channels;
        for &cout in &cfg.stages {
            let fan_in = (cin * 9) as f32;
            stages.push(Stage {
                weight: init.normal(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt())?,
                bias: init.normal(&[cout], 0.02)?,
                gamma: init.constant(&[cout], 1.0)?,
                beta: init.constant(&[cout], 0.0)?,
                running_mean: init.constant(&[cout], 0.0)?,
                running_var: init.constant(&[cout], 1.0)?,
            });
            cin = cout;
        }
        let head = Linear::new(init, cin, cfg.classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            head,
        })
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.cfg
    }

    pub fn forward_mode(&self, images: &Tensor, mode: BnMode) -> Result<VerifierOutput> {
        check_batch_shape(images, self.input_shape())?;
        let mut x = images.clone();
        let mut bn_stats = Vec::with_capacity(self.stages.len());
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        let eps = self.cfg.bn_eps;
        for (i, s) in self.stages.iter().enumerate() {
            let z = x
                .conv2d(&s.weight, 1, 1, 1, 1)?
                .broadcast_add(&s.bias.reshape((1, (), 1, 1))?)?;
            let mean = z.mean_keepdim((0, 2, 3))?;
            let var = z.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let (m, v) = match mode {
                BnMode::Train => (mean.clone(), var.clone()),
                BnMode::Inference => (
                    s.running_mean.reshape((1, (), 1, 1))?,
                    s.running_var.reshape((1, (), 1, 1))?,
                ),
            };
            let normed = z.broadcast_sub(&m)?.broadcast_div(&(v + eps)?.sqrt()?)?;
            let y = normed
                .broadcast_mul(&s.gamma.reshape((1, (), 1, 1))?)?
                .broadcast_add(&s.beta.reshape((1, (), 1, 1))?)?
                .relu()?;
            bn_stats.push(BnBatchStats {
                mean: mean.flatten_all()?,
                var: var.flatten_all()?,
            });
            stage_outputs.push(y.clone());
            x = if i + 1 < self.stages.len() {
                y.avg_pool2d(2)?
            } else {
                y
            };
        }
        let features = x.mean((2, 3))?;
        let logits = self.head.forward(&features)?;
        Ok(VerifierOutput {
            logits,
            bn_stats,
            features,
            stage_outputs,
        })
    }

    /// Exponential running-average update from detached batch statistics.
    pub(crate) fn update_running(&mut self, stats: &[BnBatchStats]) -> Result<()> {
        let m = self.cfg.bn_momentum;
        for (s, b) in self.stages.iter_mut().zip(stats) {
            s.running_mean = ((&s.running_mean * (1.0 - m))? + (b.mean.detach() * m)?)?;
            s.running_var = ((&s.running_var * (1.0 - m))? + (b.var.detach() * m)?)?;
        }
        Ok(())
    }
}

impl Verifier for ToyVerifierCnn {
    fn input_shape(&self) -> (usize, usize, usize) {
        (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
    }
    fn num_classes(&self) -> usize {
        self.cfg.classes
    }
    fn forward(&self, images: &Tensor) -> Result<VerifierOutput> {
        self.forward_mode(images, BnMode::Inference)
    }
    fn running_stats(&self) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        self.stages
            .iter()
            .map(|s| Ok((ops::flat(&s.running_mean)?, ops::flat(&s.running_var)?)))
            .collect()
    }
}

impl Params for ToyVerifierCnn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            f(&join(&p, "conv.weight"), ParamKind::Weight, &s.weight);
            f(&join(&p, "conv.bias"), ParamKind::Weight, &s.bias);
            f(&join(&p, "bn.gamma"), ParamKind::Weight, &s.gamma);
            f(&join(&p, "bn.beta"), ParamKind::Weight, &s.beta);
            f(
                &join(&p, "bn.running_mean"),
                ParamKind::Buffer,
                &s.running_mean,
            );
            f(
                &join(&p, "bn.running_var"),
                ParamKind::Buffer,
                &s.running_var,
            );
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            f(&join(&p, "conv.weight"), ParamKind::Weight, &mut s.weight);
            f(&join(&p, "conv.bias"), ParamKind::Weight, &mut s.bias);
            f(&join(&p, "bn.gamma"), ParamKind::Weight, &mut s.gamma);
            f(&join(&p, "bn.beta"), ParamKind::Weight, &mut s.beta);
            f(
                &join(&p, "bn.running_mean"),
                ParamKind::Buffer,
                &mut s.running_mean,
            );
            f(
                &join(&p, "bn.running_var"),
                ParamKind::Buffer,
                &mut s.running_var,
            );
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
