//! Evaluation of synthesized images and decoded answers.
//!
//! Scores are pure functions; [`evaluate_run`] composes the enabled ones into
//! a [`MetricReport`] and writes it as `metrics.json`.

mod scores;
mod text;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use scores::{
    clip_score, fid, image_embedding, inception_score, lpips_like, score_infinity, softmax_rows,
    text_embedding, top_k_accuracy, verifier_logits, ClipOptions, FeatureExtractor, FeatureSet,
    IdentityExtractor, InfinityFit, InfinityOptions, VerifierTaps, EIGEN_CLAMP,
};
pub use text::{
    bleu, meteor, parse_text_pairs, read_text_pairs, rouge_l, text_scores, tokenize, BleuOptions,
    TextScores,
};

use crate::engine::RunResult;
use crate::error::{invalid, Result};
use crate::floatjson;
use crate::modelzoo::{
    classifier_forward, describe_image, verifier_forward, ImageTensor, ModelSuite,
};
use crate::ops;

pub const METRICS_FILE: &str = "metrics.json";

/// Classifier ids usable for IS∞.
pub const CLASSIFIER_IDS: [&str; 2] = ["verifier", "classifier"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub accuracy: bool,
    pub inception: bool,
    pub fid: bool,
    pub lpips: bool,
    pub clip: bool,
    pub text: bool,
    /// Classifiers for IS∞; empty disables it.
    pub is_inf_classifiers: Vec<String>,
    pub fid_inf: bool,
    /// Sample sizes for the 1/N extrapolation; derived from the image count
    /// when absent.
    pub n_grid: Option<Vec<usize>>,
    pub infinity: InfinityOptions,
    pub bleu: BleuOptions,
    pub clip_options: ClipOptions,
    /// Longest decoded answer used for text metrics.
    pub decode_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            accuracy: true,
            inception: true,
            fid: true,
            lpips: true,
            clip: true,
            text: true,
            is_inf_classifiers: CLASSIFIER_IDS.iter().map(|s| s.to_string()).collect(),
            fid_inf: true,
            n_grid: None,
            infinity: InfinityOptions::default(),
            bleu: BleuOptions::default(),
            clip_options: ClipOptions::default(),
            decode_len: 8,
        }
    }
}

/// What the synthesized images are compared against.
#[derive(Debug, Clone, Default)]
pub struct EvalReferences {
    /// Class index the images should be recognized as.
    pub label: Option<usize>,
    /// Real images of the target concept, for FID and LPIPS.
    pub real_images: Vec<ImageTensor>,
    /// Text the images should be aligned with, for CLIPScore.
    pub target_text: Option<String>,
    /// (candidate, reference) pairs scored by the text metrics. When empty,
    /// the decoded answers of a VLM run are paired with the target text.
    pub text_pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricMeta {
    pub n_images: usize,
    pub n_references: usize,
    pub n_text_pairs: usize,
    pub label: Option<usize>,
    pub feature_extractor: String,
    pub lpips_extractor: String,
    pub is_inf_classifiers: Vec<String>,
    pub n_grid: Vec<usize>,
    pub infinity: Option<InfinityOptions>,
    pub bleu: BleuOptions,
    pub clip_legacy_scale: bool,
    pub decoded: Vec<String>,
    pub warnings: Vec<String>,
}

/// One run's scores. Absent metrics were disabled or lacked inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub is: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fid_inf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lpips: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clip_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub meteor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge_l: Option<f64>,
    /// IS∞ keyed `is_inf_<classifier>`.
    #[serde(flatten)]
    pub is_inf: BTreeMap<String, f64>,
    pub meta: MetricMeta,
}

impl MetricReport {
    pub fn is_inf_for(&self, classifier: &str) -> Option<f64> {
        self.is_inf.get(&format!("is_inf_{classifier}")).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        floatjson::to_string(self)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::write(dir.as_ref().join(METRICS_FILE), self.to_json()?)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(
            dir.as_ref().join(METRICS_FILE),
        )?)?)
    }
}

/// Distinct sizes {n/4, n/2, n} with at least 2 samples each.
pub fn default_grid(n: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = [n / 4, n / 2, n].into_iter().filter(|&m| m >= 2).collect();
    grid.dedup();
    grid
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn class_probs(
    suite: &ModelSuite,
    classifier: &str,
    images: &[ImageTensor],
) -> Result<Vec<Vec<f64>>> {
    let logits = match classifier {
        "verifier" => verifier_logits(suite.verifier()?, images)?,
        "classifier" => {
            let c = suite.classifier()?;
            images
                .iter()
                .map(|img| ops::flat(&classifier_forward(c, img)?))
                .collect::<Result<_>>()?
        }
        other => return Err(invalid(format!("unknown classifier id {other:?}"))),
    };
    Ok(softmax_rows(&logits))
}

fn pooled_features(suite: &ModelSuite, images: &[ImageTensor]) -> Result<FeatureSet> {
    let out = verifier_forward(suite.verifier()?, images)?;
    let (n, f) = out.features.dims2()?;
    let flat = ops::flat(&out.features)?;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| flat[i * f..(i + 1) * f].to_vec()).collect();
    FeatureSet::from_rows(&rows, "verifier-pooled")
}

/// Scores `images` with every enabled metric whose inputs are available.
/// Missing inputs omit the metric and record a warning.
pub fn evaluate_images(
    images: &[ImageTensor],
    suite: &ModelSuite,
    refs: &EvalReferences,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(invalid("no images to evaluate"));
    }
    let mut report = MetricReport::default();
    let mut meta_owned = MetricMeta::default();
    let meta = &mut meta_owned;
    meta.n_images = images.len();
    meta.n_references = refs.real_images.len();
    meta.label = refs.label;
    meta.bleu = opts.bleu;
    meta.clip_legacy_scale = opts.clip_options.legacy_scale;
    let warn = |meta: &mut MetricMeta, msg: String| {
        tracing::warn!("{msg}");
        meta.warnings.push(msg);
    };
    let has_verifier = suite.verifier.is_some();

    if opts.accuracy {
        match (refs.label, has_verifier) {
            (Some(label), true) => {
                let logits = verifier_logits(suite.verifier()?, images)?;
                let k5 = logits[0].len().min(5);
                report.top1 = Some(top_k_accuracy(&logits, label, 1)?);
                report.top5 = Some(top_k_accuracy(&logits, label, k5)?);
            }
            (None, _) => warn(meta, "accuracy skipped: no target label".into()),
            (_, false) => warn(meta, "accuracy skipped: suite has no verifier".into()),
        }
    }

    if opts.inception {
        if has_verifier {
            report.is = Some(inception_score(&class_probs(suite, "verifier", images)?)?);
        } else {
            warn(
                meta,
                "inception score skipped: suite has no verifier".into(),
            );
        }
    }

    let grid = opts
        .n_grid
        .clone()
        .unwrap_or_else(|| default_grid(images.len()));
    let grid_ok = grid.len() >= 2 && grid.iter().any(|&n| n != grid[0]);
    let wants_inf = !opts.is_inf_classifiers.is_empty() || opts.fid_inf;
    if wants_inf && !grid_ok {
        warn(
            meta,
            format!("score extrapolation skipped: sample grid {grid:?} is degenerate"),
        );
    }
    if wants_inf && grid_ok {
        meta.n_grid = grid.clone();
        meta.infinity = Some(opts.infinity);
        for id in &opts.is_inf_classifiers {
            let available = match id.as_str() {
                "verifier" => suite.verifier.is_some(),
                "classifier" => suite.classifier.is_some(),
                _ => return Err(invalid(format!("unknown classifier id {id:?}"))),
            };
            if !available {
                warn(meta, format!("is_inf skipped for {id}: not in suite"));
                continue;
            }
            let probs = class_probs(suite, id, images)?;
            let fit = score_infinity(images.len(), &grid, &opts.infinity, |idx| {
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
                inception_score(&rows)
            })?;
            report.is_inf.insert(format!("is_inf_{id}"), fit.intercept);
            meta.is_inf_classifiers.push(id.clone());
        }
    }

    let wants_fid = opts.fid || opts.fid_inf;
    if wants_fid {
        if !has_verifier {
            warn(meta, "fid skipped: suite has no verifier".into());
        } else if refs.real_images.len() < 2 || images.len() < 2 {
            warn(
                meta,
                "fid skipped: need at least 2 generated and 2 reference images".into(),
            );
        } else {
            let gen = pooled_features(suite, images)?;
            let real = pooled_features(suite, &refs.real_images)?;
            meta.feature_extractor = gen.extractor.clone();
            if opts.fid {
                report.fid = Some(fid(&gen, &real)?);
            }
            if opts.fid_inf && grid_ok {
                let fit = score_infinity(images.len(), &grid, &opts.infinity, |idx| {
                    fid(&gen.subset(idx), &real)
                })?;
                report.fid_inf = Some(fit.intercept);
            }
        }
    }

    if opts.lpips {
        if !has_verifier {
            warn(meta, "lpips skipped: suite has no verifier".into());
        } else if refs.real_images.is_empty() {
            warn(meta, "lpips skipped: no reference images".into());
        } else {
            let taps = VerifierTaps(suite.verifier()?);
            meta.lpips_extractor = taps.id();
            let d: Vec<f64> = images
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    lpips_like(&taps, img, &refs.real_images[i % refs.real_images.len()])
                })
                .collect::<Result<_>>()?;
            report.lpips = Some(mean(&d));
        }
    }

    if opts.clip {
        match &refs.target_text {
            Some(text) => {
                let t = text_embedding(suite, text)?;
                if t.iter().all(|&v| v == 0.0) {
                    warn(meta, "clip score skipped: text embedding is zero".into());
                } else {
                    let s: Vec<f64> = images
                        .iter()
                        .map(|img| {
                            clip_score(&image_embedding(suite, img)?, &t, &opts.clip_options)
                        })
                        .collect::<Result<_>>()?;
                    report.clip_score = Some(mean(&s));
                }
            }
            None => warn(meta, "clip score skipped: no target text".into()),
        }
    }

    if opts.text {
        if refs.text_pairs.is_empty() {
            warn(
                meta,
                "text metrics skipped: no (candidate, reference) pairs".into(),
            );
        } else {
            let scores: Vec<TextScores> = refs
                .text_pairs
                .iter()
                .map(|(c, r)| text_scores(c, r, &opts.bleu))
                .collect::<Result<_>>()?;
            meta.n_text_pairs = scores.len();
            report.bleu = Some(mean(&scores.iter().map(|s| s.bleu).collect::<Vec<_>>()));
            report.meteor = Some(mean(&scores.iter().map(|s| s.meteor).collect::<Vec<_>>()));
            report.rouge_l = Some(mean(&scores.iter().map(|s| s.rouge_l).collect::<Vec<_>>()));
        }
    }
    report.meta = meta_owned;
    Ok(report)
}

/// Evaluates the final images of a run. For VLM runs without explicit text
/// pairs, each image's decoded answer is paired with the target text. Writes
/// `metrics.json` into `out_dir` when given.
pub fn evaluate_run(
    result: &RunResult,
    suite: &ModelSuite,
    refs: &EvalReferences,
    opts: &EvalOptions,
    out_dir: Option<&Path>,
) -> Result<MetricReport> {
    let mut refs = refs.clone();
    if refs.label.is_none() {
        refs.label = result.config.target.class_label;
    }
    let mut decoded = Vec::new();
    if let Some(prompt) = &result.config.prompt {
        if refs.target_text.is_none() {
            refs.target_text = Some(prompt.target.clone());
        }
        if opts.text {
            for img in &result.final_images {
                let ids = describe_image(suite, img, prompt, opts.decode_len)?;
                decoded.push(suite.vocab().decode(&ids));
            }
            if refs.text_pairs.is_empty() {
                refs.text_pairs = decoded
                    .iter()
                    .filter(|d| !d.is_empty())
                    .map(|d| (d.clone(), prompt.target.clone()))
                    .collect();
            }
        }
    }
    let mut report = evaluate_images(&result.final_images, suite, &refs, opts)?;
    report.meta.decoded = decoded;
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}
