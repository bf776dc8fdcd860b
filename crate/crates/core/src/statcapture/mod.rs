//! Reference statistics: averaged real-image encoder activations and the
//! verifier's stored batch-norm running statistics, with JSON persistence.

pub mod dataset;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::floatjson;
use crate::modelzoo::{
    checksum, Classifier, ImageTensor, LayerActivations, Params, Verifier, VisionEncoder,
};
use crate::ops;

/// Per-channel statistics of one tapped layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub id: usize,
    pub mean: Vec<f64>,
    /// Standard deviation for encoder statistics, variance for BN statistics.
    #[serde(rename = "std_or_var")]
    pub spread: Vec<f64>,
}

impl LayerStat {
    fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.spread.len() {
            return Err(Error::StatsFile(format!(
                "layer {}: mean has {} entries, std_or_var has {}",
                self.id,
                self.mean.len(),
                self.spread.len()
            )));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::StatsFile(format!(
                "layer {}: non-finite mean",
                self.id
            )));
        }
        if self.spread.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::StatsFile(format!(
                "layer {}: negative or non-finite std_or_var",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AveragingMode {
    /// Average activations across images, then take per-channel moments.
    #[default]
    AverageThenStats,
    /// Take per-image moments, then average them across images.
    StatsThenAverage,
}

impl AveragingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AveragingMode::AverageThenStats => "average-then-stats",
            AveragingMode::StatsThenAverage => "stats-then-average",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_hash: String,
    pub image_count: usize,
    pub mode: AveragingMode,
}

/// Per-channel mean and standard deviation over the token axis of the
/// averaged activations at every tapped layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatistics {
    pub layers: Vec<LayerStat>,
    pub provenance: Provenance,
}

impl LayerStatistics {
    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.id).collect()
    }

    pub fn layer(&self, id: usize) -> Option<&LayerStat> {
        self.layers.iter().find(|l| l.id == id)
    }
}

/// Running mean and running variance of every BN layer, in definition order.
#[derive(Debug, Clone, PartialEq)]
pub struct BNStatistics {
    pub layers: Vec<LayerStat>,
    pub model_hash: String,
}

impl BNStatistics {
    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.mean.len()).collect()
    }
}

/// Per-layer (D, Ω) activations of one image, flattened row-major.
struct ImageActs(Vec<(usize, usize, usize, Vec<f64>)>);

fn select_layers(acts: &LayerActivations, lambda: &[usize]) -> Result<ImageActs> {
    let mut out = Vec::with_capacity(lambda.len());
    for &id in lambda {
        let t = acts.get(&id).ok_or_else(|| Error::LayerMismatch {
            expected: lambda.to_vec(),
            found: acts.keys().copied().collect(),
        })?;
        let (b, d, w) = t.dims3()?;
        if b != 1 {
            return Err(invalid("activations must come from a single image"));
        }
        out.push((id, d, w, ops::flat(t)?));
    }
    Ok(ImageActs(out))
}

/// Sum of equally shaped vectors by a fixed pairwise tree, so the result does
/// not depend on how the inputs were produced.
fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Per-channel (mean, population std) over the token rows of a (D, Ω) matrix.
fn token_moments(data: &[f64], d: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; w];
    for row in data.chunks_exact(w) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= d as f64);
    let mut var = vec![0.0; w];
    for row in data.chunks_exact(w) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (
        mean,
        var.into_iter().map(|s| (s / d as f64).sqrt()).collect(),
    )
}

/// Shared reduction behind the encoder and classifier capture functions.
/// `forward` maps a (1, C, H, W) tensor to its tapped activations.
pub fn capture_stats_with<F>(
    images: &[ImageTensor],
    lambda: &[usize],
    mode: AveragingMode,
    model_hash: &str,
    forward: F,
) -> Result<LayerStatistics>
where
    F: Fn(&candle_core::Tensor) -> Result<LayerActivations> + Sync,
{
    let first = images
        .first()
        .ok_or_else(|| invalid("statistics need at least one image"))?;
    if lambda.is_empty() {
        return Err(invalid("layer set must be nonempty"));
    }
    if let Some(bad) = images.iter().find(|i| i.shape() != first.shape()) {
        return Err(Error::Shape {
            expected: format!("{:?}", first.shape()),
            received: format!("{:?}", bad.shape()),
        });
    }
    let per_image: Vec<ImageActs> = images
        .par_iter()
        .map(|img| select_layers(&forward(&img.to_tensor()?.unsqueeze(0)?)?, lambda))
        .collect::<Result<_>>()?;
    let n = images.len() as f64;
    let mut layers = Vec::with_capacity(lambda.len());
    for (li, &id) in lambda.iter().enumerate() {
        let (_, d, w, _) = per_image[0].0[li];
        let (mean, spread) = match mode {
            AveragingMode::AverageThenStats => {
                let mut avg = tree_sum(per_image.iter().map(|p| p.0[li].3.clone()).collect());
                avg.iter_mut().for_each(|v| *v /= n);
                token_moments(&avg, d, w)
            }
            AveragingMode::StatsThenAverage => {
                let moments: Vec<(Vec<f64>, Vec<f64>)> = per_image
                    .iter()
                    .map(|p| token_moments(&p.0[li].3, d, w))
                    .collect();
                let mut mean = tree_sum(moments.iter().map(|m| m.0.clone()).collect());
                let mut std = tree_sum(moments.into_iter().map(|m| m.1).collect());
                mean.iter_mut().chain(std.iter_mut()).for_each(|v| *v /= n);
                (mean, std)
            }
        };
        layers.push(LayerStat { id, mean, spread });
    }
    Ok(LayerStatistics {
        layers,
        provenance: Provenance {
            model_hash: model_hash.to_string(),
            image_count: images.len(),
            mode,
        },
    })
}

/// Reference statistics of a vision encoder over real images.
pub fn capture_encoder_stats(
    encoder: &dyn VisionEncoder,
    images: &[ImageTensor],
    lambda: &[usize],
    mode: AveragingMode,
) -> Result<LayerStatistics> {
    let hash = checksum(encoder as &dyn Params);
    capture_stats_with(images, lambda, mode, &hash, |x| {
        Ok(encoder.forward(x)?.activations)
    })
}

/// Reference statistics of a classifier's backbone over real images.
pub fn capture_classifier_stats(
    classifier: &dyn Classifier,
    images: &[ImageTensor],
    lambda: &[usize],
    mode: AveragingMode,
) -> Result<LayerStatistics> {
    let hash = checksum(classifier as &dyn Params);
    capture_stats_with(images, lambda, mode, &hash, |x| {
        Ok(classifier.forward(x)?.activations)
    })
}

/// Copies out the verifier's stored running statistics.
pub fn extract_bn_stats(verifier: &dyn Verifier) -> Result<BNStatistics> {
    let running = verifier.running_stats()?;
    if running.is_empty() {
        return Err(invalid("verifier has no batch-norm layers"));
    }
    let layers = running
        .into_iter()
        .enumerate()
        .map(|(id, (mean, spread))| LayerStat { id, mean, spread })
        .collect();
    Ok(BNStatistics {
        layers,
        model_hash: checksum(verifier as &dyn Params),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsKind {
    Encoder,
    Bn,
}

/// On-disk form shared by both statistics types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsDocument {
    pub kind: StatsKind,
    pub model_hash: String,
    pub lambda: Vec<usize>,
    pub image_count: usize,
    pub mode: String,
    pub layers: Vec<LayerStat>,
}

/// Mode string recorded for BN statistics, which are read rather than averaged.
pub const BN_MODE: &str = "running";

impl From<&LayerStatistics> for StatsDocument {
    fn from(s: &LayerStatistics) -> Self {
        Self {
            kind: StatsKind::Encoder,
            model_hash: s.provenance.model_hash.clone(),
            lambda: s.layer_ids(),
            image_count: s.provenance.image_count,
            mode: s.provenance.mode.as_str().to_string(),
            layers: s.layers.clone(),
        }
    }
}

impl From<&BNStatistics> for StatsDocument {
    fn from(s: &BNStatistics) -> Self {
        Self {
            kind: StatsKind::Bn,
            model_hash: s.model_hash.clone(),
            lambda: s.layers.iter().map(|l| l.id).collect(),
            image_count: 0,
            mode: BN_MODE.to_string(),
            layers: s.layers.clone(),
        }
    }
}

impl StatsDocument {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::StatsFile("layers: must be nonempty".into()));
        }
        let ids: Vec<usize> = self.layers.iter().map(|l| l.id).collect();
        if ids != self.lambda {
            return Err(Error::StatsFile(format!(
                "lambda: {:?} does not match layer ids {:?}",
                self.lambda, ids
            )));
        }
        for l in &self.layers {
            l.validate()?;
        }
        Ok(())
    }

    pub fn into_encoder(self) -> Result<LayerStatistics> {
        if self.kind != StatsKind::Encoder {
            return Err(Error::StatsFile("kind: expected \"encoder\"".into()));
        }
        let mode = match self.mode.as_str() {
            "average-then-stats" => AveragingMode::AverageThenStats,
            "stats-then-average" => AveragingMode::StatsThenAverage,
            other => {
                return Err(Error::StatsFile(format!(
                    "mode: unknown averaging mode {other:?}"
                )))
            }
        };
        if self.image_count == 0 {
            return Err(Error::StatsFile("image_count: must be at least 1".into()));
        }
        Ok(LayerStatistics {
            layers: self.layers,
            provenance: Provenance {
                model_hash: self.model_hash,
                image_count: self.image_count,
                mode,
            },
        })
    }

    pub fn into_bn(self) -> Result<BNStatistics> {
        if self.kind != StatsKind::Bn {
            return Err(Error::StatsFile("kind: expected \"bn\"".into()));
        }
        Ok(BNStatistics {
            layers: self.layers,
            model_hash: self.model_hash,
        })
    }
}

pub fn save_stats(doc: &StatsDocument, path: impl AsRef<Path>) -> Result<()> {
    doc.validate()?;
    std::fs::write(path, floatjson::to_string(doc)?)?;
    Ok(())
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<StatsDocument> {
    let text = std::fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let doc: StatsDocument = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::StatsFile(format!("{}: {}", e.path(), e.inner())))?;
    doc.validate()?;
    Ok(doc)
}

/// Checks the file against what the caller expects. A different model hash
/// only warns; a different layer set is an error.
fn check_provenance(
    doc: &StatsDocument,
    lambda: Option<&[usize]>,
    model_hash: Option<&str>,
) -> Result<()> {
    if let Some(lambda) = lambda {
        if lambda != doc.lambda.as_slice() {
            return Err(Error::LayerMismatch {
                expected: lambda.to_vec(),
                found: doc.lambda.clone(),
            });
        }
    }
    if let Some(hash) = model_hash {
        if hash != doc.model_hash {
            tracing::warn!(expected = hash, found = %doc.model_hash, "statistics were captured from a different model");
        }
    }
    Ok(())
}

pub fn load_encoder_stats(
    path: impl AsRef<Path>,
    lambda: Option<&[usize]>,
    model_hash: Option<&str>,
) -> Result<LayerStatistics> {
    let doc = read_stats(path)?;
    check_provenance(&doc, lambda, model_hash)?;
    doc.into_encoder()
}

pub fn load_bn_stats(path: impl AsRef<Path>, model_hash: Option<&str>) -> Result<BNStatistics> {
    let doc = read_stats(path)?;
    check_provenance(&doc, None, model_hash)?;
    doc.into_bn()
}

#[cfg(test)]
mod tests;
