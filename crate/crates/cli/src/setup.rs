//! Model suite, real images and reference statistics for a configuration.

use std::fs;
use std::path::Path;

use mimic_core::engine::InversionConfig;
use mimic_core::floatjson;
use mimic_core::modelzoo::train::train_toy_suite;
use mimic_core::modelzoo::weights::load_weights;
use mimic_core::modelzoo::{build_oracle_vlm_with, ImageTensor, ModelSuite, ToyConfig, ToySuiteParts};
use mimic_core::objective::{Mode, ReferenceStats};
use mimic_core::statcapture::dataset::{blob_dataset, class_images};
use mimic_core::statcapture::{
    capture_classifier_stats, capture_encoder_stats, extract_bn_stats, load_bn_stats, load_encoder_stats,
    BNStatistics, LayerStatistics, StatsDocument,
};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SuiteSpec};
use crate::error::{CliError, CliResult};

pub fn build_suite(cfg: &ExperimentConfig) -> CliResult<ModelSuite> {
    match &cfg.suite {
        SuiteSpec::Toy { seed, image_size, train } => {
            let mut parts = ToySuiteParts::new(&ToyConfig::default().with_image_size(*image_size), *seed)?;
            if let Some(spec) = train {
                let data = blob_dataset(&cfg.data)?;
                let (c, v) = train_toy_suite(&mut parts, &data, &spec.options())?;
                tracing::info!(
                    classifier_accuracy = c.accuracy,
                    verifier_accuracy = v.accuracy,
                    "trained toy classifier and verifier"
                );
            }
            Ok(parts.into_suite())
        }
        SuiteSpec::Oracle { .. } => {
            Ok(build_oracle_vlm_with(&cfg.suite.oracle_config().expect("oracle spec"))?)
        }
        SuiteSpec::Weights { path } => {
            if !path.exists() {
                return Err(CliError::Io(format!("weight file {} not found", path.display())));
            }
            Ok(load_weights(path, None)?)
        }
    }
}

/// PNG files of a directory in name order, scaled to [0, 1].
pub fn load_image_dir(dir: &Path) -> CliResult<Vec<ImageTensor>> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("image directory {} not found", dir.display())));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Io(format!("no PNG images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let img = image::open(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let img = ImageTensor::from_fn((3, h, w), |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)?;
            Ok(img)
        })
        .collect()
}

/// Real images of the configured concept: the image directory when set,
/// otherwise the blob images of the concept's class, otherwise none.
pub fn real_images(cfg: &ExperimentConfig) -> CliResult<Vec<ImageTensor>> {
    if let Some(dir) = &cfg.image_dir {
        return load_image_dir(dir);
    }
    match cfg.concept_label() {
        Some(label) => Ok(class_images(&cfg.data, label)?),
        None => Ok(Vec::new()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Statistics consumed by the objective, with content hashes of their file
/// form for the manifest.
#[derive(Default)]
pub struct LoadedStats {
    pub encoder: Option<LayerStatistics>,
    pub bn: Option<BNStatistics>,
    pub encoder_hash: Option<String>,
    pub bn_hash: Option<String>,
}

impl LoadedStats {
    pub fn refs(&self) -> ReferenceStats<'_> {
        ReferenceStats { encoder: self.encoder.as_ref(), bn: self.bn.as_ref() }
    }
}

fn doc_hash(doc: StatsDocument) -> CliResult<String> {
    Ok(sha256_hex(floatjson::to_string(&doc)?.as_bytes()))
}

/// Captures layer statistics of the model the objective taps in `mode`.
pub fn capture_layer_stats(
    cfg: &ExperimentConfig,
    suite: &ModelSuite,
    mode: Mode,
    images: &[ImageTensor],
) -> CliResult<LayerStatistics> {
    if images.is_empty() {
        return Err(CliError::Config("no real images for the concept; set concept or image_dir".into()));
    }
    Ok(match mode {
        Mode::Vlm => {
            let lambda = cfg.stats.lambda.clone().unwrap_or_else(|| suite.encoder.layer_ids());
            capture_encoder_stats(suite.encoder.as_ref(), images, &lambda, cfg.stats.mode)?
        }
        Mode::Vit => {
            let c = suite.classifier()?;
            let lambda = cfg.stats.lambda.clone().unwrap_or_else(|| c.layer_ids());
            capture_classifier_stats(c, images, &lambda, cfg.stats.mode)?
        }
    })
}

/// Loads or captures whatever statistics the weights need.
pub fn reference_stats(cfg: &ExperimentConfig, inv: &InversionConfig, suite: &ModelSuite) -> CliResult<LoadedStats> {
    let mut out = LoadedStats::default();
    if inv.weights.gamma2 > 0.0 {
        let stats = match &cfg.stats.encoder {
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::Io(format!("statistics file {} not found", path.display())));
                }
                load_encoder_stats(path, cfg.stats.lambda.as_deref(), None)?
            }
            None => capture_layer_stats(cfg, suite, inv.mode(), &real_images(cfg)?)?,
        };
        out.encoder_hash = Some(doc_hash(StatsDocument::from(&stats))?);
        out.encoder = Some(stats);
    }
    if inv.weights.beta1 > 0.0 {
        let stats = match &cfg.stats.bn {
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::Io(format!("statistics file {} not found", path.display())));
                }
                load_bn_stats(path, None)?
            }
            None => extract_bn_stats(suite.verifier()?)?,
        };
        out.bn_hash = Some(doc_hash(StatsDocument::from(&stats))?);
        out.bn = Some(stats);
    }
    Ok(out)
}
