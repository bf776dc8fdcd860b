//! Experiment configuration: one JSON document, optionally layered on named
//! preset fragments.
//!
//! Resolution order: built-in defaults, then each preset in the order listed,
//! then the file itself. Objects merge key by key; any other value replaces
//! the earlier one. The merged document is parsed strictly.

use std::path::{Path, PathBuf};

use mimic_core::engine::{InversionConfig, Schedule};
use mimic_core::metrics::EvalOptions;
use mimic_core::modelzoo::train::TrainOptions;
use mimic_core::modelzoo::{OracleConfig, PromptSpec, Vocab};
use mimic_core::objective::{BaseLossVariant, Mode, ObjectiveWeights, TargetSpec};
use mimic_core::statcapture::dataset::{BlobConfig, CLASS_NAMES};
use mimic_core::statcapture::AveragingMode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::CliError;

pub const DEFAULT_TEMPLATE: &str = "what is shown in the picture : a. [target] concept ?";

/// Ordered like the rows of the partial-objective study.
pub const ABLATION_PRESETS: [&str; 6] = ["baseline", "+base", "+patch", "+prior", "+rv", "aggregated"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub target_accuracy: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = TrainOptions::default();
        Self { max_epochs: d.max_epochs, batch_size: d.batch_size, lr: d.lr, seed: d.seed, target_accuracy: 0.99 }
    }
}

impl TrainSpec {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            target_accuracy: self.target_accuracy,
        }
    }
}

/// Where the frozen models come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuiteSpec {
    /// Seeded toy suite; the classifier and verifier are trained on the blob
    /// dataset when `train` is present.
    Toy { seed: u64, image_size: usize, train: Option<TrainSpec> },
    Oracle { image_size: usize, patch: usize, gain: f64 },
    Weights { path: PathBuf },
}

impl SuiteSpec {
    pub fn image_size(&self) -> Option<usize> {
        match self {
            SuiteSpec::Toy { image_size, .. } | SuiteSpec::Oracle { image_size, .. } => Some(*image_size),
            SuiteSpec::Weights { .. } => None,
        }
    }

    pub fn oracle_config(&self) -> Option<OracleConfig> {
        match self {
            SuiteSpec::Oracle { image_size, patch, gain } => {
                Some(OracleConfig { image_size: *image_size, patch: *patch, gain: *gain })
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSpec {
    /// Reference layer statistics; captured from the real images when absent.
    pub encoder: Option<PathBuf>,
    /// Verifier BN statistics; read from the verifier when absent.
    pub bn: Option<PathBuf>,
    /// Layers to capture; every tapped layer when absent.
    pub lambda: Option<Vec<usize>>,
    pub mode: AveragingMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub presets: Vec<String>,
    pub concepts: Vec<String>,
    pub seeds: Vec<u64>,
    /// Base-loss variants crossed with the presets; the configured variant
    /// alone when empty.
    pub base_variants: Vec<BaseLossVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub presets: Vec<String>,
    pub suite: SuiteSpec,
    /// Synthetic real-image source, used for training, statistics and
    /// evaluation references.
    pub data: BlobConfig,
    /// PNG directory replacing the blob images of the concept.
    pub image_dir: Option<PathBuf>,
    /// Target concept: a class name in classifier mode, the target text in
    /// VLM mode.
    pub concept: Option<String>,
    pub stats: StatsSpec,
    pub inversion: InversionConfig,
    pub metrics: EvalOptions,
    pub ablation: AblationSpec,
}

fn default_document() -> Value {
    let prompt = PromptSpec::new(DEFAULT_TEMPLATE, CLASS_NAMES[0], None);
    let inversion = InversionConfig::vlm(prompt, TargetSpec::vlm(Vec::new()));
    json!({
        "presets": [],
        "suite": {"kind": "toy", "seed": 0, "image_size": 16, "train": TrainSpec::default()},
        "data": BlobConfig { image_size: 16, ..BlobConfig::default() },
        "image_dir": null,
        "concept": CLASS_NAMES[0],
        "stats": StatsSpec::default(),
        "inversion": inversion,
        "metrics": EvalOptions::default(),
        "ablation": {
            "presets": ABLATION_PRESETS,
            "concepts": [CLASS_NAMES[0], CLASS_NAMES[1]],
            "seeds": [0, 1, 2],
            "base_variants": []
        }
    })
}

fn weights_value(w: ObjectiveWeights) -> Value {
    serde_json::to_value(w).expect("weights serialize")
}

/// Partial-objective weights at the unit scale of the KL-variant setup.
fn cumulative(terms: usize) -> ObjectiveWeights {
    let mut w = ObjectiveWeights::task_only();
    if terms >= 1 {
        w.gamma2 = 1.0;
    }
    if terms >= 2 {
        w.beta2 = 1.0;
    }
    if terms >= 3 {
        (w.alpha1, w.alpha2, w.alpha3) = (1.0, 1.0, 1.0);
    }
    if terms >= 4 {
        w.beta1 = 1e-4;
    }
    w
}

/// Named configuration fragment, or `None` for an unknown name.
pub fn preset(name: &str) -> Option<Value> {
    let weights = |w| json!({"inversion": {"weights": weights_value(w)}});
    Some(match name {
        "baseline" => weights(cumulative(0)),
        "+base" => weights(cumulative(1)),
        "+patch" => weights(cumulative(2)),
        "+prior" => weights(cumulative(3)),
        "+rv" => weights(cumulative(4)),
        "aggregated" => weights(ObjectiveWeights::vit_tuned()),
        "appendix_a" => json!({
            "inversion": {
                "iterations": 3000,
                "batch_size": 32,
                "lr": 0.1,
                "schedule": Schedule::Cosine,
                "weights": weights_value(ObjectiveWeights::vit_tuned()),
                "prompt": null,
                "target": {"mode": "vit", "target_ids": [], "base_loss": "l2"}
            }
        }),
        "appendix_b_kl" => json!({
            "inversion": {
                "iterations": 3000,
                "weights": weights_value(ObjectiveWeights { beta1: 1e-4, ..ObjectiveWeights::unit() }),
                "target": {"base_loss": "kl"}
            }
        }),
        "oracle_red" => json!({
            "suite": {"kind": "oracle", "image_size": 32, "patch": 4, "gain": 10.0},
            "data": {"image_size": 32},
            "concept": "red",
            "inversion": {
                "iterations": 1000,
                "lr": 0.05,
                "schedule": Schedule::Constant,
                "seeds": [0, 1, 2],
                "weights": weights_value(ObjectiveWeights::task_only()),
                "checkpoint_every": 250
            }
        }),
        _ => return None,
    })
}

pub fn preset_names() -> Vec<&'static str> {
    let mut names = ABLATION_PRESETS.to_vec();
    names.extend(["appendix_a", "appendix_b_kl", "oracle_red"]);
    names
}

/// Recursive key-wise merge of `patch` into `base`. A `kind` change inside a
/// tagged object replaces the whole object.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            if p.get("kind").is_some_and(|k| b.get("kind") != Some(k)) {
                *b = p.clone();
                return;
            }
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(existing) if existing.is_object() && v.is_object() => merge(existing, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Merges defaults, the listed presets and `doc`, then parses strictly.
pub fn resolve(doc: &Value) -> Result<ExperimentConfig, CliError> {
    let obj: &Map<String, Value> =
        doc.as_object().ok_or_else(|| CliError::Config("configuration must be a JSON object".into()))?;
    let presets: Vec<String> = match obj.get("presets") {
        None => Vec::new(),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Config(format!("presets: {e}")))?,
    };
    let mut merged = default_document();
    for name in &presets {
        let fragment = preset(name).ok_or_else(|| {
            CliError::Config(format!("presets: unknown preset {name:?} (known: {})", preset_names().join(", ")))
        })?;
        merge(&mut merged, &fragment);
    }
    merge(&mut merged, doc);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged)
        .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: Value = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        CliError::Config(format!("line {} column {}: {inner}", inner.line(), inner.column()))
    })?;
    resolve(&doc)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Defaults alone.
pub fn default_config() -> ExperimentConfig {
    resolve(&json!({})).expect("defaults are valid")
}

impl ExperimentConfig {
    pub fn mode(&self) -> Mode {
        self.inversion.mode()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: mimic_core::Error| CliError::Config(format!("inversion: {e}"));
        self.inversion.weights.validate().map_err(cfg_err)?;
        if let Some(size) = self.suite.image_size() {
            if self.data.image_size != size {
                return Err(CliError::Config(format!(
                    "data.image_size: {} differs from the suite image size {size}",
                    self.data.image_size
                )));
            }
        }
        if self.mode() == Mode::Vit && matches!(self.suite, SuiteSpec::Oracle { .. }) {
            return Err(CliError::Config("suite: the oracle suite has no classifier for vit mode".into()));
        }
        for name in &self.ablation.presets {
            if preset(name).is_none() {
                return Err(CliError::Config(format!("ablation.presets: unknown preset {name:?}")));
            }
        }
        if let Some(c) = &self.concept {
            if c.trim().is_empty() {
                return Err(CliError::Config("concept: empty".into()));
            }
        }
        let mut probe = self.inversion.clone();
        probe.target.target_ids = vec![0];
        probe.validate().map_err(cfg_err)
    }

    /// Blob class index of the concept, if it names one.
    pub fn concept_label(&self) -> Option<usize> {
        let c = self.concept.as_deref()?;
        CLASS_NAMES.iter().position(|n| *n == c).or_else(|| c.parse().ok())
    }

    /// Copy with the concept filled into the prompt and target.
    pub fn with_concept(&self, concept: &str) -> Self {
        let mut cfg = self.clone();
        cfg.concept = Some(concept.to_string());
        cfg
    }

    /// The inversion configuration with its target resolved against the
    /// vocabulary and class names.
    pub fn resolved_inversion(&self, vocab: &Vocab) -> Result<InversionConfig, CliError> {
        let mut inv = self.inversion.clone();
        match inv.mode() {
            Mode::Vlm => {
                let prompt = inv.prompt.as_mut().ok_or_else(|| CliError::Config("inversion.prompt: missing".into()))?;
                if let Some(c) = &self.concept {
                    prompt.target = c.clone();
                }
                let ids = vocab
                    .tokenize(&prompt.target)
                    .map_err(|e| CliError::Config(format!("concept: {e}")))?;
                if ids.is_empty() {
                    return Err(CliError::Config("concept: produces no tokens".into()));
                }
                inv.target.target_ids = ids;
            }
            Mode::Vit => {
                if self.concept.is_some() {
                    let label = self.concept_label().ok_or_else(|| {
                        CliError::Config(format!(
                            "concept: {:?} is not a class ({})",
                            self.concept.as_deref().unwrap_or(""),
                            CLASS_NAMES.join(", ")
                        ))
                    })?;
                    inv.target.class_label = Some(label);
                }
            }
        }
        inv.validate().map_err(|e| CliError::Config(format!("inversion: {e}")))?;
        Ok(inv)
    }

    /// Applies `--seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.inversion.seeds = vec![seed];
        self.ablation.seeds = vec![seed];
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        mimic_core::floatjson::to_string(self).map_err(CliError::from)
    }
}
