//! capture-stats, invert, eval and decode.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mimic_core::engine::{read_f32_images, run_multi_seed, write_run_dir, InversionConfig, RunManifest, RunResult};
use mimic_core::metrics::{
    evaluate_run, read_text_pairs, text_scores, EvalReferences, MetricMeta, MetricReport, TextScores,
};
use mimic_core::modelzoo::{classifier_forward, describe_image, ModelSuite};
use mimic_core::objective::Mode;
use mimic_core::statcapture::dataset::CLASS_NAMES;
use mimic_core::statcapture::{extract_bn_stats, save_stats, StatsDocument};
use mimic_core::{floatjson, ops, Error};

use crate::ablate::{column_value, LEADERBOARD_COLUMNS};
use crate::config::{parse_config, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::setup::{build_suite, capture_layer_stats, load_image_dir, real_images, reference_stats, LoadedStats};

pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const DECODE_FILE: &str = "decode.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StatsKindArg {
    /// Layer statistics of the model the objective taps.
    Encoder,
    /// Running statistics of the verifier's BN layers.
    Bn,
}

pub fn cmd_capture_stats(cfg: &ExperimentConfig, out: &Path, kind: StatsKindArg) -> CliResult<StatsDocument> {
    let suite = build_suite(cfg)?;
    let doc = match kind {
        StatsKindArg::Encoder => {
            let images = real_images(cfg)?;
            StatsDocument::from(&capture_layer_stats(cfg, &suite, cfg.mode(), &images)?)
        }
        StatsKindArg::Bn => StatsDocument::from(&extract_bn_stats(suite.verifier()?)?),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_stats(&doc, out)?;
    println!("wrote {} ({} layers, {} images)", out.display(), doc.layers.len(), doc.image_count);
    for layer in &doc.layers {
        let n = layer.mean.len() as f64;
        println!(
            "  layer {:>3}: {:>4} channels, mean(mu) {:+.4e}, mean(spread) {:.4e}",
            layer.id,
            layer.mean.len(),
            layer.mean.iter().sum::<f64>() / n,
            layer.spread.iter().sum::<f64>() / n
        );
    }
    Ok(doc)
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn answer_text(suite: &ModelSuite, inv: &InversionConfig, result: &RunResult, max_len: usize) -> CliResult<Vec<String>> {
    match inv.mode() {
        Mode::Vlm => {
            let prompt = inv.prompt.as_ref().ok_or_else(|| CliError::Config("inversion.prompt: missing".into()))?;
            result
                .final_images
                .iter()
                .map(|img| Ok(suite.vocab().decode(&describe_image(suite, img, prompt, max_len)?)))
                .collect()
        }
        Mode::Vit => {
            let c = suite.classifier()?;
            result
                .final_images
                .iter()
                .map(|img| {
                    let k = ops::argmax(&ops::flat(&classifier_forward(c, img)?)?);
                    Ok(CLASS_NAMES.get(k).map_or_else(|| format!("class {k}"), |s| s.to_string()))
                })
                .collect()
        }
    }
}

/// Writes one seed's run directory, its configuration echo and decode log.
pub fn write_run(
    cfg: &ExperimentConfig,
    suite: &ModelSuite,
    inv: &InversionConfig,
    stats: &LoadedStats,
    result: &RunResult,
    dir: &Path,
) -> CliResult<Vec<String>> {
    let mut manifest = RunManifest::new(result, &suite.arch().hash())?;
    manifest.encoder_stats_hash = stats.encoder_hash.clone();
    manifest.bn_stats_hash = stats.bn_hash.clone();
    write_run_dir(result, &manifest, dir)?;
    fs::write(dir.join(EXPERIMENT_FILE), cfg.to_json()?)?;
    let answers = answer_text(suite, inv, result, cfg.metrics.decode_len)?;
    let mut log = String::new();
    for (i, a) in answers.iter().enumerate() {
        let _ = writeln!(log, "image {i}: {a}");
    }
    fs::write(dir.join(DECODE_FILE), log)?;
    Ok(answers)
}

pub struct InvertOutcome {
    pub results: Vec<RunResult>,
    pub answers: Vec<Vec<String>>,
}

pub fn cmd_invert(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<InvertOutcome> {
    let suite = build_suite(cfg)?;
    let inv = cfg.resolved_inversion(suite.vocab())?;
    let stats = reference_stats(cfg, &inv, &suite)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let results = match run_multi_seed(&inv, &suite, stats.refs(), workers) {
        Ok(r) => r,
        Err(Error::Aborted { step, reason, partial }) => {
            let dir = seed_dir(out, partial.seed);
            write_run(cfg, &suite, &inv, &stats, &partial, &dir)?;
            return Err(CliError::Numeric(format!(
                "seed {} aborted at step {step}: {reason}; partial run kept in {}",
                partial.seed,
                dir.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let mut answers = Vec::new();
    for r in &results {
        let dir = seed_dir(out, r.seed);
        let a = write_run(cfg, &suite, &inv, &stats, r, &dir)?;
        let last = r.trace.last().map(|t| t.breakdown.total).unwrap_or(f64::NAN);
        println!("seed {}: final loss {last:.6e}, answer {:?}, run dir {}", r.seed, a.join(" | "), dir.display());
        answers.push(a);
    }
    Ok(InvertOutcome { results, answers })
}

/// Experiment configuration saved next to a run.
pub fn load_run_experiment(run_dir: &Path) -> CliResult<ExperimentConfig> {
    let path = run_dir.join(EXPERIMENT_FILE);
    if !path.exists() {
        return Err(CliError::Io(format!("{} not found; not a run directory", path.display())));
    }
    parse_config(&path)
}

pub fn load_run(run_dir: &Path) -> CliResult<(RunManifest, RunResult)> {
    let path = run_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let [_, c, h, w] = manifest.image_shape;
    let final_images = read_f32_images(run_dir.join("final.f32"), (c, h, w))?;
    let result = RunResult {
        seed: manifest.seed,
        config: manifest.config.clone(),
        final_images,
        checkpoints: Vec::new(),
        trace: Vec::new(),
        weights_checksum: manifest.weights_checksum.clone(),
        wall_time_s: manifest.wall_time_s,
    };
    Ok((manifest, result))
}

/// Header and one row in leaderboard column order, followed by the text
/// metrics. Missing metrics print as "-".
pub fn table_row(label: &str, report: &MetricReport) -> (String, String) {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut header = String::from("Optimization Objective");
    let mut row = label.to_string();
    for col in LEADERBOARD_COLUMNS {
        let _ = write!(header, "\t{col}");
        let _ = write!(row, "\t{}", f(column_value(report, col)));
    }
    header.push_str("\tBLEU\tMETEOR\tROUGE-L");
    for v in [report.bleu, report.meteor, report.rouge_l] {
        let _ = write!(row, "\t{}", f(v));
    }
    (header, row)
}

fn text_only_report(pairs: &[(String, String)], cfg: &ExperimentConfig) -> CliResult<MetricReport> {
    if pairs.is_empty() {
        return Err(CliError::Empty("no text pairs to score".into()));
    }
    let scores: Vec<TextScores> =
        pairs.iter().map(|(c, r)| text_scores(c, r, &cfg.metrics.bleu)).collect::<Result<_, _>>()?;
    let n = scores.len() as f64;
    for (i, s) in scores.iter().enumerate() {
        println!("pair {i}: BLEU {:.4} METEOR {:.4} ROUGE-L {:.4}", s.bleu, s.meteor, s.rouge_l);
    }
    Ok(MetricReport {
        bleu: Some(scores.iter().map(|s| s.bleu).sum::<f64>() / n),
        meteor: Some(scores.iter().map(|s| s.meteor).sum::<f64>() / n),
        rouge_l: Some(scores.iter().map(|s| s.rouge_l).sum::<f64>() / n),
        meta: MetricMeta { n_text_pairs: pairs.len(), bleu: cfg.metrics.bleu, ..MetricMeta::default() },
        ..MetricReport::default()
    })
}

pub struct EvalArgs<'a> {
    pub run_dir: Option<&'a Path>,
    pub text_pairs: Option<&'a Path>,
    pub references: Option<&'a Path>,
    /// Where metrics.json goes; the run directory when absent.
    pub out: Option<&'a Path>,
    /// Overrides the configuration saved with the run.
    pub config: Option<&'a ExperimentConfig>,
}

pub fn cmd_eval(args: &EvalArgs<'_>) -> CliResult<MetricReport> {
    let pairs = match args.text_pairs {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Io(format!("text pair file {} not found", p.display())));
            }
            read_text_pairs(p)?
        }
        None => Vec::new(),
    };
    let report = match args.run_dir {
        None => {
            let cfg = args.config.cloned().unwrap_or_else(crate::config::default_config);
            let report = text_only_report(&pairs, &cfg)?;
            if let Some(out) = args.out {
                fs::create_dir_all(out)?;
                report.write(out)?;
            }
            report
        }
        Some(run_dir) => {
            let cfg = match args.config {
                Some(c) => c.clone(),
                None => load_run_experiment(run_dir)?,
            };
            let (manifest, result) = load_run(run_dir)?;
            let suite = build_suite(&cfg)?;
            let checksum = suite.weights_checksum();
            if checksum != manifest.weights_checksum {
                tracing::warn!("suite weights differ from the ones recorded in the run manifest");
            }
            let real_images = match args.references {
                Some(dir) => load_image_dir(dir)?,
                None => real_images(&cfg)?,
            };
            let refs = EvalReferences { label: cfg.concept_label(), real_images, target_text: None, text_pairs: pairs };
            let out = args.out.unwrap_or(run_dir);
            fs::create_dir_all(out)?;
            evaluate_run(&result, &suite, &refs, &cfg.metrics, Some(out))?
        }
    };
    for w in &report.meta.warnings {
        eprintln!("warning: {w}");
    }
    let label = args.run_dir.map_or_else(|| "text".to_string(), |d| d.display().to_string());
    let (header, row) = table_row(&label, &report);
    println!("{header}");
    println!("{row}");
    Ok(report)
}

pub fn cmd_decode(run_dir: &Path) -> CliResult<Vec<String>> {
    let cfg = load_run_experiment(run_dir)?;
    let (_, result) = load_run(run_dir)?;
    let suite = build_suite(&cfg)?;
    let answers = answer_text(&suite, &result.config, &result, cfg.metrics.decode_len)?;
    for (i, a) in answers.iter().enumerate() {
        println!("image {i}: {a}");
    }
    Ok(answers)
}

pub fn json_string<T: serde::Serialize>(value: &T) -> CliResult<String> {
    Ok(floatjson::to_string(value)?)
}
