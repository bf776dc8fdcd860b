//! Preset × base variant × concept × seed grids with resumable cells and a
//! leaderboard aggregated from the per-cell metrics.

use std::fs;
use std::path::{Path, PathBuf};

use mimic_core::engine::{run_inversion, RunResult};
use mimic_core::metrics::{evaluate_run, EvalReferences, MetricReport};
use mimic_core::modelzoo::ModelSuite;
use mimic_core::objective::BaseLossVariant;
use mimic_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::commands::write_run;
use crate::config::{merge, preset, resolve, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::setup::{build_suite, real_images, reference_stats, sha256_hex};

pub const CELL_FILE: &str = "cell.json";
pub const GRID_FILE: &str = "grid.json";
pub const LEADERBOARD_FILE: &str = "leaderboard.csv";
pub const CELLS_DIR: &str = "cells";

/// Leaderboard columns after the row label, with the metric each one reads.
pub const LEADERBOARD_COLUMNS: [&str; 9] = [
    "Top-1",
    "Top-5",
    "IS_inf[verifier]",
    "IS_inf[classifier]",
    "FID_inf",
    "IS",
    "FID",
    "LPIPS",
    "CLIPScore",
];

pub fn column_value(report: &MetricReport, column: &str) -> Option<f64> {
    match column {
        "Top-1" => report.top1,
        "Top-5" => report.top5,
        "IS_inf[verifier]" => report.is_inf_for("verifier"),
        "IS_inf[classifier]" => report.is_inf_for("classifier"),
        "FID_inf" => report.fid_inf,
        "IS" => report.is,
        "FID" => report.fid,
        "LPIPS" => report.lpips,
        "CLIPScore" => report.clip_score,
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One grid cell and where its run lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub preset: String,
    /// Set only when the grid crosses base-loss variants.
    pub base_variant: Option<BaseLossVariant>,
    pub concept: String,
    pub seed: u64,
    /// Relative to the grid directory.
    pub dir: PathBuf,
    /// Content hash of the resolved cell configuration and code version.
    pub key: String,
    pub status: CellStatus,
    pub error: Option<String>,
    /// False when a finished cell was found and reused.
    #[serde(default)]
    pub computed: bool,
}

impl AblationCell {
    /// Leaderboard row label.
    pub fn row(&self) -> String {
        row_label(&self.preset, self.base_variant)
    }
}

pub fn row_label(preset: &str, variant: Option<BaseLossVariant>) -> String {
    match variant {
        None => preset.to_string(),
        Some(BaseLossVariant::L2) => format!("{preset} [l2]"),
        Some(BaseLossVariant::Kl) => format!("{preset} [kl]"),
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .flat_map(|c| match c {
            '+' => "plus_".chars().collect::<Vec<_>>(),
            c if c.is_ascii_alphanumeric() || c == '-' || c == '_' => vec![c],
            _ => vec!['_'],
        })
        .collect()
}

struct PlannedCell {
    preset: String,
    base_variant: Option<BaseLossVariant>,
    concept: String,
    seed: u64,
    dir: PathBuf,
    cfg: ExperimentConfig,
    key: String,
}

/// Configuration of one cell: the preset fragment merged into the grid's
/// configuration, then the axis values.
pub fn cell_config(
    base: &ExperimentConfig,
    preset_name: &str,
    variant: Option<BaseLossVariant>,
    concept: &str,
    seed: u64,
) -> CliResult<ExperimentConfig> {
    let fragment = preset(preset_name)
        .ok_or_else(|| CliError::Config(format!("ablation.presets: unknown preset {preset_name:?}")))?;
    let mut doc: Value = serde_json::from_str(&base.to_json()?)?;
    merge(&mut doc, &fragment);
    let mut axes = json!({
        "presets": [],
        "concept": concept,
        "inversion": {"seeds": [seed]},
        "ablation": {"presets": [], "concepts": [], "seeds": [], "base_variants": []}
    });
    if let Some(v) = variant {
        axes["inversion"]["target"] = json!({"base_loss": v});
    }
    merge(&mut doc, &axes);
    resolve(&doc)
}

fn plan(cfg: &ExperimentConfig) -> CliResult<Vec<PlannedCell>> {
    let a = &cfg.ablation;
    if a.presets.is_empty() || a.concepts.is_empty() || a.seeds.is_empty() {
        return Err(CliError::Empty("ablation grid has an empty axis".into()));
    }
    let variants: Vec<Option<BaseLossVariant>> =
        if a.base_variants.is_empty() { vec![None] } else { a.base_variants.iter().copied().map(Some).collect() };
    let mut cells = Vec::new();
    for p in &a.presets {
        for &v in &variants {
            for concept in &a.concepts {
                for &seed in &a.seeds {
                    let cell_cfg = cell_config(cfg, p, v, concept, seed)?;
                    let key = sha256_hex(format!("{}\n{}", cell_cfg.to_json()?, env!("CARGO_PKG_VERSION")).as_bytes());
                    let mut name = sanitize(p);
                    if let Some(v) = v {
                        name.push_str(if v == BaseLossVariant::Kl { "__kl" } else { "__l2" });
                    }
                    let dir = PathBuf::from(CELLS_DIR).join(format!("{name}__{}__seed_{seed}", sanitize(concept)));
                    if cells.iter().any(|c: &PlannedCell| c.dir == dir) {
                        return Err(CliError::Config(format!("ablation: duplicate cell {}", dir.display())));
                    }
                    cells.push(PlannedCell {
                        preset: p.clone(),
                        base_variant: v,
                        concept: concept.clone(),
                        seed,
                        dir,
                        cfg: cell_cfg,
                        key,
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn finished(cell: &PlannedCell, root: &Path) -> Option<AblationCell> {
    let text = fs::read_to_string(root.join(&cell.dir).join(CELL_FILE)).ok()?;
    let mut done: AblationCell = serde_json::from_str(&text).ok()?;
    (done.key == cell.key && done.status == CellStatus::Ok).then(|| {
        done.computed = false;
        done
    })
}

fn execute(cell: &PlannedCell, suite: &ModelSuite, root: &Path) -> CliResult<()> {
    let dir = root.join(&cell.dir);
    let inv = cell.cfg.resolved_inversion(suite.vocab())?;
    let stats = reference_stats(&cell.cfg, &inv, suite)?;
    let result: RunResult = match run_inversion(&inv, cell.seed, suite, stats.refs()) {
        Ok(r) => r,
        Err(Error::Aborted { step, reason, partial }) => {
            write_run(&cell.cfg, suite, &inv, &stats, &partial, &dir)?;
            return Err(CliError::Numeric(format!("aborted at step {step}: {reason}")));
        }
        Err(e) => return Err(e.into()),
    };
    write_run(&cell.cfg, suite, &inv, &stats, &result, &dir)?;
    let refs = EvalReferences {
        label: cell.cfg.concept_label(),
        real_images: real_images(&cell.cfg)?,
        target_text: None,
        text_pairs: Vec::new(),
    };
    evaluate_run(&result, suite, &refs, &cell.cfg.metrics, Some(&dir))?;
    Ok(())
}

fn run_cell(cell: &PlannedCell, suite: &ModelSuite, root: &Path) -> CliResult<AblationCell> {
    let dir = root.join(&cell.dir);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let outcome = execute(cell, suite, root);
    if let Err(e) = &outcome {
        tracing::warn!(cell = %cell.dir.display(), "cell failed: {e}");
    }
    let done = AblationCell {
        preset: cell.preset.clone(),
        base_variant: cell.base_variant,
        concept: cell.concept.clone(),
        seed: cell.seed,
        dir: cell.dir.clone(),
        key: cell.key.clone(),
        status: if outcome.is_ok() { CellStatus::Ok } else { CellStatus::Failed },
        error: outcome.err().map(|e| e.to_string()),
        computed: true,
    };
    // Written last, so an interrupted cell has no marker and reruns.
    fs::write(dir.join(CELL_FILE), serde_json::to_string_pretty(&done)?)?;
    Ok(done)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSummary {
    pub cells: Vec<AblationCell>,
    /// Row labels in leaderboard order.
    pub rows: Vec<String>,
    pub concepts: Vec<String>,
}

impl GridSummary {
    pub fn computed(&self) -> usize {
        self.cells.iter().filter(|c| c.computed).count()
    }

    pub fn succeeded(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Ok).count()
    }
}

pub struct AblateOptions {
    pub workers: usize,
    /// Stops after this many newly computed cells, leaving the rest pending.
    pub max_cells: Option<usize>,
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, opts: &AblateOptions) -> CliResult<GridSummary> {
    let planned = plan(cfg)?;
    fs::create_dir_all(out.join(CELLS_DIR))?;
    let mut slots: Vec<Option<AblationCell>> = planned.iter().map(|c| finished(c, out)).collect();
    let mut pending: Vec<usize> = (0..planned.len()).filter(|&i| slots[i].is_none()).collect();
    if let Some(m) = opts.max_cells {
        pending.truncate(m);
    }
    tracing::info!(
        total = planned.len(),
        reused = slots.iter().filter(|s| s.is_some()).count(),
        to_run = pending.len(),
        "ablation grid"
    );
    if !pending.is_empty() {
        let suite = build_suite(cfg)?;
        for &i in &pending {
            if planned[i].cfg.suite != cfg.suite {
                return Err(CliError::Config(format!(
                    "ablation: preset {:?} changes the model suite, which a grid shares",
                    planned[i].preset
                )));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers.max(1))
            .build()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
        let done: Vec<CliResult<AblationCell>> =
            pool.install(|| pending.par_iter().map(|&i| run_cell(&planned[i], &suite, out)).collect());
        for (&i, d) in pending.iter().zip(done) {
            slots[i] = Some(d?);
        }
    }
    let complete = slots.iter().all(Option::is_some);
    let cells: Vec<AblationCell> = slots.into_iter().flatten().collect();
    let mut rows: Vec<String> = Vec::new();
    for c in &planned {
        let r = row_label(&c.preset, c.base_variant);
        if !rows.contains(&r) {
            rows.push(r);
        }
    }
    let summary = GridSummary { cells, rows, concepts: cfg.ablation.concepts.clone() };
    fs::write(out.join(GRID_FILE), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    if !complete {
        println!("grid interrupted: {} of {} cells finished", summary.cells.len(), planned.len());
        return Ok(summary);
    }
    let table = leaderboard(out, &summary)?;
    fs::write(out.join(LEADERBOARD_FILE), &table)?;
    print!("{table}");
    println!(
        "{} cells ({} computed, {} reused, {} failed)",
        summary.cells.len(),
        summary.computed(),
        summary.cells.len() - summary.computed(),
        summary.cells.len() - summary.succeeded()
    );
    if summary.succeeded() == 0 {
        return Err(CliError::Empty("every grid cell failed".into()));
    }
    Ok(summary)
}

pub fn read_cell_metrics(root: &Path, cell: &AblationCell) -> CliResult<MetricReport> {
    Ok(MetricReport::read(root.join(&cell.dir))?)
}

/// Mean of each column over the successful cells matching `select`, reading
/// every cell's metrics.json.
pub fn column_means(
    root: &Path,
    cells: &[AblationCell],
    select: impl Fn(&AblationCell) -> bool,
) -> CliResult<Vec<Option<f64>>> {
    let reports: Vec<MetricReport> = cells
        .iter()
        .filter(|c| c.status == CellStatus::Ok && select(c))
        .map(|c| read_cell_metrics(root, c))
        .collect::<CliResult<_>>()?;
    Ok(LEADERBOARD_COLUMNS
        .iter()
        .map(|col| {
            let v: Vec<f64> = reports.iter().filter_map(|r| column_value(r, col)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect())
}

/// CSV with one row per preset in grid order. Cells are means over the
/// successful runs; an empty field means no run produced the metric.
pub fn leaderboard(root: &Path, summary: &GridSummary) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["Optimization Objective"];
    header.extend(LEADERBOARD_COLUMNS);
    w.write_record(&header)?;
    for row in &summary.rows {
        let means = column_means(root, &summary.cells, |c| &c.row() == row)?;
        let mut record = vec![row.clone()];
        record.extend(means.iter().map(|m| m.map(|v| format!("{v}")).unwrap_or_default()));
        w.write_record(&record)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Internal(e.to_string()))
}

/// Parsed leaderboard: row labels and their values.
pub fn parse_leaderboard(text: &str) -> CliResult<Vec<(String, Vec<Option<f64>>)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let label = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|f| if f.is_empty() { Ok(None) } else { f.parse::<f64>().map(Some) })
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Io(format!("leaderboard: {e}")))?;
        rows.push((label, values));
    }
    Ok(rows)
}
