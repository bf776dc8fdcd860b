//! Static charts and an image index for a finished grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablate::{column_means, AblationCell, CellStatus, GridSummary, GRID_FILE, LEADERBOARD_COLUMNS};
use crate::error::{CliError, CliResult};

pub const CHART_DATA_FILE: &str = "chart_data.json";

const TOP1: usize = 0;
const CLIP: usize = 8;

/// One group of bars: top-1 accuracy in percent and CLIPScore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarGroup {
    pub label: String,
    /// Leaderboard Top-1 value, a fraction.
    pub top1: Option<f64>,
    pub top1_percent: Option<f64>,
    pub clip_score: Option<f64>,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartData {
    /// One group per leaderboard row.
    pub presets: Vec<BarGroup>,
    pub concepts: Vec<BarGroup>,
    /// Grouped by target length in words.
    pub lengths: Vec<BarGroup>,
}

fn group(root: &Path, cells: &[AblationCell], label: String, select: impl Fn(&AblationCell) -> bool) -> CliResult<BarGroup> {
    let n_runs = cells.iter().filter(|c| c.status == CellStatus::Ok && select(c)).count();
    let means = column_means(root, cells, select)?;
    Ok(BarGroup { label, top1: means[TOP1], top1_percent: means[TOP1].map(|v| 100.0 * v), clip_score: means[CLIP], n_runs })
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

pub fn chart_data(root: &Path, summary: &GridSummary) -> CliResult<ChartData> {
    debug_assert_eq!(LEADERBOARD_COLUMNS[TOP1], "Top-1");
    debug_assert_eq!(LEADERBOARD_COLUMNS[CLIP], "CLIPScore");
    let cells = &summary.cells;
    let presets = summary
        .rows
        .iter()
        .map(|r| group(root, cells, r.clone(), |c| &c.row() == r))
        .collect::<CliResult<_>>()?;
    let concepts = summary
        .concepts
        .iter()
        .map(|k| group(root, cells, k.clone(), |c| &c.concept == k))
        .collect::<CliResult<_>>()?;
    let mut lens: Vec<usize> = summary.concepts.iter().map(|k| word_count(k)).collect();
    lens.sort_unstable();
    lens.dedup();
    let lengths = lens
        .into_iter()
        .map(|n| group(root, cells, format!("{n} word{}", if n == 1 { "" } else { "s" }), |c| word_count(&c.concept) == n))
        .collect::<CliResult<_>>()?;
    Ok(ChartData { presets, concepts, lengths })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart, both series on a 0 to 100 axis.
pub fn bar_chart_svg(title: &str, groups: &[BarGroup]) -> String {
    const BAR: f64 = 18.0;
    const GAP: f64 = 24.0;
    const LEFT: f64 = 48.0;
    const TOP: f64 = 36.0;
    const PLOT_H: f64 = 200.0;
    let group_w = 2.0 * BAR + GAP;
    let width = LEFT + groups.len() as f64 * group_w + GAP + 140.0;
    let height = TOP + PLOT_H + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="18" font-size="13">{}</text>"#, escape(title));
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = TOP + PLOT_H * (1.0 - tick / 100.0);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##,
            width - 140.0,
            LEFT - 4.0,
            y + 4.0
        );
    }
    for (i, g) in groups.iter().enumerate() {
        let x0 = LEFT + GAP / 2.0 + i as f64 * group_w;
        for (j, (v, colour)) in [(g.top1_percent, "#4c72b0"), (g.clip_score, "#dd8452")].into_iter().enumerate() {
            let x = x0 + j as f64 * BAR;
            match v {
                Some(v) => {
                    let h = PLOT_H * v.clamp(0.0, 100.0) / 100.0;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x}" y="{}" width="{BAR}" height="{h}" fill="{colour}"><title>{v}</title></rect>"#,
                        TOP + PLOT_H - h
                    );
                }
                None => {
                    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">n/a</text>"#, x + BAR / 2.0, TOP + PLOT_H - 4.0);
                }
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + BAR,
            TOP + PLOT_H + 16.0,
            escape(&g.label)
        );
    }
    let lx = width - 130.0;
    let _ = writeln!(s, r##"<rect x="{lx}" y="{TOP}" width="10" height="10" fill="#4c72b0"/><text x="{}" y="{}">Top-1 (%)</text>"##, lx + 14.0, TOP + 9.0);
    let _ = writeln!(s, r##"<rect x="{lx}" y="{}" width="10" height="10" fill="#dd8452"/><text x="{}" y="{}">CLIPScore</text>"##, TOP + 16.0, lx + 14.0, TOP + 25.0);
    s.push_str("</svg>\n");
    s
}

fn index_html(summary: &GridSummary, out: &Path, grid: &Path) -> String {
    let mut s = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Inversion grid</title></head><body>\n");
    s.push_str("<h1>Inversion grid</h1>\n");
    for chart in ["presets.svg", "concepts.svg", "lengths.svg"] {
        let _ = writeln!(s, "<p><img src=\"{chart}\"></p>");
    }
    s.push_str("<table border=\"1\" cellpadding=\"4\">\n<tr><th>Objective</th><th>Concept</th><th>Seed</th><th>Status</th><th>Image</th></tr>\n");
    for c in &summary.cells {
        let png = grid.join(&c.dir).join("final.png");
        let img = if png.exists() {
            let src = relative(&png, out);
            format!("<img src=\"{}\" width=\"96\" style=\"image-rendering: pixelated\">", escape(&src))
        } else {
            String::from("-")
        };
        let _ = writeln!(
            s,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{:?}</td><td>{img}</td></tr>",
            escape(&c.row()),
            escape(&c.concept),
            c.seed,
            c.status
        );
    }
    s.push_str("</table>\n</body></html>\n");
    s
}

/// Path of `target` as seen from `from`, falling back to an absolute path.
fn relative(target: &Path, from: &Path) -> String {
    let (Ok(t), Ok(f)) = (target.canonicalize(), from.canonicalize()) else {
        return target.display().to_string();
    };
    let common = t.components().zip(f.components()).take_while(|(a, b)| a == b).count();
    let mut parts: Vec<String> = f.components().skip(common).map(|_| "..".to_string()).collect();
    parts.extend(t.components().skip(common).map(|c| c.as_os_str().to_string_lossy().into_owned()));
    parts.join("/")
}

pub fn cmd_report(grid: &Path, out: &Path) -> CliResult<ChartData> {
    let path = grid.join(GRID_FILE);
    if !path.exists() {
        return Err(CliError::Empty(format!("{} not found; no grid to report", path.display())));
    }
    let summary: GridSummary = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if summary.cells.iter().all(|c| c.status != CellStatus::Ok) {
        return Err(CliError::Empty("grid has no successful cells".into()));
    }
    let data = chart_data(grid, &summary)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CHART_DATA_FILE), serde_json::to_string_pretty(&data)?)?;
    fs::write(out.join("presets.svg"), bar_chart_svg("Objectives", &data.presets))?;
    fs::write(out.join("concepts.svg"), bar_chart_svg("Concepts", &data.concepts))?;
    fs::write(out.join("lengths.svg"), bar_chart_svg("Target length", &data.lengths))?;
    fs::write(out.join("index.html"), index_html(&summary, out, grid))?;
    println!("report written to {}", out.display());
    Ok(data)
}
