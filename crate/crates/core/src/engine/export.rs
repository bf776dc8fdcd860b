//! Image export and the on-disk layout of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InversionConfig, RunResult, INIT_GENERATOR};
use crate::error::{invalid, Error, Result};
use crate::floatjson;
use crate::modelzoo::ImageTensor;
use crate::objective::LossBreakdown;

/// 8-bit interleaved pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportImage {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB)
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-channel min-max rescale to [0, 1], then 8-bit quantization. A constant
/// channel maps to 0.5.
pub fn postprocess_image(image: &ImageTensor) -> Result<ExportImage> {
    let (c, h, w) = image.shape();
    if c != 1 && c != 3 {
        return Err(invalid(format!(
            "only 1 or 3 channel images export, got {c}"
        )));
    }
    let mut pixels = vec![0u8; c * h * w];
    for ch in 0..c {
        let data = image.channel(ch);
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, &v) in data.iter().enumerate() {
            let scaled = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            pixels[i * c + ch] = quantize(scaled);
        }
    }
    Ok(ExportImage {
        width: w,
        height: h,
        channels: c,
        pixels,
    })
}

/// Post-processes each image on its own and lays them out in a near-square
/// grid with a one pixel black gutter.
pub fn tile_images(images: &[ImageTensor]) -> Result<ExportImage> {
    let parts: Vec<ExportImage> = images
        .iter()
        .map(postprocess_image)
        .collect::<Result<_>>()?;
    let first = parts.first().ok_or_else(|| invalid("nothing to tile"))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let (w, h, c) = (first.width, first.height, first.channels);
    let cols = (parts.len() as f64).sqrt().ceil() as usize;
    let rows = parts.len().div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut pixels = vec![0u8; gw * gh * c];
    for (k, p) in parts.iter().enumerate() {
        let (ox, oy) = ((k % cols) * (w + 1), (k / cols) * (h + 1));
        for y in 0..h {
            let src = &p.pixels[y * w * c..(y + 1) * w * c];
            let start = ((oy + y) * gw + ox) * c;
            pixels[start..start + w * c].copy_from_slice(src);
        }
    }
    Ok(ExportImage {
        width: gw,
        height: gh,
        channels: c,
        pixels,
    })
}

pub fn save_png(image: &ExportImage, path: impl AsRef<Path>) -> Result<()> {
    let color = match image.channels {
        1 => image::ExtendedColorType::L8,
        _ => image::ExtendedColorType::Rgb8,
    };
    image::save_buffer_with_format(
        path,
        &image.pixels,
        image.width as u32,
        image.height as u32,
        color,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

/// Raw little-endian f32 dump of a (B, C, H, W) batch.
pub fn write_f32_images(images: &[ImageTensor], path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    for img in images {
        for &v in img.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_images(
    path: impl AsRef<Path>,
    shape: (usize, usize, usize),
) -> Result<Vec<ImageTensor>> {
    let bytes = fs::read(path)?;
    let per = shape.0 * shape.1 * shape.2 * 4;
    if per == 0 || bytes.len() % per != 0 {
        return Err(Error::Shape {
            expected: format!("a multiple of {per} bytes"),
            received: format!("{}", bytes.len()),
        });
    }
    bytes
        .chunks_exact(per)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            ImageTensor::new(shape, data)
        })
        .collect()
}

/// Full configuration echo and provenance of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: InversionConfig,
    /// (B, C, H, W) of `final.f32`.
    pub image_shape: [usize; 4],
    pub init_generator: String,
    pub weights_checksum: String,
    pub suite_arch_hash: String,
    pub encoder_stats_hash: Option<String>,
    pub bn_stats_hash: Option<String>,
    pub iterations_completed: usize,
    pub wall_time_s: f64,
    pub version: String,
}

impl RunManifest {
    pub fn new(result: &RunResult, suite_arch_hash: &str) -> Result<Self> {
        let first = result
            .final_images
            .first()
            .ok_or_else(|| invalid("run has no images"))?;
        let (c, h, w) = first.shape();
        Ok(Self {
            seed: result.seed,
            config: result.config.clone(),
            image_shape: [result.final_images.len(), c, h, w],
            init_generator: INIT_GENERATOR.to_string(),
            weights_checksum: result.weights_checksum.clone(),
            suite_arch_hash: suite_arch_hash.to_string(),
            encoder_stats_hash: None,
            bn_stats_hash: None,
            iterations_completed: result.trace.last().map_or(0, |r| r.step + 1),
            wall_time_s: result.wall_time_s,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

pub const TRACE_HEADER: &str = "step,l_sce,l_base,r_tv1,r_tv2,r_l2,r_prior,r_patch,r_v,total,lr";

pub fn trace_csv(result: &RunResult) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for row in &result.trace {
        let _ = write!(out, "{}", row.step);
        for v in row.breakdown.values() {
            let _ = write!(out, ",{v:e}");
        }
        let _ = writeln!(out, ",{:e}", row.lr);
    }
    out
}

/// Parses a trace written by [`write_run_dir`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<super::TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(invalid("trace.csv header does not match"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(invalid(format!("trace row has {} fields: {line}", f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| invalid(format!("trace value {s:?}: {e}")))
            };
            let step = f[0]
                .parse::<usize>()
                .map_err(|e| invalid(format!("trace step {:?}: {e}", f[0])))?;
            let breakdown = LossBreakdown {
                l_sce: num(f[1])?,
                l_base: num(f[2])?,
                r_tv1: num(f[3])?,
                r_tv2: num(f[4])?,
                r_l2: num(f[5])?,
                r_prior: num(f[6])?,
                r_patch: num(f[7])?,
                r_v: num(f[8])?,
                total: num(f[9])?,
            };
            Ok(super::TraceRow {
                step,
                breakdown,
                lr: num(f[10])?,
            })
        })
        .collect()
}

/// Writes `manifest.json`, `trace.csv`, `images/step_%06d.png`, `final.png`
/// and `final.f32` under `dir`.
pub fn write_run_dir(
    result: &RunResult,
    manifest: &RunManifest,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::write(dir.join("manifest.json"), floatjson::to_string(manifest)?)?;
    fs::write(dir.join("trace.csv"), trace_csv(result))?;
    for cp in &result.checkpoints {
        save_png(
            &tile_images(&cp.images)?,
            dir.join("images").join(format!("step_{:06}.png", cp.step)),
        )?;
    }
    save_png(&tile_images(&result.final_images)?, dir.join("final.png"))?;
    write_f32_images(&result.final_images, dir.join("final.f32"))?;
    Ok(())
}
