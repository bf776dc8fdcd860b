//! The inversion loop: seeded Gaussian initialization, Adam on the image
//! buffer, optional cosine schedule, loss tracing, checkpoints and multi-seed
//! orchestration.

mod export;

use std::f64::consts::PI;
use std::time::Instant;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use export::{
    parse_trace_csv, postprocess_image, read_f32_images, save_png, tile_images, trace_csv,
    write_f32_images, write_run_dir, ExportImage, RunManifest, TRACE_HEADER,
};

use crate::error::{invalid, Error, Result};
use crate::modelzoo::{ImageTensor, ModelSuite, PromptSpec};
use crate::objective::{
    total_objective, LossBreakdown, Mode, ObjectiveOptions, ObjectiveWeights, ReferenceStats,
    TargetSpec,
};
use crate::ops;

/// Name and version of the initial-image generator.
pub const INIT_GENERATOR: &str = "chacha8-stdnormal-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub adam: AdamParams,
    pub seeds: Vec<u64>,
    pub weights: ObjectiveWeights,
    pub objective: ObjectiveOptions,
    pub prompt: Option<PromptSpec>,
    pub target: TargetSpec,
    /// Layer set the reference statistics must cover; `None` accepts any.
    pub lambda: Option<Vec<usize>>,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Global-norm gradient clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl InversionConfig {
    /// Defaults for VLM inversion: 5000 iterations of Adam at constant lr 0.05
    /// on a single image.
    pub fn vlm(prompt: PromptSpec, target: TargetSpec) -> Self {
        Self {
            iterations: 5000,
            batch_size: 1,
            lr: 0.05,
            lr_min: 0.0,
            schedule: Schedule::Constant,
            adam: AdamParams::default(),
            seeds: vec![0, 1, 2],
            weights: ObjectiveWeights::task_only(),
            objective: ObjectiveOptions::default(),
            prompt: Some(prompt),
            target,
            lambda: None,
            checkpoint_every: 500,
            log_every: 1,
            grad_clip: None,
        }
    }

    /// Defaults for classifier inversion: 3000 iterations, batch 32, cosine
    /// schedule and the tuned classifier weights.
    pub fn vit(target: TargetSpec) -> Self {
        Self {
            iterations: 3000,
            batch_size: 32,
            lr: 0.1,
            schedule: Schedule::Cosine,
            weights: ObjectiveWeights::vit_tuned(),
            prompt: None,
            ..Self::vlm(PromptSpec::new("[target]", "red", None), target)
        }
    }

    pub fn mode(&self) -> Mode {
        self.target.mode
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(invalid("lr_min must lie in [0, lr]"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(invalid(
                "adam betas must lie in [0, 1) and eps must be positive",
            ));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seed list must be nonempty"));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(invalid("checkpoint_every and log_every must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(invalid("grad_clip must be positive"));
            }
        }
        if self.mode() == Mode::Vlm {
            if self.prompt.is_none() {
                return Err(Error::Missing("prompt for vlm mode".into()));
            }
            if self.batch_size != 1 {
                return Err(invalid("vlm mode optimizes a single image (batch size 1)"));
            }
        }
        self.weights.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => cosine_lr(step, self.iterations, self.lr, self.lr_min),
        }
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
}

/// Standard normal buffer from the versioned generator, deterministic in
/// `(seed, shape)`.
pub fn init_image(seed: u64, shape: (usize, usize, usize)) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_image(&mut rng, shape)
}

fn draw_image(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Result<ImageTensor> {
    let n = shape.0 * shape.1 * shape.2;
    ImageTensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// `batch` images drawn in sequence from one stream; the first equals
/// [`init_image`] with the same seed.
pub fn init_batch(
    seed: u64,
    batch: usize,
    shape: (usize, usize, usize),
) -> Result<Vec<ImageTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch).map(|_| draw_image(&mut rng, shape)).collect()
}

/// Image buffer and Adam moments for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// (B, C, H, W)
    pub shape: (usize, usize, usize, usize),
    pub image: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl RunState {
    pub fn new(images: &[ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| invalid("run needs at least one image"))?;
        let (c, h, w) = first.shape();
        let mut image = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != first.shape() {
                return Err(invalid("batch images must share one shape"));
            }
            image.extend_from_slice(img.data());
        }
        let n = image.len();
        Ok(Self {
            shape: (images.len(), c, h, w),
            image,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        })
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.image.clone(),
            self.shape,
            &ops::device(),
        )?)
    }

    pub fn images(&self) -> Result<Vec<ImageTensor>> {
        let (_, c, h, w) = self.shape;
        self.image
            .chunks_exact(c * h * w)
            .map(|d| ImageTensor::new((c, h, w), d.to_vec()))
            .collect()
    }
}

/// One bias-corrected Adam update of the image buffer.
pub fn adam_step(state: &mut RunState, gradient: &[f64], lr: f64, adam: &AdamParams) -> Result<()> {
    if gradient.len() != state.image.len() {
        return Err(Error::Shape {
            expected: format!("{} gradient entries", state.image.len()),
            received: format!("{}", gradient.len()),
        });
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
    }
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for i in 0..gradient.len() {
        let g = gradient[i];
        state.m[i] = adam.beta1 * state.m[i] + (1.0 - adam.beta1) * g;
        state.v[i] = adam.beta2 * state.v[i] + (1.0 - adam.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        state.image[i] -= lr * m_hat / (v_hat.sqrt() + adam.eps);
    }
    state.step += 1;
    Ok(())
}

fn clip_global_norm(gradient: &mut [f64], max_norm: f64) {
    let norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        gradient.iter_mut().for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub images: Vec<ImageTensor>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub config: InversionConfig,
    pub final_images: Vec<ImageTensor>,
    pub checkpoints: Vec<Checkpoint>,
    pub trace: Vec<TraceRow>,
    pub weights_checksum: String,
    pub wall_time_s: f64,
}

/// Optimizes one seed's image batch against the objective.
///
/// The loss at step `i` is evaluated at the image before the `i`-th update
/// and logged when `i` is a multiple of `log_every`. Checkpoints hold the image
/// after every `checkpoint_every` updates. A non-finite loss or gradient
/// aborts with [`Error::Aborted`], carrying the last finite image.
pub fn run_inversion(
    config: &InversionConfig,
    seed: u64,
    suite: &ModelSuite,
    refs: ReferenceStats<'_>,
) -> Result<RunResult> {
    config.validate()?;
    if let (Some(lambda), Some(enc)) = (&config.lambda, refs.encoder) {
        if *lambda != enc.layer_ids() {
            return Err(Error::LayerMismatch {
                expected: lambda.clone(),
                found: enc.layer_ids(),
            });
        }
    }
    let started = Instant::now();
    let checksum = suite.weights_checksum();
    let shape = match config.mode() {
        Mode::Vlm => suite.image_shape(),
        Mode::Vit => suite.classifier()?.input_shape(),
    };
    let mut state = RunState::new(&init_batch(seed, config.batch_size, shape)?)?;
    let mut trace = Vec::with_capacity(config.iterations.div_ceil(config.log_every));
    let mut checkpoints = Vec::new();

    let abort = |state: &RunState,
                 trace: Vec<TraceRow>,
                 checkpoints,
                 step,
                 reason: String|
     -> Result<Error> {
        tracing::error!(seed, step, %reason, "aborting run");
        let partial = RunResult {
            seed,
            config: config.clone(),
            final_images: state.images()?,
            checkpoints,
            trace,
            weights_checksum: checksum.clone(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        Ok(Error::Aborted {
            step,
            reason,
            partial: Box::new(partial),
        })
    };

    for step in 0..config.iterations {
        let x = Var::from_tensor(&state.tensor()?)?;
        let value = total_objective(
            suite,
            x.as_tensor(),
            config.prompt.as_ref(),
            &config.target,
            refs,
            &config.weights,
            &config.objective,
        )?;
        let lr = config.lr_at(step);
        if !value.breakdown.total.is_finite() {
            return Err(abort(
                &state,
                trace,
                checkpoints,
                step,
                "non-finite loss".into(),
            )?);
        }
        if step % config.log_every == 0 {
            let b = &value.breakdown;
            tracing::info!(
                seed,
                step,
                total = b.total,
                l_sce = b.l_sce,
                l_base = b.l_base,
                r_prior = b.r_prior,
                r_patch = b.r_patch,
                r_v = b.r_v,
                lr,
                "loss"
            );
            trace.push(TraceRow {
                step,
                breakdown: value.breakdown,
                lr,
            });
        }
        let grads = value.total.backward()?;
        let mut gradient = match grads.get(x.as_tensor()) {
            Some(g) => ops::flat(g)?,
            None => vec![0.0; state.image.len()],
        };
        if let Some(c) = config.grad_clip {
            clip_global_norm(&mut gradient, c);
        }
        if let Err(e) = adam_step(&mut state, &gradient, lr, &config.adam) {
            return Err(abort(&state, trace, checkpoints, step, e.to_string())?);
        }
        if state.step % config.checkpoint_every == 0 {
            tracing::debug!(seed, step = state.step, "checkpoint");
            checkpoints.push(Checkpoint {
                step: state.step,
                images: state.images()?,
            });
        }
    }

    if suite.weights_checksum() != checksum {
        return Err(invalid("model weights changed during inversion"));
    }
    Ok(RunResult {
        seed,
        config: config.clone(),
        final_images: state.images()?,
        checkpoints,
        trace,
        weights_checksum: checksum,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// One run per configured seed on a pool of `workers` threads. Results are in
/// seed order and do not depend on the worker count.
pub fn run_multi_seed(
    config: &InversionConfig,
    suite: &ModelSuite,
    refs: ReferenceStats<'_>,
    workers: usize,
) -> Result<Vec<RunResult>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| run_inversion(config, seed, suite, refs))
            .collect()
    })
}

#[cfg(test)]
mod tests;
