//! Classification, distribution and perceptual scores over image sets.

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::modelzoo::{verifier_forward, ImageTensor, ModelSuite, Verifier};
use crate::ops;

/// Fraction of rows whose `label` ranks within the `k` highest logits. Ties
/// rank the lower class index first.
pub fn top_k_accuracy(logits: &[Vec<f64>], label: usize, k: usize) -> Result<f64> {
    let classes = logits
        .first()
        .ok_or_else(|| invalid("top-k accuracy of an empty batch"))?
        .len();
    if k == 0 || k > classes {
        return Err(invalid(format!("k = {k} outside 1..={classes}")));
    }
    if label >= classes {
        return Err(invalid(format!("label {label} outside {classes} classes")));
    }
    let mut hits = 0usize;
    for row in logits {
        if row.len() != classes {
            return Err(invalid("logit rows differ in length"));
        }
        let target = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / logits.len() as f64)
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, k) = t.dims2()?;
    let flat = ops::flat(t)?;
    Ok((0..n).map(|i| flat[i * k..(i + 1) * k].to_vec()).collect())
}

/// Verifier logits, one row per image.
pub fn verifier_logits(verifier: &dyn Verifier, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    rows(&verifier_forward(verifier, images)?.logits)
}

pub fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// exp(mean_x KL(p(y|x) ‖ p(y))).
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let k = probs
        .first()
        .ok_or_else(|| invalid("inception score of no samples"))?
        .len();
    for (i, row) in probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != k
            || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p))
            || (sum - 1.0).abs() > 1e-6
        {
            return Err(invalid(format!(
                "row {i} is not a probability distribution"
            )));
        }
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..k)
        .map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let mean_kl = probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p * (p / q).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

/// N × F feature matrix tagged with the extractor that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub extractor: String,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>], extractor: &str) -> Result<Self> {
        let f = rows
            .first()
            .ok_or_else(|| invalid("feature set is empty"))?
            .len();
        if rows.iter().any(|r| r.len() != f) {
            return Err(invalid("feature rows differ in length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(Self {
            features: DMatrix::from_fn(rows.len(), f, |i, j| rows[i][j]),
            extractor: extractor.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            extractor: self.extractor.clone(),
        }
    }

    fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.len() as f64;
        let mean = self.features.row_mean().transpose();
        let mut centered = self.features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / n;
        (mean, cov)
    }
}

/// Clamps eigenvalues with |λ| ≤ this to zero before taking square roots.
pub const EIGEN_CLAMP: f64 = 1e-10;

fn clamp_eigen(l: f64) -> f64 {
    if l.abs() <= EIGEN_CLAMP {
        0.0
    } else {
        l.max(0.0)
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| clamp_eigen(l).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets, with
/// population covariances. Tr((Σa Σb)^½) is computed as the trace of the
/// square root of the symmetric matrix Σa^½ Σb Σa^½.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: format!("{} features", a.dim()),
            received: format!("{}", b.dim()),
        });
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("fid needs at least 2 samples per side"));
    }
    let (mu_a, cov_a) = a.mean_cov();
    let (mu_b, cov_b) = b.mean_cov();
    let sa = sqrt_psd(&cov_a);
    let middle = &sa * &cov_b * &sa;
    let middle = (&middle + middle.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(middle)
        .eigenvalues
        .iter()
        .map(|&l| clamp_eigen(l).sqrt())
        .sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfinityOptions {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for InfinityOptions {
    fn default() -> Self {
        Self {
            resamples: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfinityFit {
    pub intercept: f64,
    pub slope: f64,
    /// (N, mean score) per grid point.
    pub points: Vec<(usize, f64)>,
}

/// Evaluates `score` on random subsets of each size in `grid`, averages over
/// resamples, fits score ≈ a + b/N by least squares and returns the fit.
/// `score` receives the sampled indices into `0..available`.
pub fn score_infinity(
    available: usize,
    grid: &[usize],
    opts: &InfinityOptions,
    mut score: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<InfinityFit> {
    if grid.len() < 2 {
        return Err(invalid("score extrapolation needs at least 2 grid points"));
    }
    if grid.iter().all(|&n| n == grid[0]) {
        return Err(invalid(
            "score extrapolation grid is degenerate (all N equal)",
        ));
    }
    if let Some(&n) = grid.iter().find(|&&n| n == 0 || n > available) {
        return Err(invalid(format!("grid size {n} outside 1..={available}")));
    }
    if opts.resamples == 0 {
        return Err(invalid("resamples must be at least 1"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &n in grid {
        let mut rng =
            ChaCha8Rng::seed_from_u64(opts.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut total = 0.0;
        for _ in 0..opts.resamples {
            let mut idx = rand::seq::index::sample(&mut rng, available, n).into_vec();
            idx.sort_unstable();
            total += score(&idx)?;
        }
        points.push((n, total / opts.resamples as f64));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| 1.0 / n as f64).collect();
    let m = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / m;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = xs
        .iter()
        .zip(&points)
        .map(|(x, p)| (x - x_mean) * (p.1 - y_mean))
        .sum();
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(InfinityFit {
        intercept: y_mean - slope * x_mean,
        slope,
        points,
    })
}

/// Produces the tapped feature maps, each (C, H, W), of one image.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn taps(&self, image: &ImageTensor) -> Result<Vec<Tensor>>;
}

/// The image itself as the only tapped layer.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn id(&self) -> String {
        "identity".into()
    }
    fn taps(&self, image: &ImageTensor) -> Result<Vec<Tensor>> {
        Ok(vec![image.to_tensor()?])
    }
}

/// Post-activation stage outputs of a verifier network.
pub struct VerifierTaps<'a>(pub &'a dyn Verifier);

impl FeatureExtractor for VerifierTaps<'_> {
    fn id(&self) -> String {
        "verifier-stages".into()
    }
    fn taps(&self, image: &ImageTensor) -> Result<Vec<Tensor>> {
        let out = verifier_forward(self.0, std::slice::from_ref(image))?;
        out.stage_outputs
            .iter()
            .map(|t| Ok(t.squeeze(0)?))
            .collect()
    }
}

/// (C, H·W) feature values with each spatial column scaled to unit norm.
/// All-zero columns stay zero.
fn unit_columns(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = t.dims3()?;
    let mut v = ops::flat(t)?;
    let sites = h * w;
    for s in 0..sites {
        let norm = (0..c)
            .map(|ch| v[ch * sites + s].powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for ch in 0..c {
                v[ch * sites + s] /= norm;
            }
        }
    }
    Ok((c, sites, v))
}

/// Unit-weighted LPIPS-style distance: per tapped layer, channel-normalized
/// squared differences summed over channels and averaged over space.
pub fn lpips_like(
    extractor: &dyn FeatureExtractor,
    a: &ImageTensor,
    b: &ImageTensor,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.shape()),
            received: format!("{:?}", b.shape()),
        });
    }
    let (ta, tb) = (extractor.taps(a)?, extractor.taps(b)?);
    let mut total = 0.0;
    for (fa, fb) in ta.iter().zip(&tb) {
        let (_, sites, va) = unit_columns(fa)?;
        let (_, _, vb) = unit_columns(fb)?;
        let sq: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum();
        total += sq / sites as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipOptions {
    /// Report 2.5·max(cos, 0) instead of 100·max(cos, 0).
    pub legacy_scale: bool,
}

pub fn clip_score(
    image_embedding: &[f64],
    text_embedding: &[f64],
    opts: &ClipOptions,
) -> Result<f64> {
    if image_embedding.len() != text_embedding.len() {
        return Err(Error::Shape {
            expected: format!("{} dims", image_embedding.len()),
            received: format!("{}", text_embedding.len()),
        });
    }
    let dot: f64 = image_embedding
        .iter()
        .zip(text_embedding)
        .map(|(a, b)| a * b)
        .sum();
    let na = image_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = text_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("clip score of a zero embedding"));
    }
    let cos = (dot / (na * nb)).max(0.0);
    Ok(if opts.legacy_scale {
        2.5 * cos
    } else {
        100.0 * cos
    })
}

/// Pooled image embedding from the suite's vision encoder.
pub fn image_embedding(suite: &ModelSuite, image: &ImageTensor) -> Result<Vec<f64>> {
    ops::flat(&suite.encoder.embed(&image.to_tensor()?.unsqueeze(0)?)?)
}

/// Mean token embedding of `text` in the language model's input space.
pub fn text_embedding(suite: &ModelSuite, text: &str) -> Result<Vec<f64>> {
    let ids = suite.vocab().tokenize(text)?;
    if ids.is_empty() {
        return Err(invalid("text embedding of empty text"));
    }
    ops::flat(&suite.lm.embed_tokens(&ids)?.mean(0)?)
}
