//! Supervised training for the toy classifier and verifier.
//!
//! Used only to prepare frozen models; inversion never calls into this module.

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{freeze, make_trainable};
use super::verifier::BnMode;
use super::{Classifier, ImageTensor, ToyClassifier, ToySuiteParts, ToyVerifierCnn, Verifier};
use crate::error::{invalid, Result};
use crate::ops::{self, device};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop once training accuracy reaches this fraction.
    pub target_accuracy: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            target_accuracy: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: usize,
    pub accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Mean cross-entropy of (B, K) logits against integer labels.
pub(crate) fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (labels.len(), 1), &device())?;
    let picked = ops::log_softmax_last(logits)?.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn gather(data: &[(ImageTensor, usize)], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let imgs: Vec<ImageTensor> = idx.iter().map(|&i| data[i].0.clone()).collect();
    Ok((
        ImageTensor::stack(&imgs)?,
        idx.iter().map(|&i| data[i].1).collect(),
    ))
}

/// Fraction of examples whose argmax logit equals the label.
pub fn accuracy(
    data: &[(ImageTensor, usize)],
    mut logits_of: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("accuracy of an empty dataset"));
    }
    let mut hits = 0usize;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(64) {
        let (x, labels) = gather(data, chunk)?;
        let logits = logits_of(&x)?;
        let k = logits.dims()[1];
        let values = ops::flat(&logits)?;
        for (row, &label) in labels.iter().enumerate() {
            if ops::argmax(&values[row * k..(row + 1) * k]) == label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

fn check_labels(data: &[(ImageTensor, usize)], classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if let Some((_, l)) = data.iter().find(|(_, l)| *l >= classes) {
        return Err(invalid(format!("label {l} outside {classes} classes")));
    }
    Ok(())
}

fn optimizer(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

pub fn train_classifier(
    model: &mut ToyClassifier,
    data: &[(ImageTensor, usize)],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    check_labels(data, model.num_classes())?;
    let mut opt = optimizer(make_trainable(model)?, opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut epoch_losses = Vec::new();
    let mut acc = 0.0;
    for _ in 0..opts.max_epochs {
        let mut total = 0.0;
        for idx in batches(data.len(), opts.batch_size, &mut rng) {
            let (x, labels) = gather(data, &idx)?;
            let loss = cross_entropy(&model.forward(&x)?.logits, &labels)?;
            total += ops::scalar(&loss)? * idx.len() as f64;
            opt.backward_step(&loss)?;
        }
        epoch_losses.push(total / data.len() as f64);
        acc = accuracy(data, |x| Ok(model.forward(&x.detach())?.logits))?;
        if acc >= opts.target_accuracy {
            break;
        }
    }
    freeze(model)?;
    Ok(TrainReport {
        epochs: epoch_losses.len(),
        accuracy: acc,
        epoch_losses,
    })
}

pub fn train_verifier(
    model: &mut ToyVerifierCnn,
    data: &[(ImageTensor, usize)],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    check_labels(data, model.num_classes())?;
    let mut opt = optimizer(make_trainable(model)?, opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut epoch_losses = Vec::new();
    let mut acc = 0.0;
    for _ in 0..opts.max_epochs {
        let mut total = 0.0;
        for idx in batches(data.len(), opts.batch_size, &mut rng) {
            let (x, labels) = gather(data, &idx)?;
            let out = model.forward_mode(&x, BnMode::Train)?;
            let loss = cross_entropy(&out.logits, &labels)?;
            total += ops::scalar(&loss)? * idx.len() as f64;
            opt.backward_step(&loss)?;
            model.update_running(&out.bn_stats)?;
        }
        epoch_losses.push(total / data.len() as f64);
        acc = accuracy(data, |x| Ok(Verifier::forward(model, x)?.logits))?;
        if acc >= opts.target_accuracy {
            break;
        }
    }
    freeze(model)?;
    Ok(TrainReport {
        epochs: epoch_losses.len(),
        accuracy: acc,
        epoch_losses,
    })
}

/// Trains the classifier and the verifier of a toy suite on the same data.
///
/// The verifier uses a different shuffling stream so the two models are
/// trained independently.
pub fn train_toy_suite(
    parts: &mut ToySuiteParts,
    data: &[(ImageTensor, usize)],
    opts: &TrainOptions,
) -> Result<(TrainReport, TrainReport)> {
    let classifier = train_classifier(&mut parts.classifier, data, opts)?;
    let verifier_opts = TrainOptions {
        seed: opts.seed.wrapping_add(1),
        ..opts.clone()
    };
    let verifier = train_verifier(&mut parts.verifier, data, &verifier_opts)?;
    Ok((classifier, verifier))
}
