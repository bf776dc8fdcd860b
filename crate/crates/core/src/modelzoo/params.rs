//! Parameter traversal shared by persistence, checksumming and training.

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::ops::{device, DTYPE};

/// Trainable weights versus state that is updated outside of gradient descent
/// (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// Visits every parameter tensor in declaration order.
///
/// The order is part of the weight-file format and must stay stable.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// SHA-256 over the little-endian f32 image of every parameter.
pub fn checksum(model: &dyn Params) -> String {
    let mut hasher = Sha256::new();
    model.visit("", &mut |name, _, t| {
        hasher.update(name.as_bytes());
        for v in t
            .flatten_all()
            .and_then(|t| t.to_vec1::<f64>())
            .unwrap_or_default()
        {
            hasher.update((v as f32).to_le_bytes());
        }
    });
    hex::encode(hasher.finalize())
}

pub fn param_count(model: &dyn Params) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, _, t| n += t.elem_count());
    n
}

/// Replaces every weight with a tracked variable and returns the variables.
pub fn make_trainable(model: &mut dyn Params) -> Result<Vec<Var>> {
    let mut vars = Vec::new();
    let mut err = None;
    model.visit_mut("", &mut |_, kind, t| {
        if kind != ParamKind::Weight || err.is_some() {
            return;
        }
        match Var::from_tensor(&t.detach()) {
            Ok(v) => {
                *t = v.as_tensor().clone();
                vars.push(v);
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(vars),
    }
}

/// Detaches every parameter into fresh storage rounded to f32 precision, so the
/// model is frozen and bit-exactly representable in a weight file.
pub fn freeze(model: &mut dyn Params) -> Result<()> {
    let mut err = None;
    model.visit_mut("", &mut |_, _, t| {
        if err.is_some() {
            return;
        }
        match t
            .detach()
            .to_dtype(DType::F32)
            .and_then(|x| x.to_dtype(DTYPE))
        {
            Ok(x) => *t = x,
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Seeded Gaussian initializer. Samples are drawn in f32 so that every initial
/// weight round-trips through the f32 weight format.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0f32, std).expect("positive std");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng) as f64).collect();
        Ok(Tensor::from_vec(data, shape, &device())?)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &device())?)
    }
}
