use candle_core::{Tensor, D};

use super::params::{join, Init, ParamKind, Params};
use crate::error::Result;
use crate::ops::{self, device};

/// Dense layer with weight stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn new(init: &mut Init, input: usize, output: usize) -> Result<Self> {
        let std = (1.0 / input as f32).sqrt();
        Ok(Self {
            weight: init.normal(&[input, output], std)?,
            bias: init.normal(&[output], 0.02)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(xs
            .broadcast_matmul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamKind::Weight, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::Weight, &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub(crate) fn new(init: &mut Init, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&[width], 1.0)?,
            beta: init.constant(&[width], 0.0)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        ops::layer_norm(xs, &self.gamma, &self.beta, 1e-5)
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "gamma"), ParamKind::Weight, &self.gamma);
        f(&join(prefix, "beta"), ParamKind::Weight, &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "gamma"), ParamKind::Weight, &mut self.gamma);
        f(&join(prefix, "beta"), ParamKind::Weight, &mut self.beta);
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    causal: bool,
}

pub(crate) struct BlockOutput {
    pub hidden: Tensor,
    pub mlp: Tensor,
}

impl Block {
    pub(crate) fn new(
        init: &mut Init,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        causal: bool,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, width)?,
            qkv: Linear::new(init, width, 3 * width)?,
            proj: Linear::new(init, width, width)?,
            ln2: LayerNorm::new(init, width)?,
            fc1: Linear::new(init, width, mlp_ratio * width)?,
            fc2: Linear::new(init, mlp_ratio * width, width)?,
            heads,
            causal,
        })
    }

    /// `xs` is (batch, tokens, width).
    pub(crate) fn forward(&self, xs: &Tensor) -> Result<BlockOutput> {
        let (b, t, w) = xs.dims3()?;
        let dh = w / self.heads;
        let qkv = self
            .qkv
            .forward(&self.ln1.forward(xs)?)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if self.causal {
            scores = scores.broadcast_add(&causal_mask(t)?)?;
        }
        let att = ops::softmax_last(&scores)?;
        let ctx = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, w))?;
        let hidden = (xs + self.proj.forward(&ctx)?)?;
        let mlp = self
            .fc2
            .forward(&ops::gelu(&self.fc1.forward(&self.ln2.forward(&hidden)?)?)?)?;
        let hidden = (hidden + &mlp)?;
        Ok(BlockOutput { hidden, mlp })
    }
}

fn causal_mask(t: usize) -> Result<Tensor> {
    let data: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (t, t), &device())?)
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Mean over the token axis of a (batch, tokens, width) tensor.
pub(crate) fn token_mean(xs: &Tensor) -> Result<Tensor> {
    Ok(xs.mean(D::Minus2)?)
}
