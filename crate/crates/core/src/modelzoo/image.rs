use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ops::{device, flat};

/// A C×H×W pixel buffer. Values are unbounded but always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid(format!("image shape {shape:?} has an empty axis")));
        }
        if data.len() != c * h * w {
            return Err(Error::Shape {
                expected: format!("{} values for {c}x{h}x{w}", c * h * w),
                received: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: (usize, usize, usize), value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.0 * shape.1 * shape.2])
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.shape;
        self.data[(c * h + y) * w + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.1 * self.shape.2;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let ch = self.channel(c);
        ch.iter().sum::<f64>() / ch.len() as f64
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape, &device())?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Self::new((c, h, w), flat(t)?)
    }

    /// Stacks images of identical shape into a (B, C, H, W) tensor.
    pub fn stack(images: &[ImageTensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.shape != first.shape {
                return Err(Error::Shape {
                    expected: format!("{:?}", first.shape),
                    received: format!("{:?}", img.shape),
                });
            }
            data.extend_from_slice(&img.data);
        }
        let (c, h, w) = first.shape;
        Ok(Tensor::from_vec(data, (images.len(), c, h, w), &device())?)
    }

    pub fn unstack(batch: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, c, h, w) = batch.dims4()?;
        let data = flat(batch)?;
        let n = c * h * w;
        (0..b)
            .map(|i| Self::new((c, h, w), data[i * n..(i + 1) * n].to_vec()))
            .collect()
    }
}
