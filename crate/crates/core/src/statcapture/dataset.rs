//! Seeded synthetic reference images: one colored Gaussian blob on noise per
//! image, three classes (red, green, blue).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::modelzoo::ImageTensor;

pub const DATASET_VERSION: &str = "blobs-v1";

pub const CLASS_NAMES: [&str; 3] = ["red", "green", "blue"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub image_size: usize,
    pub per_class: usize,
    pub noise_std: f64,
    /// Peak value of the blob in its class channel.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            per_class: 64,
            noise_std: 0.3,
            amplitude: 1.5,
            seed: 0,
        }
    }
}

/// Draws one image of `class`. The class channel gets `+amplitude·g`, the other
/// two `−amplitude·g/2`, where `g` is a unit-peak Gaussian bump with random
/// centre and width.
pub fn blob_image(
    class: usize,
    size: usize,
    noise_std: f64,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    if class >= CLASS_NAMES.len() {
        return Err(invalid(format!("blob class {class} outside 0..3")));
    }
    let s = size as f64;
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let sigma = rng.random_range(0.15 * s..0.3 * s);
    let noise = Normal::new(0.0, noise_std).map_err(|e| invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let sign = if c == class { 1.0 } else { -0.5 };
        for y in 0..size {
            for x in 0..size {
                let r2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let g = (-r2 / (2.0 * sigma * sigma)).exp();
                data.push(sign * amplitude * g + noise.sample(rng));
            }
        }
    }
    ImageTensor::new((3, size, size), data)
}

/// `per_class` images of each class, interleaved by class, reproducible from
/// the seed.
pub fn blob_dataset(cfg: &BlobConfig) -> Result<Vec<(ImageTensor, usize)>> {
    if cfg.image_size < 2 || cfg.per_class == 0 {
        return Err(invalid(
            "blob dataset needs image_size >= 2 and per_class >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(3 * cfg.per_class);
    for _ in 0..cfg.per_class {
        for label in 0..CLASS_NAMES.len() {
            let image = blob_image(
                label,
                cfg.image_size,
                cfg.noise_std,
                cfg.amplitude,
                &mut rng,
            )?;
            out.push((image, label));
        }
    }
    Ok(out)
}

/// Images of a single class.
pub fn class_images(cfg: &BlobConfig, class: usize) -> Result<Vec<ImageTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9 * (class as u64 + 1)));
    (0..cfg.per_class)
        .map(|_| {
            blob_image(
                class,
                cfg.image_size,
                cfg.noise_std,
                cfg.amplitude,
                &mut rng,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_balanced() {
        let cfg = BlobConfig {
            image_size: 8,
            per_class: 4,
            ..Default::default()
        };
        let a = blob_dataset(&cfg).unwrap();
        let b = blob_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 12);
        assert!(a.iter().zip(&b).all(|(x, y)| x == y));
        for l in 0..3 {
            assert_eq!(a.iter().filter(|x| x.1 == l).count(), 4);
        }
    }

    #[test]
    fn class_channel_dominates() {
        let cfg = BlobConfig {
            image_size: 16,
            per_class: 8,
            noise_std: 0.1,
            ..Default::default()
        };
        for (image, label) in blob_dataset(&cfg).unwrap() {
            let means: Vec<f64> = (0..3).map(|c| image.channel_mean(c)).collect();
            assert_eq!(crate::ops::argmax(&means), label);
        }
    }
}
