//! CIFAR-10 binary reader and synthetic image generators.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::engine::rng::SplitMix64;
use crate::engine::Tensor;
use crate::graph::TensorShape;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const PIXELS: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
/// One label byte followed by the R, G and B planes.
pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("truncated record at byte offset {offset}: {got} of {RECORD_BYTES} bytes")]
    Truncated { offset: usize, got: usize },
    #[error("record {record} at byte offset {offset}: label {label} is above 9")]
    BadLabel { record: usize, offset: usize, label: u8 },
    #[error("dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// (N, 3, 32, 32), values in [0, 1].
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at the given sample indices.
    pub fn select(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.images.gather(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Decodes up to `limit` records from an in-memory CIFAR-10 batch.
pub fn decode_cifar10(bytes: &[u8], limit: usize) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() && labels.len() < limit {
        let rest = bytes.len() - offset;
        if rest < RECORD_BYTES {
            return Err(DataError::Truncated { offset, got: rest });
        }
        let label = bytes[offset];
        if label as usize >= CIFAR_CLASSES {
            return Err(DataError::BadLabel { record: labels.len(), offset, label });
        }
        labels.push(label as usize);
        pixels.extend(bytes[offset + 1..offset + RECORD_BYTES].iter().map(|&b| b as f32 / 255.0));
        offset += RECORD_BYTES;
    }
    let shape = TensorShape::new(labels.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE);
    Ok(Dataset { images: Tensor::from_vec(shape, pixels), labels })
}

pub fn load_cifar10_binary(path: &Path, limit: usize) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.take((limit.saturating_mul(RECORD_BYTES)) as u64).read_to_end(&mut bytes)?;
    decode_cifar10(&bytes, limit)
}

/// Inverse of [`decode_cifar10`]. Pixels are rounded to the nearest byte.
pub fn encode_cifar10(data: &Dataset) -> Result<Vec<u8>, DataError> {
    let s = data.images.shape;
    if (s.c, s.h, s.w) != (IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE) || s.n != data.labels.len() {
        return Err(DataError::Invalid(format!("images {s} do not match {} labels of 3x32x32", data.labels.len())));
    }
    let mut out = Vec::with_capacity(s.n * RECORD_BYTES);
    for (i, &label) in data.labels.iter().enumerate() {
        let label = u8::try_from(label).ok().filter(|&l| (l as usize) < CIFAR_CLASSES);
        out.push(label.ok_or_else(|| DataError::Invalid(format!("label {} out of range", data.labels[i])))?);
        let img = &data.images.data[i * PIXELS..(i + 1) * PIXELS];
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Fully saturated colour for class `k` of `classes`, hues evenly spaced.
fn class_colour(k: usize, classes: usize) -> [f64; 3] {
    let h = 6.0 * k as f64 / classes as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Class-conditional Gaussian blobs on a dark noisy background.
///
/// Labels are `i % classes` shuffled, so counts differ by at most one. Each
/// image holds one blob in its class colour with random centre and width.
pub fn synthetic_batch(seed: u64, n: usize, classes: usize) -> Dataset {
    let classes = classes.max(1);
    let mut rng = SplitMix64::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);

    let side = IMAGE_SIDE as f64;
    let mut data = Vec::with_capacity(n * PIXELS);
    for &label in &labels {
        let colour = class_colour(label, classes);
        let cy = side * (0.25 + 0.5 * rng.uniform());
        let cx = side * (0.25 + 0.5 * rng.uniform());
        let sigma = 4.0 + 3.0 * rng.uniform();
        for ch in colour {
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = 0.1 + 0.8 * ch * (-d2 / (2.0 * sigma * sigma)).exp() + 0.05 * rng.normal();
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let shape = TensorShape::new(n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE);
    Dataset { images: Tensor::from_vec(shape, data), labels }
}
