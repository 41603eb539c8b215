//! Datasets: a seeded grating generator and an IDX reader.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VcaError};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Default noise standard deviation of the synthetic generator.
pub const SYNTHETIC_NOISE_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[S x H x W x ch]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(VcaError::dim("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(VcaError::config(format!(
                "label {bad} is not below class count {class_count}"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VcaError::config("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)`
    pub fn image_size(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn per_image(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.per_image();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::new(shape, data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// First `len - held_out` samples and the last `held_out`.
    pub fn split(&self, held_out: usize) -> (Dataset, Dataset) {
        let cut = self.len().saturating_sub(held_out);
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Per-class grating parameters: orientation (radians), spatial frequency
/// (cycles per image) and phase.
pub fn grating(class: usize, classes: usize) -> (f64, f64, f64) {
    let orientations = classes.div_ceil(2).max(1);
    let theta = PI * (class % orientations) as f64 / orientations as f64;
    let freq = if class < orientations { 1.0 } else { 2.5 };
    let phase = 0.25 * PI * class as f64;
    (theta, freq, phase)
}

/// Seeded dataset of oriented sinusoidal gratings, one orientation and
/// frequency per class, with Gaussian pixel noise. Labels are balanced and
/// shuffled; pixels are clamped to `[0, 1]`.
pub fn make_synthetic(
    seed: u64,
    classes: usize,
    samples: usize,
    image_size: (usize, usize, usize),
    noise_std: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(VcaError::config("synthetic dataset needs at least 2 classes"));
    }
    let (h, w, ch) = image_size;
    if samples == 0 || h == 0 || w == 0 || ch == 0 {
        return Err(VcaError::config(
            "synthetic sample count and image sizes must be positive",
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(VcaError::config("noise std must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, noise_std).expect("valid std");

    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let (theta, freq, phase) = grating(c, classes);
            let (ct, st) = (theta.cos(), theta.sin());
            let mut img = Vec::with_capacity(h * w * ch);
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 + 0.5) / w as f64;
                    let v = (y as f64 + 0.5) / h as f64;
                    let val = 0.5 + 0.35 * (2.0 * PI * freq * (u * ct + v * st) + phase).sin();
                    img.extend(std::iter::repeat_n(val, ch));
                }
            }
            img
        })
        .collect();

    let mut data = Vec::with_capacity(samples * h * w * ch);
    for &label in &labels {
        for &base in &templates[label] {
            let eps = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push((base + eps).clamp(0.0, 1.0) as f32);
        }
    }
    Dataset::new(Tensor::new(vec![samples, h, w, ch], data)?, labels, classes)
}

/// Reads an IDX image file (magic `0x00000803`) and label file
/// (`0x00000801`). Pixels are scaled by `1/255`. `class_count` defaults to
/// one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path, class_count: Option<usize>) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?, class_count)
}

pub fn parse_idx(images: &[u8], labels: &[u8], class_count: Option<usize>) -> Result<Dataset> {
    let labels = parse_idx_labels(labels)?;
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    if count != labels.len() {
        return Err(VcaError::Format {
            offset: 4,
            msg: format!("image count {count} != label count {}", labels.len()),
        });
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1).max(2));
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(Tensor::new(vec![count, rows, cols, 1], data)?, labels, classes)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| VcaError::Format {
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(VcaError::Format {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(VcaError::Format {
            offset: (8 + body.len()) as u64,
            msg: format!("truncated labels: expected {count}, found {}", body.len()),
        });
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

/// `(count, rows, cols, pixels)`
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(VcaError::Format {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| VcaError::Format {
            offset: 4,
            msg: "image dimensions overflow".into(),
        })?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(VcaError::Format {
            offset: (16 + body.len()) as u64,
            msg: format!("truncated pixels: expected {need} bytes, found {}", body.len()),
        });
    }
    Ok((count, rows, cols, &body[..need]))
}
