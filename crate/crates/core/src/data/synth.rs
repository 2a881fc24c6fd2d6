//! Synthetic cell-like images: one parametric ellipse texture per class.
//!
//! Each class fixes an axis ratio (eccentricity), a wall thickness and an
//! interior speckle density; every sample jitters size, position and
//! rotation and adds pixel noise.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::qcfs::sample_seed;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_per_class: 100,
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ClassShape {
    axis_ratio: f32,
    wall: f32,
    speckle: f32,
}

fn class_shape(class: usize, n_classes: usize) -> ClassShape {
    let t = class as f32 / (n_classes - 1) as f32;
    let frac = |v: f32| v - v.floor();
    ClassShape {
        axis_ratio: 1.0 - 0.55 * t,
        wall: 0.05 + 0.15 * frac(class as f32 * 0.618),
        speckle: 0.03 + 0.5 * frac(class as f32 * 0.382 + 0.25),
    }
}

const BACKGROUND: [f32; 3] = [0.85, 0.82, 0.75];
const WALL: [f32; 3] = [0.35, 0.25, 0.15];
const INTERIOR: [f32; 3] = [0.70, 0.65, 0.50];
const SPECKLE: [f32; 3] = [0.45, 0.40, 0.30];

fn render(shape: ClassShape, size: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    let s = size as f32;
    let a = s * rng.gen_range(0.28..0.34);
    let b = a * shape.axis_ratio * rng.gen_range(0.95..1.05);
    let cx = s / 2.0 + s * rng.gen_range(-0.08..0.08);
    let cy = s / 2.0 + s * rng.gen_range(-0.08..0.08);
    let angle = rng.gen_range(0.0..PI);
    let (sin, cos) = angle.sin_cos();
    let inner = 1.0 - shape.wall;
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            let base = if r > 1.0 {
                BACKGROUND
            } else if r >= inner {
                WALL
            } else if rng.gen::<f32>() < shape.speckle {
                SPECKLE
            } else {
                INTERIOR
            };
            let noise = rng.gen_range(-0.03..0.03);
            for c in 0..3 {
                data[c * plane + y * size + x] = (base[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    DenseTensor::new(vec![3, size, size], data).expect("synthetic image shape")
}

/// Deterministic synthetic dataset; sample order is class-major.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<LabeledDataset> {
    if cfg.n_classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "synthetic dataset needs at least 2 classes, got {}",
            cfg.n_classes
        )));
    }
    if cfg.image_size < 8 {
        return Err(Error::InvalidParameter(format!(
            "synthetic image size must be at least 8, got {}",
            cfg.image_size
        )));
    }
    let samples = (0..cfg.n_classes * cfg.n_per_class)
        .into_par_iter()
        .map(|i| {
            let class = i / cfg.n_per_class;
            let idx = i % cfg.n_per_class;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, class as u64, idx as u64));
            Sample {
                image: render(class_shape(class, cfg.n_classes), cfg.image_size, &mut rng),
                label: class,
                name: format!("class_{class}/{idx:05}.png"),
            }
        })
        .collect();
    Ok(LabeledDataset {
        samples,
        class_names: (0..cfg.n_classes).map(|c| format!("class_{c}")).collect(),
        split: None,
    })
}
