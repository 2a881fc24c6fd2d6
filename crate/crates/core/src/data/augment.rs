//! Training-time augmentation: horizontal flip, small rotation and
//! multiplicative brightness/contrast/saturation jitter.

use rand::Rng;

use crate::tensor::DenseTensor;

pub const MAX_ROTATION_DEG: f32 = 20.0;
pub const JITTER: f32 = 0.2;

/// One concrete set of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle_deg: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        angle_deg: 0.0,
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            flip: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            brightness: rng.gen_range(1.0 - JITTER..=1.0 + JITTER),
            contrast: rng.gen_range(1.0 - JITTER..=1.0 + JITTER),
            saturation: rng.gen_range(1.0 - JITTER..=1.0 + JITTER),
        }
    }
}

pub fn augment<R: Rng>(image: &DenseTensor, rng: &mut R) -> DenseTensor {
    apply(image, &AugmentDraw::sample(rng))
}

/// Applies flip, rotation, brightness, contrast and saturation in that order
/// to a `[3, H, W]` image. Output is clamped to `[0, 1]`.
pub fn apply(image: &DenseTensor, draw: &AugmentDraw) -> DenseTensor {
    let mut out = image.clone();
    if draw.flip {
        out = flip_horizontal(&out);
    }
    if draw.angle_deg != 0.0 {
        out = rotate(&out, draw.angle_deg);
    }
    let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    let plane = h * w;
    let data = out.data_mut();
    if draw.brightness != 1.0 {
        for v in data.iter_mut() {
            *v = (*v * draw.brightness).clamp(0.0, 1.0);
        }
    }
    if c == 3 && draw.contrast != 1.0 {
        let mean = (0..plane).map(|i| gray(data, plane, i)).sum::<f32>() / plane as f32;
        for v in data.iter_mut() {
            *v = ((*v - mean) * draw.contrast + mean).clamp(0.0, 1.0);
        }
    }
    if c == 3 && draw.saturation != 1.0 {
        for i in 0..plane {
            let g = gray(data, plane, i);
            for ch in 0..3 {
                let v = &mut data[ch * plane + i];
                *v = (g + (*v - g) * draw.saturation).clamp(0.0, 1.0);
            }
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

#[inline]
fn gray(data: &[f32], plane: usize, i: usize) -> f32 {
    0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i]
}

pub fn flip_horizontal(image: &DenseTensor) -> DenseTensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                data[row + x] = src[row + w - 1 - x];
            }
        }
    }
    DenseTensor::new(image.shape().to_vec(), data).unwrap()
}

/// Rotation about the image centre with bilinear sampling; coordinates that
/// fall outside the image replicate the nearest edge pixel.
pub fn rotate(image: &DenseTensor, angle_deg: f32) -> DenseTensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f32);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f32);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            for ch in 0..c {
                let p = ch * h * w;
                let v00 = src[p + y0 * w + x0];
                let v01 = src[p + y0 * w + x1];
                let v10 = src[p + y1 * w + x0];
                let v11 = src[p + y1 * w + x1];
                data[p + y * w + x] = (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy;
            }
        }
    }
    DenseTensor::new(image.shape().to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::new(vec![3, 9, 7], (0..3 * 9 * 7).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn identity_draw_is_identity() {
        let img = random_image(1);
        let out = apply(&img, &AugmentDraw::IDENTITY);
        assert_eq!(out, img);
        let rotated = rotate(&img, 0.0);
        for (a, b) in rotated.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn double_flip_is_involution() {
        let img = random_image(2);
        let draw = AugmentDraw {
            flip: true,
            ..AugmentDraw::IDENTITY
        };
        assert_eq!(apply(&apply(&img, &draw), &draw), img);
    }

    #[test]
    fn output_stays_in_unit_range_and_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..50 {
            let img = random_image(seed);
            let out = augment(&img, &mut rng);
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn draws_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let d = AugmentDraw::sample(&mut rng);
            assert!(d.angle_deg.abs() <= 20.0);
            for f in [d.brightness, d.contrast, d.saturation] {
                assert!((0.8..=1.2).contains(&f));
            }
        }
    }
}
