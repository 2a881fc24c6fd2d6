use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use super::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Files that could not be decoded and were skipped.
    pub skipped: usize,
}

/// Converts an RGB image to a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> DenseTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    DenseTensor::new(vec![3, h, w], data).expect("rgb tensor shape")
}

pub fn tensor_to_rgb(t: &DenseTensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let d = t.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

/// Decodes an image file, resizes it bilinearly to `size x size` and scales
/// it to `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<DenseTensor> {
    let img = image::open(path)?.to_rgb8();
    let resized = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&resized))
}

/// Loads a directory-per-class image tree. Class indices follow the
/// lexicographic order of the directory names.
pub fn load_image_folder(root: &Path, target_size: usize) -> Result<(LabeledDataset, LoadReport)> {
    if !root.is_dir() {
        return Err(Error::MissingInput(root.to_path_buf()));
    }
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} contains no class directories", root.display())));
    }
    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    for (label, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = samples.len();
        for file in files {
            match load_image(&file, target_size) {
                Ok(image) => {
                    let rel = file.strip_prefix(root).unwrap_or(&file);
                    samples.push(Sample {
                        image,
                        label,
                        name: rel.to_string_lossy().replace('\\', "/"),
                    });
                    report.loaded += 1;
                }
                Err(err) => {
                    log::warn!("skipping unreadable image {}: {err}", file.display());
                    report.skipped += 1;
                }
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!(
                "class directory '{name}' contains no readable images"
            )));
        }
    }
    Ok((
        LabeledDataset {
            samples,
            class_names: class_dirs.into_iter().map(|(n, _)| n).collect(),
            split: None,
        },
        report,
    ))
}

/// Writes a dataset as PNG files in the directory-per-class layout.
pub fn write_image_folder(ds: &LabeledDataset, root: &Path) -> Result<()> {
    for s in &ds.samples {
        let file_name = Path::new(&s.name)
            .file_name()
            .map(|f| f.to_owned())
            .unwrap_or_else(|| format!("{}.png", s.name).into());
        let dir = root.join(&ds.class_names[s.label]);
        fs::create_dir_all(&dir)?;
        tensor_to_rgb(&s.image).save(dir.join(file_name))?;
    }
    Ok(())
}
