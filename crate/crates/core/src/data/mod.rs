//! Labeled image datasets: folder ingestion, the synthetic generator used
//! for desk-scale runs, stratified splitting, augmentation and manifests.

pub mod augment;
pub mod folder;
pub mod manifest;
pub mod split;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::tensor::DenseTensor;

pub use folder::{load_image_folder, LoadReport};
pub use manifest::{parse_manifest, write_manifest, ManifestRow};
pub use split::stratified_split;
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One image `[3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: DenseTensor,
    pub label: usize,
    /// Relative path or synthetic identifier, used in manifests.
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    /// Class names in index order (lexicographic for folder datasets).
    pub class_names: Vec<String>,
    pub split: Option<Split>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    /// Concatenation of two splits over the same classes (split tag cleared).
    pub fn merged(&self, other: &LabeledDataset) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.iter().chain(&other.samples).cloned().collect(),
            class_names: self.class_names.clone(),
            split: None,
        }
    }

    pub fn manifest_rows(&self) -> Vec<ManifestRow> {
        self.samples
            .iter()
            .map(|s| ManifestRow {
                path: s.name.clone(),
                class: self.class_names[s.label].clone(),
                split: self.split.map(|s| s.as_str().to_string()).unwrap_or_default(),
            })
            .collect()
    }
}
