//! Backbone architectures built from the layer set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::layers::{Conv2d, Layer, Linear, Pool};

/// Conv stages, each `conv -> ReLU -> maxpool(2)`, then flatten and an
/// optional `linear -> ReLU` embedding. The first conv is 5x5 with stride 2,
/// the others 3x3. Built with ReLU and max-pooling so the QCFS surgery has
/// something to replace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub name: String,
    pub channels: Vec<usize>,
    /// Width of the embedding layer; 0 ends the backbone at the flattened
    /// conv maps.
    pub embedding: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            name: "toy-cnn".into(),
            channels: vec![8, 16, 32],
            embedding: 128,
        }
    }
}

impl BackboneConfig {
    pub fn build<R: Rng>(&self, image_size: usize, rng: &mut R) -> Result<NetworkGraph> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("backbone.channels must be non-empty and positive".into()));
        }
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in self.channels.iter().enumerate() {
            let conv = if i == 0 {
                Conv2d::new(in_ch, out, 5, 2, 2, rng)
            } else {
                Conv2d::new(in_ch, out, 3, 1, 1, rng)
            };
            layers.push(Layer::Conv2d(conv));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool(Pool { kernel: 2, stride: 2 }));
            in_ch = out;
        }
        layers.push(Layer::Flatten);
        let flat = NetworkGraph::ann(vec![3, image_size, image_size], layers.clone())
            .map_err(|e| Error::Config(format!("backbone does not fit {image_size}x{image_size} images: {e}")))?;
        if self.embedding == 0 {
            return Ok(flat);
        }
        layers.push(Layer::Linear(Linear::new(flat.output_shape()[0], self.embedding, rng)));
        layers.push(Layer::Relu);
        NetworkGraph::ann(vec![3, image_size, image_size], layers)
            .map_err(|e| Error::Config(format!("backbone does not fit {image_size}x{image_size} images: {e}")))
    }
}
