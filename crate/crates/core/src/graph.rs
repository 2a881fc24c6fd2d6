//! Ordered layer sequences with shape validation, cached forward passes and
//! reverse-mode gradients over the fixed layer set.

use crate::error::{Error, Result};
use crate::layers::{Layer, Linear};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Real-valued activations (ReLU/QCFS), trainable by backpropagation.
    Ann,
    /// Integrate-and-fire layers simulated over discrete timesteps.
    Snn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    mode: Mode,
}

/// Per-layer inputs recorded by [`NetworkGraph::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Vec<DenseTensor>,
    pub output: DenseTensor,
}

/// Gradients w.r.t. the graph input and every parameter tensor, the latter
/// in the order produced by [`NetworkGraph::params`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: DenseTensor,
    pub params: Vec<Vec<f32>>,
}

impl NetworkGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, mode: Mode) -> Result<Self> {
        for (index, layer) in layers.iter().enumerate() {
            let allowed = match mode {
                Mode::Ann => !matches!(layer, Layer::If(_)),
                Mode::Snn => !matches!(
                    layer,
                    Layer::Relu | Layer::Qcfs(_) | Layer::MaxPool(_) | Layer::BatchNorm(_)
                ),
            };
            if !allowed {
                return Err(Error::UnsupportedLayer {
                    index,
                    kind: layer.kind_name(),
                    reason: match mode {
                        Mode::Ann => "not allowed in ANN mode",
                        Mode::Snn => "not allowed in SNN mode",
                    },
                });
            }
        }
        let graph = Self {
            input_shape,
            layers,
            mode,
        };
        graph.shape_trace()?;
        Ok(graph)
    }

    pub fn ann(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        Self::new(input_shape, layers, Mode::Ann)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Input shape followed by the output shape of every layer.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shape_trace()
            .expect("graph shapes validated at construction")
            .pop()
            .unwrap()
    }

    fn check_input(&self, x: &DenseTensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// ANN-mode inference.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(i, &cur)?;
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &DenseTensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(i, &cur)?;
            inputs.push(cur);
            cur = next;
        }
        Ok(ForwardTrace { inputs, output: cur })
    }

    pub fn backward(&self, trace: &ForwardTrace, grad_out: &DenseTensor) -> Result<Gradients> {
        let mut grad = grad_out.clone();
        let mut per_layer: Vec<Vec<Vec<f32>>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gi, gp) = layer.backward(i, trace.inputs.get(i), &grad)?;
            per_layer.push(gp);
            grad = gi;
        }
        per_layer.reverse();
        Ok(Gradients {
            input: grad,
            params: per_layer.into_iter().flatten().collect(),
        })
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Folds every batch-norm layer into the convolution or linear layer that
    /// immediately precedes it. Batch norms without such a predecessor are
    /// rejected.
    pub fn fold_batch_norm(&self) -> Result<NetworkGraph> {
        let mut layers: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let Layer::BatchNorm(bn) = layer else {
                layers.push(layer.clone());
                continue;
            };
            let affine = bn.affine();
            match layers.last_mut() {
                Some(Layer::Conv2d(conv)) => {
                    let per_out = conv.in_channels * conv.kernel * conv.kernel;
                    for (o, &(scale, offset)) in affine.iter().enumerate() {
                        for w in &mut conv.weight.data_mut()[o * per_out..(o + 1) * per_out] {
                            *w *= scale;
                        }
                        let b = &mut conv.bias.data_mut()[o];
                        *b = *b * scale + offset;
                    }
                }
                Some(Layer::Linear(Linear {
                    in_features,
                    weight,
                    bias,
                    ..
                })) => {
                    let n_in = *in_features;
                    for (o, &(scale, offset)) in affine.iter().enumerate() {
                        for w in &mut weight.data_mut()[o * n_in..(o + 1) * n_in] {
                            *w *= scale;
                        }
                        let b = &mut bias.data_mut()[o];
                        *b = *b * scale + offset;
                    }
                }
                _ => {
                    return Err(Error::UnsupportedLayer {
                        index,
                        kind: "batch_norm",
                        reason: "batch norm must directly follow a conv2d or linear layer to be folded",
                    })
                }
            }
        }
        NetworkGraph::new(self.input_shape.clone(), layers, self.mode)
    }

    /// Replaces the layer list, keeping input shape and mode. Shapes are
    /// revalidated.
    pub fn with_layers(&self, layers: Vec<Layer>, mode: Mode) -> Result<NetworkGraph> {
        NetworkGraph::new(self.input_shape.clone(), layers, mode)
    }
}

/// A backbone with an optional supervised classification head attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: NetworkGraph,
    pub head: Option<NetworkGraph>,
}

impl Model {
    pub fn new(backbone: NetworkGraph, head: Option<NetworkGraph>) -> Result<Self> {
        if let Some(head) = &head {
            let out = backbone.output_shape();
            if head.input_shape() != out.as_slice() {
                return Err(Error::ShapeMismatch {
                    layer: backbone.len(),
                    expected: head.input_shape().to_vec(),
                    actual: out,
                });
            }
            if head.mode() != backbone.mode() {
                return Err(Error::InvalidParameter(
                    "backbone and head must share the same mode".into(),
                ));
            }
        }
        Ok(Self { backbone, head })
    }

    pub fn mode(&self) -> Mode {
        self.backbone.mode()
    }

    pub fn feature_len(&self) -> usize {
        self.backbone.output_shape().iter().product()
    }

    /// ANN-mode forward through backbone and head (if any).
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let features = self.backbone.forward(x)?;
        match &self.head {
            Some(head) => head.forward(&features),
            None => Ok(features),
        }
    }
}
