//! ANN-to-SNN conversion and time-stepped integrate-and-fire simulation.
//!
//! Images are injected as a constant input current at every timestep. IF
//! neurons integrate without leak, fire when `v >= theta` and reset by
//! subtraction. Every presentation starts from `v = theta / 2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Mode, Model, NetworkGraph};
use crate::layers::{IfNeuron, Layer, Qcfs};
use crate::qcfs::evaluate_ann;
use crate::tensor::DenseTensor;

/// Fraction of the threshold each IF membrane starts a presentation at.
pub const INITIAL_MEMBRANE_FRACTION: f32 = 0.5;

fn convert_graph(graph: &NetworkGraph) -> Result<NetworkGraph> {
    let layers = graph
        .layers()
        .iter()
        .enumerate()
        .map(|(index, layer)| match layer {
            Layer::Qcfs(q) => Ok(Layer::If(IfNeuron {
                threshold: q.lambda,
                levels: q.levels,
                initial_fraction: INITIAL_MEMBRANE_FRACTION,
            })),
            Layer::Conv2d(_) | Layer::Linear(_) | Layer::AvgPool(_) | Layer::Flatten => Ok(layer.clone()),
            Layer::If(_) => Err(Error::UnsupportedLayer {
                index,
                kind: layer.kind_name(),
                reason: "graph is already converted",
            }),
            Layer::BatchNorm(_) => Err(Error::UnsupportedLayer {
                index,
                kind: layer.kind_name(),
                reason: "fold batch norm into the preceding layer before conversion",
            }),
            Layer::Relu | Layer::MaxPool(_) => Err(Error::UnsupportedLayer {
                index,
                kind: layer.kind_name(),
                reason: "run QCFS surgery before conversion",
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    graph.with_layers(layers, Mode::Snn)
}

/// Converts a trained QCFS model into SNN mode: weights are copied
/// unchanged and every QCFS layer becomes an IF layer with `theta = lambda`.
pub fn convert(ann: &Model) -> Result<Model> {
    if ann.mode() != Mode::Ann {
        return Err(Error::InvalidParameter("conversion expects an ANN-mode model".into()));
    }
    Model::new(
        convert_graph(&ann.backbone)?,
        ann.head.as_ref().map(convert_graph).transpose()?,
    )
}

/// The ANN-mode model an SNN model was converted from (IF back to QCFS with
/// the shift equal to the initial membrane fraction).
pub fn ann_equivalent(snn: &Model) -> Result<Model> {
    let back = |g: &NetworkGraph| -> Result<NetworkGraph> {
        let layers = g
            .layers()
            .iter()
            .map(|l| match l {
                Layer::If(n) => Ok(Layer::Qcfs(Qcfs::new(n.threshold, n.levels, n.initial_fraction)?)),
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        g.with_layers(layers, Mode::Ann)
    };
    match snn.mode() {
        Mode::Ann => Ok(snn.clone()),
        Mode::Snn => Model::new(back(&snn.backbone)?, snn.head.as_ref().map(back).transpose()?),
    }
}

/// Membrane state of one IF population.
#[derive(Debug, Clone, PartialEq)]
pub struct IfLayerState {
    pub threshold: f32,
    pub initial: f32,
    pub v: Vec<f32>,
    pub spike_count: u64,
}

impl IfLayerState {
    pub fn new(neuron: &IfNeuron, size: usize) -> Self {
        let initial = neuron.threshold * neuron.initial_fraction;
        Self {
            threshold: neuron.threshold,
            initial,
            v: vec![initial; size],
            spike_count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.v.fill(self.initial);
        self.spike_count = 0;
    }

    /// Integrates one step of input current; writes binary spikes into
    /// `spikes` and soft-resets the units that fired.
    pub fn step(&mut self, input: &[f32], spikes: &mut [f32]) {
        debug_assert_eq!(input.len(), self.v.len());
        let mut fired = 0u64;
        for ((v, &i), s) in self.v.iter_mut().zip(input).zip(spikes.iter_mut()) {
            *v += i;
            if *v >= self.threshold {
                *v -= self.threshold;
                *s = 1.0;
                fired += 1;
            } else {
                *s = 0.0;
            }
        }
        self.spike_count += fired;
    }
}

/// One IF step returning the spike tensor.
pub fn if_step(state: &mut IfLayerState, input: &DenseTensor) -> Result<DenseTensor> {
    if input.len() != state.v.len() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: vec![state.v.len()],
            actual: input.shape().to_vec(),
        });
    }
    let mut spikes = vec![0.0; input.len()];
    state.step(input.data(), &mut spikes);
    DenseTensor::new(input.shape().to_vec(), spikes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnRunRecord {
    pub timesteps: usize,
    /// Spike totals of every backbone IF layer, in layer order.
    pub backbone_spikes: Vec<u64>,
    /// Spike totals of the head IF layer(s), empty without a head.
    pub head_spikes: Vec<u64>,
    /// Time-averaged backbone output; for backbones ending in IF/avg-pool
    /// this is the firing rate of each feature and lies in `[0, 1]`.
    pub rates: Vec<f32>,
    /// Time-averaged head output, when a head is attached.
    pub head_output: Option<Vec<f32>>,
    pub predicted: Option<usize>,
}

impl SnnRunRecord {
    pub fn backbone_sops(&self) -> u64 {
        self.backbone_spikes.iter().sum()
    }

    pub fn total_sops(&self) -> u64 {
        self.backbone_sops() + self.head_spikes.iter().sum::<u64>()
    }
}

/// Stateful simulator for one graph; reusable across presentations.
struct GraphSim<'a> {
    graph: &'a NetworkGraph,
    /// Index of the first layer whose output changes over time; layers
    /// before it see the constant input and are evaluated once.
    first_dynamic: usize,
    states: Vec<Option<IfLayerState>>,
    shapes: Vec<Vec<usize>>,
    /// Threshold of the last IF layer: the amplitude carried by output
    /// spikes, used to turn the output back into firing rates.
    output_scale: f32,
}

impl<'a> GraphSim<'a> {
    fn new(graph: &'a NetworkGraph) -> Result<Self> {
        let shapes = graph.shape_trace()?;
        let states = graph
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Layer::If(n) => Some(IfLayerState::new(n, shapes[i].iter().product())),
                _ => None,
            })
            .collect();
        let first_dynamic = graph
            .layers()
            .iter()
            .position(|l| matches!(l, Layer::If(_)))
            .unwrap_or(graph.len());
        let output_scale = graph
            .layers()
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::If(n) => Some(n.threshold),
                _ => None,
            })
            .unwrap_or(1.0);
        Ok(Self {
            graph,
            first_dynamic,
            states,
            shapes,
            output_scale,
        })
    }

    fn reset(&mut self) {
        for s in self.states.iter_mut().flatten() {
            s.reset();
        }
    }

    /// Output of the time-invariant prefix for a constant input.
    fn constant_prefix(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut cur = x.clone();
        for (i, layer) in self.graph.layers()[..self.first_dynamic].iter().enumerate() {
            cur = layer.forward(i, &cur)?;
        }
        Ok(cur)
    }

    /// One timestep starting from the prefix output. Spikes leave an IF
    /// layer with amplitude `theta`, so downstream currents match the QCFS
    /// activations the weights were trained on.
    fn step(&mut self, prefix: &DenseTensor) -> Result<DenseTensor> {
        let mut cur = prefix.clone();
        for i in self.first_dynamic..self.graph.len() {
            let layer = &self.graph.layers()[i];
            cur = match layer {
                Layer::If(_) => {
                    let state = self.states[i].as_mut().expect("IF state");
                    let mut spikes = vec![0.0; cur.len()];
                    state.step(cur.data(), &mut spikes);
                    for s in &mut spikes {
                        *s *= state.threshold;
                    }
                    DenseTensor::new(self.shapes[i + 1].clone(), spikes)?
                }
                _ => layer.forward(i, &cur)?,
            };
        }
        Ok(cur)
    }

    fn spike_totals(&self) -> Vec<u64> {
        self.states.iter().flatten().map(|s| s.spike_count).collect()
    }
}

/// Simulates `timesteps` steps of a converted model on one image.
pub fn forward_snn(model: &Model, image: &DenseTensor, timesteps: usize) -> Result<SnnRunRecord> {
    if timesteps == 0 {
        return Err(Error::InvalidParameter(
            "SNN simulation needs at least one timestep; evaluate T=0 in ANN mode".into(),
        ));
    }
    if model.mode() != Mode::Snn {
        return Err(Error::InvalidParameter("forward_snn expects an SNN-mode model".into()));
    }
    let mut backbone = GraphSim::new(&model.backbone)?;
    let mut head = model.head.as_ref().map(GraphSim::new).transpose()?;
    backbone.reset();
    if let Some(h) = head.as_mut() {
        h.reset();
    }
    let prefix = backbone.constant_prefix(image)?;
    let mut rate_acc = vec![0.0f32; model.feature_len()];
    let mut head_acc: Option<Vec<f32>> = None;
    for _ in 0..timesteps {
        let out = backbone.step(&prefix)?;
        for (a, v) in rate_acc.iter_mut().zip(out.data()) {
            *a += v;
        }
        if let Some(h) = head.as_mut() {
            let hp = h.constant_prefix(&out)?;
            let ho = h.step(&hp)?;
            let acc = head_acc.get_or_insert_with(|| vec![0.0; ho.len()]);
            for (a, v) in acc.iter_mut().zip(ho.data()) {
                *a += v;
            }
        }
    }
    let inv = 1.0 / timesteps as f32;
    let rates: Vec<f32> = rate_acc.iter().map(|v| v * inv / backbone.output_scale).collect();
    let head_output: Option<Vec<f32>> = head_acc.map(|acc| acc.iter().map(|v| v * inv).collect());
    let predicted = head_output.as_deref().and_then(crate::tensor::argmax);
    Ok(SnnRunRecord {
        timesteps,
        backbone_spikes: backbone.spike_totals(),
        head_spikes: head.map(|h| h.spike_totals()).unwrap_or_default(),
        rates,
        head_output,
        predicted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// 0 denotes the ANN-mode baseline.
    pub timesteps: usize,
    pub accuracy: f32,
}

/// SNN accuracy at each requested timestep count, preceded by the ANN-mode
/// (`T = 0`) baseline of the same checkpoint.
pub fn accuracy_vs_timesteps(model: &Model, samples: &[Sample], t_list: &[usize]) -> Result<Vec<AccuracyRow>> {
    if model.head.is_none() {
        return Err(Error::InvalidParameter(
            "accuracy sweep needs a model with a head".into(),
        ));
    }
    if t_list.is_empty() || t_list.windows(2).any(|w| w[0] >= w[1]) || t_list[0] == 0 {
        return Err(Error::InvalidParameter(
            "timestep list must be non-empty, strictly ascending and positive".into(),
        ));
    }
    let baseline = evaluate_ann(&ann_equivalent(model)?, samples)?;
    let mut rows = vec![AccuracyRow {
        timesteps: 0,
        accuracy: baseline,
    }];
    for &t in t_list {
        rows.push(AccuracyRow {
            timesteps: t,
            accuracy: evaluate_snn(model, samples, t)?,
        });
    }
    Ok(rows)
}

pub fn evaluate_snn(model: &Model, samples: &[Sample], timesteps: usize) -> Result<f32> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = samples
        .par_iter()
        .map(|s| forward_snn(model, &s.image, timesteps).map(|r| usize::from(r.predicted == Some(s.label))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f32 / samples.len() as f32)
}

/// Backbone firing rates of every sample at `timesteps`, without running
/// the head. Also returns each sample's backbone synaptic operation count.
pub fn extract_features(model: &Model, samples: &[Sample], timesteps: usize) -> Result<Vec<(Vec<f32>, u64)>> {
    let backbone_only = Model::new(model.backbone.clone(), None)?;
    samples
        .par_iter()
        .map(|s| {
            forward_snn(&backbone_only, &s.image, timesteps).map(|r| {
                let sops = r.backbone_sops();
                (r.rates, sops)
            })
        })
        .collect()
}
