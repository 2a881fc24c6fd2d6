//! Stage-1 supervised network: the quantization clip-floor-shift (QCFS)
//! activation with trainable thresholds, structural surgery that prepares a
//! conventional CNN for conversion, the supervised head, and the training
//! loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::graph::{Mode, Model, NetworkGraph};
use crate::layers::{Layer, Linear, Qcfs};
use crate::optim::OptimizerState;
use crate::tensor::DenseTensor;

/// Lower bound applied to every threshold after an optimizer step.
pub const MIN_LAMBDA: f32 = 1e-4;

/// `step * clip(floor(x * L / lambda + shift), 0, L)` with `step = lambda / L`
/// precomputed by the caller so every output is exactly `k * step`.
#[inline]
pub fn quantize_with_step(x: f32, lambda: f32, levels: u32, shift: f32, step: f32) -> f32 {
    let k = (x * levels as f32 / lambda + shift).floor().clamp(0.0, levels as f32);
    step * k
}

/// Elementwise QCFS activation.
pub fn qcfs_forward(x: &DenseTensor, q: &Qcfs) -> DenseTensor {
    let step = q.lambda / q.levels as f32;
    x.map(|v| quantize_with_step(v, q.lambda, q.levels, q.shift, step))
}

/// Straight-through surrogate gradients of the QCFS staircase.
///
/// The input gradient passes through unchanged on `[0, lambda]` and is
/// blocked elsewhere. The threshold gradient differentiates
/// `(lambda / L) * round(x * L / lambda)` with the rounding treated as the
/// identity: `y / lambda - x / lambda` inside `(0, lambda)`, `y / lambda`
/// outside it.
pub fn qcfs_backward(x: &[f32], grad_out: &[f32], q: &Qcfs) -> (Vec<f32>, f32) {
    let step = q.lambda / q.levels as f32;
    let mut grad_lambda = 0.0f32;
    let grad_x = x
        .iter()
        .zip(grad_out)
        .map(|(&xv, &g)| {
            let y = quantize_with_step(xv, q.lambda, q.levels, q.shift, step);
            let inside = xv > 0.0 && xv < q.lambda;
            let dy_dlambda = if inside { (y - xv) / q.lambda } else { y / q.lambda };
            grad_lambda += g * dy_dlambda;
            if (0.0..=q.lambda).contains(&xv) {
                g
            } else {
                0.0
            }
        })
        .collect();
    (grad_x, grad_lambda)
}

/// Threshold, level count and shift given to freshly inserted QCFS layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcfsParams {
    pub lambda: f32,
    pub levels: u32,
    pub shift: f32,
}

impl Default for QcfsParams {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            levels: 8,
            shift: 0.5,
        }
    }
}

impl QcfsParams {
    pub fn layer(&self) -> Result<Qcfs> {
        Qcfs::new(self.lambda, self.levels, self.shift)
    }
}

/// Replaces every ReLU with a QCFS layer and every max-pool with an
/// average-pool of the same window. Existing QCFS layers are kept as they
/// are, so applying surgery twice is a no-op.
pub fn surgery(graph: &NetworkGraph, params: &QcfsParams) -> Result<NetworkGraph> {
    if graph.mode() != Mode::Ann {
        return Err(Error::InvalidParameter("surgery expects an ANN-mode graph".into()));
    }
    let fresh = params.layer()?;
    let layers = graph
        .layers()
        .iter()
        .enumerate()
        .map(|(index, layer)| match layer {
            Layer::Relu => Ok(Layer::Qcfs(fresh)),
            Layer::MaxPool(p) => Ok(Layer::AvgPool(*p)),
            Layer::If(_) => Err(Error::UnsupportedLayer {
                index,
                kind: layer.kind_name(),
                reason: "surgery cannot rewrite a spiking layer",
            }),
            other => Ok(other.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    graph.with_layers(layers, Mode::Ann)
}

/// `Linear -> QCFS -> Linear` classification head used during Stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedHead {
    graph: NetworkGraph,
}

impl SupervisedHead {
    pub fn new<R: Rng>(
        features: usize,
        hidden: usize,
        classes: usize,
        params: &QcfsParams,
        rng: &mut R,
    ) -> Result<Self> {
        let graph = NetworkGraph::ann(
            vec![features],
            vec![
                Layer::Linear(Linear::new(features, hidden, rng)),
                Layer::Qcfs(params.layer()?),
                Layer::Linear(Linear::new(hidden, classes, rng)),
            ],
        )?;
        Ok(Self { graph })
    }

    /// Accepts `Linear -> (QCFS | IF) -> Linear`.
    pub fn from_graph(graph: NetworkGraph) -> Result<Self> {
        match graph.layers() {
            [Layer::Linear(_), Layer::Qcfs(_) | Layer::If(_), Layer::Linear(_)] => Ok(Self { graph }),
            layers => Err(Error::InvalidParameter(format!(
                "supervised head must be linear -> qcfs -> linear, got [{}]",
                layers.iter().map(Layer::kind_name).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn into_graph(self) -> NetworkGraph {
        self.graph
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub t_max: usize,
    pub levels: u32,
    pub initial_lambda: f32,
    pub shift: f32,
    /// Hidden width of the supervised head. Defaults to the Stage-2
    /// classifier width.
    pub head_hidden: usize,
    pub augment: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            t_max: 100,
            levels: 8,
            initial_lambda: 2.0,
            shift: 0.5,
            head_hidden: 500,
            augment: true,
        }
    }
}

impl Stage1Config {
    pub fn qcfs(&self) -> QcfsParams {
        QcfsParams {
            lambda: self.initial_lambda,
            levels: self.levels,
            shift: self.shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.t_max == 0 || self.levels == 0 || self.head_hidden == 0 {
            return Err(Error::Config(
                "stage1 batch_size, t_max, levels and head_hidden must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.initial_lambda > 0.0) {
            return Err(Error::Config(
                "stage1 learning_rate and initial_lambda must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_acc: f32,
    pub lr: f32,
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    /// Checkpoint with the highest validation accuracy, latest epoch on ties
    /// (the initial model when no epoch ran).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub best_val_acc: f32,
    pub log: Vec<EpochMetrics>,
}

/// Softmax cross-entropy loss and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f32], target: usize) -> (f32, Vec<f32>) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let mut grad: Vec<f32> = exps.iter().map(|e| e / sum).collect();
    let loss = -(grad[target].max(f32::MIN_POSITIVE)).ln();
    grad[target] -= 1.0;
    (loss, grad)
}

/// ANN-mode top-1 accuracy of a model with a head.
pub fn evaluate_ann(model: &Model, samples: &[Sample]) -> Result<f32> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct = samples
        .par_iter()
        .map(|s| {
            model
                .forward(&s.image)
                .map(|y| usize::from(y.argmax() == Some(s.label)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f32 / samples.len() as f32)
}

struct SampleGrad {
    loss: f32,
    correct: bool,
    backbone: Vec<Vec<f32>>,
    head: Vec<Vec<f32>>,
}

fn sample_gradient(
    backbone: &NetworkGraph,
    head: &NetworkGraph,
    image: &DenseTensor,
    label: usize,
) -> Result<SampleGrad> {
    let bb = backbone.forward_cached(image)?;
    let hd = head.forward_cached(&bb.output)?;
    let (loss, dlogits) = cross_entropy(hd.output.data(), label);
    let correct = hd.output.argmax() == Some(label);
    let dlogits = DenseTensor::new(hd.output.shape().to_vec(), dlogits)?;
    let head_grads = head.backward(&hd, &dlogits)?;
    let bb_grads = backbone.backward(&bb, &head_grads.input)?;
    Ok(SampleGrad {
        loss,
        correct,
        backbone: bb_grads.params,
        head: head_grads.params,
    })
}

fn clamp_thresholds(graph: &mut NetworkGraph) {
    for layer in graph.layers_mut() {
        if let Layer::Qcfs(q) = layer {
            q.lambda = q.lambda.max(MIN_LAMBDA);
        }
    }
}

pub(crate) fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cross-entropy training of backbone and head with Adam and a cosine
/// schedule; both weights and every QCFS threshold are updated each step.
pub fn train_stage1(
    backbone: NetworkGraph,
    head: SupervisedHead,
    train: &[Sample],
    val: &[Sample],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("stage-1 training split".into()));
    }
    let mut backbone = backbone;
    let mut head = head.into_graph();
    Model::new(backbone.clone(), Some(head.clone()))?;

    let mut best = Model::new(backbone.clone(), Some(head.clone()))?;
    let mut best_epoch = None;
    let mut best_val_acc = f32::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.t_max);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);

    for epoch in 0..cfg.epochs {
        opt.epoch = epoch;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let sample = &train[i];
                    let image = if cfg.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch as u64, i as u64));
                        augment::augment(&sample.image, &mut rng)
                    } else {
                        sample.image.clone()
                    };
                    sample_gradient(&backbone, &head, &image, sample.label)
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / batch.len() as f32;
            let mut grads: Vec<Vec<f32>> = backbone
                .params()
                .into_iter()
                .chain(head.params())
                .map(|p| vec![0.0; p.len()])
                .collect();
            for r in &results {
                loss_sum += r.loss as f64;
                correct += usize::from(r.correct);
                for (acc, g) in grads.iter_mut().zip(r.backbone.iter().chain(&r.head)) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
            }
            if !loss_sum.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let mut params: Vec<&mut [f32]> = backbone.params_mut();
            params.extend(head.params_mut());
            opt.adam_step(&mut params, &grads)?;
            clamp_thresholds(&mut backbone);
            clamp_thresholds(&mut head);
        }

        let train_loss = (loss_sum / train.len() as f64) as f32;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let current = Model::new(backbone.clone(), Some(head.clone()))?;
        let val_acc = evaluate_ann(&current, val)?;
        log.push(EpochMetrics {
            epoch,
            train_loss,
            train_acc: correct as f32 / train.len() as f32,
            val_acc,
            lr: opt.current_lr(),
        });
        log::info!(
            "stage1 epoch {epoch}: loss {train_loss:.4} train_acc {:.3} val_acc {val_acc:.3}",
            correct as f32 / train.len() as f32
        );
        if val_acc >= best_val_acc {
            best_val_acc = val_acc;
            best_epoch = Some(epoch);
            best = current;
        }
    }
    if best_epoch.is_none() {
        best_val_acc = evaluate_ann(&best, val)?;
    }
    Ok(Stage1Outcome {
        best,
        best_epoch,
        best_val_acc,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Pool;

    fn q(lambda: f32) -> Qcfs {
        Qcfs::new(lambda, 8, 0.5).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let t = DenseTensor::from_vec(vec![0.0, 0.75, 100.0, -3.0]);
        let y = qcfs_forward(&t, &q(2.0));
        assert_eq!(y.data(), &[0.0, 0.75, 2.0, 0.0]);
    }

    #[test]
    fn surrogate_gradient_regions() {
        let (gx, _) = qcfs_backward(&[0.3, 1.9, -0.2, 2.5], &[1.5, -2.0, 4.0, 4.0], &q(2.0));
        assert_eq!(gx, vec![1.5, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn threshold_gradient_above_lambda_is_one() {
        let (_, gl) = qcfs_backward(&[5.0], &[1.0], &q(2.0));
        assert_eq!(gl, 1.0);
        let (_, gl) = qcfs_backward(&[-5.0], &[1.0], &q(2.0));
        assert_eq!(gl, 0.0);
    }

    fn toy_cnn() -> NetworkGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        NetworkGraph::ann(
            vec![3, 8, 8],
            vec![
                Layer::Conv2d(crate::layers::Conv2d::new(3, 4, 3, 1, 1, &mut rng)),
                Layer::Relu,
                Layer::MaxPool(Pool { kernel: 2, stride: 2 }),
                Layer::Conv2d(crate::layers::Conv2d::new(4, 4, 3, 1, 1, &mut rng)),
                Layer::Relu,
                Layer::MaxPool(Pool { kernel: 2, stride: 2 }),
                Layer::Flatten,
                Layer::Linear(Linear::new(16, 6, &mut rng)),
                Layer::Relu,
            ],
        )
        .unwrap()
    }

    #[test]
    fn surgery_replaces_activations_and_pools() {
        let g = toy_cnn();
        let s = surgery(&g, &QcfsParams::default()).unwrap();
        let count = |g: &NetworkGraph, f: fn(&Layer) -> bool| g.layers().iter().filter(|l| f(l)).count();
        assert_eq!(count(&s, |l| matches!(l, Layer::Qcfs(_))), 3);
        assert_eq!(count(&s, |l| matches!(l, Layer::AvgPool(_))), 2);
        assert_eq!(count(&s, |l| matches!(l, Layer::Relu | Layer::MaxPool(_))), 0);
        assert_eq!(s.len(), g.len());
        assert_eq!(s.shape_trace().unwrap(), g.shape_trace().unwrap());
        for l in s.layers() {
            if let Layer::Qcfs(q) = l {
                assert_eq!(q.lambda, 2.0);
            }
        }
        assert_eq!(surgery(&s, &QcfsParams::default()).unwrap(), s);
    }

    #[test]
    fn surgery_leaves_plain_graph_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = NetworkGraph::ann(
            vec![4],
            vec![
                Layer::Linear(Linear::new(4, 3, &mut rng)),
                Layer::Linear(Linear::new(3, 2, &mut rng)),
            ],
        )
        .unwrap();
        assert_eq!(surgery(&g, &QcfsParams::default()).unwrap(), g);
    }

    #[test]
    fn head_layout_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = SupervisedHead::new(6, 5, 3, &QcfsParams::default(), &mut rng).unwrap();
        assert_eq!(
            head.graph().layers().iter().map(Layer::kind_name).collect::<Vec<_>>(),
            vec!["linear", "qcfs", "linear"]
        );
        let bad = NetworkGraph::ann(vec![6], vec![Layer::Linear(Linear::new(6, 3, &mut rng)), Layer::Relu]).unwrap();
        assert!(SupervisedHead::from_graph(bad).is_err());
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = cross_entropy(&[1.0, 2.0, 0.5], 1);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f32>().abs() < 1e-6);
        assert!(g[1] < 0.0);
    }

    /// Gradient descent on a single linear+QCFS layer toward targets produced
    /// by a reachable teacher: the loss must not increase over ten steps.
    #[test]
    fn qcfs_regression_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n_in = 6;
        let n_out = 4;
        let student = Linear::new(n_in, n_out, &mut rng);
        let teacher = Linear::new(n_in, n_out, &mut rng);
        let qc = q(2.0);
        let mut graph = NetworkGraph::ann(vec![n_in], vec![Layer::Linear(student), Layer::Qcfs(qc)]).unwrap();
        let teacher_graph = NetworkGraph::ann(vec![n_in], vec![Layer::Linear(teacher), Layer::Qcfs(qc)]).unwrap();
        let inputs: Vec<DenseTensor> = (0..64)
            .map(|_| DenseTensor::from_vec((0..n_in).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let targets: Vec<DenseTensor> = inputs.iter().map(|x| teacher_graph.forward(x).unwrap()).collect();
        let loss_of = |g: &NetworkGraph| -> f32 {
            inputs
                .iter()
                .zip(&targets)
                .map(|(x, t)| {
                    let y = g.forward(x).unwrap();
                    y.data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f32>()
                })
                .sum::<f32>()
                / inputs.len() as f32
        };
        let mut losses = vec![loss_of(&graph)];
        for _ in 0..10 {
            let mut grads: Vec<Vec<f32>> = graph.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for (x, t) in inputs.iter().zip(&targets) {
                let tr = graph.forward_cached(x).unwrap();
                let d: Vec<f32> = tr
                    .output
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| 2.0 * (a - b))
                    .collect();
                let g = graph.backward(&tr, &DenseTensor::from_vec(d)).unwrap();
                for (acc, v) in grads.iter_mut().zip(&g.params) {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b / inputs.len() as f32;
                    }
                }
            }
            for (p, g) in graph.params_mut().into_iter().zip(&grads) {
                for (a, b) in p.iter_mut().zip(g) {
                    *a -= 0.02 * b;
                }
            }
            losses.push(loss_of(&graph));
        }
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss increased: {losses:?}");
        }
        assert!(losses[10] < losses[0], "{losses:?}");
    }
}
