//! Central finite-difference checks of the hand-written backward passes,
//! shared by the gradient tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikenet::layers::{Conv2d, Layer, Linear, Pool, Qcfs};
use spikenet::qcfs::{cross_entropy, qcfs_backward};
use spikenet::{DenseTensor, NetworkGraph};

pub const STEP: f32 = 1e-3;
/// Conv and linear layers are affine in inputs and parameters, so central
/// differences are exact at any step; a wider step keeps f32 rounding of
/// the outputs out of the quotient.
pub const AFFINE_STEP: f32 = 5e-2;
pub const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 50;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// `L = sum(g * layer(x))`, accumulated in f64.
fn probe_loss(layer: &Layer, x: &DenseTensor, g: &[f32]) -> f64 {
    let y = layer.forward(0, x).unwrap();
    y.data().iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Worst relative error over input and parameter gradients of one layer at
/// a few random coordinates.
fn check_layer(mut layer: Layer, input_shape: &[usize], rng: &mut ChaCha8Rng) -> f64 {
    let x = random_tensor(input_shape, rng);
    let out_shape = layer.output_shape(0, input_shape).unwrap();
    let g = random_tensor(&out_shape, rng);
    let (gx, gp) = layer.backward(0, Some(&x), &g).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let i = rng.gen_range(0..x.len());
        let mut plus = x.clone();
        plus.data_mut()[i] += AFFINE_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= AFFINE_STEP;
        let fd =
            (probe_loss(&layer, &plus, g.data()) - probe_loss(&layer, &minus, g.data())) / (2.0 * AFFINE_STEP as f64);
        worst = worst.max(rel_err(gx.data()[i] as f64, fd));
    }
    for (p, grad) in gp.iter().enumerate() {
        for _ in 0..4 {
            let i = rng.gen_range(0..grad.len());
            let orig = layer.params()[p][i];
            layer.params_mut()[p][i] = orig + AFFINE_STEP;
            let lp = probe_loss(&layer, &x, g.data());
            layer.params_mut()[p][i] = orig - AFFINE_STEP;
            let lm = probe_loss(&layer, &x, g.data());
            layer.params_mut()[p][i] = orig;
            worst = worst.max(rel_err(gp[p][i] as f64, (lp - lm) / (2.0 * AFFINE_STEP as f64)));
        }
    }
    worst
}

/// Worst relative error over `instances` random conv layers.
pub fn conv_worst(instances: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..3);
        let size = rng.gen_range(k.max(4)..9);
        let mut conv = Conv2d::new(cin, cout, k, stride, padding, &mut rng);
        conv.bias = random_tensor(&[cout], &mut rng);
        worst = worst.max(check_layer(Layer::Conv2d(conv), &[cin, size, size], &mut rng));
    }
    worst
}

pub fn linear_worst(instances: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let fin = rng.gen_range(1..20);
        let fout = rng.gen_range(1..10);
        let mut lin = Linear::new(fin, fout, &mut rng);
        lin.bias = random_tensor(&[fout], &mut rng);
        worst = worst.max(check_layer(Layer::Linear(lin), &[fin], &mut rng));
    }
    worst
}

/// Inside `(0, lambda)` the surrogate must equal the derivative of
/// `clip(x, 0, lambda)`.
pub fn qcfs_worst(instances: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let lambda = rng.gen_range(0.5..4.0f32);
        let q = Qcfs::new(lambda, 8, 0.5).unwrap();
        let x: Vec<f32> = (0..16).map(|_| rng.gen_range(0.01..0.99) * lambda).collect();
        let g: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (gx, _) = qcfs_backward(&x, &g, &q);
        for i in 0..x.len() {
            let clip = |v: f32| v.clamp(0.0, lambda) as f64 * g[i] as f64;
            let fd = (clip(x[i] + STEP) - clip(x[i] - STEP)) / (2.0 * STEP as f64);
            worst = worst.max(rel_err(gx[i] as f64, fd));
        }
    }
    worst
}

/// Parameter gradients of a small conv net under cross-entropy. Returns the
/// first mismatch.
pub fn full_graph_check() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut graph = NetworkGraph::ann(
        vec![3, 12, 12],
        vec![
            Layer::Conv2d(Conv2d::new(3, 4, 5, 2, 2, &mut rng)),
            Layer::Relu,
            Layer::MaxPool(Pool { kernel: 2, stride: 2 }),
            Layer::Conv2d(Conv2d::new(4, 4, 3, 1, 1, &mut rng)),
            Layer::Relu,
            Layer::AvgPool(Pool { kernel: 3, stride: 3 }),
            Layer::Flatten,
            Layer::Linear(Linear::new(4, 3, &mut rng)),
        ],
    )
    .unwrap();
    let x = DenseTensor::new(vec![3, 12, 12], (0..432).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let loss = |g: &NetworkGraph| -> f64 { cross_entropy(g.forward(&x).unwrap().data(), 1).0 as f64 };
    let trace = graph.forward_cached(&x).unwrap();
    let (_, dlogits) = cross_entropy(trace.output.data(), 1);
    let grads = graph
        .backward(&trace, &DenseTensor::new(vec![3], dlogits).unwrap())
        .unwrap();
    let n_params = graph.params().len();
    if grads.params.len() != n_params {
        return Err(format!(
            "{} gradient tensors for {n_params} parameters",
            grads.params.len()
        ));
    }
    for p in 0..n_params {
        for _ in 0..6 {
            let i = rng.gen_range(0..grads.params[p].len());
            let orig = graph.params()[p][i];
            graph.params_mut()[p][i] = orig + STEP;
            let lp = loss(&graph);
            graph.params_mut()[p][i] = orig - STEP;
            let lm = loss(&graph);
            graph.params_mut()[p][i] = orig;
            let fd = (lp - lm) / (2.0 * STEP as f64);
            let a = grads.params[p][i] as f64;
            // Cross-entropy in f32 limits the attainable precision here.
            if (a - fd).abs() >= 2e-3 + 2e-2 * a.abs() {
                return Err(format!("param {p}[{i}]: analytic {a} vs numeric {fd}"));
            }
        }
    }
    Ok(())
}
