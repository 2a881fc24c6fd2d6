//! The fixed layer set: forward maps, hand-written backward passes and the
//! analytic output-shape rules every graph is validated against.

use rand::Rng;

use crate::error::{Error, Result};
use crate::qcfs;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: DenseTensor,
    /// `[out]`
    pub bias: DenseTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: DenseTensor,
    /// `[out]`
    pub bias: DenseTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
}

/// Per-channel affine normalisation using running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f32,
    pub gamma: DenseTensor,
    pub beta: DenseTensor,
    pub running_mean: DenseTensor,
    pub running_var: DenseTensor,
}

/// Quantization clip-floor-shift activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qcfs {
    pub lambda: f32,
    pub levels: u32,
    pub shift: f32,
}

/// Integrate-and-fire neuron population (SNN mode only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IfNeuron {
    pub threshold: f32,
    /// Quantization level count inherited from the QCFS layer it replaced.
    pub levels: u32,
    /// Membrane potential at the start of each presentation, as a fraction
    /// of the threshold.
    pub initial_fraction: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    AvgPool(Pool),
    MaxPool(Pool),
    Flatten,
    BatchNorm(BatchNorm),
    Relu,
    Qcfs(Qcfs),
    If(IfNeuron),
}

impl Conv2d {
    /// Kaiming-uniform initialised convolution.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let weight: Vec<f32> = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: DenseTensor::new(vec![out_channels, in_channels, kernel, kernel], weight)
                .expect("conv weight shape"),
            bias: DenseTensor::zeros(&[out_channels]),
        }
    }
}

impl Linear {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_features as f32).sqrt();
        let weight: Vec<f32> = (0..out_features * in_features)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            in_features,
            out_features,
            weight: DenseTensor::new(vec![out_features, in_features], weight).expect("linear weight shape"),
            bias: DenseTensor::zeros(&[out_features]),
        }
    }

    /// `y = W x + b` with explicit weights, mostly for tests.
    pub fn from_parts(weight: DenseTensor, bias: DenseTensor) -> Result<Self> {
        let &[out_features, in_features] = weight.shape() else {
            return Err(Error::InvalidParameter(format!(
                "linear weight must be rank 2, got {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [out_features] {
            return Err(Error::InvalidParameter(format!(
                "linear bias shape {:?} does not match {out_features} outputs",
                bias.shape()
            )));
        }
        Ok(Self {
            in_features,
            out_features,
            weight,
            bias,
        })
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            gamma: DenseTensor::filled(&[channels], 1.0),
            beta: DenseTensor::zeros(&[channels]),
            running_mean: DenseTensor::zeros(&[channels]),
            running_var: DenseTensor::filled(&[channels], 1.0),
        }
    }

    /// Per-channel `(scale, offset)` such that `bn(x) = scale * x + offset`.
    pub fn affine(&self) -> Vec<(f32, f32)> {
        (0..self.channels)
            .map(|c| {
                let scale = self.gamma.data()[c] / (self.running_var.data()[c] + self.eps).sqrt();
                (scale, self.beta.data()[c] - scale * self.running_mean.data()[c])
            })
            .collect()
    }
}

impl Qcfs {
    pub fn new(lambda: f32, levels: u32, shift: f32) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "QCFS threshold must be positive, got {lambda}"
            )));
        }
        if levels == 0 {
            return Err(Error::InvalidParameter("QCFS level count must be at least 1".into()));
        }
        if !shift.is_finite() {
            return Err(Error::InvalidParameter("QCFS shift must be finite".into()));
        }
        Ok(Self { lambda, levels, shift })
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Linear(_) => "linear",
            Layer::AvgPool(_) => "avg_pool",
            Layer::MaxPool(_) => "max_pool",
            Layer::Flatten => "flatten",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::Qcfs(_) => "qcfs",
            Layer::If(_) => "if",
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, Layer::Relu | Layer::Qcfs(_) | Layer::If(_))
    }

    /// Output shape for a given input shape, or a diagnostic naming `index`.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: index,
            expected,
            actual: input.to_vec(),
        };
        match self {
            Layer::Conv2d(c) => {
                let &[ch, h, w] = input else {
                    return Err(mismatch(vec![c.in_channels, 0, 0]));
                };
                if ch != c.in_channels {
                    return Err(mismatch(vec![c.in_channels, h, w]));
                }
                let oh = conv_out_dim(h, c.kernel, c.stride, c.padding);
                let ow = conv_out_dim(w, c.kernel, c.stride, c.padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![c.out_channels, oh, ow]),
                    _ => Err(mismatch(vec![c.in_channels, c.kernel, c.kernel])),
                }
            }
            Layer::Linear(l) => {
                if input != [l.in_features] {
                    return Err(mismatch(vec![l.in_features]));
                }
                Ok(vec![l.out_features])
            }
            Layer::AvgPool(p) | Layer::MaxPool(p) => {
                let &[ch, h, w] = input else {
                    return Err(mismatch(vec![0, p.kernel, p.kernel]));
                };
                match (
                    conv_out_dim(h, p.kernel, p.stride, 0),
                    conv_out_dim(w, p.kernel, p.stride, 0),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![ch, oh, ow]),
                    _ => Err(mismatch(vec![ch, p.kernel, p.kernel])),
                }
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::BatchNorm(bn) => {
                if input.first() != Some(&bn.channels) {
                    let mut expected = input.to_vec();
                    if expected.is_empty() {
                        expected.push(bn.channels);
                    } else {
                        expected[0] = bn.channels;
                    }
                    return Err(mismatch(expected));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Qcfs(_) | Layer::If(_) => Ok(input.to_vec()),
        }
    }

    /// Stateless forward map. IF layers are stateful and rejected here.
    pub fn forward(&self, index: usize, x: &DenseTensor) -> Result<DenseTensor> {
        let out_shape = self.output_shape(index, x.shape())?;
        let data = match self {
            Layer::Conv2d(c) => conv_forward(c, x),
            Layer::Linear(l) => linear_forward(l, x.data()),
            Layer::AvgPool(p) => avg_pool_forward(p, x),
            Layer::MaxPool(p) => max_pool_forward(p, x).0,
            Layer::Flatten => x.data().to_vec(),
            Layer::BatchNorm(bn) => batch_norm_forward(bn, x),
            Layer::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Layer::Qcfs(q) => {
                let step = q.lambda / q.levels as f32;
                x.data()
                    .iter()
                    .map(|&v| qcfs::quantize_with_step(v, q.lambda, q.levels, q.shift, step))
                    .collect()
            }
            Layer::If(_) => {
                return Err(Error::UnsupportedLayer {
                    index,
                    kind: "if",
                    reason: "integrate-and-fire layers are stateful; use the SNN simulator",
                })
            }
        };
        DenseTensor::new(out_shape, data)
    }

    /// Backward pass given the cached input of the forward call.
    ///
    /// Returns the input gradient and one gradient vector per parameter
    /// tensor, in the order of [`Layer::params`].
    pub fn backward(
        &self,
        index: usize,
        input: Option<&DenseTensor>,
        grad_out: &DenseTensor,
    ) -> Result<(DenseTensor, Vec<Vec<f32>>)> {
        let x = input.ok_or(Error::MissingCache { layer: index })?;
        let out_shape = self.output_shape(index, x.shape())?;
        if grad_out.shape() != out_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: index,
                expected: out_shape,
                actual: grad_out.shape().to_vec(),
            });
        }
        let g = grad_out.data();
        let (grad_in, params) = match self {
            Layer::Conv2d(c) => {
                let (gi, gw, gb) = conv_backward(c, x, grad_out);
                (gi, vec![gw, gb])
            }
            Layer::Linear(l) => {
                let (gi, gw, gb) = linear_backward(l, x.data(), g);
                (gi, vec![gw, gb])
            }
            Layer::AvgPool(p) => (avg_pool_backward(p, x.shape(), grad_out), vec![]),
            Layer::MaxPool(p) => {
                let (_, arg) = max_pool_forward(p, x);
                let mut gi = vec![0.0; x.len()];
                for (o, &src) in arg.iter().enumerate() {
                    gi[src] += g[o];
                }
                (gi, vec![])
            }
            Layer::Flatten => (g.to_vec(), vec![]),
            Layer::BatchNorm(bn) => {
                let (gi, gg, gb) = batch_norm_backward(bn, x, g);
                (gi, vec![gg, gb])
            }
            Layer::Relu => (
                x.data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect(),
                vec![],
            ),
            Layer::Qcfs(q) => {
                let (gx, glambda) = qcfs::qcfs_backward(x.data(), g, q);
                (gx, vec![vec![glambda]])
            }
            Layer::If(_) => {
                return Err(Error::UnsupportedLayer {
                    index,
                    kind: "if",
                    reason: "integrate-and-fire layers are not trained by backpropagation",
                })
            }
        };
        Ok((DenseTensor::new(x.shape().to_vec(), grad_in)?, params))
    }

    pub fn params(&self) -> Vec<&[f32]> {
        match self {
            Layer::Conv2d(c) => vec![c.weight.data(), c.bias.data()],
            Layer::Linear(l) => vec![l.weight.data(), l.bias.data()],
            Layer::BatchNorm(bn) => vec![bn.gamma.data(), bn.beta.data()],
            Layer::Qcfs(q) => vec![std::slice::from_ref(&q.lambda)],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            Layer::Conv2d(c) => vec![c.weight.data_mut(), c.bias.data_mut()],
            Layer::Linear(l) => vec![l.weight.data_mut(), l.bias.data_mut()],
            Layer::BatchNorm(bn) => vec![bn.gamma.data_mut(), bn.beta.data_mut()],
            Layer::Qcfs(q) => vec![std::slice::from_mut(&mut q.lambda)],
            _ => vec![],
        }
    }
}

/// Output-x range `[lo, hi)` such that `ox * stride + k - pad` lies in `[0, w)`.
#[inline]
fn valid_range(w: usize, ow: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let limit = w + pad;
    let hi = if limit > k {
        (limit - k).div_ceil(stride).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward(c: &Conv2d, x: &DenseTensor) -> Vec<f32> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, c.kernel, c.stride, c.padding).unwrap();
    let ow = conv_out_dim(w, c.kernel, c.stride, c.padding).unwrap();
    let (k, s, p) = (c.kernel, c.stride, c.padding);
    let xd = x.data();
    let wd = c.weight.data();
    let mut out = vec![0.0f32; c.out_channels * oh * ow];
    for (o, out_o) in out.chunks_exact_mut(oh * ow).enumerate() {
        out_o.fill(c.bias.data()[o]);
        for ci in 0..c.in_channels {
            let xin = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((o * c.in_channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = valid_range(w, ow, kx, s, p);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out_o[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            orow[ox] += wv * row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(c: &Conv2d, x: &DenseTensor, grad_out: &DenseTensor) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let (k, s, p) = (c.kernel, c.stride, c.padding);
    let xd = x.data();
    let wd = c.weight.data();
    let g = grad_out.data();
    let mut gi = vec![0.0f32; xd.len()];
    let mut gw = vec![0.0f32; wd.len()];
    let mut gb = vec![0.0f32; c.out_channels];
    for o in 0..c.out_channels {
        let g_o = &g[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = g_o.iter().sum();
        for ci in 0..c.in_channels {
            let base = ci * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * c.in_channels + ci) * k + ky) * k + kx;
                    let wv = wd[widx];
                    let (lo, hi) = valid_range(w, ow, kx, s, p);
                    let mut acc = 0.0f32;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_off = base + iy as usize * w;
                        let grow = &g_o[oy * ow..(oy + 1) * ow];
                        for (ox, &go) in grow.iter().enumerate().take(hi).skip(lo) {
                            let ix = row_off + ox * s + kx - p;
                            acc += xd[ix] * go;
                            gi[ix] += wv * go;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gi, gw, gb)
}

fn linear_forward(l: &Linear, x: &[f32]) -> Vec<f32> {
    let wd = l.weight.data();
    (0..l.out_features)
        .map(|o| {
            let row = &wd[o * l.in_features..(o + 1) * l.in_features];
            l.bias.data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect()
}

fn linear_backward(l: &Linear, x: &[f32], g: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let wd = l.weight.data();
    let mut gi = vec![0.0f32; l.in_features];
    let mut gw = vec![0.0f32; wd.len()];
    for o in 0..l.out_features {
        let go = g[o];
        if go == 0.0 {
            continue;
        }
        let row = &wd[o * l.in_features..(o + 1) * l.in_features];
        let grow = &mut gw[o * l.in_features..(o + 1) * l.in_features];
        for i in 0..l.in_features {
            gi[i] += row[i] * go;
            grow[i] = x[i] * go;
        }
    }
    (gi, gw, g.to_vec())
}

fn avg_pool_forward(p: &Pool, x: &DenseTensor) -> Vec<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, p.kernel, p.stride, 0).unwrap();
    let ow = conv_out_dim(w, p.kernel, p.stride, 0).unwrap();
    let inv = 1.0 / (p.kernel * p.kernel) as f32;
    let xd = x.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..p.kernel {
                    let row = ch * h * w + (oy * p.stride + ky) * w + ox * p.stride;
                    acc += xd[row..row + p.kernel].iter().sum::<f32>();
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

fn avg_pool_backward(p: &Pool, in_shape: &[usize], grad_out: &DenseTensor) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let inv = 1.0 / (p.kernel * p.kernel) as f32;
    let g = grad_out.data();
    let mut gi = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(ch * oh + oy) * ow + ox] * inv;
                for ky in 0..p.kernel {
                    let row = ch * h * w + (oy * p.stride + ky) * w + ox * p.stride;
                    for v in &mut gi[row..row + p.kernel] {
                        *v += gv;
                    }
                }
            }
        }
    }
    gi
}

/// Max-pool output plus, per output cell, the flat index of the winning input.
fn max_pool_forward(p: &Pool, x: &DenseTensor) -> (Vec<f32>, Vec<usize>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, p.kernel, p.stride, 0).unwrap();
    let ow = conv_out_dim(w, p.kernel, p.stride, 0).unwrap();
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = ch * h * w + oy * p.stride * w + ox * p.stride;
                for ky in 0..p.kernel {
                    for kx in 0..p.kernel {
                        let idx = ch * h * w + (oy * p.stride + ky) * w + ox * p.stride + kx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

fn batch_norm_forward(bn: &BatchNorm, x: &DenseTensor) -> Vec<f32> {
    let per_channel = x.len() / bn.channels;
    let affine = bn.affine();
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (s, o) = affine[i / per_channel];
            s * v + o
        })
        .collect()
}

fn batch_norm_backward(bn: &BatchNorm, x: &DenseTensor, g: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let per_channel = x.len() / bn.channels;
    let mut gi = vec![0.0f32; x.len()];
    let mut gg = vec![0.0f32; bn.channels];
    let mut gb = vec![0.0f32; bn.channels];
    for c in 0..bn.channels {
        let inv_std = 1.0 / (bn.running_var.data()[c] + bn.eps).sqrt();
        let scale = bn.gamma.data()[c] * inv_std;
        let mean = bn.running_mean.data()[c];
        for i in c * per_channel..(c + 1) * per_channel {
            gi[i] = g[i] * scale;
            gg[c] += g[i] * (x.data()[i] - mean) * inv_std;
            gb[c] += g[i];
        }
    }
    (gi, gg, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_ones(k: usize, pad: usize) -> Conv2d {
        Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: k,
            stride: 1,
            padding: pad,
            weight: DenseTensor::filled(&[1, 1, k, k], 1.0),
            bias: DenseTensor::zeros(&[1]),
        }
    }

    /// Direct summation over the padded input, written independently of
    /// the range-clipped loops in `conv_forward`.
    fn naive_conv(c: &Conv2d, x: &DenseTensor) -> Vec<f32> {
        let (h, w) = (x.shape()[1] as isize, x.shape()[2] as isize);
        let oh = conv_out_dim(h as usize, c.kernel, c.stride, c.padding).unwrap();
        let ow = conv_out_dim(w as usize, c.kernel, c.stride, c.padding).unwrap();
        let mut out = vec![];
        for o in 0..c.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias.data()[o] as f64;
                    for ci in 0..c.in_channels {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                let xv = x.data()[(ci * h as usize + iy as usize) * w as usize + ix as usize];
                                let wv = c.weight.data()[((o * c.in_channels + ci) * c.kernel + ky) * c.kernel + kx];
                                acc += (xv * wv) as f64;
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn avg_pool_of_two_by_two_is_mean() {
        let layer = Layer::AvgPool(Pool { kernel: 2, stride: 2 });
        let x = DenseTensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = layer.forward(0, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn identity_linear_is_identity() {
        let mut w = DenseTensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let layer = Layer::Linear(Linear::from_parts(w, DenseTensor::zeros(&[3])).unwrap());
        let x = DenseTensor::from_vec(vec![0.5, -2.0, 7.25]);
        assert_eq!(layer.forward(0, &x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_window_cells() {
        let layer = Layer::Conv2d(conv_ones(3, 1));
        let x = DenseTensor::filled(&[1, 5, 5], 1.0);
        let y = layer.forward(0, &x).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[4], 4.0);
        assert_eq!(y.data()[2], 6.0);
    }

    #[test]
    fn conv_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, h, w) in &[
            (3, 1, 1, 7, 6),
            (3, 2, 0, 9, 8),
            (5, 2, 2, 6, 6),
            (1, 1, 0, 4, 3),
            (2, 3, 1, 7, 5),
        ] {
            let mut c = Conv2d::new(2, 3, k, s, p, &mut rng);
            c.bias = DenseTensor::from_vec(vec![0.1, -0.2, 0.3]);
            let x = DenseTensor::new(
                vec![2, h, w],
                (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let fast = conv_forward(&c, &x);
            let slow = naive_conv(&c, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b} (k={k} s={s} p={p})");
            }
        }
    }

    #[test]
    fn shape_mismatch_names_layer_and_shapes() {
        let layer = Layer::Linear(Linear::new(4, 2, &mut ChaCha8Rng::seed_from_u64(0)));
        let err = layer.forward(7, &DenseTensor::zeros(&[5])).unwrap_err();
        match err {
            Error::ShapeMismatch {
                layer,
                expected,
                actual,
            } => {
                assert_eq!(layer, 7);
                assert_eq!(expected, vec![4]);
                assert_eq!(actual, vec![5]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scalar_linear_gradient() {
        let layer = Layer::Linear(
            Linear::from_parts(
                DenseTensor::new(vec![1, 1], vec![2.0]).unwrap(),
                DenseTensor::zeros(&[1]),
            )
            .unwrap(),
        );
        let x = DenseTensor::from_vec(vec![3.0]);
        let (gi, gp) = layer.backward(0, Some(&x), &DenseTensor::from_vec(vec![1.0])).unwrap();
        assert_eq!(gp[0], vec![3.0]);
        assert_eq!(gi.data(), &[2.0]);
    }

    #[test]
    fn backward_without_cache_is_rejected() {
        let layer = Layer::Relu;
        assert!(matches!(
            layer.backward(3, None, &DenseTensor::zeros(&[2])),
            Err(Error::MissingCache { layer: 3 })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers = vec![
            (Layer::Conv2d(Conv2d::new(2, 3, 3, 1, 1, &mut rng)), vec![2, 5, 5]),
            (Layer::Linear(Linear::new(6, 4, &mut rng)), vec![6]),
            (Layer::AvgPool(Pool { kernel: 2, stride: 2 }), vec![2, 4, 4]),
            (Layer::MaxPool(Pool { kernel: 2, stride: 2 }), vec![2, 4, 4]),
            (Layer::BatchNorm(BatchNorm::new(2)), vec![2, 3, 3]),
            (Layer::Relu, vec![5]),
            (Layer::Qcfs(Qcfs::new(2.0, 8, 0.5).unwrap()), vec![5]),
            (Layer::Flatten, vec![2, 2, 2]),
        ];
        for (layer, shape) in layers {
            let n: usize = shape.iter().product();
            let x = DenseTensor::new(shape.clone(), (0..n).map(|_| rng.gen_range(-1.0..3.0)).collect()).unwrap();
            let out_shape = layer.output_shape(0, &shape).unwrap();
            let (gi, gp) = layer.backward(0, Some(&x), &DenseTensor::zeros(&out_shape)).unwrap();
            assert!(gi.data().iter().all(|&v| v == 0.0), "{}", layer.kind_name());
            assert!(gp.iter().flatten().all(|&v| v == 0.0), "{}", layer.kind_name());
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let layer = Layer::MaxPool(Pool { kernel: 2, stride: 2 });
        let x = DenseTensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        assert_eq!(layer.forward(0, &x).unwrap().data(), &[5.0]);
        let (gi, _) = layer
            .backward(0, Some(&x), &DenseTensor::new(vec![1, 1, 1], vec![2.0]).unwrap())
            .unwrap();
        assert_eq!(gi.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn qcfs_rejects_nonpositive_threshold() {
        assert!(Qcfs::new(0.0, 8, 0.5).is_err());
        assert!(Qcfs::new(-1.0, 8, 0.5).is_err());
        assert!(Qcfs::new(2.0, 0, 0.5).is_err());
    }
}
