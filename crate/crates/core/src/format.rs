//! `SPKF` binary checkpoints for networks and Stage-2 classifiers.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! header   "SPKF" | u32 version | u8 kind | 3 zero bytes
//! network  u8 has_head | graph | [graph]
//! graph    u32 rank | u32 dims[rank] | u32 layer_count | record*
//! record   u8 tag | u32 n, u32 ints[n] | u32 n, f32 scalars[n] | u32 n, tensor*
//! tensor   u32 rank | u32 dims[rank] | f32 data[product(dims)]
//! ```
//!
//! `kind` is 0 for ANN networks, 1 for SNN networks and 2 for classifiers,
//! whose payload is a single record with tag 32.

use crate::error::{Error, Result};
use crate::graph::{Mode, Model, NetworkGraph};
use crate::layers::{BatchNorm, Conv2d, IfNeuron, Layer, Linear, Pool, Qcfs};
use crate::stdp::{ClassifierState, Stage2Config};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"SPKF";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 8;
const CLASSIFIER_TAG: u8 = 32;
const UNASSIGNED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Ann = 0,
    Snn = 1,
    Classifier = 2,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Kind::Ann),
            1 => Ok(Kind::Snn),
            2 => Ok(Kind::Classifier),
            _ => Err(Error::Format(format!("unknown checkpoint kind {b}"))),
        }
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &DenseTensor) {
        self.len(t.shape().len());
        for &d in t.shape() {
            self.len(d);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }

    fn record(&mut self, tag: u8, ints: &[u32], scalars: &[f32], tensors: &[&DenseTensor]) {
        self.u8(tag);
        self.len(ints.len());
        for &i in ints {
            self.u32(i);
        }
        self.len(scalars.len());
        for &s in scalars {
            self.f32(s);
        }
        self.len(tensors.len());
        for t in tensors {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// Reads a count whose elements occupy at least `elem_bytes` each, so a
    /// hostile count cannot trigger an oversized allocation.
    fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_bytes) > self.remaining() {
            return Err(Error::Format(format!("count {n} exceeds remaining input")));
        }
        Ok(n)
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.count(4)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn tensor(&mut self) -> Result<DenseTensor> {
        let shape = self.dims()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.saturating_mul(4) <= self.remaining())
            .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} exceeds remaining input")))?;
        let data = (0..len).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        DenseTensor::new(shape, data)
    }

    fn record(&mut self) -> Result<Record> {
        let tag = self.u8()?;
        let n = self.count(4)?;
        let ints = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = self.count(4)?;
        let scalars = (0..n).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        // The smallest tensor record is a rank-0 scalar: 4 + 4 bytes.
        let n = self.count(8)?;
        let tensors = (0..n).map(|_| self.tensor()).collect::<Result<Vec<_>>>()?;
        Ok(Record {
            tag,
            ints,
            scalars,
            tensors,
        })
    }
}

struct Record {
    tag: u8,
    ints: Vec<u32>,
    scalars: Vec<f32>,
    tensors: Vec<DenseTensor>,
}

impl Record {
    fn expect(&self, name: &str, ints: usize, scalars: usize, tensors: usize) -> Result<()> {
        if self.ints.len() != ints || self.scalars.len() != scalars || self.tensors.len() != tensors {
            return Err(Error::Format(format!(
                "{name} record expects {ints}/{scalars}/{tensors} ints/scalars/tensors, got {}/{}/{}",
                self.ints.len(),
                self.scalars.len(),
                self.tensors.len()
            )));
        }
        Ok(())
    }

    fn take_tensor(&mut self, name: &str, shape: &[usize]) -> Result<DenseTensor> {
        let t = self.tensors.remove(0);
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "{name} tensor has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

fn encode_layer(w: &mut Writer, layer: &Layer) {
    match layer {
        Layer::Conv2d(c) => w.record(
            1,
            &[c.in_channels, c.out_channels, c.kernel, c.stride, c.padding].map(|v| v as u32),
            &[],
            &[&c.weight, &c.bias],
        ),
        Layer::Linear(l) => w.record(
            2,
            &[l.in_features as u32, l.out_features as u32],
            &[],
            &[&l.weight, &l.bias],
        ),
        Layer::AvgPool(p) => w.record(3, &[p.kernel as u32, p.stride as u32], &[], &[]),
        Layer::MaxPool(p) => w.record(4, &[p.kernel as u32, p.stride as u32], &[], &[]),
        Layer::Flatten => w.record(5, &[], &[], &[]),
        Layer::BatchNorm(b) => w.record(
            6,
            &[b.channels as u32],
            &[b.eps],
            &[&b.gamma, &b.beta, &b.running_mean, &b.running_var],
        ),
        Layer::Relu => w.record(7, &[], &[], &[]),
        Layer::Qcfs(q) => w.record(8, &[q.levels], &[q.lambda, q.shift], &[]),
        Layer::If(n) => w.record(9, &[n.levels], &[n.threshold, n.initial_fraction], &[]),
    }
}

fn decode_layer(mut r: Record) -> Result<Layer> {
    let u = |v: u32| v as usize;
    Ok(match r.tag {
        1 => {
            r.expect("conv", 5, 0, 2)?;
            let [cin, cout, k, stride, padding] = [0, 1, 2, 3, 4].map(|i| u(r.ints[i]));
            let weight = r.take_tensor("conv weight", &[cout, cin, k, k])?;
            let bias = r.take_tensor("conv bias", &[cout])?;
            Layer::Conv2d(Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                padding,
                weight,
                bias,
            })
        }
        2 => {
            r.expect("linear", 2, 0, 2)?;
            let (fin, fout) = (u(r.ints[0]), u(r.ints[1]));
            let weight = r.take_tensor("linear weight", &[fout, fin])?;
            let bias = r.take_tensor("linear bias", &[fout])?;
            Layer::Linear(Linear {
                in_features: fin,
                out_features: fout,
                weight,
                bias,
            })
        }
        3 | 4 => {
            r.expect("pool", 2, 0, 0)?;
            let pool = Pool {
                kernel: u(r.ints[0]),
                stride: u(r.ints[1]),
            };
            if r.tag == 3 {
                Layer::AvgPool(pool)
            } else {
                Layer::MaxPool(pool)
            }
        }
        5 => {
            r.expect("flatten", 0, 0, 0)?;
            Layer::Flatten
        }
        6 => {
            r.expect("batchnorm", 1, 1, 4)?;
            let c = u(r.ints[0]);
            Layer::BatchNorm(BatchNorm {
                channels: c,
                eps: r.scalars[0],
                gamma: r.take_tensor("gamma", &[c])?,
                beta: r.take_tensor("beta", &[c])?,
                running_mean: r.take_tensor("running mean", &[c])?,
                running_var: r.take_tensor("running var", &[c])?,
            })
        }
        7 => {
            r.expect("relu", 0, 0, 0)?;
            Layer::Relu
        }
        8 => {
            r.expect("qcfs", 1, 2, 0)?;
            Layer::Qcfs(Qcfs::new(r.scalars[0], r.ints[0], r.scalars[1]).map_err(|e| Error::Format(e.to_string()))?)
        }
        9 => {
            r.expect("if", 1, 2, 0)?;
            let (threshold, initial_fraction) = (r.scalars[0], r.scalars[1]);
            if !(threshold > 0.0 && threshold.is_finite() && initial_fraction.is_finite()) {
                return Err(Error::Format("IF threshold must be positive and finite".into()));
            }
            Layer::If(IfNeuron {
                threshold,
                levels: r.ints[0],
                initial_fraction,
            })
        }
        tag => return Err(Error::Format(format!("unknown layer tag {tag}"))),
    })
}

fn encode_graph(w: &mut Writer, g: &NetworkGraph) {
    w.len(g.input_shape().len());
    for &d in g.input_shape() {
        w.len(d);
    }
    w.len(g.len());
    for layer in g.layers() {
        encode_layer(w, layer);
    }
}

fn decode_graph(r: &mut Reader, mode: Mode) -> Result<NetworkGraph> {
    let input = r.dims()?;
    // Each record is at least 13 bytes: tag plus three counts.
    let n = r.count(13)?;
    let layers = (0..n)
        .map(|_| r.record().and_then(decode_layer))
        .collect::<Result<Vec<_>>>()?;
    NetworkGraph::new(input, layers, mode).map_err(|e| Error::Format(format!("invalid graph: {e}")))
}

fn header(w: &mut Writer, kind: Kind) {
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(kind as u8);
    w.buf.extend_from_slice(&[0; 3]);
}

fn read_header(r: &mut Reader) -> Result<Kind> {
    if r.take(4).map_err(|_| Error::Format("missing header".into()))? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let kind = Kind::from_byte(r.u8()?)?;
    if r.take(3)? != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    Ok(kind)
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut w = Writer::default();
    header(
        &mut w,
        match model.mode() {
            Mode::Ann => Kind::Ann,
            Mode::Snn => Kind::Snn,
        },
    );
    w.u8(u8::from(model.head.is_some()));
    encode_graph(&mut w, &model.backbone);
    if let Some(h) = &model.head {
        encode_graph(&mut w, h);
    }
    w.buf
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let mode = match read_header(&mut r)? {
        Kind::Ann => Mode::Ann,
        Kind::Snn => Mode::Snn,
        Kind::Classifier => return Err(Error::Format("checkpoint holds a classifier, not a network".into())),
    };
    let has_head = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("invalid head flag {b}"))),
    };
    let backbone = decode_graph(&mut r, mode)?;
    let head = if has_head {
        Some(decode_graph(&mut r, mode)?)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Model::new(backbone, head).map_err(|e| Error::Format(format!("invalid model: {e}")))
}

fn config_ints(c: &Stage2Config) -> [u32; 6] {
    [
        c.n_neurons as u32,
        c.batch_size as u32,
        c.epochs as u32,
        c.patience as u32,
        c.timesteps as u32,
        u32::from(c.count_input_spikes),
    ]
}

fn config_scalars(c: &Stage2Config) -> [f32; 15] {
    [
        c.exc,
        c.inh,
        c.theta_plus,
        c.eta_pre,
        c.eta_post,
        c.w_max,
        c.init_w_max,
        c.tau_pre,
        c.tau_post,
        c.tau_theta,
        c.theta_exc,
        c.theta_inh,
        c.tau_membrane,
        c.rate_scale,
        c.weight_norm,
    ]
}

/// Serialises weights, mask, adaptive thresholds and the label readout.
/// Membranes and traces are transient and not stored.
pub fn encode_classifier(state: &ClassifierState) -> Vec<u8> {
    let mut w = Writer::default();
    header(&mut w, Kind::Classifier);
    let n = state.n_neurons();
    let mut ints = vec![state.n_features as u32, state.n_classes as u32];
    ints.extend(config_ints(&state.cfg));
    ints.extend(state.labels.iter().map(|l| l.map_or(UNASSIGNED, |c| c as u32)));
    ints.extend(state.class_counts.iter().map(|&c| c.min(u32::MAX as u64) as u32));
    let weights = DenseTensor::new(vec![state.n_features, n], state.weights.clone()).expect("weight shape");
    let mask = DenseTensor::new(vec![n, n], state.inhibition.iter().map(|&m| m as f32).collect()).expect("mask shape");
    let theta = DenseTensor::new(vec![n], state.theta_adaptive.clone()).expect("theta shape");
    let spec = DenseTensor::new(vec![n], state.specialization.clone()).expect("specialization shape");
    w.record(
        CLASSIFIER_TAG,
        &ints,
        &config_scalars(&state.cfg),
        &[&weights, &mask, &theta, &spec],
    );
    w.buf
}

pub fn decode_classifier(bytes: &[u8]) -> Result<ClassifierState> {
    let mut r = Reader { bytes, pos: 0 };
    if read_header(&mut r)? != Kind::Classifier {
        return Err(Error::Format("checkpoint holds a network, not a classifier".into()));
    }
    let mut rec = r.record()?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    if rec.tag != CLASSIFIER_TAG {
        return Err(Error::Format(format!("unexpected record tag {}", rec.tag)));
    }
    if rec.ints.len() < 8 {
        return Err(Error::Format("classifier record too short".into()));
    }
    let (n_features, n_classes) = (rec.ints[0] as usize, rec.ints[1] as usize);
    let c = &rec.ints[2..8];
    let n = c[0] as usize;
    let expected_ints = n
        .checked_mul(n_classes)
        .and_then(|v| v.checked_add(8 + n))
        .ok_or_else(|| Error::Format("classifier dimensions overflow".into()))?;
    rec.expect("classifier", expected_ints, 15, 4)?;
    let s = &rec.scalars;
    let cfg = Stage2Config {
        n_neurons: n,
        batch_size: c[1] as usize,
        epochs: c[2] as usize,
        patience: c[3] as usize,
        timesteps: c[4] as usize,
        count_input_spikes: c[5] != 0,
        exc: s[0],
        inh: s[1],
        theta_plus: s[2],
        eta_pre: s[3],
        eta_post: s[4],
        w_max: s[5],
        init_w_max: s[6],
        tau_pre: s[7],
        tau_post: s[8],
        tau_theta: s[9],
        theta_exc: s[10],
        theta_inh: s[11],
        tau_membrane: s[12],
        rate_scale: s[13],
        weight_norm: s[14],
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    if n_features == 0 || n_classes == 0 {
        return Err(Error::Format("classifier needs features and classes".into()));
    }
    let labels = rec.ints[8..8 + n]
        .iter()
        .map(|&l| match l {
            UNASSIGNED => Ok(None),
            l if (l as usize) < n_classes => Ok(Some(l as usize)),
            l => Err(Error::Format(format!("label {l} out of range"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let class_counts = rec.ints[8 + n..].iter().map(|&v| v as u64).collect();
    let weights = rec.take_tensor("weights", &[n_features, n])?.into_data();
    let inhibition = rec
        .take_tensor("inhibition", &[n, n])?
        .into_data()
        .into_iter()
        .map(|v| match v {
            0.0 => Ok(0u8),
            1.0 => Ok(1u8),
            _ => Err(Error::Format("inhibition mask must be binary".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    let theta_adaptive = rec.take_tensor("thresholds", &[n])?.into_data();
    let specialization = rec.take_tensor("specialization", &[n])?.into_data();
    Ok(ClassifierState {
        cfg,
        n_features,
        n_classes,
        weights,
        inhibition,
        v_exc: vec![0.0; n],
        v_inh: vec![0.0; n],
        theta_adaptive,
        x_pre: vec![0.0; n_features],
        x_post: vec![0.0; n],
        labels,
        specialization,
        class_counts,
    })
}
