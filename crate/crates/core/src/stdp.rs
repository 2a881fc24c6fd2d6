//! Unsupervised Stage-2 classifier.
//!
//! Backbone firing rates are Poisson-encoded and fed to a layer of
//! excitatory neurons with adaptive thresholds. Each excitatory neuron
//! drives a paired inhibitory unit which, when it fires, suppresses every
//! other excitatory neuron. Feed-forward weights learn with a trace-based
//! pair STDP rule; labels are assigned afterwards from firing statistics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcfs::sample_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonEncoderConfig {
    pub timesteps: usize,
    pub seed: u64,
    pub rate_scale: f32,
}

/// Binary `[T, N]` spike raster stored as the active indices of each step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTrain {
    pub neurons: usize,
    pub events: Vec<Vec<u32>>,
}

impl SpikeTrain {
    pub fn timesteps(&self) -> usize {
        self.events.len()
    }

    pub fn total_spikes(&self) -> u64 {
        self.events.iter().map(|e| e.len() as u64).sum()
    }

    /// Per-neuron spike counts over the whole train.
    pub fn counts(&self) -> Vec<u32> {
        let mut counts = vec![0; self.neurons];
        for step in &self.events {
            for &i in step {
                counts[i as usize] += 1;
            }
        }
        counts
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        self.events
            .iter()
            .map(|step| {
                let mut row = vec![false; self.neurons];
                for &i in step {
                    row[i as usize] = true;
                }
                row
            })
            .collect()
    }
}

/// Independent Bernoulli draws with `p_i = clip(rate_i * scale, 0, 1)`.
pub fn poisson_encode(rates: &[f32], cfg: &PoissonEncoderConfig) -> Result<SpikeTrain> {
    if let Some((index, &value)) = rates.iter().enumerate().find(|(_, &r)| r.is_nan() || r < 0.0) {
        return Err(Error::NegativeRate { index, value });
    }
    let probs: Vec<f32> = rates.iter().map(|r| (r * cfg.rate_scale).clamp(0.0, 1.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let events = (0..cfg.timesteps)
        .map(|_| {
            probs
                .iter()
                .enumerate()
                .filter_map(|(i, &p)| {
                    // A draw is consumed for every (t, i) so trains stay
                    // aligned across rate changes.
                    let u: f32 = rng.gen();
                    (u < p).then_some(i as u32)
                })
                .collect()
        })
        .collect();
    Ok(SpikeTrain {
        neurons: rates.len(),
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub n_neurons: usize,
    /// Excitatory-to-inhibitory connection strength.
    pub exc: f32,
    /// Inhibitory-to-excitatory connection strength.
    pub inh: f32,
    /// Threshold increment per excitatory spike.
    pub theta_plus: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Depression rate applied on presynaptic spikes.
    pub eta_pre: f32,
    /// Potentiation rate applied on postsynaptic spikes.
    pub eta_post: f32,
    /// Presentation length `T_c` in timesteps.
    pub timesteps: usize,
    pub w_max: f32,
    /// Initial weights are drawn from `U(0, init_w_max)`.
    pub init_w_max: f32,
    pub tau_pre: f32,
    pub tau_post: f32,
    pub tau_theta: f32,
    /// Baseline excitatory threshold.
    pub theta_exc: f32,
    pub theta_inh: f32,
    /// Membrane leak time constant of the excitatory layer; 0 disables the
    /// leak.
    pub tau_membrane: f32,
    pub rate_scale: f32,
    /// Target mean incoming weight per neuron after every update; 0
    /// disables normalisation.
    pub weight_norm: f32,
    /// Count Poisson input spikes as synaptic operations.
    pub count_input_spikes: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            n_neurons: 500,
            exc: 35.0,
            inh: 200.0,
            theta_plus: 0.0105,
            batch_size: 32,
            epochs: 10,
            patience: 3,
            eta_pre: 1e-5,
            eta_post: 1e-3,
            timesteps: 300,
            w_max: 1.0,
            init_w_max: 0.3,
            tau_pre: 20.0,
            tau_post: 20.0,
            tau_theta: 1e5,
            theta_exc: 13.0,
            theta_inh: 20.0,
            tau_membrane: 0.0,
            rate_scale: 0.1,
            weight_norm: 0.1,
            count_input_spikes: true,
        }
    }
}

pub const EXC_RANGE: (f32, f32) = (20.0, 50.0);
pub const INH_RANGE: (f32, f32) = (150.0, 250.0);
pub const THETA_PLUS_RANGE: (f32, f32) = (0.001, 0.02);

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_neurons", self.n_neurons as f32),
            ("batch_size", self.batch_size as f32),
            ("timesteps", self.timesteps as f32),
            ("w_max", self.w_max),
            ("tau_pre", self.tau_pre),
            ("tau_post", self.tau_post),
            ("tau_theta", self.tau_theta),
            ("theta_exc", self.theta_exc),
            ("theta_inh", self.theta_inh),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("stage2.{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("exc", self.exc),
            ("inh", self.inh),
            ("theta_plus", self.theta_plus),
            ("eta_pre", self.eta_pre),
            ("eta_post", self.eta_post),
            ("init_w_max", self.init_w_max),
            ("tau_membrane", self.tau_membrane),
            ("rate_scale", self.rate_scale),
            ("weight_norm", self.weight_norm),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("stage2.{name} must be non-negative, got {v}")));
            }
        }
        if self.init_w_max > self.w_max {
            return Err(Error::Config("stage2.init_w_max exceeds w_max".into()));
        }
        Ok(())
    }

    fn decay(tau: f32) -> f32 {
        (-1.0 / tau).exp()
    }
}

/// Mutable state of the classifier: weights, membranes, traces, adaptive
/// thresholds and the label/specialisation readout.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub cfg: Stage2Config,
    pub n_features: usize,
    pub n_classes: usize,
    /// Feed-forward weights `[n_features, n_neurons]`, row-major by input.
    pub weights: Vec<f32>,
    /// Inhibition mask `[n_neurons, n_neurons]`; entry `(k, j)` is 1 when
    /// inhibitory unit `k` suppresses excitatory neuron `j`.
    pub inhibition: Vec<u8>,
    pub v_exc: Vec<f32>,
    pub v_inh: Vec<f32>,
    /// Adaptive threshold component (the baseline is `cfg.theta_exc`).
    pub theta_adaptive: Vec<f32>,
    pub x_pre: Vec<f32>,
    pub x_post: Vec<f32>,
    pub labels: Vec<Option<usize>>,
    pub specialization: Vec<f32>,
    /// Firing counts `[n_neurons, n_classes]` from the last label assignment.
    pub class_counts: Vec<u64>,
}

/// Inhibition mask where every unit suppresses all others but itself.
pub fn all_but_self_mask(n: usize) -> Vec<u8> {
    (0..n * n).map(|i| u8::from(i / n != i % n)).collect()
}

impl ClassifierState {
    pub fn new(n_features: usize, n_classes: usize, cfg: &Stage2Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_features == 0 || n_classes == 0 {
            return Err(Error::InvalidParameter("classifier needs features and classes".into()));
        }
        let n = cfg.n_neurons;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..n_features * n)
            .map(|_| {
                if cfg.init_w_max > 0.0 {
                    rng.gen_range(0.0..cfg.init_w_max)
                } else {
                    0.0
                }
            })
            .collect();
        let mut state = Self {
            cfg: cfg.clone(),
            n_features,
            n_classes,
            weights,
            inhibition: all_but_self_mask(n),
            v_exc: vec![0.0; n],
            v_inh: vec![0.0; n],
            theta_adaptive: vec![0.0; n],
            x_pre: vec![0.0; n_features],
            x_post: vec![0.0; n],
            labels: vec![None; n],
            specialization: vec![0.0; n],
            class_counts: vec![0; n * n_classes],
        };
        state.normalize_weights();
        Ok(state)
    }

    pub fn n_neurons(&self) -> usize {
        self.cfg.n_neurons
    }

    pub fn threshold(&self, j: usize) -> f32 {
        self.cfg.theta_exc + self.theta_adaptive[j]
    }

    /// Clears membranes and traces between presentations. Adaptive
    /// thresholds persist.
    pub fn reset_presentation(&mut self) {
        self.v_exc.fill(0.0);
        self.v_inh.fill(0.0);
        self.x_pre.fill(0.0);
        self.x_post.fill(0.0);
    }

    /// Rescales each neuron's incoming weights to the configured mean, then
    /// clamps to `[0, w_max]`.
    pub fn normalize_weights(&mut self) {
        let n = self.n_neurons();
        if self.cfg.weight_norm > 0.0 {
            let mut sums = vec![0.0f32; n];
            for row in self.weights.chunks_exact(n) {
                for (s, w) in sums.iter_mut().zip(row) {
                    *s += w;
                }
            }
            let target = self.cfg.weight_norm * self.n_features as f32;
            let factors: Vec<f32> = sums.iter().map(|&s| if s > 0.0 { target / s } else { 1.0 }).collect();
            for row in self.weights.chunks_exact_mut(n) {
                for (w, f) in row.iter_mut().zip(&factors) {
                    *w *= f;
                }
            }
        }
        let w_max = self.cfg.w_max;
        for w in &mut self.weights {
            *w = w.clamp(0.0, w_max);
        }
    }
}

/// Excitatory and inhibitory spikes of one timestep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepSpikes {
    pub exc: Vec<u32>,
    pub inh: Vec<u32>,
}

/// Subtracts `inh` from every excitatory membrane targeted by a spiking
/// inhibitory unit.
pub fn apply_lateral_inhibition(v_exc: &mut [f32], inh_spikes: &[u32], mask: &[u8], inh: f32) {
    let n = v_exc.len();
    for &k in inh_spikes {
        let row = &mask[k as usize * n..(k as usize + 1) * n];
        for (v, &m) in v_exc.iter_mut().zip(row) {
            if m != 0 {
                *v -= inh;
            }
        }
    }
}

/// Membrane update for one timestep of input spikes (active input indices).
pub fn classifier_step(state: &mut ClassifierState, input: &[u32]) -> StepSpikes {
    let n = state.n_neurons();
    if state.cfg.tau_membrane > 0.0 {
        let d = Stage2Config::decay(state.cfg.tau_membrane);
        for v in &mut state.v_exc {
            *v *= d;
        }
    }
    for &i in input {
        let row = &state.weights[i as usize * n..(i as usize + 1) * n];
        for (v, w) in state.v_exc.iter_mut().zip(row) {
            *v += w;
        }
    }
    let exc: Vec<u32> = (0..n)
        .filter(|&j| state.v_exc[j] >= state.threshold(j))
        .map(|j| j as u32)
        .collect();
    for &j in &exc {
        state.v_inh[j as usize] += state.cfg.exc;
    }
    let theta_inh = state.cfg.theta_inh;
    let inh: Vec<u32> = state
        .v_inh
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= theta_inh)
        .map(|(k, _)| k as u32)
        .collect();
    apply_lateral_inhibition(&mut state.v_exc, &inh, &state.inhibition, state.cfg.inh);
    for &j in &exc {
        state.v_exc[j as usize] = 0.0;
    }
    for &k in &inh {
        state.v_inh[k as usize] = 0.0;
    }
    for v in &mut state.v_exc {
        *v = v.max(0.0);
    }
    StepSpikes { exc, inh }
}

/// Decays and bumps the STDP traces, then applies the pair rule to `target`:
/// `+eta_post * x_pre[i]` on a postsynaptic spike at `j`, and
/// `-eta_pre * x_post[j]` on a presynaptic spike at `i`. When `w_max` is given
/// `target` holds weights and is clamped to `[0, w_max]`; otherwise it
/// accumulates raw deltas.
fn stdp_apply(
    state_traces: (&mut [f32], &mut [f32]),
    cfg: &Stage2Config,
    input: &[u32],
    exc: &[u32],
    target: &mut [f32],
    w_max: Option<f32>,
) {
    let (x_pre, x_post) = state_traces;
    let n = x_post.len();
    let d_pre = Stage2Config::decay(cfg.tau_pre);
    let d_post = Stage2Config::decay(cfg.tau_post);
    for x in x_pre.iter_mut() {
        *x *= d_pre;
    }
    for x in x_post.iter_mut() {
        *x *= d_post;
    }
    for &i in input {
        x_pre[i as usize] += 1.0;
    }
    for &j in exc {
        x_post[j as usize] += 1.0;
    }
    if cfg.eta_pre > 0.0 {
        for &i in input {
            let row = &mut target[i as usize * n..(i as usize + 1) * n];
            for (w, &xp) in row.iter_mut().zip(x_post.iter()) {
                *w -= cfg.eta_pre * xp;
            }
        }
    }
    if cfg.eta_post > 0.0 {
        for &j in exc {
            for (i, &xp) in x_pre.iter().enumerate() {
                if xp != 0.0 {
                    target[i * n + j as usize] += cfg.eta_post * xp;
                }
            }
        }
    }
    if let Some(w_max) = w_max {
        for &i in input {
            for w in &mut target[i as usize * n..(i as usize + 1) * n] {
                *w = w.clamp(0.0, w_max);
            }
        }
        for &j in exc {
            for i in 0..x_pre.len() {
                let w = &mut target[i * n + j as usize];
                *w = w.clamp(0.0, w_max);
            }
        }
    }
}

/// Online STDP update of the classifier weights for one timestep.
pub fn stdp_update(state: &mut ClassifierState, input: &[u32], exc: &[u32]) {
    let w_max = state.cfg.w_max;
    let cfg = state.cfg.clone();
    stdp_apply(
        (&mut state.x_pre, &mut state.x_post),
        &cfg,
        input,
        exc,
        &mut state.weights,
        Some(w_max),
    );
}

/// Exponential decay of the adaptive threshold component, then `+theta_plus`
/// for every neuron that fired.
pub fn adapt_thresholds(state: &mut ClassifierState, exc: &[u32]) {
    let d = Stage2Config::decay(state.cfg.tau_theta);
    for t in &mut state.theta_adaptive {
        *t *= d;
    }
    for &j in exc {
        state.theta_adaptive[j as usize] += state.cfg.theta_plus;
    }
}

/// Spike totals of one presentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PresentationRecord {
    /// Excitatory spike count per neuron.
    pub counts: Vec<u32>,
    pub input_spikes: u64,
    pub exc_spikes: u64,
    pub inh_spikes: u64,
}

impl PresentationRecord {
    pub fn sops(&self, count_input: bool) -> u64 {
        self.exc_spikes + self.inh_spikes + if count_input { self.input_spikes } else { 0 }
    }
}

/// Runs one presentation. With `learn = Some(delta)`, STDP deltas are
/// accumulated into `delta` (weights stay fixed) and thresholds adapt;
/// otherwise the classifier runs frozen.
pub fn present(state: &mut ClassifierState, train: &SpikeTrain, mut learn: Option<&mut [f32]>) -> PresentationRecord {
    state.reset_presentation();
    let mut counts = vec![0u32; state.n_neurons()];
    let mut inh_spikes = 0u64;
    let cfg = state.cfg.clone();
    for input in &train.events {
        let spikes = classifier_step(state, input);
        for &j in &spikes.exc {
            counts[j as usize] += 1;
        }
        inh_spikes += spikes.inh.len() as u64;
        if let Some(delta) = learn.as_deref_mut() {
            stdp_apply(
                (&mut state.x_pre, &mut state.x_post),
                &cfg,
                input,
                &spikes.exc,
                delta,
                None,
            );
            adapt_thresholds(state, &spikes.exc);
        }
    }
    let exc_spikes = counts.iter().map(|&c| c as u64).sum();
    PresentationRecord {
        counts,
        input_spikes: train.total_spikes(),
        exc_spikes,
        inh_spikes,
    }
}

/// Elementwise maximum over per-sample delta matrices.
pub fn reduce_max(deltas: &[Vec<f32>]) -> Vec<f32> {
    let mut out = deltas.first().cloned().unwrap_or_default();
    for d in deltas.iter().skip(1) {
        for (o, &v) in out.iter_mut().zip(d) {
            if v > *o {
                *o = v;
            }
        }
    }
    out
}

/// Assigns each neuron the class that most often made it fire and the
/// fraction of its spikes that class accounts for. Silent neurons stay
/// unassigned with specialisation 0.
pub fn assign_labels(state: &mut ClassifierState, counts: &[Vec<u32>], labels: &[usize]) {
    let (n, c) = (state.n_neurons(), state.n_classes);
    let mut matrix = vec![0u64; n * c];
    for (sample_counts, &label) in counts.iter().zip(labels) {
        for (j, &k) in sample_counts.iter().enumerate() {
            matrix[j * c + label] += k as u64;
        }
    }
    for j in 0..n {
        let row = &matrix[j * c..(j + 1) * c];
        let total: u64 = row.iter().sum();
        if total == 0 {
            state.labels[j] = None;
            state.specialization[j] = 0.0;
            continue;
        }
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        state.labels[j] = Some(best);
        state.specialization[j] = row[best] as f32 / total as f32;
    }
    state.class_counts = matrix;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Class(usize),
    Abstain,
}

/// Per-class scores `sum(count * specialization)` over the neurons assigned
/// to each class.
pub fn class_scores(state: &ClassifierState, counts: &[u32]) -> Vec<f32> {
    let mut scores = vec![0.0f32; state.n_classes];
    for (j, &k) in counts.iter().enumerate() {
        if let Some(label) = state.labels[j] {
            scores[label] += k as f32 * state.specialization[j];
        }
    }
    scores
}

/// Highest-scoring class, ties to the lowest index; abstains when every
/// score is zero.
pub fn predict(state: &ClassifierState, counts: &[u32]) -> Prediction {
    let scores = class_scores(state, counts);
    match crate::tensor::argmax(&scores) {
        Some(c) if scores[c] > 0.0 => Prediction::Class(c),
        _ => Prediction::Abstain,
    }
}

/// Backbone feature vector of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub rates: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub val_acc: f32,
    pub val_abstain: usize,
    pub train_exc_spikes: u64,
    pub assigned_neurons: usize,
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub state: ClassifierState,
    pub best_epoch: usize,
    pub best_val_acc: f32,
    pub log: Vec<Stage2Epoch>,
}

/// Evaluation results of a frozen classifier over a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<PresentationRecord>,
    pub predictions: Vec<Prediction>,
    pub accuracy: f32,
    pub abstained: usize,
}

fn encoder(cfg: &Stage2Config, seed: u64) -> PoissonEncoderConfig {
    PoissonEncoderConfig {
        timesteps: cfg.timesteps,
        seed,
        rate_scale: cfg.rate_scale,
    }
}

/// Frozen presentations of every sample (thresholds and weights fixed).
pub fn run_frozen(state: &ClassifierState, data: &[FeatureSample], seed: u64) -> Result<Vec<PresentationRecord>> {
    data.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let train = poisson_encode(&s.rates, &encoder(&state.cfg, sample_seed(seed, u64::MAX, i as u64)))?;
            let mut local = state.clone();
            Ok(present(&mut local, &train, None))
        })
        .collect()
}

pub fn evaluate(state: &ClassifierState, data: &[FeatureSample], seed: u64) -> Result<Evaluation> {
    let records = run_frozen(state, data, seed)?;
    let predictions: Vec<Prediction> = records.iter().map(|r| predict(state, &r.counts)).collect();
    let correct = predictions
        .iter()
        .zip(data)
        .filter(|(p, s)| **p == Prediction::Class(s.label))
        .count();
    let abstained = predictions.iter().filter(|p| **p == Prediction::Abstain).count();
    Ok(Evaluation {
        accuracy: if data.is_empty() {
            0.0
        } else {
            correct as f32 / data.len() as f32
        },
        records,
        predictions,
        abstained,
    })
}

/// Frozen run over labelled data followed by label assignment. Returns the
/// total excitatory spike count.
pub fn calibrate_labels(state: &mut ClassifierState, data: &[FeatureSample], seed: u64) -> Result<u64> {
    let records = run_frozen(state, data, seed)?;
    let counts: Vec<Vec<u32>> = records.iter().map(|r| r.counts.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    assign_labels(state, &counts, &labels);
    Ok(records.iter().map(|r| r.exc_spikes).sum())
}

/// One minibatch: every sample is simulated from the same weights and
/// thresholds, per-sample weight deltas are reduced by elementwise maximum
/// and applied once, and threshold increments are summed.
pub fn train_batch(
    state: &mut ClassifierState,
    batch: &[(usize, &FeatureSample)],
    seed: u64,
    epoch: usize,
) -> Result<()> {
    let decay_total = Stage2Config::decay(state.cfg.tau_theta).powi(state.cfg.timesteps as i32);
    let results = batch
        .par_iter()
        .map(|&(i, s)| {
            let train = poisson_encode(
                &s.rates,
                &encoder(&state.cfg, sample_seed(seed, epoch as u64, i as u64)),
            )?;
            let mut local = state.clone();
            let mut delta = vec![0.0f32; state.weights.len()];
            present(&mut local, &train, Some(&mut delta));
            Ok((delta, local.theta_adaptive))
        })
        .collect::<Result<Vec<_>>>()?;
    let (deltas, thetas): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let delta = reduce_max(&deltas);
    for (w, d) in state.weights.iter_mut().zip(&delta) {
        *w += d;
    }
    state.normalize_weights();
    let decayed: Vec<f32> = state.theta_adaptive.iter().map(|t| t * decay_total).collect();
    for (j, t) in state.theta_adaptive.iter_mut().enumerate() {
        *t = decayed[j] + thetas.iter().map(|th| th[j] - decayed[j]).sum::<f32>();
        *t = t.max(0.0);
    }
    Ok(())
}

/// Minibatch STDP training with per-epoch label assignment, validation and
/// early stopping. Returns the best-validation state.
pub fn train_stage2(
    train: &[FeatureSample],
    val: &[FeatureSample],
    n_classes: usize,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("stage-2 training features".into()));
    }
    let n_features = train[0].rates.len();
    if train.iter().chain(val).any(|s| s.rates.len() != n_features) {
        return Err(Error::Data("feature vectors differ in length".into()));
    }
    let mut state = ClassifierState::new(n_features, n_classes, cfg, seed)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 1, 0));
    let mut best: Option<(ClassifierState, usize, f32)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &FeatureSample)> = chunk.iter().map(|&i| (i, &train[i])).collect();
            train_batch(&mut state, &batch, seed, epoch)?;
        }
        let spikes = calibrate_labels(&mut state, train, sample_seed(seed, 2, epoch as u64))?;
        if spikes == 0 {
            return Err(Error::SilentClassifier { epoch });
        }
        let eval = evaluate(&state, val, sample_seed(seed, 3, epoch as u64))?;
        log.push(Stage2Epoch {
            epoch,
            val_acc: eval.accuracy,
            val_abstain: eval.abstained,
            train_exc_spikes: spikes,
            assigned_neurons: state.labels.iter().filter(|l| l.is_some()).count(),
        });
        log::info!("stage2 epoch {epoch}: val_acc {:.3} spikes {spikes}", eval.accuracy);
        // Ties move the checkpoint to the later, longer-trained state but
        // only a strict gain resets the patience counter.
        let best_acc = best.as_ref().map(|b| b.2);
        if best_acc.is_none_or(|acc| eval.accuracy >= acc) {
            best = Some((state.clone(), epoch, eval.accuracy));
        }
        if best_acc.is_none_or(|acc| eval.accuracy > acc) {
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (state, best_epoch, best_val_acc) = match best {
        Some(b) => b,
        None => {
            let spikes = calibrate_labels(&mut state, train, sample_seed(seed, 2, 0))?;
            if spikes == 0 {
                return Err(Error::SilentClassifier { epoch: 0 });
            }
            let acc = evaluate(&state, val, sample_seed(seed, 3, 0))?.accuracy;
            (state, 0, acc)
        }
    };
    Ok(Stage2Outcome {
        state,
        best_epoch,
        best_val_acc,
        log,
    })
}

/// Shannon entropy of the normalised count distribution divided by
/// `ln(len)`; 0 for a single active neuron or no spikes, 1 for uniform.
pub fn normalized_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h / (counts.len() as f64).ln()
}
