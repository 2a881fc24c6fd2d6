//! The individual pipeline steps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::*;
use crate::data::folder::load_image;
use crate::energy::{flop_breakdown, write_energy_table, EnergyReport, EnergyRow};
use crate::format::{decode_classifier, decode_model, encode_classifier, encode_model};
use crate::graph::Model;
use crate::qcfs::{evaluate_ann, sample_seed, surgery, train_stage1, Stage1Outcome, SupervisedHead};
use crate::snn::{accuracy_vs_timesteps, convert, extract_features, forward_snn, AccuracyRow};
use crate::stdp::{
    class_scores, evaluate, poisson_encode, predict, present, train_stage2, ClassifierState, Evaluation,
    PoissonEncoderConfig, Prediction, Stage2Config,
};

/// Poisson stream used for test-set evaluation of a classifier trained
/// with `seed`.
pub(crate) fn test_seed(seed: u64) -> u64 {
    sample_seed(seed, 4, 0)
}

fn infer_seed(seed: u64) -> u64 {
    sample_seed(seed, 5, 0)
}

/// Writes `classes.txt` and the split manifest.
pub fn prepare(run: &Run, splits: &Splits) -> Result<()> {
    write_lines(run, CLASSES_FILE, splits.class_names())?;
    let mut rows = splits.train.manifest_rows();
    rows.extend(splits.val.manifest_rows());
    rows.extend(splits.test.manifest_rows());
    let mut buf = Vec::new();
    crate::data::write_manifest(&mut buf, &rows)?;
    run.write(MANIFEST_FILE, &buf)
}

fn check_image_size(run: &Run, splits: &Splits) -> Result<()> {
    let size = run.config.dataset.image_size();
    match splits.train.image_shape() {
        Some(s) if s == [3, size, size] => Ok(()),
        Some(s) => Err(Error::Data(format!(
            "images have shape {s:?}, config expects [3, {size}, {size}]"
        ))),
        None => Err(Error::EmptyDataset("training split".into())),
    }
}

/// Builds the backbone, applies the QCFS surgery and trains backbone and
/// head with supervision. Writes `ann.spkf` and the per-epoch metrics.
pub fn train_ann(run: &Run, splits: &Splits) -> Result<Stage1Outcome> {
    check_image_size(run, splits)?;
    let cfg = &run.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.stage1);
    let raw = cfg.backbone.build(cfg.dataset.image_size(), &mut rng)?;
    let backbone = surgery(&raw, &cfg.stage1.qcfs())?;
    let head = SupervisedHead::new(
        backbone.output_shape()[0],
        cfg.stage1.head_hidden,
        splits.n_classes(),
        &cfg.stage1.qcfs(),
        &mut rng,
    )?;
    let outcome = train_stage1(
        backbone,
        head,
        &splits.train.samples,
        &splits.val.samples,
        &cfg.stage1,
        cfg.seeds.stage1,
    )?;
    run.write(ANN_FILE, &encode_model(&outcome.best))?;
    run.write_csv(STAGE1_METRICS_FILE, &outcome.log)?;
    Ok(outcome)
}

pub(crate) fn load_model(run: &Run, name: &str) -> Result<Model> {
    decode_model(&run.read(name)?)
}

pub(crate) fn load_classifier(run: &Run, name: &str) -> Result<ClassifierState> {
    decode_classifier(&run.read(name)?)
}

/// Converts `ann.spkf` into the spiking model `snn.spkf`.
pub fn convert_ann(run: &Run) -> Result<Model> {
    let snn = convert(&load_model(run, ANN_FILE)?)?;
    run.write(SNN_FILE, &encode_model(&snn))?;
    Ok(snn)
}

/// Test accuracy of the converted model at each backbone timestep count,
/// preceded by the `T = 0` ANN baseline.
pub fn eval_snn(run: &Run, splits: &Splits, t_list: Option<&[usize]>) -> Result<Vec<AccuracyRow>> {
    let snn = load_model(run, SNN_FILE)?;
    let rows = accuracy_vs_timesteps(&snn, &splits.test.samples, t_list.unwrap_or(&run.config.snn.t_b_list))?;
    run.write_csv(ACCURACY_TB_FILE, &rows)?;
    Ok(rows)
}

fn extract_all(run: &Run, splits: &Splits) -> Result<Features> {
    let snn = load_model(run, SNN_FILE)?;
    let t = run.config.snn.feature_timesteps;
    let split = |ds: &crate::data::LabeledDataset| -> Result<(Vec<FeatureSample>, Vec<u64>)> {
        let out = extract_features(&snn, &ds.samples, t)?;
        Ok(out
            .into_iter()
            .zip(&ds.samples)
            .map(|((rates, sops), s)| (FeatureSample { rates, label: s.label }, sops))
            .unzip())
    };
    let (train, train_sops) = split(&splits.train)?;
    let (val, val_sops) = split(&splits.val)?;
    let (test, test_sops) = split(&splits.test)?;
    let features = Features {
        train,
        val,
        test,
        test_sops,
    };
    run.write(FEATURES_FILE, &encode_features(&features, &train_sops, &val_sops)?)?;
    Ok(features)
}

pub fn read_features(run: &Run) -> Result<Features> {
    decode_features(&run.read(FEATURES_FILE)?)
}

/// Feature table of the run, extracted when absent.
pub(crate) fn features(run: &Run, splits: &Splits) -> Result<Features> {
    if run.path(FEATURES_FILE).is_file() {
        read_features(run)
    } else {
        extract_all(run, splits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub best_epoch: usize,
    pub val_accuracy: f32,
    pub test_accuracy: f32,
    pub test_abstained: usize,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    index: usize,
    name: &'a str,
    label: &'a str,
    predicted: &'a str,
    correct: bool,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct TcRow {
    pub timesteps: usize,
    pub seed: u64,
    pub accuracy: f32,
    pub status: String,
}

fn counts_table(eval: &Evaluation, data: &[FeatureSample], n_neurons: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["index", "label", "input_spikes", "exc_spikes", "inh_spikes"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_neurons).map(|j| format!("n{j}")));
    w.write_record(&header)?;
    for (i, (r, s)) in eval.records.iter().zip(data).enumerate() {
        let mut rec = vec![
            i.to_string(),
            s.label.to_string(),
            r.input_spikes.to_string(),
            r.exc_spikes.to_string(),
            r.inh_spikes.to_string(),
        ];
        rec.extend(r.counts.iter().map(u32::to_string));
        w.write_record(&rec)?;
    }
    into_bytes(w)
}

/// Extracts backbone features, trains the classifier with early stopping,
/// evaluates it on the test split and sweeps the presentation length.
pub fn train_stdp(run: &Run, splits: &Splits) -> Result<Stage2Summary> {
    let cfg = &run.config;
    let features = extract_all(run, splits)?;
    let n_classes = splits.n_classes();
    let outcome = train_stage2(&features.train, &features.val, n_classes, &cfg.stage2, cfg.seeds.stage2)?;
    run.write(CLASSIFIER_FILE, &encode_classifier(&outcome.state))?;
    run.write_csv(STAGE2_METRICS_FILE, &outcome.log)?;

    let eval = evaluate(&outcome.state, &features.test, test_seed(cfg.seeds.stage2))?;
    let names = splits.class_names();
    let rows: Vec<PredictionRow> = eval
        .predictions
        .iter()
        .zip(&splits.test.samples)
        .enumerate()
        .map(|(index, (p, s))| PredictionRow {
            index,
            name: &s.name,
            label: &names[s.label],
            predicted: match p {
                Prediction::Class(c) => &names[*c],
                Prediction::Abstain => "abstain",
            },
            correct: *p == Prediction::Class(s.label),
        })
        .collect();
    run.write_csv(PREDICTIONS_FILE, &rows)?;
    run.write(
        COUNTS_FILE,
        &counts_table(&eval, &features.test, outcome.state.n_neurons())?,
    )?;

    let mut tc_rows = Vec::new();
    for &t in &cfg.snn.t_c_list {
        for &seed in &cfg.seeds.sweep {
            let c = Stage2Config {
                timesteps: t,
                ..cfg.stage2.clone()
            };
            let row = match train_stage2(&features.train, &features.val, n_classes, &c, seed) {
                Ok(o) => TcRow {
                    timesteps: t,
                    seed,
                    accuracy: evaluate(&o.state, &features.test, test_seed(seed))?.accuracy,
                    status: "ok".into(),
                },
                Err(Error::SilentClassifier { .. }) => TcRow {
                    timesteps: t,
                    seed,
                    accuracy: 0.0,
                    status: "silent".into(),
                },
                Err(e) => return Err(e),
            };
            log::info!("T_c {t} seed {seed}: test accuracy {:.4}", row.accuracy);
            tc_rows.push(row);
        }
    }
    run.write_csv(ACCURACY_TC_FILE, &tc_rows)?;

    Ok(Stage2Summary {
        best_epoch: outcome.best_epoch,
        val_accuracy: outcome.best_val_acc,
        test_accuracy: eval.accuracy,
        test_abstained: eval.abstained,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// `None` when the classifier abstains.
    pub class: Option<String>,
    pub class_names: Vec<String>,
    pub scores: Vec<f32>,
}

/// Classifies one image file with the spiking backbone and the trained
/// classifier.
pub fn infer(run: &Run, image: &Path) -> Result<Inference> {
    let cfg = &run.config;
    let snn = load_model(run, SNN_FILE)?;
    let mut clf = load_classifier(run, CLASSIFIER_FILE)?;
    let class_names = read_classes(run)?;
    if !image.is_file() {
        return Err(Error::MissingInput(image.to_path_buf()));
    }
    if class_names.len() != clf.n_classes {
        return Err(Error::Data(format!(
            "{} lists {} classes, the classifier has {}",
            CLASSES_FILE,
            class_names.len(),
            clf.n_classes
        )));
    }
    let x = load_image(image, cfg.dataset.image_size())?;
    let backbone = Model::new(snn.backbone, None)?;
    let rates = forward_snn(&backbone, &x, cfg.snn.feature_timesteps)?.rates;
    if rates.len() != clf.n_features {
        return Err(Error::Data(format!(
            "backbone emits {} features, the classifier expects {}",
            rates.len(),
            clf.n_features
        )));
    }
    let train = poisson_encode(
        &rates,
        &PoissonEncoderConfig {
            timesteps: clf.cfg.timesteps,
            seed: infer_seed(cfg.seeds.stage2),
            rate_scale: clf.cfg.rate_scale,
        },
    )?;
    let record = present(&mut clf, &train, None);
    let scores = class_scores(&clf, &record.counts);
    let class = match predict(&clf, &record.counts) {
        Prediction::Class(c) => Some(class_names[c].clone()),
        Prediction::Abstain => None,
    };
    Ok(Inference {
        class,
        class_names,
        scores,
    })
}

#[derive(Serialize)]
struct BreakdownRow {
    term: String,
    count: u64,
    energy_j: String,
}

#[derive(Deserialize)]
struct CountsHead {
    input_spikes: u64,
    exc_spikes: u64,
    inh_spikes: u64,
}

fn read_counts_heads(run: &Run) -> Result<Vec<CountsHead>> {
    let bytes = run.read(COUNTS_FILE)?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let headers = r.headers()?.clone();
    let mut out = Vec::new();
    for rec in r.records() {
        out.push(rec?.deserialize(Some(&headers))?);
    }
    Ok(out)
}

/// Per-image energy of the conventional network (backbone and supervised
/// head, FLOPs) against the spiking pipeline (backbone spikes over `T_b`
/// plus classifier spikes over `T_c`) on the test split.
pub fn energy(run: &Run, splits: &Splits) -> Result<EnergyRow> {
    let cfg = &run.config;
    let ann = load_model(run, ANN_FILE)?;
    let features = read_features(run)?;
    let counts = read_counts_heads(run)?;
    if counts.len() != features.test_sops.len() || counts.len() != splits.test.len() {
        return Err(Error::Data(format!(
            "{COUNTS_FILE}, {FEATURES_FILE} and the test split disagree on the sample count"
        )));
    }
    let mut flop_terms = Vec::new();
    for (part, graph) in [("backbone", Some(&ann.backbone)), ("head", ann.head.as_ref())] {
        if let Some(g) = graph {
            for l in flop_breakdown(g)? {
                flop_terms.push((format!("ann/{part}/{}", l.name), l.count));
            }
        }
    }
    let flops: u64 = flop_terms.iter().map(|t| t.1).sum();
    let include_input = cfg.stage2.count_input_spikes;
    let per_sample: Vec<EnergyReport> = counts
        .iter()
        .zip(&features.test_sops)
        .map(|(c, &bb)| {
            let clf = c.exc_spikes + c.inh_spikes + if include_input { c.input_spikes } else { 0 };
            EnergyReport::new(flops, bb + clf, &cfg.energy)
        })
        .collect();
    let total = EnergyReport::sum(&per_sample);
    let n = per_sample.len();

    let ann_accuracy = evaluate_ann(&ann, &splits.test.samples)?;
    let preds = run.read(PREDICTIONS_FILE)?;
    let mut r = csv::Reader::from_reader(&preds[..]);
    let headers = r.headers()?.clone();
    let correct_col = headers
        .iter()
        .position(|h| h == "correct")
        .ok_or_else(|| Error::Data(format!("{PREDICTIONS_FILE} has no correct column")))?;
    let mut correct = 0usize;
    let mut rows = 0usize;
    for rec in r.records() {
        rows += 1;
        correct += usize::from(&rec?[correct_col] == "true");
    }
    let snn_accuracy = if rows == 0 { 0.0 } else { correct as f32 / rows as f32 };

    let row = EnergyRow::new(&cfg.backbone.name, ann_accuracy, snn_accuracy, &total, n);
    let mut buf = Vec::new();
    write_energy_table(&mut buf, std::slice::from_ref(&row))?;
    run.write(ENERGY_FILE, &buf)?;

    let sum = |f: fn(&CountsHead) -> u64| counts.iter().map(f).sum::<u64>();
    let mut terms: Vec<(String, u64, f64)> = flop_terms
        .into_iter()
        .map(|(name, c)| {
            let total = c * n as u64;
            (name, total, total as f64 * cfg.energy.flop_fj)
        })
        .collect();
    let sop = |name: &str, c: u64| (name.to_string(), c, c as f64 * cfg.energy.sop_fj);
    terms.push(sop("snn/backbone", features.test_sops.iter().sum()));
    if include_input {
        terms.push(sop("snn/classifier_input", sum(|c| c.input_spikes)));
    }
    terms.push(sop("snn/classifier_exc", sum(|c| c.exc_spikes)));
    terms.push(sop("snn/classifier_inh", sum(|c| c.inh_spikes)));
    let rows: Vec<BreakdownRow> = terms
        .into_iter()
        .map(|(term, count, fj)| BreakdownRow {
            term,
            count,
            energy_j: format!("{:.6e}", fj / 1e15),
        })
        .collect();
    run.write_csv(ENERGY_BREAKDOWN_FILE, &rows)?;
    Ok(row)
}

/// Every step in order; the hyperparameter search is optional.
pub fn run_all(run: &Run, with_search: bool) -> Result<()> {
    let splits = load_splits(&run.config)?;
    prepare(run, &splits)?;
    train_ann(run, &splits)?;
    convert_ann(run)?;
    eval_snn(run, &splits, None)?;
    train_stdp(run, &splits)?;
    energy(run, &splits)?;
    report(run)?;
    if with_search {
        search(run, &splits)?;
    }
    Ok(())
}
