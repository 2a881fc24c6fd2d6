//! End-to-end experiment driver. Every step reads its inputs from and writes
//! its artifacts to one run directory, so steps can run separately.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod search;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::folder::load_image_folder;
use crate::data::{stratified_split, synth_generate, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::stdp::FeatureSample;

pub use config::{DatasetConfig, ExperimentConfig, FolderConfig, SearchSpace, Seeds, SnnConfig};
pub use pipeline::{
    convert_ann, energy, eval_snn, infer, prepare, read_features, run_all, train_ann, train_stdp, Inference,
    Stage2Summary,
};
pub use report::{report, ReportSummary};
pub use search::{search, SearchOutcome, Trial};

pub const CONFIG_FILE: &str = "config.toml";
pub const CLASSES_FILE: &str = "classes.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const ANN_FILE: &str = "ann.spkf";
pub const SNN_FILE: &str = "snn.spkf";
pub const CLASSIFIER_FILE: &str = "classifier.spkf";
pub const STAGE1_METRICS_FILE: &str = "stage1_metrics.csv";
pub const STAGE2_METRICS_FILE: &str = "stage2_metrics.csv";
pub const ACCURACY_TB_FILE: &str = "accuracy_vs_tb.csv";
pub const ACCURACY_TC_FILE: &str = "accuracy_vs_tc.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const PREDICTIONS_FILE: &str = "test_predictions.csv";
pub const COUNTS_FILE: &str = "test_counts.csv";
pub const ENERGY_FILE: &str = "energy.csv";
pub const ENERGY_BREAKDOWN_FILE: &str = "energy_breakdown.csv";
pub const TRIALS_FILE: &str = "trials.csv";
pub const SEARCH_BEST_FILE: &str = "search_best.toml";
pub const SEARCH_RESULT_FILE: &str = "search_result.csv";
pub const SEARCH_CLASSIFIER_FILE: &str = "search_classifier.spkf";
pub const REPORT_DIR: &str = "report";

/// A run directory together with the configuration archived in it.
#[derive(Debug, Clone)]
pub struct Run {
    dir: PathBuf,
    pub config: ExperimentConfig,
}

impl Run {
    /// Creates (or reopens) `dir` with the config document `text`, stored
    /// verbatim. Reopening with a different document is refused.
    pub fn create(dir: &Path, text: &str) -> Result<Run> {
        let config = ExperimentConfig::from_toml(text)?;
        fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        if path.exists() {
            let existing = fs::read_to_string(&path)?;
            if existing != text {
                return Err(Error::Config(format!(
                    "{} already holds a different config; use a fresh run directory",
                    dir.display()
                )));
            }
        } else {
            fs::write(&path, text)?;
        }
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
        })
    }

    pub fn from_config(dir: &Path, config: &ExperimentConfig) -> Result<Run> {
        Run::create(dir, &config.to_toml())
    }

    pub fn open(dir: &Path) -> Result<Run> {
        let path = dir.join(CONFIG_FILE);
        if !path.is_file() {
            return Err(Error::MissingInput(path));
        }
        let config = ExperimentConfig::from_toml(&fs::read_to_string(&path)?)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub(crate) fn read(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(Error::MissingInput(path));
        }
        Ok(fs::read(path)?)
    }

    pub(crate) fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub(crate) fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        self.write(name, &into_bytes(w)?)
    }
}

pub(crate) fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl Splits {
    pub fn class_names(&self) -> &[String] {
        &self.train.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes()
    }
}

/// Builds the dataset named by the config and splits it.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let ds = match &cfg.dataset {
        DatasetConfig::Synthetic(s) => synth_generate(s, cfg.seeds.data)?,
        DatasetConfig::Folder(f) => {
            let (ds, report) = load_image_folder(&f.path, f.image_size)?;
            if report.skipped > 0 {
                log::warn!("{} unreadable images skipped", report.skipped);
            }
            ds
        }
    };
    let (train, val, test) = stratified_split(&ds, cfg.seeds.data)?;
    Ok(Splits { train, val, test })
}

/// Backbone features of every split with each sample's backbone SOPs.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub train: Vec<FeatureSample>,
    pub val: Vec<FeatureSample>,
    pub test: Vec<FeatureSample>,
    pub test_sops: Vec<u64>,
}

impl Features {
    fn split(&self, split: Split) -> &[FeatureSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// `split,label,backbone_sops,f0..f{n-1}`; floats use the shortest
/// round-tripping decimal form so a reload is exact.
pub(crate) fn encode_features(f: &Features, train_sops: &[u64], val_sops: &[u64]) -> Result<Vec<u8>> {
    let n = f.train.first().map_or(0, |s| s.rates.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["split".to_string(), "label".into(), "backbone_sops".into()];
    header.extend((0..n).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (split, sops) in [
        (Split::Train, train_sops),
        (Split::Val, val_sops),
        (Split::Test, &f.test_sops[..]),
    ] {
        for (s, ops) in f.split(split).iter().zip(sops) {
            let mut rec = vec![split.as_str().to_string(), s.label.to_string(), ops.to_string()];
            rec.extend(s.rates.iter().map(|r| r.to_string()));
            w.write_record(&rec)?;
        }
    }
    into_bytes(w)
}

pub(crate) fn decode_features(bytes: &[u8]) -> Result<Features> {
    let mut r = csv::Reader::from_reader(bytes);
    let width = r.headers()?.len();
    if width < 3 {
        return Err(Error::Data("feature table has no feature columns".into()));
    }
    let mut out = Features {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        test_sops: Vec::new(),
    };
    let bad = |what: &str| Error::Data(format!("feature table: bad {what}"));
    for rec in r.records() {
        let rec = rec?;
        let label: usize = rec[1].parse().map_err(|_| bad("label"))?;
        let sops: u64 = rec[2].parse().map_err(|_| bad("sop count"))?;
        let rates = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f32>().map_err(|_| bad("rate")))
            .collect::<Result<Vec<_>>>()?;
        let sample = FeatureSample { rates, label };
        match &rec[0] {
            "train" => out.train.push(sample),
            "val" => out.val.push(sample),
            "test" => {
                out.test.push(sample);
                out.test_sops.push(sops);
            }
            other => return Err(bad(&format!("split '{other}'"))),
        }
    }
    Ok(out)
}

pub(crate) fn read_classes(run: &Run) -> Result<Vec<String>> {
    let text =
        String::from_utf8(run.read(CLASSES_FILE)?).map_err(|_| Error::Data("classes.txt is not UTF-8".into()))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub(crate) fn write_lines(run: &Run, name: &str, lines: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        writeln!(buf, "{l}")?;
    }
    run.write(name, &buf)
}
