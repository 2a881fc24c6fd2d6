//! Plot-ready data derived from a finished run: spike histogram, activity
//! map, confusion matrix, accuracy curves and a JSON plot description.

use serde::Serialize;

use super::pipeline::TcRow;
use super::*;

/// Number of equal-width bins of the spike-count histogram.
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    /// Total test-set spikes of each classifier neuron.
    pub neuron_totals: Vec<u64>,
    /// Fraction of neurons below 10% of the busiest neuron's count.
    pub quiet_fraction: f64,
    /// `[n_neurons][n_classes]` mean firing rate per test sample and step.
    pub activity_map: Vec<Vec<f64>>,
    /// Per class, the highest specialisation of a neuron whose strongest
    /// response in the activity map is that class.
    pub best_specialization: Vec<f64>,
    /// `[true][predicted]`, the last column counting abstentions.
    pub confusion: Vec<Vec<u64>>,
}

const REQUIRED: [&str; 6] = [
    CLASSES_FILE,
    COUNTS_FILE,
    PREDICTIONS_FILE,
    ACCURACY_TB_FILE,
    ACCURACY_TC_FILE,
    CLASSIFIER_FILE,
];

struct CountRow {
    label: usize,
    counts: Vec<u64>,
}

fn read_counts(run: &Run) -> Result<Vec<CountRow>> {
    let bytes = run.read(COUNTS_FILE)?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    if r.headers()?.len() < 5 {
        return Err(Error::Data(format!("{COUNTS_FILE} has no neuron columns")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Data(format!("{COUNTS_FILE}: bad count '{v}'")))
        };
        out.push(CountRow {
            label: num(&rec[1])? as usize,
            counts: rec.iter().skip(5).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

fn class_index(names: &[String], name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Data(format!("unknown class '{name}' in {PREDICTIONS_FILE}")))
}

/// `[true][predicted]` with a trailing abstention column.
fn confusion(run: &Run, names: &[String]) -> Result<Vec<Vec<u64>>> {
    let bytes = run.read(PREDICTIONS_FILE)?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{PREDICTIONS_FILE} has no {name} column")))
    };
    let (label_col, pred_col) = (col("label")?, col("predicted")?);
    let mut m = vec![vec![0u64; names.len() + 1]; names.len()];
    for rec in r.records() {
        let rec = rec?;
        let t = class_index(names, &rec[label_col])?;
        let p = match &rec[pred_col] {
            "abstain" => names.len(),
            name => class_index(names, name)?,
        };
        m[t][p] += 1;
    }
    Ok(m)
}

fn matrix_csv(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    into_bytes(w)
}

#[derive(Serialize)]
struct HistogramRow {
    bin_lo: f64,
    bin_hi: f64,
    neurons: usize,
}

#[derive(Serialize)]
struct NeuronRow {
    neuron: usize,
    spikes: u64,
    label: String,
    specialization: f64,
}

#[derive(Serialize)]
struct TcMeanRow {
    timesteps: usize,
    mean_accuracy: f64,
    min_accuracy: f32,
    max_accuracy: f32,
    seeds: usize,
}

#[derive(Serialize)]
struct Plot {
    file: &'static str,
    kind: &'static str,
    title: &'static str,
    x: &'static str,
    y: &'static str,
    series: Vec<String>,
}

fn mean_by_tc(run: &Run) -> Result<Vec<TcMeanRow>> {
    let bytes = run.read(ACCURACY_TC_FILE)?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let mut out: Vec<TcMeanRow> = Vec::new();
    for rec in r.deserialize() {
        let row: TcRow = rec?;
        match out.iter_mut().find(|m| m.timesteps == row.timesteps) {
            Some(m) => {
                m.mean_accuracy += row.accuracy as f64;
                m.min_accuracy = m.min_accuracy.min(row.accuracy);
                m.max_accuracy = m.max_accuracy.max(row.accuracy);
                m.seeds += 1;
            }
            None => out.push(TcMeanRow {
                timesteps: row.timesteps,
                mean_accuracy: row.accuracy as f64,
                min_accuracy: row.accuracy,
                max_accuracy: row.accuracy,
                seeds: 1,
            }),
        }
    }
    for m in &mut out {
        m.mean_accuracy /= m.seeds as f64;
    }
    Ok(out)
}

/// Writes the report bundle under `report/`. An incomplete run yields
/// [`Error::MissingArtifacts`] naming every absent input.
pub fn report(run: &Run) -> Result<ReportSummary> {
    let missing: Vec<String> = REQUIRED
        .iter()
        .filter(|f| !run.path(f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let names = read_classes(run)?;
    let n_classes = names.len();
    let rows = read_counts(run)?;
    let n_neurons = rows.first().map_or(0, |r| r.counts.len());
    let timesteps = pipeline::load_classifier(run, CLASSIFIER_FILE)?.cfg.timesteps as f64;

    let mut totals = vec![0u64; n_neurons];
    let mut per_class = vec![vec![0u64; n_classes]; n_neurons];
    let mut class_samples = vec![0u64; n_classes];
    for r in &rows {
        if r.label >= n_classes || r.counts.len() != n_neurons {
            return Err(Error::Data(format!(
                "{COUNTS_FILE} row does not match the run's classes or width"
            )));
        }
        class_samples[r.label] += 1;
        for (j, &c) in r.counts.iter().enumerate() {
            totals[j] += c;
            per_class[j][r.label] += c;
        }
    }
    let activity_map: Vec<Vec<f64>> = per_class
        .iter()
        .map(|row| {
            row.iter()
                .zip(&class_samples)
                .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / (n as f64 * timesteps) })
                .collect()
        })
        .collect();
    let mut best_specialization = vec![0.0f64; n_classes];
    let mut neuron_rows = Vec::with_capacity(n_neurons);
    for (j, rates) in activity_map.iter().enumerate() {
        let sum: f64 = rates.iter().sum();
        let top = crate::tensor::argmax(&rates.iter().map(|&r| r as f32).collect::<Vec<_>>());
        let (label, spec) = match top {
            Some(c) if sum > 0.0 => (names[c].clone(), rates[c] / sum),
            _ => (String::new(), 0.0),
        };
        if let Some(c) = top.filter(|_| sum > 0.0) {
            best_specialization[c] = best_specialization[c].max(spec);
        }
        neuron_rows.push(NeuronRow {
            neuron: j,
            spikes: totals[j],
            label,
            specialization: spec,
        });
    }
    let max = totals.iter().copied().max().unwrap_or(0);
    let quiet = totals.iter().filter(|&&t| (t as f64) < 0.1 * max as f64).count();
    let quiet_fraction = if n_neurons == 0 {
        0.0
    } else {
        quiet as f64 / n_neurons as f64
    };

    let width = (max as f64 / HISTOGRAM_BINS as f64).max(1.0);
    let mut hist: Vec<HistogramRow> = (0..HISTOGRAM_BINS)
        .map(|b| HistogramRow {
            bin_lo: b as f64 * width,
            bin_hi: (b + 1) as f64 * width,
            neurons: 0,
        })
        .collect();
    for &t in &totals {
        let b = ((t as f64 / width) as usize).min(HISTOGRAM_BINS - 1);
        hist[b].neurons += 1;
    }

    let confusion = confusion(run, &names)?;
    let dir = REPORT_DIR;
    run.write_csv(&format!("{dir}/spike_histogram.csv"), &hist)?;
    run.write_csv(&format!("{dir}/neuron_spikes.csv"), &neuron_rows)?;
    let mut header = vec!["neuron".to_string()];
    header.extend(names.iter().cloned());
    run.write(
        &format!("{dir}/activity_map.csv"),
        &matrix_csv(
            header,
            activity_map.iter().enumerate().map(|(j, row)| {
                std::iter::once(j.to_string())
                    .chain(row.iter().map(f64::to_string))
                    .collect()
            }),
        )?,
    )?;
    let mut header = vec!["true".to_string()];
    header.extend(names.iter().cloned());
    header.push("abstain".into());
    run.write(
        &format!("{dir}/confusion.csv"),
        &matrix_csv(
            header,
            confusion.iter().enumerate().map(|(t, row)| {
                std::iter::once(names[t].clone())
                    .chain(row.iter().map(u64::to_string))
                    .collect()
            }),
        )?,
    )?;
    run.write(&format!("{dir}/accuracy_vs_tb.csv"), &run.read(ACCURACY_TB_FILE)?)?;
    run.write_csv(&format!("{dir}/accuracy_vs_tc.csv"), &mean_by_tc(run)?)?;

    let plots = vec![
        Plot {
            file: "spike_histogram.csv",
            kind: "bar",
            title: "Classifier spike-count histogram (test set)",
            x: "bin_lo",
            y: "neurons",
            series: vec!["neurons".into()],
        },
        Plot {
            file: "activity_map.csv",
            kind: "heatmap",
            title: "Mean firing rate per neuron and class",
            x: "class",
            y: "neuron",
            series: names.clone(),
        },
        Plot {
            file: "confusion.csv",
            kind: "heatmap",
            title: "Confusion matrix (test set)",
            x: "predicted",
            y: "true",
            series: names.iter().cloned().chain(["abstain".to_string()]).collect(),
        },
        Plot {
            file: "accuracy_vs_tb.csv",
            kind: "line",
            title: "Converted network accuracy vs backbone timesteps (0 = ANN)",
            x: "timesteps",
            y: "accuracy",
            series: vec!["accuracy".into()],
        },
        Plot {
            file: "accuracy_vs_tc.csv",
            kind: "line",
            title: "Classifier accuracy vs presentation length",
            x: "timesteps",
            y: "mean_accuracy",
            series: vec!["mean_accuracy".into(), "min_accuracy".into(), "max_accuracy".into()],
        },
    ];
    let mut json = serde_json::to_vec_pretty(&plots).expect("plot description serializes");
    json.push(b'\n');
    run.write(&format!("{dir}/plots.json"), &json)?;

    Ok(ReportSummary {
        neuron_totals: totals,
        quiet_fraction,
        activity_map,
        best_specialization,
        confusion,
    })
}
