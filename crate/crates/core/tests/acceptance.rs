//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails. Built with `harness = false`.

#[path = "support/gradcheck.rs"]
mod gradcheck;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikenet::energy::{energy_report, model_flops, EnergyConstants, EnergyReport, EnergyRow, Improvement};
use spikenet::experiment::{self, load_splits, ExperimentConfig, Run, Splits};
use spikenet::format::decode_model;
use spikenet::layers::{IfNeuron, Layer, Qcfs};
use spikenet::qcfs::qcfs_forward;
use spikenet::snn::{forward_snn, IfLayerState};
use spikenet::stdp::{
    evaluate, normalized_entropy, poisson_encode, stdp_update, train_batch, train_stage2, ClassifierState,
    FeatureSample, PoissonEncoderConfig, Stage2Config, EXC_RANGE, INH_RANGE, THETA_PLUS_RANGE,
};
use spikenet::{DenseTensor, Model, NetworkGraph};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

/// 1. A single IF layer driven for `L` steps reproduces QCFS exactly.
fn rate_equivalence() -> Verdict {
    let start = Instant::now();
    let (theta, levels) = (2.0f32, 8u32);
    let xs: Vec<f32> = (0..=120).map(|k| -2.0 + 0.05 * k as f32).collect();
    let expected = qcfs_forward(
        &DenseTensor::from_vec(xs.clone()),
        &Qcfs::new(theta, levels, 0.5).unwrap(),
    );
    let neuron = IfNeuron {
        threshold: theta,
        levels,
        initial_fraction: 0.5,
    };

    // Route 1: the IF state stepped by hand.
    let mut state = IfLayerState::new(&neuron, xs.len());
    let mut spikes = vec![0.0; xs.len()];
    let mut counts = vec![0u32; xs.len()];
    for _ in 0..levels {
        state.step(&xs, &mut spikes);
        for (c, &s) in counts.iter_mut().zip(&spikes) {
            *c += s as u32;
        }
    }
    let hand: Vec<f32> = counts.iter().map(|&c| c as f32 / levels as f32 * theta).collect();

    // Route 2: the graph simulator.
    let graph = NetworkGraph::new(vec![xs.len()], vec![Layer::If(neuron)], spikenet::Mode::Snn).unwrap();
    let model = Model::new(graph, None).unwrap();
    let sim: Vec<f32> = forward_snn(&model, &DenseTensor::from_vec(xs.clone()), levels as usize)
        .unwrap()
        .rates
        .iter()
        .map(|r| r * theta)
        .collect();

    let mismatches = (0..xs.len())
        .filter(|&i| hand[i] != expected.data()[i] || sim[i] != expected.data()[i])
        .count();
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && elapsed < Duration::from_secs(1),
        format!(
            "{} grid points, {mismatches} mismatches on either route ({})",
            xs.len(),
            secs(elapsed)
        ),
    )
}

/// 2. Finite-difference gradient checks.
fn gradients() -> Verdict {
    let start = Instant::now();
    let conv = gradcheck::conv_worst(gradcheck::INSTANCES);
    let linear = gradcheck::linear_worst(gradcheck::INSTANCES);
    let qcfs = gradcheck::qcfs_worst(gradcheck::INSTANCES);
    let graph = gradcheck::full_graph_check();
    let elapsed = start.elapsed();
    let worst = conv.max(linear).max(qcfs);
    verdict(
        worst < gradcheck::TOL && graph.is_ok() && elapsed < Duration::from_secs(30),
        format!(
            "max rel err conv {conv:.1e}, linear {linear:.1e}, qcfs {qcfs:.1e} over {} instances each; \
             composed graph {} ({})",
            gradcheck::INSTANCES,
            graph.err().unwrap_or_else(|| "ok".into()),
            secs(elapsed)
        ),
    )
}

/// Artifacts of the reference toy run shared by criteria 3, 4, 5, 7, 8, 9.
struct Pipeline {
    run: Run,
    splits: Splits,
    stage1: Duration,
    stage2: Duration,
    test_accuracy: f32,
    report: experiment::ReportSummary,
    energy: EnergyRow,
}

fn run_pipeline(dir: &Path) -> spikenet::Result<Pipeline> {
    let run = Run::from_config(dir, &ExperimentConfig::toy())?;
    let splits = load_splits(&run.config)?;
    experiment::prepare(&run, &splits)?;
    let start = Instant::now();
    experiment::train_ann(&run, &splits)?;
    experiment::convert_ann(&run)?;
    experiment::eval_snn(&run, &splits, None)?;
    let stage1 = start.elapsed();
    let start = Instant::now();
    let summary = experiment::train_stdp(&run, &splits)?;
    let stage2 = start.elapsed();
    let energy = experiment::energy(&run, &splits)?;
    let report = experiment::report(&run)?;
    experiment::search(&run, &splits)?;
    Ok(Pipeline {
        run,
        splits,
        stage1,
        stage2,
        test_accuracy: summary.test_accuracy,
        report,
        energy,
    })
}

fn read_csv(run: &Run, name: &str) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(run.path(name)).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            headers
                .iter()
                .zip(rec.unwrap().iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

/// 3. Conversion fidelity on the toy CNN.
fn conversion(p: &Pipeline) -> Verdict {
    let rows = read_csv(&p.run, experiment::ACCURACY_TB_FILE);
    let acc = |t: &str| -> f64 {
        rows.iter()
            .find(|r| r["timesteps"] == t)
            .map(|r| r["accuracy"].parse().unwrap())
            .unwrap_or(f64::NAN)
    };
    let (ann, t16, t256) = (acc("0"), acc("16"), acc("256"));
    let pass = ann >= 0.95 && (t256 - ann).abs() <= 0.02 && t256 >= t16 && p.stage1 < Duration::from_secs(15 * 60);
    verdict(
        pass,
        format!("ANN {ann:.4}, T_b=16 {t16:.4}, T_b=256 {t256:.4} ({})", secs(p.stage1)),
    )
}

/// 4. Classifier accuracy at `T_c = 300` and the 5-seed trend against `T_c = 100`.
fn classifier(p: &Pipeline) -> Verdict {
    let cfg = &p.run.config;
    let mid = |(lo, hi): (f32, f32)| (lo + hi) / 2.0;
    let midpoints = cfg.stage2.exc == mid(EXC_RANGE)
        && cfg.stage2.inh == mid(INH_RANGE)
        && cfg.stage2.theta_plus == mid(THETA_PLUS_RANGE)
        && cfg.stage2.n_neurons == 100
        && cfg.stage2.timesteps == 300;
    let rows = read_csv(&p.run, experiment::ACCURACY_TC_FILE);
    let mean = |t: &str| -> (f64, usize) {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r["timesteps"] == t)
            .map(|r| r["accuracy"].parse().unwrap())
            .collect();
        (v.iter().sum::<f64>() / v.len().max(1) as f64, v.len())
    };
    let ((m300, n300), (m100, n100)) = (mean("300"), mean("100"));
    let pass = midpoints
        && p.test_accuracy >= 0.90
        && n300 == 5
        && n100 == 5
        && m300 >= m100
        && p.stage2 < Duration::from_secs(15 * 60);
    verdict(
        pass,
        format!(
            "test {:.4} at T_c=300; 5-seed mean {m300:.4} (T_c=300) vs {m100:.4} (T_c=100) ({})",
            p.test_accuracy,
            secs(p.stage2)
        ),
    )
}

fn test_entropy(p: &Pipeline, theta_plus: f32) -> spikenet::Result<f64> {
    let cfg = &p.run.config;
    let features = experiment::read_features(&p.run)?;
    let c = Stage2Config {
        theta_plus,
        ..cfg.stage2.clone()
    };
    let out = train_stage2(
        &features.train,
        &features.val,
        p.splits.n_classes(),
        &c,
        cfg.seeds.stage2,
    )?;
    let eval = evaluate(&out.state, &features.test, cfg.seeds.stage2)?;
    let mut totals = vec![0u64; c.n_neurons];
    for r in &eval.records {
        for (t, &k) in totals.iter_mut().zip(&r.counts) {
            *t += k as u64;
        }
    }
    Ok(normalized_entropy(&totals))
}

/// 5. Threshold adaptation spreads activity across neurons.
fn homeostasis(p: &Pipeline) -> Verdict {
    match (test_entropy(p, 0.01), test_entropy(p, 0.0)) {
        (Ok(on), Ok(off)) => verdict(
            on > off,
            format!("entropy {on:.4} with theta_plus=0.01 vs {off:.4} without"),
        ),
        (a, b) => verdict(false, format!("training failed: {:?} / {:?}", a.err(), b.err())),
    }
}

fn stdp_state(n_in: usize, n: usize) -> ClassifierState {
    let cfg = Stage2Config {
        n_neurons: n,
        ..Stage2Config::default()
    };
    ClassifierState::new(n_in, 2, &cfg, 0).unwrap()
}

/// 6. Pair-rule signs and the weight bounds.
fn stdp_signs() -> Verdict {
    let mut s = stdp_state(1, 1);
    s.weights = vec![0.5];
    stdp_update(&mut s, &[0], &[]);
    stdp_update(&mut s, &[], &[0]);
    let potentiated = s.weights[0] > 0.5;
    let mut s = stdp_state(1, 1);
    s.weights = vec![0.5];
    stdp_update(&mut s, &[], &[0]);
    stdp_update(&mut s, &[0], &[]);
    let depressed = s.weights[0] < 0.5;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0usize;
    let sequences = 10_000;
    for _ in 0..sequences {
        let (n_in, n) = (rng.gen_range(1..6), rng.gen_range(1..5));
        let mut s = stdp_state(n_in, n);
        s.cfg.eta_pre = rng.gen_range(0.0..0.5);
        s.cfg.eta_post = rng.gen_range(0.0..0.5);
        let w_max = s.cfg.w_max;
        for w in &mut s.weights {
            *w = rng.gen_range(0.0..=w_max);
        }
        for _ in 0..rng.gen_range(1..30) {
            let pre: Vec<u32> = (0..n_in as u32).filter(|_| rng.gen_bool(0.4)).collect();
            let post: Vec<u32> = (0..n as u32).filter(|_| rng.gen_bool(0.4)).collect();
            stdp_update(&mut s, &pre, &post);
            violations += s.weights.iter().filter(|&&w| !(0.0..=w_max).contains(&w)).count();
        }
    }

    // The minibatch path: reduced deltas, normalisation and clamping.
    let mut batch_violations = 0usize;
    for k in 0..50u64 {
        let mut s = stdp_state(6, 4);
        s.cfg.timesteps = 20;
        s.cfg.eta_post = 0.5;
        s.cfg.theta_exc = 0.5;
        let data: Vec<FeatureSample> = (0..4)
            .map(|i| FeatureSample {
                rates: (0..6).map(|_| rng.gen_range(0.0..1.0)).collect(),
                label: i % 2,
            })
            .collect();
        let batch: Vec<(usize, &FeatureSample)> = data.iter().enumerate().collect();
        train_batch(&mut s, &batch, k, 0).unwrap();
        batch_violations += s.weights.iter().filter(|&&w| !(0.0..=s.cfg.w_max).contains(&w)).count();
    }
    verdict(
        potentiated && depressed && violations == 0 && batch_violations == 0,
        format!(
            "pre->post potentiates: {potentiated}, post->pre depresses: {depressed}, \
             {violations} bound violations over {sequences} sequences, {batch_violations} after minibatch updates"
        ),
    )
}

/// 7. Energy improvement, additivity and the joule conversion.
fn energy(p: &Pipeline) -> Verdict {
    let constants = EnergyConstants::default();
    let ann = decode_model(&std::fs::read(p.run.path(experiment::ANN_FILE)).unwrap()).unwrap();
    let flops = model_flops(&ann).unwrap();
    let counts = read_csv(&p.run, experiment::COUNTS_FILE);
    let features = experiment::read_features(&p.run).unwrap();
    let include_input = p.run.config.stage2.count_input_spikes;
    let parts: Vec<EnergyReport> = counts
        .iter()
        .zip(&features.test_sops)
        .map(|(r, &bb)| {
            let n = |k: &str| r[k].parse::<u64>().unwrap();
            let input = if include_input { n("input_spikes") } else { 0 };
            energy_report(flops, bb + input + n("exc_spikes") + n("inh_spikes"), &constants)
        })
        .collect();
    let summed = EnergyReport::sum(&parts);
    let whole = energy_report(
        parts.iter().map(|r| r.flops).sum(),
        parts.iter().map(|r| r.sops).sum(),
        &constants,
    );
    let breakdown = read_csv(&p.run, experiment::ENERGY_BREAKDOWN_FILE);
    let term_total = |prefix: &str| -> u64 {
        breakdown
            .iter()
            .filter(|r| r["term"].starts_with(prefix))
            .map(|r| r["count"].parse::<u64>().unwrap())
            .sum()
    };
    let additive = summed == whole && term_total("snn/") == whole.sops && term_total("ann/") == whole.flops;
    let per_image = EnergyRow::new(
        &p.energy.backbone,
        p.energy.ann_accuracy,
        p.energy.snn_accuracy,
        &whole,
        parts.len(),
    );
    let consistent = per_image == p.energy;
    let improvement = match whole.improvement() {
        Improvement::Ratio(r) => r,
        Improvement::Infinite => f64::INFINITY,
        Improvement::Undefined => f64::NAN,
    };
    let joules = energy_report(0, 1_000_000, &constants).e_snn();
    verdict(
        improvement > 1.0 && additive && consistent && joules == 7.7e-8,
        format!(
            "improvement {} (E_ann {} J, E_snn {} J per image); {} samples additive: {additive}; \
             table matches recomputation: {consistent}; 1e6 SOPs = {joules:e} J",
            p.energy.improvement,
            p.energy.e_ann,
            p.energy.e_snn,
            parts.len()
        ),
    )
}

/// 8. Sparse activity and class-specialised neurons on the test set.
fn sparsity(p: &Pipeline) -> Verdict {
    let r = &p.report;
    let min_spec = r.best_specialization.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        r.quiet_fraction >= 0.6 && min_spec >= 0.8,
        format!(
            "{:.0}% of neurons below 10% of the maximum count; best specialisation per class {:?}",
            100.0 * r.quiet_fraction,
            r.best_specialization
                .iter()
                .map(|s| format!("{s:.3}"))
                .collect::<Vec<_>>()
        ),
    )
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// 9. A second full run with identical seeds is byte-identical.
fn determinism(p: &Pipeline, second: &Path) -> Verdict {
    let start = Instant::now();
    let run = match Run::from_config(second, &ExperimentConfig::toy()).and_then(|r| {
        experiment::run_all(&r, true)?;
        Ok(r)
    }) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("second run failed: {e}")),
    };
    let (a, b) = (files(p.run.dir()), files(run.dir()));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let checkpoints = a.keys().filter(|k| k.ends_with(".spkf")).count();
    let csvs = a.keys().filter(|k| k.ends_with(".csv")).count();
    verdict(
        differing.is_empty() && a.len() == b.len() && checkpoints >= 4 && csvs >= 10,
        format!(
            "{} files compared ({checkpoints} checkpoints, {csvs} CSV), differing: {differing:?} ({})",
            a.len(),
            secs(start.elapsed())
        ),
    )
}

/// 10. Poisson encoder statistics.
fn poisson() -> Verdict {
    let (seeds, steps) = (100u64, 300usize);
    let cfg = |seed| PoissonEncoderConfig {
        timesteps: steps,
        seed,
        rate_scale: 1.0,
    };
    let mut half = 0u64;
    let mut exact = true;
    for seed in 0..seeds {
        let t = poisson_encode(&[0.5, 0.0, 1.0], &cfg(seed)).unwrap();
        let c = t.counts();
        half += c[0] as u64;
        exact &= c[1] == 0 && c[2] == steps as u32;
    }
    let n = (seeds as usize * steps) as f64;
    let sigma = (n * 0.25).sqrt();
    let z = (half as f64 - n * 0.5) / sigma;
    verdict(
        z.abs() <= 4.0 && exact,
        format!("p=0.5: {half} spikes in {n} draws (z = {z:+.2}); p=0 and p=1 exact: {exact}"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut record = |id: u8, name: &'static str, v: Verdict| {
        println!("{} {id:>2}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    record(1, "rate-equivalence oracle", rate_equivalence());
    record(2, "gradient checks", gradients());

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    match run_pipeline(first.path()) {
        Ok(p) => {
            record(3, "conversion fidelity", conversion(&p));
            record(4, "stage-2 classifier", classifier(&p));
            record(5, "homeostasis", homeostasis(&p));
            record(6, "STDP signs and bounds", stdp_signs());
            record(7, "energy model", energy(&p));
            record(8, "sparsity and specialisation", sparsity(&p));
            record(9, "determinism", determinism(&p, second.path()));
        }
        Err(e) => {
            for (id, name) in [
                (3, "conversion fidelity"),
                (4, "stage-2 classifier"),
                (5, "homeostasis"),
                (7, "energy model"),
                (8, "sparsity and specialisation"),
                (9, "determinism"),
            ] {
                record(id, name, verdict(false, format!("toy pipeline failed: {e}")));
            }
            record(6, "STDP signs and bounds", stdp_signs());
        }
    }
    record(10, "Poisson encoder statistics", poisson());

    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
