//! Seeded random search over the classifier's competition and homeostasis
//! parameters, followed by a final retrain on train+val.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{features, test_seed};
use super::*;
use crate::format::encode_classifier;
use crate::stdp::{evaluate, train_stage2, Stage2Config};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub exc: f32,
    pub inh: f32,
    pub theta_plus: f32,
    pub best_epoch: usize,
    pub val_acc: f32,
    /// `ok`, `silent` (no spikes) or `abstaining` (no validation vote).
    pub status: String,
}

impl Trial {
    fn viable(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    pub best: Trial,
    pub config: Stage2Config,
    pub test_accuracy: f32,
}

#[derive(Serialize)]
struct BestDoc<'a> {
    stage2: &'a Stage2Config,
}

#[derive(Serialize)]
struct ResultRow {
    best_trial: usize,
    val_acc: f32,
    final_epochs: usize,
    test_acc: f32,
}

/// Samples `(exc, inh, theta_plus)` uniformly inside the ranges.
pub fn sample_params(space: &SearchSpace, rng: &mut ChaCha8Rng) -> (f32, f32, f32) {
    let draw = |rng: &mut ChaCha8Rng, [lo, hi]: [f32; 2]| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let exc = draw(rng, space.exc);
    let inh = draw(rng, space.inh);
    let theta_plus = draw(rng, space.theta_plus);
    (exc, inh, theta_plus)
}

/// Highest validation accuracy among viable trials, earliest on ties.
pub fn best_trial(trials: &[Trial]) -> Option<&Trial> {
    trials
        .iter()
        .filter(|t| t.viable())
        .fold(None, |best: Option<&Trial>, t| match best {
            Some(b) if b.val_acc >= t.val_acc => Some(b),
            _ => Some(t),
        })
}

/// Runs the search. `trials.csv` is appended one row per finished trial,
/// so it survives a failure. The winner is retrained on train+val for
/// `best_epoch + 1` epochs and stored as `search_classifier.spkf`.
pub fn search(run: &Run, splits: &Splits) -> Result<SearchOutcome> {
    let cfg = &run.config;
    cfg.search.validate()?;
    let features = features(run, splits)?;
    let n_classes = splits.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.search.seed);
    let mut log = std::fs::File::create(run.path(TRIALS_FILE))?;
    writeln!(log, "trial,exc,inh,theta_plus,best_epoch,val_acc,status")?;
    let mut trials = Vec::with_capacity(cfg.search.trials);
    for trial in 0..cfg.search.trials {
        let (exc, inh, theta_plus) = sample_params(&cfg.search, &mut rng);
        let c = Stage2Config {
            exc,
            inh,
            theta_plus,
            ..cfg.stage2.clone()
        };
        let (best_epoch, val_acc, status) =
            match train_stage2(&features.train, &features.val, n_classes, &c, cfg.seeds.stage2) {
                Ok(o) => {
                    let abstaining = o
                        .log
                        .get(o.best_epoch)
                        .is_some_and(|e| e.val_abstain == features.val.len());
                    (
                        o.best_epoch,
                        o.best_val_acc,
                        if abstaining { "abstaining" } else { "ok" },
                    )
                }
                Err(Error::SilentClassifier { epoch }) => (epoch, 0.0, "silent"),
                Err(e) => return Err(e),
            };
        let t = Trial {
            trial,
            exc,
            inh,
            theta_plus,
            best_epoch,
            val_acc,
            status: status.into(),
        };
        writeln!(
            log,
            "{},{},{},{},{},{},{}",
            t.trial, t.exc, t.inh, t.theta_plus, t.best_epoch, t.val_acc, t.status
        )?;
        log.flush()?;
        log::info!("trial {trial}: exc {exc} inh {inh} theta_plus {theta_plus} val_acc {val_acc} ({status})");
        trials.push(t);
    }
    let best = best_trial(&trials)
        .cloned()
        .ok_or(Error::NoViableTrial { trials: trials.len() })?;

    let epochs = best.best_epoch + 1;
    let final_cfg = Stage2Config {
        exc: best.exc,
        inh: best.inh,
        theta_plus: best.theta_plus,
        epochs,
        patience: epochs,
        ..cfg.stage2.clone()
    };
    let merged: Vec<_> = features.train.iter().chain(&features.val).cloned().collect();
    let outcome = train_stage2(&merged, &[], n_classes, &final_cfg, cfg.seeds.stage2)?;
    let test_accuracy = evaluate(&outcome.state, &features.test, test_seed(cfg.seeds.stage2))?.accuracy;
    run.write(SEARCH_CLASSIFIER_FILE, &encode_classifier(&outcome.state))?;
    let doc = toml::to_string(&BestDoc { stage2: &final_cfg }).expect("stage-2 config serializes");
    run.write(SEARCH_BEST_FILE, doc.as_bytes())?;
    run.write_csv(
        SEARCH_RESULT_FILE,
        &[ResultRow {
            best_trial: best.trial,
            val_acc: best.val_acc,
            final_epochs: epochs,
            test_acc: test_accuracy,
        }],
    )?;
    Ok(SearchOutcome {
        trials,
        best,
        config: final_cfg,
        test_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(i: usize, acc: f32, status: &str) -> Trial {
        Trial {
            trial: i,
            exc: 30.0,
            inh: 200.0,
            theta_plus: 0.01,
            best_epoch: 0,
            val_acc: acc,
            status: status.into(),
        }
    }

    #[test]
    fn samples_stay_inside_ranges() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (exc, inh, tp) = sample_params(&space, &mut rng);
            assert!((20.0..=50.0).contains(&exc));
            assert!((150.0..=250.0).contains(&inh));
            assert!((0.001..=0.02).contains(&tp));
        }
    }

    #[test]
    fn best_is_the_viable_argmax_with_earliest_tie() {
        assert_eq!(best_trial(&[trial(0, 0.4, "ok")]).unwrap().trial, 0);
        let ts = [
            trial(0, 0.5, "ok"),
            trial(1, 0.9, "ok"),
            trial(2, 0.95, "silent"),
            trial(3, 0.9, "ok"),
        ];
        assert_eq!(best_trial(&ts).unwrap().trial, 1);
        let mut accs: Vec<f32> = ts.iter().map(|t| t.val_acc).collect();
        accs.sort_by(f32::total_cmp);
        assert!(best_trial(&ts).unwrap().val_acc >= accs[accs.len() / 2]);
        assert!(best_trial(&[trial(0, 0.0, "silent"), trial(1, 0.0, "abstaining")]).is_none());
    }
}
