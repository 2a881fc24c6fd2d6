use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikenet::data::folder::write_image_folder;
use spikenet::data::{synth_generate, SynthConfig};
use spikenet::experiment::{self, load_splits, ExperimentConfig, Run};
use spikenet::Error;

/// Two-stage spiking classifier: supervised QCFS training and conversion of
/// a CNN backbone, then an unsupervised STDP classifier on its spike rates.
#[derive(Parser, Debug)]
#[command(name = "spikenet", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Run directory; defaults to the config's output_dir.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Experiment config (TOML). Archived into the run directory.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: toy or default.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write classes.txt and the split manifest.
    Prepare(RunArgs),
    /// Stage 1: supervised QCFS training of backbone and head.
    TrainAnn(RunArgs),
    /// Convert the trained network into integrate-and-fire form.
    Convert(RunArgs),
    /// Accuracy of the converted network against backbone timesteps.
    EvalSnn {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated timestep counts, overriding snn.t_b_list.
        #[arg(long, value_delimiter = ',')]
        timesteps: Option<Vec<usize>>,
    },
    /// Stage 2: extract features and train the STDP classifier.
    TrainStdp(RunArgs),
    /// Classify one image.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        image: PathBuf,
    },
    /// Energy estimate of the conventional and spiking regimes.
    Energy(RunArgs),
    /// Random search over exc, inh and theta_plus, then a final retrain.
    Search(RunArgs),
    /// Histogram, activity map, confusion matrix and curves.
    Report(RunArgs),
    /// Every step in order.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Also run the hyperparameter search.
        #[arg(long)]
        search: bool,
    },
    /// Write a synthetic dataset as a directory-per-class image tree.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a built-in config as TOML.
    Config {
        #[arg(long, default_value = "toy")]
        preset: String,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_VERSION: u8 = 4;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) => EXIT_USAGE,
        Error::Diverged { .. } | Error::SilentClassifier { .. } | Error::NoViableTrial { .. } => EXIT_NUMERICAL,
        Error::VersionMismatch { .. } => EXIT_VERSION,
        _ => EXIT_DATA,
    }
}

fn open_run(args: &RunArgs) -> spikenet::Result<Run> {
    let text = match (&args.config, &args.preset) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(Error::MissingInput(path.clone()));
            }
            Some(std::fs::read_to_string(path)?)
        }
        (None, Some(name)) => Some(ExperimentConfig::preset(name)?.to_toml()),
        (None, None) => None,
    };
    match (text, &args.run_dir) {
        (Some(text), dir) => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => ExperimentConfig::from_toml(&text)?.output_dir,
            };
            Run::create(&dir, &text)
        }
        (None, Some(dir)) => Run::open(dir),
        (None, None) => Err(Error::Config("pass --run-dir, --config or --preset".into())),
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn execute(command: Command) -> spikenet::Result<()> {
    match command {
        Command::Prepare(a) => {
            let run = open_run(&a)?;
            let splits = load_splits(&run.config)?;
            experiment::prepare(&run, &splits)?;
            println!(
                "{} classes; train {} / val {} / test {} samples",
                splits.n_classes(),
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            );
        }
        Command::TrainAnn(a) => {
            let run = open_run(&a)?;
            let splits = load_splits(&run.config)?;
            let out = experiment::train_ann(&run, &splits)?;
            println!(
                "best epoch {} val accuracy {:.4}; wrote {}",
                out.best_epoch.map_or("-".to_string(), |e| e.to_string()),
                out.best_val_acc,
                show(&run.path(experiment::ANN_FILE))
            );
        }
        Command::Convert(a) => {
            let run = open_run(&a)?;
            experiment::convert_ann(&run)?;
            println!("wrote {}", show(&run.path(experiment::SNN_FILE)));
        }
        Command::EvalSnn { run: a, timesteps } => {
            let run = open_run(&a)?;
            let splits = load_splits(&run.config)?;
            for row in experiment::eval_snn(&run, &splits, timesteps.as_deref())? {
                println!("T={:<5} accuracy {:.4}", row.timesteps, row.accuracy);
            }
        }
        Command::TrainStdp(a) => {
            let run = open_run(&a)?;
            let splits = load_splits(&run.config)?;
            let s = experiment::train_stdp(&run, &splits)?;
            println!(
                "best epoch {} val accuracy {:.4}; test accuracy {:.4} ({} abstained)",
                s.best_epoch, s.val_accuracy, s.test_accuracy, s.test_abstained
            );
        }
        Command::Infer { run: a, image } => {
            let run = open_run(&a)?;
            let out = experiment::infer(&run, &image)?;
            println!("{}", out.class.as_deref().unwrap_or("abstain"));
            for (name, score) in out.class_names.iter().zip(&out.scores) {
                println!("{name}\t{score:.4}");
            }
        }
        Command::Energy(a) => {
            let run = open_run(&a)?;
            let splits = load_splits(&run.config)?;
            let row = experiment::energy(&run, &splits)?;
            println!(
                "{}: ANN {:.4} / SNN {:.4}; E_ann {} J, E_snn {} J per image; improvement {}",
                row.backbone, row.ann_accuracy, row.snn_accuracy, row.e_ann, row.e_snn, row.improvement
            );
        }
        Command::Search(a) => {
            let run = open_run(&a)?;
            let splits = load_splits(&run.config)?;
            let out = experiment::search(&run, &splits)?;
            println!(
                "best trial {} (exc {}, inh {}, theta_plus {}) val accuracy {:.4}; retrained test accuracy {:.4}",
                out.best.trial, out.best.exc, out.best.inh, out.best.theta_plus, out.best.val_acc, out.test_accuracy
            );
        }
        Command::Report(a) => {
            let run = open_run(&a)?;
            let s = experiment::report(&run)?;
            println!(
                "{:.1}% of neurons below 10% of the maximum count; wrote {}",
                100.0 * s.quiet_fraction,
                show(&run.path(experiment::REPORT_DIR))
            );
        }
        Command::Run { run: a, search } => {
            let run = open_run(&a)?;
            experiment::run_all(&run, search)?;
            println!("run complete: {}", show(run.dir()));
        }
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => {
            let cfg = SynthConfig {
                n_classes: classes,
                n_per_class: per_class,
                image_size: size,
            };
            let ds = synth_generate(&cfg, seed)?;
            write_image_folder(&ds, &out)?;
            println!("wrote {} images in {} classes to {}", ds.len(), classes, show(&out));
        }
        Command::Config { preset } => {
            print!("{}", ExperimentConfig::preset(&preset)?.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
