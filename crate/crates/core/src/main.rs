use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use slr_core::eval::Strategy;
use slr_core::experiment::{
    build_report, evaluate_run, exit_code, explain_run, prepare, train_run, ClassSelection, ExplainOptions,
    ExplainTarget, PrepareOptions, PrepareSource, TrainOptions, WeightsChoice, EXIT_RESIDUAL,
};
use slr_core::model::Architecture;
use slr_core::train::TrainConfig;
use slr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "slr",
    version,
    about = "Frozen-backbone sign-language image classification runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index or generate a dataset, split it and create a run directory.
    Prepare(PrepareArgs),
    /// Train the classification head of a prepared run.
    Train(TrainArgs),
    /// Score the trained run on its test split.
    Evaluate {
        /// Run directory (or its manifest.json).
        run: PathBuf,
    },
    /// Expected-gradients attributions for one image.
    Explain(ExplainArgs),
    /// Comparison table across evaluated runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset root with one subdirectory per class.
    #[arg(required_unless_present = "synthetic", conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Generate K classes with N images each instead of reading a dataset.
    #[arg(long, num_args = 2, value_names = ["K", "PER_CLASS"])]
    synthetic: Option<Vec<usize>>,
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"], default_values_t = [0.7, 0.15, 0.15])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images are resized to SIDE x SIDE.
    #[arg(long, default_value_t = slr_core::dataset::DEFAULT_SIDE)]
    side: usize,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// lr 1e-4, batch 128, 50 epochs.
    Full,
    /// lr 1e-3, batch 32, 5 epochs.
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    run: PathBuf,
    /// resnet50, inceptionv3, xception, vgg16 or tiny.
    #[arg(long)]
    arch: String,
    /// `default`, `random`, `imagenet` (from $SLR_WEIGHTS_DIR) or an .npz path.
    #[arg(long, default_value = "default")]
    weights: String,
    /// Starting hyperparameters before the config file and flags.
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// TOML file with TrainConfig keys; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExplainArgs {
    run: PathBuf,
    /// Position in the test split.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    index: Option<usize>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// `all` or a class index.
    #[arg(long, default_value = "all")]
    classes: String,
    #[arg(long, default_value_t = slr_core::explain::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long)]
    background: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Allowed additivity residual relative to |f(x) - base value|.
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
    /// Gaps smaller than this are treated as this when scaling the tolerance.
    #[arg(long, default_value_t = slr_core::explain::GAP_FLOOR)]
    gap_floor: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Average {
    Macro,
    Micro,
    Weighted,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Averaging for precision, F1 and recall. Weighted recall equals test accuracy.
    #[arg(long, value_enum, default_value_t = Average::Weighted)]
    average: Average,
    #[arg(long)]
    markdown: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Preset::Full) => TrainConfig::default(),
        (None, Preset::Desk) => TrainConfig::desk(),
    };
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.label_smoothing {
        cfg.label_smoothing = v;
    }
    if let Some(v) = args.dropout {
        cfg.dropout_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Prepare(a) => {
            let source = match (&a.synthetic, a.dataset) {
                (Some(v), _) => PrepareSource::Synthetic {
                    classes: v[0],
                    per_class: v[1],
                },
                (None, Some(root)) => PrepareSource::Directory(root),
                (None, None) => return Err(Error::Config("give a dataset root or --synthetic".into())),
            };
            let opts = PrepareOptions {
                ratios: [a.ratios[0], a.ratios[1], a.ratios[2]],
                seed: a.seed,
                side: a.side,
                run_id: a.run_id,
                ..PrepareOptions::new(source, a.runs_dir)
            };
            println!("{}", prepare(&opts)?.display());
        }
        Command::Train(a) => {
            let opts = TrainOptions {
                architecture: a.arch.parse::<Architecture>()?,
                weights: a.weights.parse::<WeightsChoice>()?,
                config: train_config(&a)?,
            };
            let history = train_run(&a.run, &opts)?;
            match history.last() {
                Some(e) => println!(
                    "{} epochs, final train accuracy {:.4}, loss {:.4}",
                    history.len(),
                    e.train_accuracy,
                    e.train_loss
                ),
                None => println!("0 epochs"),
            }
        }
        Command::Evaluate { run } => {
            let r = evaluate_run(&run)?;
            let agg = r.aggregate(Strategy::Macro);
            println!(
                "test accuracy {:.4}, macro precision {:.4}, recall {:.4}, F1 {:.4} ({} images)",
                r.accuracy, agg.precision, agg.recall, agg.f1, r.samples
            );
        }
        Command::Explain(a) => {
            let target = match (a.index, a.image) {
                (Some(i), _) => ExplainTarget::TestIndex(i),
                (None, Some(p)) => ExplainTarget::Image(p),
                (None, None) => return Err(Error::Config("give --index or --image".into())),
            };
            let opts = ExplainOptions {
                classes: a.classes.parse::<ClassSelection>()?,
                n_samples: a.samples,
                background: a.background,
                seed: a.seed,
                tolerance: a.tolerance,
                gap_floor: a.gap_floor,
                ..ExplainOptions::new(target)
            };
            let outcome = explain_run(&a.run, &opts)?;
            for c in &outcome.classes {
                println!(
                    "class {}: f(x) {:.6}, base {:.6}, residual {:.3e}{}",
                    c.class_name,
                    c.explained_output,
                    c.base_value,
                    c.additivity.residual,
                    if c.additivity.passed { "" } else { " (over tolerance)" }
                );
            }
            println!("{}", outcome.dir.display());
            if !outcome.all_passed() {
                return Ok(EXIT_RESIDUAL as u8);
            }
        }
        Command::Report(a) => {
            let strategy = match a.average {
                Average::Macro => Strategy::Macro,
                Average::Micro => Strategy::Micro,
                Average::Weighted => Strategy::Weighted,
            };
            let table = build_report(&a.runs, strategy)?;
            if let Some(p) = &a.markdown {
                table.write_markdown(p)?;
            }
            if let Some(p) = &a.csv {
                table.write_csv(p)?;
            }
            print!("{}", table.to_markdown());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(e.kind()) as u8)
        }
    }
}
