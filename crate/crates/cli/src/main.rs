use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mcrcnn::config::RunConfig;
use mcrcnn::data::{load_background, load_sequence, median_background, parse_split, save_background, synth_sequence};
use mcrcnn::eval::{
    aggregate_report, binarize, evaluate_dataset, mask_image, probability_image, FrameSelection, MetricsReport,
};
use mcrcnn::gradcheck::{model_gradcheck, NamedReport, INERT_TOLERANCE};
use mcrcnn::model::{count_parameters, inspect_checkpoint, load_checkpoint};
use mcrcnn::train::{frame_split, train_bcnn, train_scnn, TrainOutcome, RUN_LOG};
use mcrcnn::{Error, Mcrcnn, Rng};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown subcommand, bad flag)
  3  invalid configuration or argument
  4  missing directory, unreadable file or image
  5  malformed data or checkpoint
  6  numeric failure (non-finite loss or gradient, failed gradient check)

Errors are printed to stderr as one line: error: code=<kind> msg=<message>";

/// Scene change detection: background estimation, residual refinement and
/// foreground segmentation.
#[derive(Parser)]
#[command(name = "mcrcnn", version, after_help = EXIT_CODES)]
struct Cli {
    /// Worker threads. 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, env = "MCRCNN_THREADS", default_value_t = 1)]
    threads: usize,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file path or preset name (default, desk).
    #[arg(long)]
    config: Option<String>,

    /// Override one key, e.g. `train.seed=3`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> mcrcnn::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video with exact ground truth.
    Synth {
        /// Output video directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-pixel median of the first `train.background_frames` frames.
    MakeBackground {
        /// Video directory with `input/` and optional `groundtruth/`.
        #[arg(long)]
        video: PathBuf,
        /// Output 16-bit PNG.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Phase 1: train the background network.
    TrainBcnn {
        /// Video directory with `input/` and optional `groundtruth/`.
        #[arg(long)]
        video: PathBuf,
        /// Background image from `make-background`.
        #[arg(long)]
        background: PathBuf,
        /// Run directory for config, split, log and checkpoints.
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Phase 2: train residual refinement and segmentation with the
    /// background network frozen.
    TrainScnn {
        /// Video directory with `input/` and optional `groundtruth/`.
        #[arg(long)]
        video: PathBuf,
        /// Phase-1 checkpoint, usually `<run>/best.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory for config, split, log and checkpoints.
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write probability maps and binary masks for a video.
    Infer {
        /// Video directory with `input/` and optional `groundtruth/`.
        #[arg(long)]
        video: PathBuf,
        /// Trained checkpoint, usually `<phase-2 run>/best.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for prob%06d.png and bin%06d.png.
        #[arg(long)]
        out: PathBuf,
        /// Binarization threshold. Defaults to the category threshold.
        #[arg(long, conflicts_with = "category")]
        threshold: Option<f64>,
        /// Category whose threshold applies (default: the video's parent
        /// directory name).
        #[arg(long)]
        category: Option<String>,
        /// Comma-separated 0-based frame positions (default: all).
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a video or a category/video tree against its ground truth.
    Evaluate {
        /// Video directory or dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint, usually `<phase-2 run>/best.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for metrics.csv and metrics.txt.
        #[arg(long)]
        out: PathBuf,
        /// One threshold for every category.
        #[arg(long)]
        threshold: Option<f64>,
        /// Evaluate the validation frames listed in a `split.txt`.
        #[arg(long, conflicts_with = "frames")]
        split: Option<PathBuf>,
        /// Comma-separated 0-based frame positions (default: ground-truth
        /// frames inside the temporal ROI).
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-layer and per-stage parameter counts.
    ParamCount {
        /// Also count the values stored in this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference check of the composed refinement and segmentation
    /// loss on a small model.
    Gradcheck {
        /// Seed for the model weights and the evaluation point.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 6)]
        coords: usize,
    },
}

enum Failure {
    Lib(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Gradcheck(_) => 6,
            Failure::Lib(e) => match e.kind() {
                "config" => 3,
                "missing-directory" | "io" | "image" => 4,
                "data" | "checkpoint" => 5,
                "numeric" => 6,
                _ => 1,
            },
        }
    }

    fn report(&self) {
        let (kind, msg) = match self {
            Failure::Lib(e) => (e.kind(), e.to_string()),
            Failure::Gradcheck(m) => ("gradcheck", m.clone()),
        };
        eprintln!("error: code={kind} msg={}", msg.replace('\n', " "));
    }
}

type CliResult = Result<(), Failure>;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> mcrcnn::Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> mcrcnn::Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Creates the run directory and echoes the resolved config and seed into
/// it. A log left by an earlier run in the same directory is removed.
fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> mcrcnn::Result<()> {
    create_dir(dir)?;
    let log = dir.join(RUN_LOG);
    if log.exists() {
        fs::remove_file(&log).map_err(|e| io_err(&log, e))?;
    }
    write_file(&dir.join("config.resolved.toml"), &cfg.to_toml()?)?;
    write_file(&dir.join("seed.txt"), &format!("{}\n", cfg.train.seed))
}

fn summarize(phase: &str, out: &TrainOutcome) {
    println!(
        "{phase}: {} epochs, best epoch {} with validation loss {:.6}{}",
        out.log.len(),
        out.best_epoch,
        out.best_val_loss,
        if out.stopped_early { " (stopped early)" } else { "" }
    );
}

fn load_model(path: &Path) -> mcrcnn::Result<Mcrcnn> {
    Ok(load_checkpoint(path)?.model)
}

fn check_frames(frames: &[usize], len: usize) -> mcrcnn::Result<()> {
    match frames.iter().find(|&&i| i >= len) {
        Some(i) => Err(Error::Config(format!("frame {i} out of range, video has {len} frames"))),
        None => Ok(()),
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth { out, config } => {
            let cfg = config.load()?;
            let made = synth_sequence(&cfg.synth, &out)?;
            println!("wrote {} frames to {}", made.positions.len(), out.display());
        }
        Command::MakeBackground { video, out, config } => {
            let cfg = config.load()?;
            let seq = load_sequence(&video)?;
            let n = cfg.train.background_frames.min(seq.len());
            let bg = median_background(&seq.frames()[..n])?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save_background(&out, &bg)?;
            println!("median of {n} frames written to {}", out.display());
        }
        Command::TrainBcnn {
            video,
            background,
            run_dir,
            config,
        } => {
            let cfg = config.load()?;
            let seq = load_sequence(&video)?;
            let bg = load_background(&background)?;
            let split = frame_split(seq.len(), &cfg.train)?;
            prepare_run_dir(&run_dir, &cfg)?;
            let mut model = Mcrcnn::build(cfg.model.clone(), &mut Rng::new(cfg.train.seed))?;
            let out = train_bcnn(&mut model, &seq, &bg, &split, &cfg.train, Some(&run_dir))?;
            summarize("phase 1", &out);
        }
        Command::TrainScnn {
            video,
            checkpoint,
            run_dir,
            config,
        } => {
            let cfg = config.load()?;
            let mut model = load_model(&checkpoint)?;
            if *model.config() != cfg.model {
                return Err(Error::Config(format!(
                    "[model] section differs from the architecture stored in {}",
                    checkpoint.display()
                ))
                .into());
            }
            let seq = load_sequence(&video)?;
            let split = frame_split(seq.len(), &cfg.train)?;
            prepare_run_dir(&run_dir, &cfg)?;
            let out = train_scnn(&mut model, &seq, &split, &cfg.train, Some(&run_dir))?;
            summarize("phase 2", &out);
        }
        Command::Infer {
            video,
            checkpoint,
            out,
            threshold,
            category,
            frames,
            config,
        } => {
            let cfg = config.load()?;
            let model = load_model(&checkpoint)?;
            let seq = load_sequence(&video)?;
            let t = threshold.unwrap_or_else(|| cfg.eval.for_category(category.as_deref().unwrap_or(&seq.category)));
            let indices: Vec<usize> = if frames.is_empty() { (0..seq.len()).collect() } else { frames };
            check_frames(&indices, seq.len())?;
            create_dir(&out)?;
            for &i in &indices {
                let prob = model.predict(&seq.frame_tensor(i))?.probability;
                let n = seq.frame_numbers[i];
                let p = out.join(format!("prob{n:06}.png"));
                probability_image(&prob)?
                    .save(&p)
                    .map_err(|source| Error::ImageWrite { path: p, source })?;
                let b = out.join(format!("bin{n:06}.png"));
                mask_image(&binarize(&prob, t)?)?
                    .save(&b)
                    .map_err(|source| Error::ImageWrite { path: b, source })?;
            }
            println!("{} frames at threshold {t} written to {}", indices.len(), out.display());
        }
        Command::Evaluate {
            data,
            checkpoint,
            out,
            threshold,
            split,
            frames,
            config,
        } => {
            let cfg = config.load()?;
            let model = load_model(&checkpoint)?;
            let selection = match (split, frames.is_empty()) {
                (Some(p), _) => FrameSelection::Indices(parse_split(&p)?.val),
                (None, false) => FrameSelection::Indices(frames),
                (None, true) => FrameSelection::Evaluable,
            };
            let counts = evaluate_dataset(&model, &data, &cfg.eval, threshold, &selection)?;
            let report: MetricsReport = aggregate_report(&counts)?;
            create_dir(&out)?;
            write_file(&out.join("metrics.csv"), &report.to_csv()?)?;
            let text = report.to_text();
            write_file(&out.join("metrics.txt"), &text)?;
            print!("{text}");
        }
        Command::ParamCount { checkpoint, config } => {
            let cfg = config.load()?;
            let count = count_parameters(&cfg.model);
            println!("{count}");
            if let Some(p) = checkpoint {
                let summary = inspect_checkpoint(&p)?;
                println!(
                    "{:<45} {:>10}",
                    format!("stored in {}", p.display()),
                    summary.stored_values()
                );
            }
        }
        Command::Gradcheck { seed, coords } => {
            let reports = model_gradcheck(seed, coords)?;
            for r in &reports {
                let tag = if r.inert { "  (zero gradient expected)" } else { "" };
                println!("{:<22} max rel err {:.3e}{tag}", r.name, r.report.max_rel_err);
            }
            let worst = NamedReport::max_rel_err(&reports);
            let inert = NamedReport::max_inert(&reports);
            println!("max rel err {worst:.3e}");
            if worst >= 1e-3 {
                return Err(Failure::Gradcheck(format!("max relative error {worst:.3e} >= 1e-3")));
            }
            if inert >= INERT_TOLERANCE {
                return Err(Failure::Gradcheck(format!(
                    "gradient {inert:.3e} on a parameter whose true gradient is zero"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    if cli.threads == 0 {
        Failure::Lib(Error::Config("--threads must be >= 1".into())).report();
        return ExitCode::from(3);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.exit_code())
        }
    }
}
