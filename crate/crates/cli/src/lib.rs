//! The `hig` command line: dataset generation, validation, training,
//! evaluation and inspection.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hig_core::annotations::{self, AnnotationFile};
use hig_core::classifier::InteractivityCategory;
use hig_core::dataset::{self, Dataset, Split};
use hig_core::evaluation;
use hig_core::model::HigModel;
use hig_core::synthgen;
use hig_core::training::{Checkpoint, TrainError, Trainer};
use serde::Serialize;

pub use config::RunConfig;

/// Exit code for usage and validation errors.
pub const EXIT_USAGE: u8 = 1;
/// Exit code for failures while doing the work.
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "hig", version, about = "Hierarchical interlacement graph pipeline")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check every annotation file of a dataset.
    Validate {
        /// Dataset directory.
        dir: PathBuf,
    },
    /// Train a model and write checkpoint.json and loss.csv.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Run inference (or score given predictions) and write metrics.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Score this directory of `<video>.predictions.json` files instead
        /// of running the model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Override the selection threshold stored in the checkpoint.
        #[arg(long)]
        confidence_threshold: Option<f64>,
        /// Comma-separated K values for recall@K.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Repeat inference this many times and report the fastest pass.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Summarise a dataset directory, checkpoint or annotation file.
    Inspect { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sampling_rate: Option<usize>,
    /// Neighbours per node.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::All => None,
        }
    }
}

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type Outcome<T> = std::result::Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure {
            code: EXIT_USAGE,
            error: e.into(),
        })
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure {
            code: EXIT_RUNTIME,
            error: e.into(),
        })
    }
}

fn usage_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow!(message.into()),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage_error("--threads must be at least 1"));
        }
        // A second call in the same process fails harmlessly.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Generate { common } => generate(&common),
        Command::Validate { dir } => validate(&dir),
        Command::Train { common, dataset, split } => train(&common, dataset, split),
        Command::Evaluate {
            common,
            checkpoint,
            dataset,
            split,
            predictions,
            confidence_threshold,
            ks,
            repeats,
        } => evaluate(EvaluateArgs {
            common,
            checkpoint,
            dataset,
            split,
            predictions,
            confidence_threshold,
            ks,
            repeats,
        }),
        Command::Inspect { path } => inspect(&path),
    }
}

fn load_config(common: &CommonArgs) -> Outcome<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path).usage()?,
        None => RunConfig::default(),
    };
    if let Some(rate) = common.sampling_rate {
        config.sampling_rate = rate;
    }
    if let Some(k) = common.k {
        config.hierarchy.k = k;
    }
    if let Some(out) = &common.out {
        config.paths.out = Some(out.clone());
    }
    config.validate().usage()?;
    Ok(config)
}

fn required(path: Option<PathBuf>, what: &str) -> Outcome<PathBuf> {
    path.ok_or_else(|| usage_error(format!("no {what} given (flag or config paths.{what})")))
}

fn generate(common: &CommonArgs) -> Outcome<()> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.scenario.seed = seed;
    }
    let out = required(config.paths.out.clone(), "out")?;
    let manifest = synthgen::generate_dataset(&config.scenario, &out).runtime()?;
    println!("wrote {} videos to {}", manifest.videos.len(), out.display());
    Ok(())
}

/// Annotation files of a dataset: those listed in its manifest, or every
/// `*.annotations.json` under the directory and its `videos/` folder.
fn annotation_files(dir: &Path) -> Outcome<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(usage_error(format!("{} is not a directory", dir.display())));
    }
    if dir.join(dataset::MANIFEST_FILE).exists() {
        let ds = Dataset::open(dir).usage()?;
        return Ok(ds.manifest.videos.iter().map(|e| dir.join(&e.annotations)).collect());
    }
    let mut files = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("videos")] {
        let Ok(entries) = fs::read_dir(&sub) else { continue };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.to_string_lossy().ends_with(".annotations.json") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

fn validate(dir: &Path) -> Outcome<()> {
    let files = annotation_files(dir)?;
    if files.is_empty() {
        return Err(usage_error(format!("no annotations found in {}", dir.display())));
    }
    let mut bad = 0;
    for path in &files {
        let problems = match fs::read(path) {
            Err(e) => vec![format!("cannot read: {e}")],
            Ok(bytes) => match annotations::parse_unchecked(&bytes) {
                Err(e) => vec![e.to_string()],
                Ok(file) => annotations::validate(&file).iter().map(ToString::to_string).collect(),
            },
        };
        if problems.is_empty() {
            println!("ok      {}", path.display());
        } else {
            bad += 1;
            println!("invalid {}", path.display());
            for p in problems {
                println!("        {p}");
            }
        }
    }
    println!("{} file(s) checked, {bad} invalid", files.len());
    if bad > 0 {
        return Err(usage_error(format!("{bad} invalid annotation file(s)")));
    }
    Ok(())
}

fn load_samples(
    ds: &Dataset,
    split: Option<Split>,
    rate: usize,
) -> Outcome<Vec<(dataset::ManifestEntry, dataset::VideoSample)>> {
    let samples = ds
        .entries(split)
        .map(|e| ds.load_video(e, rate).map(|(_, s)| (e.clone(), s)))
        .collect::<Result<Vec<_>, _>>()
        .usage()?;
    if samples.is_empty() {
        return Err(usage_error("no videos in the selected split"));
    }
    Ok(samples)
}

fn train(common: &CommonArgs, dataset_flag: Option<PathBuf>, split: SplitArg) -> Outcome<()> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    let dataset_dir = required(dataset_flag.or(config.paths.dataset.clone()), "dataset")?;
    let out = required(config.paths.out.clone(), "out")?;
    let ds = Dataset::open(&dataset_dir).usage()?;
    if ds.manifest.feature_dim != config.hierarchy.input_dim() {
        return Err(usage_error(format!(
            "dataset features have {} dims but the hierarchy expects {}",
            ds.manifest.feature_dim,
            config.hierarchy.input_dim()
        )));
    }
    let samples: Vec<_> = load_samples(&ds, split.split(), config.sampling_rate)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();

    let model = HigModel::new(
        config.hierarchy.clone(),
        ds.manifest.vocabulary.sizes(),
        config.scenario.mask.clone(),
        config.train.seed,
    )
    .usage()?;
    let mut trainer = Trainer::new(model, config.train.clone()).usage()?;
    let levels = config.hierarchy.levels;

    let mut log = String::from("epoch,stage,trainable,total_loss");
    for l in 1..=levels {
        let _ = write!(log, ",level{l}");
    }
    log.push_str(",level1_cells\n");
    for _ in 0..trainer.total_epochs() {
        let m = trainer.train_epoch(&samples).map_err(|e| match e {
            TrainError::InvalidConfig(_) => Failure {
                code: EXIT_USAGE,
                error: e.into(),
            },
            other => Failure {
                code: EXIT_RUNTIME,
                error: anyhow!("training diverged: {other}"),
            },
        })?;
        let trainable: Vec<String> = m.trainable.iter().map(ToString::to_string).collect();
        let _ = write!(
            log,
            "{},{},{},{}",
            m.epoch,
            m.stage + 1,
            trainable.join(" "),
            m.total_loss
        );
        for l in 0..levels {
            let _ = write!(log, ",{}", m.level_losses.get(l).copied().unwrap_or(0.0));
        }
        let _ = writeln!(log, ",{}", m.level1_cells);
        log::info!("epoch {} loss {:.6}", m.epoch, m.total_loss);
    }
    fs::create_dir_all(&out).runtime()?;
    trainer.checkpoint().save(&out.join("checkpoint.json")).runtime()?;
    fs::write(out.join("loss.csv"), log).runtime()?;
    println!(
        "trained {} epochs on {} videos; wrote {}",
        trainer.epoch,
        samples.len(),
        out.join("checkpoint.json").display()
    );
    Ok(())
}

pub struct EvaluateArgs {
    pub common: CommonArgs,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: SplitArg,
    pub predictions: Option<PathBuf>,
    pub confidence_threshold: Option<f64>,
    pub ks: Option<Vec<usize>>,
    pub repeats: usize,
}

/// Inference timing, excluding file I/O.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Timing {
    pub sampling_rate: usize,
    pub videos: usize,
    /// Frames fed to the model after subsampling.
    pub frames: usize,
    /// Frames in the source videos.
    pub source_frames: usize,
    pub seconds: f64,
    pub ms_per_frame: f64,
    pub fps: f64,
}

fn evaluate(args: EvaluateArgs) -> Outcome<()> {
    let mut config = load_config(&args.common)?;
    if let Some(ks) = args.ks {
        config.ks = ks;
        config.validate().usage()?;
    }
    if args.repeats == 0 {
        return Err(usage_error("--repeats must be at least 1"));
    }
    let dataset_dir = required(args.dataset.or(config.paths.dataset.clone()), "dataset")?;
    let out = required(config.paths.out.clone(), "out")?;
    let ds = Dataset::open(&dataset_dir).usage()?;
    let split = args.split.split();
    let rate = config.sampling_rate;

    let predictions_dir = match args.predictions.or(config.paths.predictions.clone()) {
        Some(dir) => dir,
        None => {
            let ckpt_path = required(args.checkpoint.or(config.paths.checkpoint.clone()), "checkpoint")?;
            let mut model = Checkpoint::load(&ckpt_path).usage()?.model;
            if let Some(t) = args.confidence_threshold {
                if !(t > 0.0 && t <= 1.0) {
                    return Err(usage_error(format!("confidence threshold {t} outside (0, 1]")));
                }
                model.config.confidence_threshold = t;
            }
            if let Some(k) = args.common.k {
                model.config.k = k;
            }
            let samples = load_samples(&ds, split, rate)?;
            let mut best: Option<(f64, Vec<_>)> = None;
            for _ in 0..args.repeats {
                let start = Instant::now();
                let preds = samples
                    .iter()
                    .map(|(_, s)| model.predict(&s.frames, s.first_frame))
                    .collect::<Result<Vec<_>, _>>()
                    .runtime()?;
                let secs = start.elapsed().as_secs_f64();
                if best.as_ref().is_none_or(|(b, _)| secs < *b) {
                    best = Some((secs, preds));
                }
            }
            let (seconds, preds) = best.expect("at least one repeat");
            let dir = out.join("predictions");
            for ((entry, _), p) in samples.iter().zip(&preds) {
                evaluation::write_predictions(&dir, &entry.id, p).runtime()?;
            }
            let frames: usize = samples.iter().map(|(_, s)| s.frame_count()).sum();
            let source_frames: usize = samples.iter().map(|(e, _)| e.frames).sum();
            let timing = Timing {
                sampling_rate: rate,
                videos: samples.len(),
                frames,
                source_frames,
                seconds,
                ms_per_frame: 1e3 * seconds / frames as f64,
                fps: frames as f64 / seconds,
            };
            dataset_write(&out.join("timing.json"), &annotations::canonical_json(&timing))?;
            println!(
                "inference: {} frames in {:.3} s ({:.1} FPS, {:.3} ms/frame, sampling rate {rate})",
                frames, seconds, timing.fps, timing.ms_per_frame
            );
            dir
        }
    };

    let table = evaluation::evaluate_run(&predictions_dir, &ds, split, rate, &config.ks, &config.matching).usage()?;
    table.write(&out).runtime()?;
    print!("{}", table.to_csv());
    Ok(())
}

fn dataset_write(path: &Path, bytes: &[u8]) -> Outcome<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).runtime()?;
    }
    fs::write(path, bytes).runtime()
}

fn inspect(path: &Path) -> Outcome<()> {
    if path.is_dir() {
        let ds = Dataset::open(path).usage()?;
        let mut report = String::new();
        let _ = writeln!(report, "dataset {}", path.display());
        let _ = writeln!(report, "videos: {}", ds.manifest.videos.len());
        let _ = writeln!(report, "feature dim: {}", ds.manifest.feature_dim);
        let mut files = Vec::new();
        for e in &ds.manifest.videos {
            files.push(ds.load_annotations(e).usage()?);
        }
        report.push_str(&annotation_stats(&files));
        print!("{report}");
        return Ok(());
    }
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .usage()?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .with_context(|| format!("{} is not JSON", path.display()))
        .usage()?;
    if value.get("model").is_some() {
        let ckpt = Checkpoint::load(path).usage()?;
        let m = &ckpt.model;
        let dims: Vec<String> = m.config.dims.iter().map(ToString::to_string).collect();
        println!("checkpoint {}", path.display());
        println!("levels: {}", m.config.levels);
        println!("dims (D_0..D_L): {}", dims.join(" "));
        println!("weight sharing: {:?}", m.config.weight_sharing);
        println!("neighbours k: {}", m.config.k);
        println!("confidence threshold: {}", m.config.confidence_threshold);
        println!("parameters: {}", m.parameter_count());
        println!("epochs trained: {}", ckpt.epoch);
        return Ok(());
    }
    let file = annotations::parse_annotations(&bytes).usage()?;
    println!("annotation file {}", path.display());
    print!("{}", annotation_stats(&[file]));
    Ok(())
}

fn annotation_stats(files: &[AnnotationFile]) -> String {
    let n = files.len().max(1) as f64;
    let mut frames = 0;
    let mut subjects = 0;
    let mut per_category: BTreeMap<InteractivityCategory, usize> = BTreeMap::new();
    for f in files {
        frames += f.data.len();
        let tracks: std::collections::BTreeSet<u32> = f
            .data
            .iter()
            .flat_map(|r| r.segments_info.iter().map(|s| s.track_id))
            .collect();
        subjects += tracks.len();
        for t in annotations::extract_ground_truth_triplets(f) {
            *per_category.entry(t.category).or_default() += 1;
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "frames: {frames} ({:.2} per video)", frames as f64 / n);
    let _ = writeln!(out, "subjects per video: {:.2}", subjects as f64 / n);
    for c in InteractivityCategory::ALL {
        let count = per_category.get(&c).copied().unwrap_or(0);
        let _ = writeln!(out, "{c}: {count} triplets ({:.2} per video)", count as f64 / n);
    }
    out
}
