//! `deep-fext`: prepare data, train, predict, evaluate, inspect features and fuse models.
//!
//! Exit codes: 0 on success, 1 on an internal failure, 2 on bad input or usage.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deep_fext::error::{Error, Result};
use deep_fext::evaluate::evaluate;
use deep_fext::fext::export_feature_maps;
use deep_fext::imaging::dataset::{dataset_id, to_rgb};
use deep_fext::imaging::raster::{load_mask, write_atomic, SUPPORTED_EXTENSIONS};
use deep_fext::imaging::{
    decode_image, load_checkpoint, load_dataset, save_mask, save_real_map, skeletonize, CachePolicy, Layout,
};
use deep_fext::map::BinaryMap;
use deep_fext::model::{Model, ModelSpec, Task};
use deep_fext::predict::{write_fusion, write_prediction};
use deep_fext::synth::{write_custom_layout, write_drive_layout};
use deep_fext::tensor::Tensor;
use deep_fext::train::{TrainConfig, Trainer};

const THREADS_VAR: &str = "DEEP_FEXT_THREADS";

#[derive(Parser)]
#[command(name = "deep-fext", version, about = "Retinal vessel and centerline segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write centerline caches for a dataset, or generate a synthetic one.
    Prepare(PrepareArgs),
    /// Train a model end to end.
    Train(TrainArgs),
    /// Write probability maps, masks and label images for one image or a directory.
    Predict(PredictArgs),
    /// Score probability maps against ground truth.
    Eval(EvalArgs),
    /// Thin vessel masks to one-pixel centerlines.
    Skeletonize(SkeletonizeArgs),
    /// Export every extracted feature of an image as a grayscale map.
    InspectFeatures(InspectArgs),
    /// Average the probability maps of several models.
    Fuse(FuseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Drive,
    Stare,
    Custom,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Drive => Layout::Drive,
            LayoutArg::Stare => Layout::Stare,
            LayoutArg::Custom => Layout::Custom,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Vessel,
    Centerline,
    Both,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Vessel => Task::Vessel,
            TaskArg::Centerline => Task::Centerline,
            TaskArg::Both => Task::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SyntheticLayout {
    Drive,
    Custom,
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset root whose centerline caches should be written.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "drive")]
    layout: LayoutArg,
    /// Generate a phantom dataset in this layout instead.
    #[arg(long, value_enum, requires = "out")]
    synthetic: Option<SyntheticLayout>,
    /// Output root for --synthetic.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Phantom edge length for --synthetic.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "drive")]
    layout: LayoutArg,
    #[arg(long, value_enum, default_value = "vessel")]
    task: TaskArg,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured step budget.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value = "fext5-100")]
    preset: String,
    /// Continue from a checkpoint that carries training state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Report progress on stderr every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Directory of field-of-view masks matched to inputs by id.
    #[arg(long)]
    fov: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    fov: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "vessel")]
    task: TaskArg,
    /// Where to write the JSON report.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct SkeletonizeArgs {
    /// A mask file or a directory of masks.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Trained checkpoint; without it a freshly initialized preset is used.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "fext5-100")]
    preset: String,
    /// Initialization seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long, num_args = 2.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    fov: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::State(format!("cannot size the worker pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Skeletonize(a) => skeletonize_cmd(a),
        Command::InspectFeatures(a) => inspect(a),
        Command::Fuse(a) => fuse(a),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

/// A single image file, or every supported image in a directory, sorted by name.
fn inputs(path: &Path) -> Result<Vec<PathBuf>> {
    require_exists(path, "input")?;
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no {} images in {}", SUPPORTED_EXTENSIONS.join("/"), path.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_rgb(path: &Path) -> Result<Tensor> {
    to_rgb(decode_image(path)?)
}

/// FOV mask for `image` from `dir`, matched by dataset id.
fn fov_for(dir: Option<&Path>, image: &Path) -> Result<Option<BinaryMap>> {
    let Some(dir) = dir else { return Ok(None) };
    let id = dataset_id(&image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    for file in inputs(dir)? {
        if dataset_id(&file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()) == id {
            return load_mask(&file).map(Some);
        }
    }
    Err(Error::Data(format!("no field-of-view mask for {id} in {}", dir.display())))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    if let Some(kind) = a.synthetic {
        let out = a.out.expect("clap requires --out with --synthetic");
        match kind {
            SyntheticLayout::Drive => write_drive_layout(&out, a.size, a.seed)?,
            SyntheticLayout::Custom => write_custom_layout(&out, 4, 2, a.size, a.seed)?,
        }
        println!("wrote synthetic dataset to {}", out.display());
        return Ok(());
    }
    let root = a.dataset.expect("clap requires --dataset without --synthetic");
    let (train, test) = load_dataset(&root, a.layout.into())?;
    let written = train.prepare_centerlines()? + test.prepare_centerlines()?;
    println!(
        "{} items ({} train, {} test); wrote {written} centerline masks",
        train.len() + test.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.max_steps = Some(steps);
    }
    cfg.validate()?;
    let (split, _) = load_dataset(&a.dataset, a.layout.into())?;
    if split.is_empty() {
        return Err(Error::Data(format!("no training images under {}", a.dataset.display())));
    }
    let images = split.load(CachePolicy::ReadOnly)?;
    let task: Task = a.task.into();

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let state = ckpt
                .state
                .ok_or_else(|| Error::Data(format!("{} holds no training state to resume", path.display())))?;
            if ckpt.model.task() != task {
                return Err(Error::Config(format!(
                    "{} was trained for task {}, not {task}",
                    path.display(),
                    ckpt.model.task()
                )));
            }
            Trainer::resume(ckpt.model, &images, cfg.clone(), state)?
        }
        None => {
            let model = Model::new(ModelSpec::preset(&a.preset, task)?, cfg.seed)?;
            Trainer::new(model, &images, cfg.clone())?
        }
    };
    create_dir(&a.out)?;
    let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&a.out.join("config.toml"), resolved.as_bytes())?;
    let total = cfg.total_steps();
    let every = a.log_every;
    trainer.run(Some(&a.out), |report, _| {
        if every > 0 && (report.step % every == 0 || report.step == total) {
            eprintln!("step {}/{total}  loss {:.5}  {} ms", report.step, report.loss, report.elapsed_ms);
        }
        ControlFlow::Continue(())
    })?;
    println!("wrote {}", a.out.join("final.dfxt").display());
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    require_exists(&a.model, "checkpoint")?;
    let model = load_checkpoint(&a.model)?.model;
    let files = inputs(&a.input)?;
    create_dir(&a.out)?;
    for file in &files {
        let image = load_rgb(file)?;
        let fov = fov_for(a.fov.as_deref(), file)?;
        write_prediction(&model, &image, &a.out, &stem(file), a.threshold, fov.as_ref())
            .map_err(|e| with_file(e, file))?;
    }
    println!("predicted {} image(s) into {}", files.len(), a.out.display());
    Ok(())
}

/// Prefixes data errors with the offending file.
fn with_file(e: Error, file: &Path) -> Error {
    match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", file.display())),
        other => other,
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    require_exists(&a.pred, "prediction directory")?;
    require_exists(&a.gt, "ground-truth directory")?;
    if let Some(fov) = &a.fov {
        require_exists(fov, "field-of-view directory")?;
    }
    let report = evaluate(&a.pred, &a.gt, a.fov.as_deref(), a.task.into(), a.threshold)?;
    write_atomic(&a.report, report.to_json().as_bytes())?;
    print!("{}", report.table());
    Ok(())
}

fn skeletonize_cmd(a: SkeletonizeArgs) -> Result<()> {
    let files = inputs(&a.input)?;
    create_dir(&a.out)?;
    for file in &files {
        let mask = load_mask(file)?;
        save_mask(a.out.join(format!("{}_skeleton.png", stem(file))), &skeletonize(&mask))?;
    }
    println!("thinned {} mask(s) into {}", files.len(), a.out.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let model = match &a.model {
        Some(path) => {
            require_exists(path, "checkpoint")?;
            load_checkpoint(path)?.model
        }
        None => Model::new(ModelSpec::preset(&a.preset, Task::Vessel)?, a.seed)?,
    };
    let image = load_rgb(&a.input)?;
    model.check_image(&image)?;
    let normalized = model.normalization().apply(&image)?;
    let maps = export_feature_maps(model.fext(), model.params(), &normalized)?;
    create_dir(&a.out)?;
    let name = stem(&a.input);
    for (k, map) in maps.iter().enumerate() {
        save_real_map(a.out.join(format!("{name}_feature_{k:03}.png")), map, 8)?;
    }
    println!("wrote {} feature maps into {}", maps.len(), a.out.display());
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let models: Vec<Model> = a
        .models
        .iter()
        .map(|p| {
            require_exists(p, "checkpoint")?;
            Ok(load_checkpoint(p)?.model)
        })
        .collect::<Result<_>>()?;
    let files = inputs(&a.input)?;
    create_dir(&a.out)?;
    for file in &files {
        let image = load_rgb(file)?;
        let fov = fov_for(a.fov.as_deref(), file)?;
        write_fusion(&models, &image, &a.out, &stem(file), a.threshold, fov.as_ref())
            .map_err(|e| with_file(e, file))?;
    }
    println!("fused {} model(s) on {} image(s) into {}", models.len(), files.len(), a.out.display());
    Ok(())
}
