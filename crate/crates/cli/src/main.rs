//! `promptseg` command line: synthetic data generation, bi-level training,
//! evaluation, single-image prediction, and the 2x2 ablation sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime/data error.

mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use promptseg_core::data::{
    gen_synthetic, load_dataset_dir, metrics::write_metrics, save_dataset_dir, SyntheticSpec,
};
use promptseg_core::prompt::BoundingBox;
use promptseg_core::trainer::{evaluate, train, Checkpoint, SplitDataset};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Few-shot promptable segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/ and test/ graymap pairs).
    GenData(GenDataArgs),
    /// Run bi-level training and write the best checkpoint plus metrics.
    Train(TrainArgs),
    /// Print the mean test dice of a checkpoint as a percentage.
    Eval(EvalArgs),
    /// Segment one image and write the binary mask.
    Predict(PredictArgs),
    /// Run the 2x2 {box prompts} x {mask calibration} ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset root (creates train/ and test/ inside).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of training examples.
    #[arg(long)]
    count: Option<usize>,
    /// Number of held-out test examples.
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square image size in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Shape family: rectangle | ellipse.
    #[arg(long)]
    shape: Option<String>,
    /// Foreground intensity mean.
    #[arg(long)]
    fg: Option<f64>,
    /// Background intensity mean.
    #[arg(long)]
    bg: Option<f64>,
    /// Per-pixel Gaussian noise sigma.
    #[arg(long)]
    noise: Option<f64>,
    /// Add a background-clutter distractor blob to every image.
    #[arg(long)]
    distractor: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing train/ (and optionally test/).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint.amck, metrics.csv and config.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lower-lr")]
    lower_lr: Option<f64>,
    #[arg(long = "upper-lr")]
    upper_lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Disable automated box prompting.
    #[arg(long = "no-box-prompts")]
    no_box_prompts: bool,
    /// Disable Hadamard mask calibration.
    #[arg(long = "no-calibration")]
    no_calibration: bool,
    /// Read detector boxes from this file instead of the mask oracle.
    #[arg(long = "detections-file")]
    detections_file: Option<PathBuf>,
    /// Oracle box jitter in pixels.
    #[arg(long)]
    jitter: Option<u32>,
    /// Record test dice every epoch (slower).
    #[arg(long = "test-each-epoch")]
    test_each_epoch: bool,
    /// Checksum-audit level separation every step.
    #[arg(long = "check-separation")]
    check_separation: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample directory (img_/mask_ pairs) or a dataset root with test/.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (binary 8-bit graymap).
    #[arg(long)]
    image: PathBuf,
    /// Explicit box prompt `x1,y1,x2,y2`, overriding any detector source.
    #[arg(long = "box")]
    bbox: Option<String>,
    /// Detections file consulted when no explicit box is given.
    #[arg(long = "detections-file")]
    detections_file: Option<PathBuf>,
    /// Output mask path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, one run per seed per arm.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size for every arm. The calibration arms only differ from
    /// their counterparts when batches mix (>= 2).
    #[arg(long = "batch-size", default_value_t = 2)]
    batch_size: usize,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<promptseg_core::Error> for CliError {
    fn from(e: promptseg_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut rc = RunConfig::default();
    if let Some(path) = &args.config {
        rc.load_file(path).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = args.count {
        rc.count = v;
    }
    if let Some(v) = args.test_count {
        rc.test_count = v;
    }
    if let Some(v) = args.seed {
        rc.train.seed = v;
    }
    if let Some(v) = args.size {
        rc.size = v;
    }
    if let Some(v) = &args.shape {
        rc.shape = v.parse().map_err(|e: promptseg_core::Error| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = args.fg {
        rc.mean_fg = v;
    }
    if let Some(v) = args.bg {
        rc.mean_bg = v;
    }
    if let Some(v) = args.noise {
        rc.noise_sigma = v;
    }
    if args.distractor {
        rc.distractor = true;
    }
    if rc.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if rc.test_count == 0 {
        return Err(CliError::Usage("--test-count must be at least 1".into()));
    }

    let train_spec = SyntheticSpec {
        size: rc.size,
        family: rc.shape,
        mean_fg: rc.mean_fg,
        mean_bg: rc.mean_bg,
        noise_sigma: rc.noise_sigma,
        distractor: rc.distractor,
        count: rc.count,
        first_id: 0,
        seed: rc.train.seed,
    };
    let test_spec = SyntheticSpec {
        count: rc.test_count,
        first_id: rc.count,
        seed: rc.train.seed ^ 0x7e57_da7a,
        ..train_spec.clone()
    };
    let train = gen_synthetic(&train_spec)?;
    let test = gen_synthetic(&test_spec)?;
    save_dataset_dir(&args.out.join("train"), &train)?;
    save_dataset_dir(&args.out.join("test"), &test)?;
    rc.write_resolved(&args.out)?;
    println!(
        "wrote {} training and {} test samples to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<(RunConfig, PathBuf, PathBuf), CliError> {
    let mut rc = RunConfig::default();
    if let Some(path) = &args.config {
        rc.load_file(path).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = args.seed {
        rc.train.seed = v;
    }
    if let Some(v) = args.epochs {
        rc.train.epochs = v;
    }
    if let Some(v) = args.lower_lr {
        rc.train.lower_lr0 = v;
    }
    if let Some(v) = args.upper_lr {
        rc.train.upper_lr0 = v;
    }
    if let Some(v) = args.lambda {
        rc.train.lambda = v;
    }
    if let Some(v) = args.alpha {
        rc.train.alpha = v;
    }
    if let Some(v) = args.rank {
        rc.train.rank = v;
    }
    if let Some(v) = args.batch_size {
        rc.train.batch_size = v;
    }
    if args.no_box_prompts {
        rc.train.box_prompts = false;
    }
    if args.no_calibration {
        rc.train.calibration = false;
    }
    if let Some(v) = &args.detections_file {
        rc.train.detections_file = Some(v.clone());
    }
    if let Some(v) = args.jitter {
        rc.train.jitter_px = v;
    }
    if args.test_each_epoch {
        rc.train.eval_test_each_epoch = true;
    }
    if args.check_separation {
        rc.train.check_separation = true;
    }
    let data = args
        .data
        .clone()
        .or_else(|| rc.data.clone())
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = args
        .out
        .clone()
        .or_else(|| rc.out.clone())
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    rc.data = Some(data.clone());
    rc.out = Some(out.clone());
    Ok((rc, data, out))
}

/// Load `<root>/train` + optional `<root>/test`, or treat `root` itself as a
/// flat sample directory.
fn load_split_root(root: &Path, seed: u64) -> Result<SplitDataset, CliError> {
    let train_dir = root.join("train");
    let (train, test) = if train_dir.is_dir() {
        let test_dir = root.join("test");
        let test = if test_dir.is_dir() {
            load_dataset_dir(&test_dir)?
        } else {
            Vec::new()
        };
        (load_dataset_dir(&train_dir)?, test)
    } else {
        (load_dataset_dir(root)?, Vec::new())
    };
    Ok(SplitDataset::new(train, test, seed)?)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (mut rc, data_root, out_dir) = resolve_train_config(&args)?;
    let data = load_split_root(&data_root, rc.train.seed)?;
    let sample = data
        .d1
        .first()
        .ok_or_else(|| CliError::Runtime("dataset is empty".into()))?;
    rc.train.image_size = sample.height();
    rc.size = sample.height();

    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let outcome = train(&rc.train, &data)?;
    let ckpt_path = out_dir.join("checkpoint.amck");
    outcome.best.save(&ckpt_path)?;
    write_metrics(&out_dir.join("metrics.csv"), &outcome.metrics)?;
    rc.write_resolved(&out_dir)?;

    println!("epochs: {}", outcome.metrics.len());
    println!("best d2 dice: {:.4}", outcome.best.best_d2_dice);
    if !data.test.is_empty() {
        let model = outcome.best.restore_model()?;
        let test_dice = evaluate(&model, &data.test, &rc.train.eval_detector()?)?;
        println!("test dice of best checkpoint: {:.4}", test_dice);
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dir = if args.data.join("test").is_dir() {
        args.data.join("test")
    } else {
        args.data.clone()
    };
    // an unusable dataset path is a usage problem for eval
    let samples = load_dataset_dir(&dir).map_err(|e| CliError::Usage(e.to_string()))?;
    if samples.is_empty() {
        return Err(CliError::Usage("dataset is empty".into()));
    }
    let model = ckpt.restore_model()?;
    let dice = evaluate(&model, &samples, &ckpt.config.eval_detector()?)?;
    println!("{:.1}", dice * 100.0);
    Ok(())
}

fn parse_box(text: &str) -> Result<BoundingBox, CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(CliError::Usage(format!(
            "--box expects x1,y1,x2,y2 (got `{text}`)"
        )));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad box coordinate `{p}`")))
        })
        .collect::<Result<_, _>>()?;
    BoundingBox::new(nums[0], nums[1], nums[2], nums[3], 1.0)
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.restore_model()?;
    let image2d = promptseg_core::data::pgm::load_image(&args.image)?;
    let shape = image2d.shape();
    let image = image2d.reshape(&[1, shape[0], shape[1]])?;

    let bbox = match &args.bbox {
        Some(text) => Some(parse_box(text)?),
        None => match &args.detections_file {
            Some(path) => {
                let det = promptseg_core::prompt::DetectionsFile::load(path)?;
                let id = image_id_of(&args.image);
                let boxes = det
                    .get(&id)
                    .ok_or_else(|| {
                        CliError::Runtime(format!("detections file has no entry for `{id}`"))
                    })?
                    .to_vec();
                promptseg_core::prompt::select_best_box(&boxes).copied()
            }
            None => None,
        },
    };
    let output = model.forward_image(&image, bbox.as_ref())?;
    let mask = promptseg_core::loss::binarize_foreground(&output.m_final, 0, 1)?;
    promptseg_core::data::pgm::save_mask(&args.out, &mask)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Image id for detections lookups: file stem, minus any `img_` prefix.
fn image_id_of(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_prefix("img_").unwrap_or(&stem).to_string()
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut rc = RunConfig::default();
    if let Some(path) = &args.config {
        rc.load_file(path).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = args.epochs {
        rc.train.epochs = v;
    }
    rc.train.batch_size = args.batch_size;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad seed `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::Usage("need at least one seed".into()));
    }

    let arms = [
        ("baseline", false, false),
        ("calibration-only", false, true),
        ("box-only", true, false),
        ("full", true, true),
    ];
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut csv = String::from("arm,box_prompts,mask_calibration,mean_test_dice\n");
    for (name, box_prompts, calibration) in arms {
        let mut total = 0.0;
        for &seed in &seeds {
            let mut cfg = rc.train.clone();
            cfg.seed = seed;
            cfg.box_prompts = box_prompts;
            cfg.calibration = calibration;
            let data = load_split_root(&args.data, seed)?;
            if data.test.is_empty() {
                return Err(CliError::Runtime(
                    "ablation needs a test/ split in the dataset root".into(),
                ));
            }
            let sample = &data.d1[0];
            cfg.image_size = sample.height();
            let outcome = train(&cfg, &data)?;
            let model = outcome.best.restore_model()?;
            total += evaluate(&model, &data.test, &cfg.eval_detector()?)?;
        }
        let mean = total / seeds.len() as f64;
        println!("{name:-18} box={box_prompts:-5} calibration={calibration:-5} test dice {mean:.4}");
        csv.push_str(&format!(
            "{name},{box_prompts},{calibration},{mean:.6}\n"
        ));
    }
    let csv_path = args.out.join("ablation.csv");
    std::fs::write(&csv_path, csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    rc.write_resolved(&args.out)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
