//! `fuselab` command-line front end.
//!
//! [`run`] parses arguments, executes one subcommand and returns the process
//! exit status: 0 on success, 1 for invalid arguments or data, 2 for I/O
//! failures. Every error is written to stderr prefixed with `error:`.

pub mod dataset;
pub mod overlay;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ColorChoice, Parser, Subcommand, ValueEnum};
use fuselab::calib::{sample_disturbance, CalibrationRig, PerturbationLevel};
use fuselab::eval::{miou, weak_calib_benchmark, BenchmarkRun, ConfusionMatrix, DisturbanceMode, OraclePredictor, Predictor};
use fuselab::fusion::FeatureMap;
use fuselab::pointcloud::load_cloud;
use fuselab::toytrain::{gen_scenes, train, Strategy, ToyModel, TrainConfig, N_CLASSES};
use serde::Serialize;

/// Environment variable capping worker threads; 0 or unset means one per core.
pub const THREADS_ENV: &str = "FUSELAB_THREADS";

/// Class bound for clouds whose labels are only drawn, never scored.
const ANY_CLASSES: usize = u16::MAX as usize + 1;

const EXIT_CODES: &str = "\
Exit status:
  0  success
  1  invalid arguments or input data
  2  file system error";

const TOP_AFTER_HELP: &str = "\
Exit status:
  0  success
  1  invalid arguments or input data
  2  file system error

Set FUSELAB_THREADS to cap worker threads (0 = one per core).";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(fuselab::Error),
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) if e.is_io() => 2,
            CliError::Lib(_) => 1,
            CliError::Io { .. } => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl From<fuselab::Error> for CliError {
    fn from(e: fuselab::Error) -> Self {
        CliError::Lib(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "fuselab", version, about = "LiDAR-camera fusion geometry and weak-calibration benchmarks")]
#[command(color = ColorChoice::Never, after_help = TOP_AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project a point cloud into one camera and print `index u v depth valid` rows.
    #[command(after_help = EXIT_CODES)]
    Project {
        /// Calibration rig (TOML).
        #[arg(long)]
        rig: PathBuf,
        /// Point cloud (FLPC).
        #[arg(long)]
        points: PathBuf,
        /// Camera index in the rig.
        #[arg(long)]
        camera: usize,
        /// Perturbation level 0..3 applied before projecting.
        #[arg(long, default_value = "0", value_parser = parse_level)]
        level: PerturbationLevel,
        /// Disturbance seed; required when --level is above 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Frame id keying the disturbance draw.
        #[arg(long, default_value_t = 0)]
        frame: u64,
    },
    /// Write a rig with every camera perturbed at one level.
    #[command(after_help = EXIT_CODES)]
    Perturb {
        /// Calibration rig (TOML).
        #[arg(long)]
        rig: PathBuf,
        /// Perturbation level 0..3.
        #[arg(long, value_parser = parse_level)]
        level: PerturbationLevel,
        /// Disturbance seed.
        #[arg(long)]
        seed: u64,
        /// Frame id keying the disturbance draw.
        #[arg(long, default_value_t = 0)]
        frame: u64,
        /// Output rig; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print disturbance angles (degrees) as `camera rx ry rz` rows.
    #[command(after_help = EXIT_CODES)]
    Sample {
        /// Perturbation level 0..3.
        #[arg(long, value_parser = parse_level)]
        level: PerturbationLevel,
        /// Disturbance seed.
        #[arg(long)]
        seed: u64,
        /// Frame id keying the disturbance draw.
        #[arg(long, default_value_t = 0)]
        frame: u64,
        /// Number of cameras to draw for.
        #[arg(long, default_value_t = 1)]
        cameras: u64,
    },
    /// Score predicted labels against ground truth and print a JSON IoU report.
    #[command(after_help = EXIT_CODES)]
    Eval {
        /// Ground-truth labelled cloud (FLPC).
        #[arg(long)]
        gt: PathBuf,
        /// Predicted labelled cloud (FLPC) with the same point count.
        #[arg(long)]
        pred: PathBuf,
        /// Number of classes.
        #[arg(long)]
        classes: usize,
    },
    /// Run the multi-level weak-calibration benchmark and emit a JSON report.
    #[command(after_help = EXIT_CODES)]
    Bench {
        /// Dataset directory as written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Disturbance seed.
        #[arg(long)]
        seed: u64,
        /// Comma-separated levels to evaluate.
        #[arg(long, default_value = "0,1,2,3", value_delimiter = ',', value_parser = parse_level)]
        levels: Vec<PerturbationLevel>,
        /// Predictor under test.
        #[arg(long, value_enum, default_value_t = PredictorKind::Oracle)]
        predictor: PredictorKind,
        /// Model file (FLMD); required with `--predictor model`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Disturbance granularity.
        #[arg(long, value_enum, default_value_t = ModeArg::PerFrameCamera)]
        mode: ModeArg,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate labelled synthetic scenes with camera feature maps.
    #[command(after_help = EXIT_CODES)]
    Synth {
        /// Scene seed; scene i uses seed + i.
        #[arg(long)]
        seed: u64,
        /// Number of scenes.
        #[arg(long, default_value_t = 1)]
        scenes: u64,
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the per-point toy classifier on synthetic scenes.
    #[command(name = "train-toy", after_help = EXIT_CODES)]
    TrainToy {
        /// Training strategy.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Number of training scenes; scene i uses seed + i.
        #[arg(long)]
        scenes: u64,
        /// Scene and disturbance seed.
        #[arg(long)]
        seed: u64,
        /// Output model (FLMD).
        #[arg(long)]
        out: PathBuf,
        /// Full-batch gradient steps.
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        /// Ignore camera features.
        #[arg(long)]
        lidar_only: bool,
    },
    /// Draw projected points over a checkerboard or a feature map as a PPM image.
    #[command(after_help = EXIT_CODES)]
    Overlay {
        /// Calibration rig (TOML).
        #[arg(long)]
        rig: PathBuf,
        /// Point cloud (FLPC); labels, when present, pick dot colours.
        #[arg(long)]
        points: PathBuf,
        /// Camera index in the rig.
        #[arg(long)]
        camera: usize,
        /// Perturbation level 0..3.
        #[arg(long, default_value = "0", value_parser = parse_level)]
        level: PerturbationLevel,
        /// Disturbance seed; required when --level is above 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Frame id keying the disturbance draw.
        #[arg(long, default_value_t = 0)]
        frame: u64,
        /// Feature map (FLFM) whose first channel becomes the background.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Dot half-width in pixels.
        #[arg(long, default_value_t = 1)]
        radius: usize,
        /// Output image (binary PPM).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PredictorKind {
    /// Returns the ground-truth labels.
    Oracle,
    /// A toy model loaded from --model.
    Model,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    /// Independent draw per frame and camera.
    PerFrameCamera,
    /// One draw per camera shared by all frames.
    Global,
}

impl From<ModeArg> for DisturbanceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerFrameCamera => DisturbanceMode::PerFrameCamera,
            ModeArg::Global => DisturbanceMode::Global,
        }
    }
}

fn parse_level(s: &str) -> Result<PerturbationLevel, String> {
    s.parse().map_err(|e: fuselab::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: fuselab::Error| e.to_string())
}

#[derive(Serialize)]
struct BenchReport<'a> {
    predictor: &'a str,
    #[serde(flatten)]
    run: &'a BenchmarkRun,
}

#[derive(Serialize)]
struct EvalReport {
    confusion: ConfusionMatrix,
    #[serde(flatten)]
    report: fuselab::eval::IoUReport,
}

/// Runs the CLI against the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// Runs the CLI with explicit output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => match out.write_all(text.as_bytes()) {
                    Ok(()) => 0,
                    Err(_) => 2,
                },
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    // Commands write into a buffer so the pool never touches the caller's stream.
    let mut buf = Vec::new();
    let result = thread_pool()
        .and_then(|pool| pool.install(|| dispatch(cli.command, &mut buf)))
        .and_then(|()| out.write_all(&buf).map_err(|e| CliError::io(Path::new("<stdout>"), e)));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(std::env::VarError::NotPresent) => 0,
        Err(e) => return Err(CliError::Usage(format!("{THREADS_ENV}: {e}"))),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn write_out(out: &mut Vec<u8>, text: &str) -> Result<(), CliError> {
    out.extend_from_slice(text.as_bytes());
    Ok(())
}

fn write_text(path: Option<&Path>, text: &str, out: &mut Vec<u8>) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => write_out(out, text),
    }
}

/// Seed for a subcommand whose randomness only kicks in above level 0.
fn level_seed(level: PerturbationLevel, seed: Option<u64>) -> Result<u64, CliError> {
    match (level, seed) {
        (_, Some(s)) => Ok(s),
        (PerturbationLevel::L0, None) => Ok(0),
        (_, None) => Err(CliError::Usage(format!("--seed is required at level {level}"))),
    }
}

fn rig_at(
    path: &Path,
    level: PerturbationLevel,
    seed: Option<u64>,
    frame: u64,
) -> Result<CalibrationRig, CliError> {
    let seed = level_seed(level, seed)?;
    let rig = CalibrationRig::load(path)?;
    Ok(rig.perturbed_at_level(level, seed, frame)?)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    // Going through `Value` sorts object keys, keeping reports diff-friendly.
    let value = serde_json::to_value(value).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn dispatch(command: Command, out: &mut Vec<u8>) -> Result<(), CliError> {
    match command {
        Command::Project {
            rig,
            points,
            camera,
            level,
            seed,
            frame,
        } => {
            let rig = rig_at(&rig, level, seed, frame)?;
            let (cloud, _) = load_cloud(&points, ANY_CLASSES)?;
            let mut table = String::new();
            for (i, p) in rig.camera(camera)?.project(&cloud).iter().enumerate() {
                table.push_str(&format!("{i}\t{:.6}\t{:.6}\t{:.6}\t{}\n", p.u, p.v, p.depth, p.valid));
            }
            write_out(out, &table)
        }
        Command::Perturb {
            rig,
            level,
            seed,
            frame,
            out: dest,
        } => {
            let rig = rig_at(&rig, level, Some(seed), frame)?;
            write_text(dest.as_deref(), &rig.to_toml_string(), out)
        }
        Command::Sample {
            level,
            seed,
            frame,
            cameras,
        } => {
            let mut table = String::new();
            for cam in 0..cameras {
                let s = sample_disturbance(level, seed, frame, cam);
                table.push_str(&format!("{cam}\t{:.9}\t{:.9}\t{:.9}\n", s.rx, s.ry, s.rz));
            }
            write_out(out, &table)
        }
        Command::Eval { gt, pred, classes } => {
            let missing = |p: &Path| CliError::Usage(format!("{}: cloud has no labels", p.display()));
            let (_, gt_labels) = load_cloud(&gt, classes)?;
            let gt_labels = gt_labels.ok_or_else(|| missing(&gt))?;
            let (_, pred_labels) = load_cloud(&pred, classes)?;
            let pred_labels = pred_labels.ok_or_else(|| missing(&pred))?;
            let mut confusion = ConfusionMatrix::new(classes);
            confusion.accumulate(&gt_labels, &pred_labels)?;
            let report = miou(&confusion);
            write_out(out, &to_json(&EvalReport { confusion, report })?)
        }
        Command::Bench {
            data,
            seed,
            levels,
            predictor,
            model,
            mode,
            out: dest,
        } => {
            let frames = dataset::load_dataset(&data)?;
            let loaded;
            let (name, predictor): (&str, &dyn Predictor) = match (predictor, model) {
                (PredictorKind::Oracle, None) => ("oracle", &OraclePredictor),
                (PredictorKind::Oracle, Some(_)) => {
                    return Err(CliError::Usage("--model only applies to --predictor model".into()))
                }
                (PredictorKind::Model, Some(path)) => {
                    loaded = ToyModel::load(&path)?;
                    ("model", &loaded)
                }
                (PredictorKind::Model, None) => {
                    return Err(CliError::Usage("--predictor model requires --model".into()))
                }
            };
            let run = weak_calib_benchmark(predictor, &frames, &levels, seed, mode.into())?;
            let report = to_json(&BenchReport { predictor: name, run: &run })?;
            write_text(dest.as_deref(), &report, out)
        }
        Command::Synth { seed, scenes, out_dir } => {
            if scenes == 0 {
                return Err(CliError::Usage("--scenes must be positive".into()));
            }
            let seeds: Vec<u64> = (0..scenes).map(|i| seed.wrapping_add(i)).collect();
            let generated = gen_scenes(&seeds)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
            dataset::write_manifest(&out_dir, N_CLASSES)?;
            generated[0].rig.save(&out_dir.join("rig.toml"))?;
            let mut summary = String::new();
            for (i, scene) in generated.iter().enumerate() {
                dataset::write_frame(&out_dir, i, &scene.cloud, &scene.labels, &scene.maps)?;
                summary.push_str(&format!("{i:04}\tseed={}\tpoints={}\n", scene.seed, scene.cloud.len()));
            }
            write_out(out, &summary)
        }
        Command::TrainToy {
            strategy,
            scenes,
            seed,
            out: dest,
            epochs,
            lidar_only,
        } => {
            if scenes == 0 {
                return Err(CliError::Usage("--scenes must be positive".into()));
            }
            let seeds: Vec<u64> = (0..scenes).map(|i| seed.wrapping_add(i)).collect();
            let generated = gen_scenes(&seeds)?;
            let mut cfg = if lidar_only {
                TrainConfig {
                    strategy,
                    ..TrainConfig::lidar_only(seed)
                }
            } else {
                TrainConfig::new(strategy, seed)
            };
            cfg.epochs = epochs;
            let model = train(&generated, &cfg)?;
            model.save(&dest)?;
            write_out(
                out,
                &format!("{strategy}\tscenes={scenes}\tepochs={epochs}\t{}\n", dest.display()),
            )
        }
        Command::Overlay {
            rig,
            points,
            camera,
            level,
            seed,
            frame,
            map,
            radius,
            out: dest,
        } => {
            let rig = rig_at(&rig, level, seed, frame)?;
            let cam = rig.camera(camera)?;
            let (cloud, labels) = load_cloud(&points, ANY_CLASSES)?;
            let background = map.as_deref().map(FeatureMap::load).transpose()?;
            let image = overlay::render(&cloud, labels.as_ref(), cam, background.as_ref(), radius);
            let mut buf = Vec::with_capacity(image.rgb.len() + 32);
            image
                .write_ppm(&mut buf)
                .map_err(|e| CliError::io(&dest, e))?;
            std::fs::write(&dest, buf).map_err(|e| CliError::io(&dest, e))
        }
    }
}
