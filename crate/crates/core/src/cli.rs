//! The `cephalo3d` command line: phantom datasets, preprocessing, training,
//! prediction, evaluation and gradient checks behind one binary.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::evaluate::{self, SubjectErrors};
use crate::landmarks::{landmarks_voxel_to_world, Frame, LandmarkSet};
use crate::neuralcore::gradcheck;
use crate::phantom::{self, PhantomSpec};
use crate::pipeline::{self, prepare_sample, train, Model, Profile, RunConfig, Sample};
use crate::volgrid::{read_cvol, write_cvol, Volume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_SHAPE: i32 = 5;
pub const EXIT_DATA: i32 = 6;
pub const EXIT_DIVERGED: i32 = 7;
pub const EXIT_GRADCHECK: i32 = 8;

/// File written next to a checkpoint by `train`.
pub const LOG_SUFFIX: &str = ".log.tsv";
pub const ERRORS_FILE: &str = "errors.tsv";
pub const REPORT_FILE: &str = "report.txt";

const EXIT_HELP: &str = "\
Exit status:
  0  success
  1  other error (invalid argument)
  2  usage error
  3  bad config file, key or value
  4  unreadable or malformed file
  5  dimension or shape mismatch
  6  invalid state or incomplete data
  7  training diverged
  8  gradient check failed";

#[derive(Debug, Parser)]
#[command(
    name = "cephalo3d",
    version,
    about = "3D cephalometric landmark annotation with a volumetric CNN",
    after_help = EXIT_HELP,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file applied on top of the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["toy", "full"], default_value = "toy")]
    profile: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset directory with a train/test split.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Number of phantoms.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample, pad and normalize a dataset onto the network grid.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset's training list and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Checkpoint path; the log goes to `<out>.log.tsv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict landmarks for a dataset's test list.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Receives `<sample>/landmarks.txt` in world mm.
        #[arg(long)]
        out: PathBuf,
        /// Predict every sample instead of the test list.
        #[arg(long)]
        all: bool,
    },
    /// Score predictions against reference landmarks, or report an errors file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Prediction directory, or an errors file (`subject landmark dx dy dz d3`).
        #[arg(long = "in")]
        input: PathBuf,
        /// Reference dataset directory (required for a prediction directory).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Directory receiving errors.tsv and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Print the grouped report for an errors file.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Finite-difference check of every layer.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random shapes per layer.
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom { common, .. }
            | Command::Preprocess { common, .. }
            | Command::Train { common, .. }
            | Command::Predict { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Report { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Shape(_) | Error::DimensionOverflow(_) | Error::OutOfBounds { .. } => EXIT_SHAPE,
        Error::State(_)
        | Error::IncompleteData { .. }
        | Error::InsufficientData(_)
        | Error::Degenerate(_)
        | Error::SampleRejected { .. } => EXIT_DATA,
        Error::Diverged(_) => EXIT_DIVERGED,
        Error::InvalidArgument(_) => EXIT_OTHER,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let base = RunConfig::profile(c.profile.parse::<Profile>()?);
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path, base)?,
        None => base,
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(command.common())?;
    match command {
        Command::Phantom { n, out: dir, .. } => cmd_phantom(&cfg, n, &dir, out),
        Command::Preprocess { input, out: dir, .. } => cmd_preprocess(&cfg, &input, &dir, out),
        Command::Train { input, out: ckpt, epochs, .. } => cmd_train(cfg, &input, &ckpt, epochs, out),
        Command::Predict { model, input, out: dir, all, .. } => cmd_predict(&model, &input, &dir, all, out),
        Command::Evaluate { input, reference, out: dir, format, .. } => {
            cmd_evaluate(&input, reference.as_deref(), dir.as_deref(), format, out)
        }
        Command::Report { input, format, .. } => {
            let subjects = evaluate::read_errors_tsv(&input)?;
            emit(out, &render(&evaluate::build_report(&subjects)?, format))?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { common, n } => cmd_gradcheck(common.seed.unwrap_or(0), n, out),
    }
}

fn render(report: &evaluate::EvalReport, format: Format) -> String {
    match format {
        Format::Table => evaluate::format_table(report),
        Format::Jsonl => evaluate::format_jsonl(report),
    }
}

fn cmd_phantom(cfg: &RunConfig, n: Option<usize>, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let n = n.unwrap_or(cfg.dataset.n);
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be >= 1".into()));
    }
    let spec = PhantomSpec {
        jitter: cfg.dataset.jitter,
        seed: cfg.model.seed,
        ..PhantomSpec::for_grid(cfg.model.input_dims, cfg.model.spacing)
    };
    let phantoms = phantom::generate_dataset(n, &spec)?;
    let (train_ids, test_ids) = if n >= 2 {
        phantom::split_indices(n, cfg.dataset.train_fraction, cfg.model.seed)
    } else {
        ((0..n).collect(), Vec::new())
    };
    phantom::write_dataset(dir, &phantoms, &train_ids, &test_ids)?;
    emit(
        out,
        &format!(
            "phantom: {n} samples ({} train, {} test) -> {}\n",
            train_ids.len(),
            test_ids.len(),
            dir.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn copy_if_present(from: &Path, to: &Path) -> Result<()> {
    if from.exists() {
        fs::copy(from, to).map_err(io_err(from))?;
    }
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, input: &Path, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let names = phantom::read_manifest(input)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for name in &names {
        let (volume, landmarks) = phantom::read_sample(input.join(name))?;
        let sample = prepare_sample(&cfg.model, &volume, &landmarks)?;
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        write_cvol(&sample.volume, sub.join(phantom::VOLUME_FILE))?;
        sample.landmarks.write(sub.join(phantom::LANDMARK_FILE))?;
    }
    for f in [phantom::MANIFEST_FILE, phantom::TRAIN_LIST, phantom::TEST_LIST] {
        copy_if_present(&input.join(f), &dir.join(f))?;
    }
    emit(out, &format!("preprocess: {} samples -> {}\n", names.len(), dir.display()))?;
    Ok(EXIT_OK)
}

/// Names in `list` if that file exists, otherwise the manifest.
fn sample_names(dir: &Path, list: &str) -> Result<Vec<String>> {
    let path = dir.join(list);
    if path.exists() {
        phantom::read_list(path)
    } else {
        phantom::read_manifest(dir)
    }
}

fn cmd_train(mut cfg: RunConfig, input: &Path, ckpt: &Path, epochs: Option<usize>, out: &mut dyn Write) -> Result<i32> {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.train.checkpoint = Some(ckpt.to_path_buf());
    cfg.validate()?;
    let names = sample_names(input, phantom::TRAIN_LIST)?;
    let data = names
        .iter()
        .map(|name| {
            let (v, lm) = phantom::read_sample(input.join(name))?;
            prepare_sample(&cfg.model, &v, &lm)
        })
        .collect::<Result<Vec<Sample>>>()?;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut model = Model::<f32>::build(cfg.model.clone())?;
    let log = train(&mut model, &data, &cfg.train, &cfg.augment, cfg.optim)?;
    let mut log_path = ckpt.as_os_str().to_owned();
    log_path.push(LOG_SUFFIX);
    log.write(PathBuf::from(log_path))?;
    let last = log.records.last().expect("epochs >= 1");
    emit(
        out,
        &format!(
            "train: {} samples, {} epochs, loss {:.6}, mean 3d error {:.4} mm -> {}\n",
            data.len(),
            log.records.len(),
            last.mean_loss,
            last.mean_3d_err_mm,
            ckpt.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn predict_world(model: &Model<f32>, volume: &Volume) -> Result<LandmarkSet> {
    if volume.is_normalized() {
        landmarks_voxel_to_world(&model.predict_voxel(volume)?, volume)
    } else {
        pipeline::predict(model, volume)
    }
}

fn cmd_predict(model_path: &Path, input: &Path, dir: &Path, all: bool, out: &mut dyn Write) -> Result<i32> {
    let model = Model::<f32>::load(model_path)?;
    let names = if all {
        phantom::read_manifest(input)?
    } else {
        sample_names(input, phantom::TEST_LIST)?
    };
    for name in &names {
        let volume = read_cvol(input.join(name).join(phantom::VOLUME_FILE))?;
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        predict_world(&model, &volume)?.write(sub.join(phantom::LANDMARK_FILE))?;
    }
    emit(out, &format!("predict: {} samples -> {}\n", names.len(), dir.display()))?;
    Ok(EXIT_OK)
}

fn reference_world(dir: &Path) -> Result<LandmarkSet> {
    let lm = LandmarkSet::read(dir.join(phantom::LANDMARK_FILE))?;
    match lm.frame() {
        Frame::World => Ok(lm),
        Frame::Voxel => landmarks_voxel_to_world(&lm, &read_cvol(dir.join(phantom::VOLUME_FILE))?),
    }
}

/// Subdirectories of `dir` holding a landmark file, sorted by name.
fn prediction_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.path().join(phantom::LANDMARK_FILE).is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn cmd_evaluate(
    input: &Path,
    reference: Option<&Path>,
    dir: Option<&Path>,
    format: Format,
    out: &mut dyn Write,
) -> Result<i32> {
    let subjects: Vec<SubjectErrors> = if input.is_file() {
        evaluate::read_errors_tsv(input)?
    } else {
        let reference =
            reference.ok_or_else(|| Error::InvalidArgument("--ref is required with a prediction directory".into()))?;
        let names = prediction_names(input)?;
        if names.is_empty() {
            return Err(Error::InsufficientData(format!("no predictions under {}", input.display())));
        }
        names
            .iter()
            .map(|name| {
                let pred = LandmarkSet::read(input.join(name).join(phantom::LANDMARK_FILE))?;
                evaluate::subject_errors(name, &reference_world(&reference.join(name))?, &pred)
            })
            .collect::<Result<_>>()?
    };
    let text = render(&evaluate::build_report(&subjects)?, format);
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let errors = dir.join(ERRORS_FILE);
        fs::write(&errors, evaluate::errors_to_tsv(&subjects)).map_err(io_err(&errors))?;
        let report = dir.join(REPORT_FILE);
        fs::write(&report, &text).map_err(io_err(&report))?;
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(seed: u64, cases: usize, out: &mut dyn Write) -> Result<i32> {
    if cases == 0 {
        return Err(Error::InvalidArgument("--n must be >= 1".into()));
    }
    let checks = gradcheck::run_suite(seed, cases);
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!(
            "{}\t{}\tcases={}\tmax_rel_err={:.3e}\n",
            if c.passed() { "PASS" } else { "FAIL" },
            c.layer,
            c.cases,
            c.max_rel_error
        ));
    }
    emit(out, &text)?;
    Ok(if checks.iter().all(|c| c.passed()) { EXIT_OK } else { EXIT_GRADCHECK })
}
