use std::fs;
use std::path::{Path, PathBuf};

use ftnn_core::arch::ArchitectureId;
use ftnn_core::checkpoint::{self, CheckpointError};
use ftnn_core::data::{self, Dataset, Split};
use ftnn_core::fault::{self, FaultError, MaskOptions, SweepOptions};
use ftnn_core::report::{self, ComparisonRow, ReportError};
use ftnn_core::train::{run_pipeline, TrainError};

use crate::config::{CompareSettings, SweepSettings, TrainSettings};
use crate::error::CliError;

pub const MODEL_FILE: &str = "model.ftnn";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.ini";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Files are written into a hidden sibling directory and only moved into
/// `out` once everything succeeded.
struct Stage {
    dir: tempfile::TempDir,
    out: PathBuf,
    files: Vec<String>,
}

impl Stage {
    fn new(out: &Path) -> Result<Self, CliError> {
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
        let dir = tempfile::Builder::new()
            .prefix(".ftnn-stage-")
            .tempdir_in(&parent)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
        Ok(Self {
            dir,
            out: out.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        fs::write(self.path(name), contents).map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let io = |p: &Path, e: std::io::Error| CliError::Runtime(format!("{}: {e}", p.display()));
        fs::create_dir_all(&self.out).map_err(|e| io(&self.out, e))?;
        let mut written = Vec::new();
        for name in &self.files {
            let dest = self.out.join(name);
            fs::rename(self.dir.path().join(name), &dest).map_err(|e| io(&dest, e))?;
            written.push(dest);
        }
        Ok(written)
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Dimension(_) => CliError::Config(e.to_string()),
        TrainError::Data(_) | TrainError::Classes { .. } => CliError::Data(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn report_err(e: ReportError) -> CliError {
    match e {
        ReportError::Io { .. } => CliError::Runtime(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

/// Loads the dataset paired with `arch` from `root` (or from `root` itself
/// when it already holds the files), optionally cut to a stratified subset.
pub fn load_dataset(arch: ArchitectureId, root: &Path, split: Split, subset: usize) -> Result<Dataset, CliError> {
    if !root.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} not found", root.display())));
    }
    let sub = if arch.is_cifar() { "cifar-10-batches-bin" } else { "fashion-mnist" };
    let dir = if root.join(sub).is_dir() { root.join(sub) } else { root.to_path_buf() };
    let full = if arch.is_cifar() {
        data::load_cifar10_dir(&dir, split)
    } else {
        data::load_fashion_mnist(&dir, split)
    }
    .map_err(data_err)?;
    Ok(if subset > 0 { full.stratified_subset(subset) } else { full })
}

pub fn train(s: &TrainSettings) -> Result<Vec<PathBuf>, CliError> {
    let train = load_dataset(s.arch, &s.data_dir, Split::Train, s.subset)?;
    let test = load_dataset(s.arch, &s.data_dir, Split::Test, s.test_subset)?;
    let out = run_pipeline(&s.train, s.arch, &train, &test).map_err(train_err)?;

    let mut stage = Stage::new(&s.shared.out)?;
    stage.write(MODEL_FILE, &checkpoint::to_bytes(&out.network))?;
    stage.write(TRAIN_LOG_FILE, report::train_log_csv(&out.log).as_bytes())?;
    stage.write(METRICS_FILE, report::metrics_csv(std::slice::from_ref(&out.metrics)).as_bytes())?;
    stage.write(CONFIG_ECHO_FILE, s.echo().as_bytes())?;
    let written = stage.commit()?;
    println!(
        "{} {} seed {}: train {:.2}% test {:.2}% gen_error {:.2} param_std {:.6}",
        s.arch,
        s.train.method,
        s.train.seed,
        out.metrics.train_accuracy,
        out.metrics.test_accuracy,
        out.metrics.generalization_error,
        out.metrics.param_std
    );
    Ok(written)
}

fn fault_err(e: FaultError) -> CliError {
    match e {
        FaultError::Network(_) | FaultError::Pool(_) => CliError::Runtime(e.to_string()),
        FaultError::EmptyEval => CliError::Data(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

pub fn sweep(s: &SweepSettings) -> Result<Vec<PathBuf>, CliError> {
    let net = checkpoint::load_checkpoint(&s.checkpoint).map_err(|e| match e {
        CheckpointError::Io(io) => CliError::Data(format!("{}: {io}", s.checkpoint.display())),
        other => CliError::Data(format!("{}: {other}", s.checkpoint.display())),
    })?;
    let arch: ArchitectureId = net
        .arch()
        .parse()
        .map_err(|_| CliError::Config(format!("checkpoint architecture `{}` is not a known preset", net.arch())))?;
    let mask = MaskOptions {
        include_output: s.include_output,
    };
    for &kind in &s.faults {
        fault::gen_mask(&net, kind, 0.0, 0, mask).map_err(|e| match e {
            FaultError::NoConvLayers(_) => CliError::Config(format!(
                "`{kind}` faults target convolution filters, but architecture {arch} has no convolutional layers"
            )),
            other => fault_err(other),
        })?;
    }
    let test = load_dataset(arch, &s.data_dir, Split::Test, s.test_subset)?;

    let mut stage = Stage::new(&s.shared.out)?;
    for &kind in &s.faults {
        let opts = SweepOptions {
            trials: s.trials,
            seed: s.shared.seed,
            jobs: s.shared.jobs,
            mask,
        };
        let curve = fault::degradation_sweep(&net, kind, &s.fractions, &test, opts).map_err(fault_err)?;
        let curves = [curve];
        stage.write(&format!("sweep_{kind}.csv"), report::sweep_csv(&curves).as_bytes())?;
        stage.write(&format!("summary_{kind}.csv"), report::summary_csv(&curves).as_bytes())?;
        for p in &curves[0].points {
            println!(
                "{kind} p={:<5} mean {:.2}% std {:.2} eps_max {:.4}",
                p.fraction, p.mean_accuracy, p.std_accuracy, p.epsilon_max
            );
        }
    }
    stage.write(CONFIG_ECHO_FILE, s.echo().as_bytes())?;
    stage.commit()
}

pub fn compare(s: &CompareSettings) -> Result<Vec<PathBuf>, CliError> {
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for path in &s.inputs {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let parsed = report::parse_comparison_csv(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        rows.extend(parsed);
    }
    let merged = report::merge_comparison(rows).map_err(report_err)?;
    let mut stage = Stage::new(&s.shared.out)?;
    stage.write(COMPARISON_FILE, report::comparison_csv(&merged).as_bytes())?;
    stage.write(CONFIG_ECHO_FILE, s.echo().as_bytes())?;
    stage.commit()
}
