//! INI-style run configuration.
//!
//! Keys before any section are shared (`out`, `seed`, `jobs`); each
//! subcommand reads its own `[train]`, `[sweep]` or `[compare]` section.
//! Values resolve as defaults, then file, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ftnn_core::arch::ArchitectureId;
use ftnn_core::fault::{parse_fractions, FaultKind};
use ftnn_core::train::{Method, TrainConfig};
use ini::Ini;

use crate::error::CliError;

pub const SHARED_KEYS: &[&str] = &["out", "seed", "jobs"];

pub const TRAIN_KEYS: &[&str] = &[
    "arch",
    "method",
    "data_dir",
    "subset",
    "test_subset",
    "batch_size",
    "epochs_phase1",
    "epochs_phase2",
    "disc_steps",
    "lr_fe",
    "lr_gen",
    "lr_cls",
    "lr_disc",
    "lambda",
    "latent_dim",
    "head_hidden",
    "disc_hidden",
    "dropout",
    "prior_mean",
    "prior_var",
    "freeze_fe",
];

pub const SWEEP_KEYS: &[&str] = &[
    "checkpoint",
    "fault",
    "fractions",
    "trials",
    "data_dir",
    "test_subset",
    "include_output",
];

pub const COMPARE_KEYS: &[&str] = &["inputs"];

fn section_keys(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "train" => Some(TRAIN_KEYS),
        "sweep" => Some(SWEEP_KEYS),
        "compare" => Some(COMPARE_KEYS),
        _ => None,
    }
}

/// Merged key/value view for one subcommand.
#[derive(Debug, Clone, Default)]
pub struct Values(BTreeMap<String, String>);

impl Values {
    /// Reads `path` (if given), validating every section and key, and keeps
    /// the shared keys plus the keys of `section`.
    pub fn load(path: Option<&Path>, section: &str) -> Result<Self, CliError> {
        let mut out = BTreeMap::new();
        let Some(path) = path else {
            return Ok(Values(out));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let ini = Ini::load_from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (sec, props) in ini.iter() {
            let allowed: &[&str] = match sec {
                None => SHARED_KEYS,
                Some(s) => section_keys(s).ok_or_else(|| {
                    CliError::Config(format!("{}: unknown section [{s}]", path.display()))
                })?,
            };
            for (k, v) in props.iter() {
                if !allowed.contains(&k) && !SHARED_KEYS.contains(&k) {
                    let where_ = sec.map(|s| format!("[{s}]")).unwrap_or_else(|| "top level".into());
                    return Err(CliError::Config(format!(
                        "{}: unknown key `{k}` in {where_}",
                        path.display()
                    )));
                }
                if sec.is_none() || sec == Some(section) {
                    out.insert(k.to_string(), v.to_string());
                }
            }
        }
        Ok(Values(out))
    }

    /// Applies `key=value` overrides, rejecting keys the section does not know.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        let allowed = section_keys(section).unwrap_or(&[]);
        if !allowed.contains(&key) && !SHARED_KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown key `{key}` for `{section}`")));
        }
        self.0.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn set_pairs(&mut self, section: &str, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{p}`")))?;
            self.set(section, k.trim(), v.trim())?;
        }
        Ok(())
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CliError::Config(format!("`{key}` = `{v}`: {e}"))),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(CliError::Config(format!("`{key}` = `{v}`: expected true or false"))),
        }
    }

    fn get_list(&self, key: &str, default: Vec<f64>) -> Result<Vec<f64>, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| CliError::Config(format!("`{key}` = `{v}`: {e}")))
                })
                .collect(),
        }
    }

    fn require(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }
}

fn list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone)]
pub struct Shared {
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
}

impl Shared {
    fn from_values(v: &Values, default_out: &str) -> Result<Self, CliError> {
        Ok(Self {
            out: PathBuf::from(v.raw("out").unwrap_or(default_out)),
            seed: v.get("seed", 0)?,
            jobs: v.get("jobs", 0)?,
        })
    }

    fn echo(&self, s: &mut String) {
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "jobs = {}", self.jobs);
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub shared: Shared,
    pub arch: ArchitectureId,
    pub data_dir: PathBuf,
    /// Stratified first-K training subset; 0 keeps everything.
    pub subset: usize,
    pub test_subset: usize,
    pub train: TrainConfig,
}

impl TrainSettings {
    pub fn from_values(v: &Values) -> Result<Self, CliError> {
        let shared = Shared::from_values(v, "out")?;
        let arch: ArchitectureId = v
            .raw("arch")
            .unwrap_or("a1_mini")
            .parse()
            .map_err(|e: ftnn_core::NetworkError| CliError::Config(e.to_string()))?;
        let d = TrainConfig::for_arch(arch);
        let method: Method = v.raw("method").unwrap_or("adversarial").parse().map_err(CliError::Config)?;
        let train = TrainConfig {
            seed: shared.seed,
            method,
            batch_size: v.get("batch_size", d.batch_size)?,
            epochs_phase1: v.get("epochs_phase1", d.epochs_phase1)?,
            epochs_phase2: v.get("epochs_phase2", d.epochs_phase2)?,
            disc_steps: v.get("disc_steps", d.disc_steps)?,
            lr_fe: v.get("lr_fe", d.lr_fe)?,
            lr_gen: v.get("lr_gen", d.lr_gen)?,
            lr_cls: v.get("lr_cls", d.lr_cls)?,
            lr_disc: v.get("lr_disc", d.lr_disc)?,
            lambda: v.get("lambda", d.lambda)?,
            latent_dim: v.get("latent_dim", d.latent_dim)?,
            prior_mean: v.get_list("prior_mean", d.prior_mean.clone())?,
            prior_var: v.get_list("prior_var", d.prior_var.clone())?,
            head_hidden: v.get("head_hidden", d.head_hidden)?,
            disc_hidden: v.get("disc_hidden", d.disc_hidden)?,
            dropout: v.get("dropout", d.dropout)?,
            freeze_fe: v.get_bool("freeze_fe", d.freeze_fe)?,
        };
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            shared,
            arch,
            data_dir: PathBuf::from(v.raw("data_dir").unwrap_or("data")),
            subset: v.get("subset", 0)?,
            test_subset: v.get("test_subset", 0)?,
            train,
        })
    }

    /// Fully resolved config, readable back by [`Values::load`].
    pub fn echo(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        self.shared.echo(&mut s);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "arch = {}", self.arch);
        let _ = writeln!(s, "method = {}", t.method);
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "subset = {}", self.subset);
        let _ = writeln!(s, "test_subset = {}", self.test_subset);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs_phase1 = {}", t.epochs_phase1);
        let _ = writeln!(s, "epochs_phase2 = {}", t.epochs_phase2);
        let _ = writeln!(s, "disc_steps = {}", t.disc_steps);
        let _ = writeln!(s, "lr_fe = {}", t.lr_fe);
        let _ = writeln!(s, "lr_gen = {}", t.lr_gen);
        let _ = writeln!(s, "lr_cls = {}", t.lr_cls);
        let _ = writeln!(s, "lr_disc = {}", t.lr_disc);
        let _ = writeln!(s, "lambda = {}", t.lambda);
        let _ = writeln!(s, "latent_dim = {}", t.latent_dim);
        let _ = writeln!(s, "head_hidden = {}", t.head_hidden);
        let _ = writeln!(s, "disc_hidden = {}", t.disc_hidden);
        let _ = writeln!(s, "dropout = {}", t.dropout);
        let _ = writeln!(s, "prior_mean = {}", list(&t.prior_mean));
        let _ = writeln!(s, "prior_var = {}", list(&t.prior_var));
        let _ = writeln!(s, "freeze_fe = {}", t.freeze_fe);
        s
    }
}

#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub shared: Shared,
    pub checkpoint: PathBuf,
    pub faults: Vec<FaultKind>,
    pub fractions: Vec<f64>,
    pub fractions_spec: String,
    pub trials: usize,
    pub data_dir: PathBuf,
    pub test_subset: usize,
    pub include_output: bool,
}

impl SweepSettings {
    pub fn from_values(v: &Values) -> Result<Self, CliError> {
        let shared = Shared::from_values(v, "out")?;
        let faults = v
            .raw("fault")
            .unwrap_or("weight")
            .split(',')
            .map(|s| s.trim().parse::<FaultKind>().map_err(CliError::Config))
            .collect::<Result<Vec<_>, _>>()?;
        let fractions_spec = v.raw("fractions").unwrap_or("0:0.9:0.1").to_string();
        let fractions = parse_fractions(&fractions_spec).map_err(CliError::Config)?;
        let trials = v.get("trials", 10usize)?;
        if trials == 0 {
            return Err(CliError::Config("trials must be at least 1".into()));
        }
        Ok(Self {
            checkpoint: PathBuf::from(v.require("checkpoint")?),
            faults,
            fractions,
            fractions_spec,
            trials,
            data_dir: PathBuf::from(v.raw("data_dir").unwrap_or("data")),
            test_subset: v.get("test_subset", 0)?,
            include_output: v.get_bool("include_output", false)?,
            shared,
        })
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        self.shared.echo(&mut s);
        let kinds: Vec<&str> = self.faults.iter().map(|k| k.name()).collect();
        let _ = writeln!(s, "\n[sweep]");
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint.display());
        let _ = writeln!(s, "fault = {}", kinds.join(","));
        let _ = writeln!(s, "fractions = {}", self.fractions_spec);
        let _ = writeln!(s, "trials = {}", self.trials);
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "test_subset = {}", self.test_subset);
        let _ = writeln!(s, "include_output = {}", self.include_output);
        s
    }
}

#[derive(Debug, Clone)]
pub struct CompareSettings {
    pub shared: Shared,
    pub inputs: Vec<PathBuf>,
}

impl CompareSettings {
    pub fn from_values(v: &Values) -> Result<Self, CliError> {
        let inputs: Vec<PathBuf> = v
            .require("inputs")?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect();
        if inputs.len() < 2 {
            return Err(CliError::Config("compare needs at least two metrics files".into()));
        }
        Ok(Self {
            shared: Shared::from_values(v, "out")?,
            inputs,
        })
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        self.shared.echo(&mut s);
        let inputs: Vec<String> = self.inputs.iter().map(|p| p.display().to_string()).collect();
        let _ = writeln!(s, "\n[compare]");
        let _ = writeln!(s, "inputs = {}", inputs.join(","));
        s
    }
}
