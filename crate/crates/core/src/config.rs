//! Experiment config files.
//!
//! A flat key/value format with `[section]` headers and `#` comments:
//!
//! ```text
//! seed = 7
//! output = runs/mnist_fc
//!
//! [dataset]
//! name = mnist
//! dir = mnist-5k
//!
//! [architecture]
//! preset = mnist_fc
//! fc_width = 200
//!
//! [regularizers]
//! mu2 = 0.01
//! lambda = 0.01
//!
//! [trainer]
//! epochs = 20
//! ```
//!
//! Every key except `[dataset] name` and a data source has a default.
//! Relative dataset paths are resolved against a data root (see
//! [`DATA_DIR_ENV`]).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::RelKernel;
use crate::data::{load_cifar10, load_mnist, mnist_paths, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{Activation, Architecture, NetworkModel, Padding, Preset, Regularization, Shape3};
use crate::trainer::{Schedule, TrainConfig};

/// Environment variable naming the root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "VISREG_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Image shape of the distributed dataset.
    pub fn shape(self) -> Shape3 {
        match self {
            DatasetKind::Mnist => Shape3::new(1, 28, 28),
            DatasetKind::Cifar10 => Shape3::new(3, 32, 32),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            _ => Err("expected mnist or cifar10".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory with the distributors' standard file names.
    pub dir: Option<PathBuf>,
    /// Explicit train files: `images, labels` for MNIST, batch files for CIFAR-10.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    /// Keep only the first `n` samples (0 = all).
    pub train_subset: usize,
    pub test_subset: usize,
    /// Per-channel standardization with train-set statistics.
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArchSource {
    Preset(Preset),
    Inline(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub source: ArchSource,
    pub activation: Activation,
    /// `None` uses the preset's padding (valid for inline layer lists).
    pub conv_padding: Option<Padding>,
    /// Replaces every hidden `fc(n)` width.
    pub fc_width: Option<usize>,
    /// `None` picks the first fc layer.
    pub vr_layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub lambda: f64,
    pub kernel: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint every `n` epochs (0 = only the final one).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub architecture: ArchConfig,
    pub regularizers: RegConfig,
    pub trainer: TrainerConfig,
}

fn field_err(section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    if section.is_empty() {
        Error::Config(format!("{key}: {msg}"))
    } else {
        Error::Config(format!("[{section}] {key}: {msg}"))
    }
}

fn parse_value<T: FromStr>(section: &str, key: &str, raw: &str, what: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| field_err(section, key, format!("expected {what}, got {raw:?}")))
}

fn parse_bool(section: &str, key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(field_err(section, key, format!("expected true or false, got {raw:?}"))),
    }
}

fn parse_paths(raw: &str) -> Vec<PathBuf> {
    raw.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect()
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut seed = 0u64;
        let mut output = PathBuf::from("runs/experiment");
        let mut kind: Option<DatasetKind> = None;
        let (mut dir, mut train, mut test) = (None, Vec::new(), Vec::new());
        let (mut train_subset, mut test_subset, mut standardize) = (0, 0, false);
        let (mut preset, mut layers): (Option<Preset>, Option<String>) = (None, None);
        let mut activation = Activation::Relu;
        let (mut conv_padding, mut fc_width, mut vr_layer) = (None, None, None);
        let mut reg = RegConfig {
            mu1: 0.0,
            mu2: 0.0,
            lambda: 0.0,
            kernel: "laplacian".into(),
        };
        let defaults = TrainConfig::default();
        let mut tr = TrainerConfig {
            lr: defaults.lr,
            momentum: defaults.momentum,
            nesterov: defaults.nesterov,
            schedule: defaults.schedule,
            epochs: defaults.epochs,
            batch_size: defaults.batch_size,
            checkpoint_every: 0,
        };
        let mut seen = std::collections::HashSet::new();

        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["dataset", "architecture", "regularizers", "trainer"].contains(&name) {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", lineno + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1)))?;
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(field_err(&section, key, "given more than once"));
            }
            let s = section.as_str();
            match (s, key) {
                ("", "seed") => seed = parse_value(s, key, raw, "an unsigned integer")?,
                ("", "output") => output = PathBuf::from(raw),
                ("dataset", "name") => kind = Some(raw.parse().map_err(|m: String| field_err(s, key, m))?),
                ("dataset", "dir") => dir = Some(PathBuf::from(raw)),
                ("dataset", "train") => train = parse_paths(raw),
                ("dataset", "test") => test = parse_paths(raw),
                ("dataset", "train_subset") => train_subset = parse_value(s, key, raw, "a count")?,
                ("dataset", "test_subset") => test_subset = parse_value(s, key, raw, "a count")?,
                ("dataset", "standardize") => standardize = parse_bool(s, key, raw)?,
                ("architecture", "preset") => {
                    preset = Some(Preset::from_name(raw).map_err(|e| field_err(s, key, e))?)
                }
                ("architecture", "layers") => layers = Some(raw.to_string()),
                ("architecture", "activation") => activation = raw.parse().map_err(|e| field_err(s, key, e))?,
                ("architecture", "conv_padding") => {
                    conv_padding = Some(raw.parse().map_err(|e| field_err(s, key, e))?)
                }
                ("architecture", "fc_width") => fc_width = Some(parse_value(s, key, raw, "a positive count")?),
                ("architecture", "vr_layer") => {
                    vr_layer = Some(parse_value(s, key, raw, "a layer index")?);
                }
                ("regularizers", "mu1") => reg.mu1 = parse_value(s, key, raw, "a number")?,
                ("regularizers", "mu2") => reg.mu2 = parse_value(s, key, raw, "a number")?,
                ("regularizers", "lambda") => reg.lambda = parse_value(s, key, raw, "a number")?,
                ("regularizers", "kernel") => {
                    RelKernel::by_name(raw).map_err(|e| field_err(s, key, e))?;
                    reg.kernel = raw.to_string();
                }
                ("trainer", "lr") => tr.lr = parse_value(s, key, raw, "a number")?,
                ("trainer", "momentum") => tr.momentum = parse_value(s, key, raw, "a number")?,
                ("trainer", "nesterov") => tr.nesterov = parse_bool(s, key, raw)?,
                ("trainer", "schedule") => tr.schedule = raw.parse().map_err(|e| field_err(s, key, e))?,
                ("trainer", "epochs") => tr.epochs = parse_value(s, key, raw, "a count")?,
                ("trainer", "batch_size") => tr.batch_size = parse_value(s, key, raw, "a count")?,
                ("trainer", "checkpoint_every") => tr.checkpoint_every = parse_value(s, key, raw, "a count")?,
                _ => return Err(field_err(s, key, "unknown key")),
            }
        }

        let kind = kind.ok_or_else(|| field_err("dataset", "name", "missing"))?;
        let source = match (preset, layers) {
            (Some(p), None) => ArchSource::Preset(p),
            (None, Some(l)) => ArchSource::Inline(l),
            (Some(_), Some(_)) => return Err(field_err("architecture", "layers", "give either preset or layers, not both")),
            (None, None) => return Err(field_err("architecture", "preset", "missing (or give layers)")),
        };
        let cfg = Self {
            seed,
            output,
            dataset: DatasetConfig {
                kind,
                dir,
                train,
                test,
                train_subset,
                test_subset,
                standardize,
            },
            architecture: ArchConfig {
                source,
                activation,
                conv_padding,
                fc_width,
                vr_layer,
            },
            regularizers: reg,
            trainer: tr,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Field-level checks that need no files.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.dir.is_none() && d.train.is_empty() {
            return Err(field_err("dataset", "dir", "missing (or give train/test files)"));
        }
        if d.kind == DatasetKind::Mnist {
            for (key, files) in [("train", &d.train), ("test", &d.test)] {
                if !files.is_empty() && files.len() != 2 {
                    return Err(field_err("dataset", key, "MNIST needs exactly two files: images, labels"));
                }
            }
        }
        if self.architecture.fc_width == Some(0) {
            return Err(field_err("architecture", "fc_width", "must be >= 1"));
        }
        let arch = self.arch()?;
        if let Some(v) = self.architecture.vr_layer {
            if v >= arch.layers.len() {
                return Err(field_err("architecture", "vr_layer", format!("{v} is past the last layer")));
            }
        }
        let t = self.train_config()?;
        t.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("[trainer/regularizers] {m}")),
            other => other,
        })
    }

    pub fn padding(&self) -> Padding {
        self.architecture.conv_padding.unwrap_or(match self.architecture.source {
            ArchSource::Preset(p) => p.conv_padding(),
            ArchSource::Inline(_) => Padding::Valid,
        })
    }

    /// The expanded architecture (preset or inline, with `fc_width` applied).
    pub fn arch(&self) -> Result<Architecture> {
        let a = &self.architecture;
        let text = match &a.source {
            ArchSource::Preset(p) => p.tokens(),
            ArchSource::Inline(l) => l.as_str(),
        };
        let key = match a.source {
            ArchSource::Preset(_) => "preset",
            ArchSource::Inline(_) => "layers",
        };
        let arch = Architecture::parse(text, a.activation, self.padding()).map_err(|e| field_err("architecture", key, e))?;
        Ok(match a.fc_width {
            Some(w) => arch.with_fc_width(w),
            None => arch,
        })
    }

    pub fn kernel(&self) -> Result<RelKernel> {
        RelKernel::by_name(&self.regularizers.kernel).map_err(|e| field_err("regularizers", "kernel", e))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let r = &self.regularizers;
        let t = &self.trainer;
        Ok(TrainConfig {
            reg: Regularization {
                mu1: r.mu1,
                mu2: r.mu2,
                lambda: r.lambda,
                kernel: self.kernel()?,
            },
            lr: t.lr,
            momentum: t.momentum,
            nesterov: t.nesterov,
            schedule: t.schedule.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
        })
    }

    /// Freshly initialized model for `data`, seeded from the config seed.
    pub fn build_model(&self, data: &Dataset) -> Result<NetworkModel> {
        self.model_for_shape(data.shape())
    }

    pub fn model_for_shape(&self, shape: Shape3) -> Result<NetworkModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        NetworkModel::from_architecture(&self.arch()?, shape, self.architecture.vr_layer, &mut rng)
    }

    /// Dataset files for a split, resolved against `root`.
    pub fn data_files(&self, split: Split, root: &Path) -> Result<Vec<PathBuf>> {
        let d = &self.dataset;
        let explicit = match split {
            Split::Train => &d.train,
            Split::Test => &d.test,
        };
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        if !explicit.is_empty() {
            return Ok(explicit.iter().map(|p| resolve(p)).collect());
        }
        let Some(dir) = d.dir.as_deref().map(resolve) else {
            return Ok(Vec::new());
        };
        Ok(match d.kind {
            DatasetKind::Mnist => {
                let (i, l) = mnist_paths(&dir, split);
                vec![i, l]
            }
            DatasetKind::Cifar10 => match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            },
        })
    }

    /// Loads train and (if configured) test data, applying subsets and standardization.
    pub fn load_data(&self, root: &Path) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.dataset;
        let load = |split: Split| -> Result<Option<Dataset>> {
            let files = self.data_files(split, root)?;
            if files.is_empty() {
                return Ok(None);
            }
            let key = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            if let Some(missing) = files.iter().find(|p| !p.exists()) {
                return Err(field_err("dataset", key, format!("file not found: {}", missing.display())));
            }
            let ds = match d.kind {
                DatasetKind::Mnist => load_mnist(&files[0], &files[1], split)?,
                DatasetKind::Cifar10 => load_cifar10(&files, split)?,
            };
            let n = match split {
                Split::Train => d.train_subset,
                Split::Test => d.test_subset,
            };
            Ok(Some(if n > 0 { ds.take(n) } else { ds }))
        };
        let mut train = load(Split::Train)?.ok_or_else(|| field_err("dataset", "train", "no training files"))?;
        let mut test = load(Split::Test)?;
        if d.standardize {
            let stats = train.standardize_per_channel();
            if let Some(t) = test.as_mut() {
                t.apply_standardization(&stats);
            }
        }
        Ok((train, test))
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "output = {}", self.output.display());

        let d = &self.dataset;
        let _ = writeln!(s, "\n[dataset]\nname = {}", d.kind.name());
        if let Some(dir) = &d.dir {
            let _ = writeln!(s, "dir = {}", dir.display());
        }
        if !d.train.is_empty() {
            let _ = writeln!(s, "train = {}", join_paths(&d.train));
        }
        if !d.test.is_empty() {
            let _ = writeln!(s, "test = {}", join_paths(&d.test));
        }
        let _ = writeln!(s, "train_subset = {}", d.train_subset);
        let _ = writeln!(s, "test_subset = {}", d.test_subset);
        let _ = writeln!(s, "standardize = {}", d.standardize);

        let a = &self.architecture;
        s.push_str("\n[architecture]\n");
        match &a.source {
            ArchSource::Preset(p) => {
                let _ = writeln!(s, "preset = {}", p.name());
            }
            ArchSource::Inline(l) => {
                let _ = writeln!(s, "layers = {l}");
            }
        }
        let _ = writeln!(s, "activation = {}", a.activation.name());
        if let Some(p) = a.conv_padding {
            let _ = writeln!(s, "conv_padding = {}", p.name());
        }
        if let Some(w) = a.fc_width {
            let _ = writeln!(s, "fc_width = {w}");
        }
        if let Some(v) = a.vr_layer {
            let _ = writeln!(s, "vr_layer = {v}");
        }

        let r = &self.regularizers;
        let _ = writeln!(
            s,
            "\n[regularizers]\nmu1 = {}\nmu2 = {}\nlambda = {}\nkernel = {}",
            r.mu1, r.mu2, r.lambda, r.kernel
        );

        let t = &self.trainer;
        let _ = writeln!(
            s,
            "\n[trainer]\nlr = {}\nmomentum = {}\nnesterov = {}\nschedule = {}\nepochs = {}\nbatch_size = {}\ncheckpoint_every = {}",
            t.lr, t.momentum, t.nesterov, t.schedule, t.epochs, t.batch_size, t.checkpoint_every
        );
        s
    }
}

/// Root for relative dataset paths: `$VISREG_DATA_DIR` if set, else `fallback`
/// (normally the config file's directory).
pub fn data_root(fallback: &Path) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.to_path_buf())
}
