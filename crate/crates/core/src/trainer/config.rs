//! Flat `key = value` run configuration.
//!
//! ```text
//! # desk-scale run
//! seed = 7
//! layout = v1
//! n = 1
//! lr_milestones = 80:10, 120:10, 160:10
//! data_format = synthetic
//! ```
//!
//! Blank lines and `#` comments are ignored; lists are comma-separated.
//! `drop_rate` is the probability of zeroing a unit (keep probability is
//! `1 - drop_rate`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::optim::{LrSchedule, OptimizerKind};
use crate::error::{Error, Result};
use crate::resnet::{Layout, NetSpec, ResidualUnitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Synthetic,
    Cifar10Binary,
    Idx,
}

impl DataFormat {
    pub fn name(self) -> &'static str {
        match self {
            DataFormat::Synthetic => "synthetic",
            DataFormat::Cifar10Binary => "cifar10-binary",
            DataFormat::Idx => "idx",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataFormat::Synthetic),
            "cifar10-binary" => Ok(DataFormat::Cifar10Binary),
            "idx" => Ok(DataFormat::Idx),
            other => Err(Error::Config(format!(
                "unknown data_format '{other}' (expected synthetic, cifar10-binary or idx)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Parameters of the generated blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub format: DataFormat,
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    /// IDX label files, parallel to the image paths.
    pub train_labels: Vec<PathBuf>,
    pub test_labels: Vec<PathBuf>,
    /// Seeded stratified subset of the training split.
    pub subset_size: Option<usize>,
    pub test_subset_size: Option<usize>,
    pub synthetic: SyntheticSpec,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZigzagConfig {
    pub trials: usize,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetSpec,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub data: DataConfig,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub stability_window: usize,
    pub zigzag: ZigzagConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            net: NetSpec::new(1, Layout::V1, false, 10),
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule {
                base: 1e-3,
                milestones: vec![(80, 10.0), (120, 10.0), (160, 10.0)],
            },
            epochs: 200,
            batch_size: 64,
            data: DataConfig {
                format: DataFormat::Synthetic,
                train_paths: Vec::new(),
                test_paths: Vec::new(),
                train_labels: Vec::new(),
                test_labels: Vec::new(),
                subset_size: None,
                test_subset_size: None,
                synthetic: SyntheticSpec {
                    train_size: 2000,
                    test_size: 1000,
                    image_size: 32,
                    channels: 3,
                    noise: 0.8,
                },
                augment: true,
            },
            precision: Precision::F32,
            output_dir: PathBuf::from("ic-lab-out"),
            stability_window: 5,
            zigzag: ZigzagConfig {
                trials: 100,
                inputs: 8,
                outputs: 4,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_paths(value: &str) -> Vec<PathBuf> {
    parse_list(value).into_iter().map(PathBuf::from).collect()
}

fn parse_milestones(value: &str) -> Result<Vec<(usize, f64)>> {
    parse_list(value)
        .iter()
        .map(|item| {
            let (e, d) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("lr_milestones: expected epoch:divisor, got '{item}'")))?;
            Ok((parse_num("lr_milestones", e.trim())?, parse_num("lr_milestones", d.trim())?))
        })
        .collect()
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut momentum = 0.9;
        let mut optimizer = "adam".to_string();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            let at = |e: Error| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            };
            cfg.set(key, value, &mut optimizer, &mut momentum).map_err(at)?;
        }
        cfg.optimizer = match optimizer.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd { momentum },
            other => return Err(Error::Config(format!("unknown optimizer '{other}' (expected adam or sgd)"))),
        };
        cfg.net.in_channels = cfg.data.synthetic.channels;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, optimizer: &mut String, momentum: &mut f64) -> Result<()> {
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "n" => self.net.n = parse_num(key, value)?,
            "layout" => self.net.unit.layout = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "bottleneck" => self.net.unit.bottleneck = parse_bool(key, value)?,
            "num_classes" => self.net.num_classes = parse_num(key, value)?,
            "base_width" => self.net.base_width = parse_num(key, value)?,
            "drop_rate" => self.net.drop_rate = parse_num(key, value)?,
            "dropout_mode" => self.net.dropout_mode = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "optimizer" => *optimizer = value.to_string(),
            "momentum" => *momentum = parse_num(key, value)?,
            "base_lr" => self.schedule.base = parse_num(key, value)?,
            "lr_milestones" => self.schedule.milestones = parse_milestones(value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "data_format" => d.format = DataFormat::parse(value)?,
            "train_path" => d.train_paths = parse_paths(value),
            "test_path" => d.test_paths = parse_paths(value),
            "train_labels" => d.train_labels = parse_paths(value),
            "test_labels" => d.test_labels = parse_paths(value),
            "subset_size" => d.subset_size = Some(parse_num(key, value)?),
            "test_subset_size" => d.test_subset_size = Some(parse_num(key, value)?),
            "synthetic_train_size" => d.synthetic.train_size = parse_num(key, value)?,
            "synthetic_test_size" => d.synthetic.test_size = parse_num(key, value)?,
            "image_size" => d.synthetic.image_size = parse_num(key, value)?,
            "image_channels" => d.synthetic.channels = parse_num(key, value)?,
            "synthetic_noise" => d.synthetic.noise = parse_num(key, value)?,
            "augment" => d.augment = parse_bool(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got '{value}'"))),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "stability_window" => self.stability_window = parse_num(key, value)?,
            "zigzag_trials" => self.zigzag.trials = parse_num(key, value)?,
            "zigzag_inputs" => self.zigzag.inputs = parse_num(key, value)?,
            "zigzag_outputs" => self.zigzag.outputs = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Checks value ranges (not file existence; see [`RunConfig::load`]).
    pub fn validate(&self) -> Result<()> {
        self.net.validate().map_err(|e| Error::Config(e.to_string()))?;
        LrSchedule::new(self.schedule.base, self.schedule.milestones.clone())?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.stability_window == 0 {
            return Err(Error::Config("stability_window must be >= 1".into()));
        }
        if let OptimizerKind::Sgd { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
            }
        }
        let d = &self.data;
        if d.format == DataFormat::Synthetic {
            let s = &d.synthetic;
            if s.train_size < 2 || s.test_size == 0 || s.image_size < 8 || s.channels == 0 {
                return Err(Error::Config(
                    "synthetic data needs train size >= 2, test size >= 1, image_size >= 8 and channels >= 1".into(),
                ));
            }
            if !(s.noise.is_finite() && s.noise >= 0.0) {
                return Err(Error::Config(format!("synthetic_noise must be >= 0, got {}", s.noise)));
            }
        } else {
            if d.train_paths.is_empty() || d.test_paths.is_empty() {
                return Err(Error::Config(format!(
                    "data_format {} needs train_path and test_path",
                    d.format.name()
                )));
            }
            if d.format == DataFormat::Idx
                && (d.train_labels.len() != d.train_paths.len() || d.test_labels.len() != d.test_paths.len())
            {
                return Err(Error::Config("idx data needs one label file per image file".into()));
            }
        }
        if self.zigzag.trials == 0 || self.zigzag.inputs < 2 || self.zigzag.outputs < 1 {
            return Err(Error::Config("zigzag needs trials >= 1, inputs >= 2 and outputs >= 1".into()));
        }
        Ok(())
    }

    /// Reads and validates a config file, checking that referenced data files exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        let d = &cfg.data;
        for p in d.train_paths.iter().chain(&d.test_paths).chain(&d.train_labels).chain(&d.test_labels) {
            if !p.exists() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", self.seed.to_string());
        line("n", self.net.n.to_string());
        line("layout", self.net.unit.layout.to_string());
        line("bottleneck", self.net.unit.bottleneck.to_string());
        line("num_classes", self.net.num_classes.to_string());
        line("base_width", self.net.base_width.to_string());
        line("drop_rate", format!("{:?}", self.net.drop_rate));
        line("dropout_mode", self.net.dropout_mode.to_string());
        match self.optimizer {
            OptimizerKind::Adam => line("optimizer", "adam".into()),
            OptimizerKind::Sgd { momentum } => {
                line("optimizer", "sgd".into());
                line("momentum", format!("{momentum:?}"));
            }
        }
        line("base_lr", format!("{:?}", self.schedule.base));
        line(
            "lr_milestones",
            self.schedule
                .milestones
                .iter()
                .map(|(e, d)| format!("{e}:{d:?}"))
                .collect::<Vec<_>>()
                .join(", "),
        );
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("data_format", d.format.name().into());
        for (k, v) in [
            ("train_path", &d.train_paths),
            ("test_path", &d.test_paths),
            ("train_labels", &d.train_labels),
            ("test_labels", &d.test_labels),
        ] {
            if !v.is_empty() {
                line(k, join_paths(v));
            }
        }
        if let Some(n) = d.subset_size {
            line("subset_size", n.to_string());
        }
        if let Some(n) = d.test_subset_size {
            line("test_subset_size", n.to_string());
        }
        line("synthetic_train_size", d.synthetic.train_size.to_string());
        line("synthetic_test_size", d.synthetic.test_size.to_string());
        line("image_size", d.synthetic.image_size.to_string());
        line("image_channels", d.synthetic.channels.to_string());
        line("synthetic_noise", format!("{:?}", d.synthetic.noise));
        line("augment", d.augment.to_string());
        line(
            "precision",
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
        );
        line("output_dir", self.output_dir.display().to_string());
        line("stability_window", self.stability_window.to_string());
        line("zigzag_trials", self.zigzag.trials.to_string());
        line("zigzag_inputs", self.zigzag.inputs.to_string());
        line("zigzag_outputs", self.zigzag.outputs.to_string());
        s
    }

    pub fn unit(&self) -> ResidualUnitKind {
        self.net.unit
    }

    /// `IC_LAB_OUT`, when set and non-empty, replaces `output_dir`.
    pub fn apply_env_output(&mut self) {
        if let Some(dir) = std::env::var_os("IC_LAB_OUT").filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }
}
