//! Declarative experiment configuration.
//!
//! Configs are flat `key = value` text files. Every key has a documented
//! default; unknown keys are rejected with their line number, and the parsed
//! config materializes every default so the persisted run manifest never
//! depends on implicit state. See `ExperimentConfig::KEYS` for the full key
//! list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use ekd_core::LossWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key \"{key}\"")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key \"{key}\"")]
    DuplicateKey { key: String, line: usize },
    #[error("line {line}: expected key = value, got \"{text}\"")]
    BadSyntax { text: String, line: usize },
    #[error("line {line}: key \"{key}\": {detail}")]
    BadValue {
        key: String,
        line: usize,
        detail: String,
    },
    #[error("{0}")]
    Constraint(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

/// Which dataset a run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetKind {
    Cifar10,
    Cifar100 { fine_labels: bool },
    Synthetic {
        classes: usize,
        per_class: usize,
        image: (usize, usize, usize),
        separation: f64,
    },
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 { .. } => "cifar100",
            DatasetKind::Synthetic { .. } => "synthetic",
        }
    }
}

/// A fully resolved experiment description. Every field has a concrete
/// value; serializing it captures the entire run setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_root: PathBuf,
    pub data_fraction: f64,
    pub student_depth: usize,
    pub branches: usize,
    pub teacher_depths: Vec<usize>,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub base_lr: f64,
    pub lr_drop_points: Vec<f64>,
    pub drop_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub soften_student: bool,
    pub augment: bool,
    pub freeze_teachers: bool,
    pub teacher_full_kd: bool,
    pub seeds: Vec<u64>,
    pub with_control: bool,
    pub dump_features: bool,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Every accepted key, in documentation order.
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "label_mode",
        "data_root",
        "data_fraction",
        "student_depth",
        "branches",
        "teacher_depths",
        "epochs",
        "pretrain_epochs",
        "base_lr",
        "lr_drop_points",
        "drop_factor",
        "weight_decay",
        "batch_size",
        "alpha",
        "beta",
        "gamma",
        "temperature",
        "soften_student",
        "augment",
        "freeze_teachers",
        "teacher_full_kd",
        "seeds",
        "with_control",
        "dump_features",
        "output_dir",
        "synth_classes",
        "synth_per_class",
        "synth_image",
        "synth_separation",
    ];

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            temperature: self.temperature,
            soften_student: self.soften_student,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 { fine_labels: true } => 100,
            DatasetKind::Cifar100 { fine_labels: false } => 20,
            DatasetKind::Synthetic { classes, .. } => *classes,
        }
    }

    /// Canonical text form: every field, sorted by key, one per line.
    /// The config hash is computed over this.
    pub fn canonical_text(&self) -> String {
        let mut fields = BTreeMap::new();
        let (dataset, label_mode) = match &self.dataset {
            DatasetKind::Cifar10 => ("cifar10".to_string(), "fine".to_string()),
            DatasetKind::Cifar100 { fine_labels } => (
                "cifar100".to_string(),
                if *fine_labels { "fine" } else { "coarse" }.to_string(),
            ),
            DatasetKind::Synthetic { .. } => ("synthetic".to_string(), "fine".to_string()),
        };
        fields.insert("dataset", dataset);
        fields.insert("label_mode", label_mode);
        if let DatasetKind::Synthetic {
            classes,
            per_class,
            image,
            separation,
        } = &self.dataset
        {
            fields.insert("synth_classes", classes.to_string());
            fields.insert("synth_per_class", per_class.to_string());
            fields.insert("synth_image", format!("{}x{}x{}", image.0, image.1, image.2));
            fields.insert("synth_separation", format!("{separation}"));
        }
        fields.insert("data_root", self.data_root.display().to_string());
        fields.insert("data_fraction", format!("{}", self.data_fraction));
        fields.insert("student_depth", self.student_depth.to_string());
        fields.insert("branches", self.branches.to_string());
        fields.insert("teacher_depths", join(&self.teacher_depths));
        fields.insert("epochs", self.epochs.to_string());
        fields.insert("pretrain_epochs", self.pretrain_epochs.to_string());
        fields.insert("base_lr", format!("{}", self.base_lr));
        fields.insert("lr_drop_points", join(&self.lr_drop_points));
        fields.insert("drop_factor", format!("{}", self.drop_factor));
        fields.insert("weight_decay", format!("{}", self.weight_decay));
        fields.insert("batch_size", self.batch_size.to_string());
        fields.insert("alpha", format!("{}", self.alpha));
        fields.insert("beta", format!("{}", self.beta));
        fields.insert("gamma", format!("{}", self.gamma));
        fields.insert("temperature", format!("{}", self.temperature));
        fields.insert("soften_student", self.soften_student.to_string());
        fields.insert("augment", self.augment.to_string());
        fields.insert("freeze_teachers", self.freeze_teachers.to_string());
        fields.insert("teacher_full_kd", self.teacher_full_kd.to_string());
        fields.insert("seeds", join(&self.seeds));
        fields.insert("with_control", self.with_control.to_string());
        fields.insert("dump_features", self.dump_features.to_string());
        let mut out = String::new();
        for (key, value) in &fields {
            writeln!(out, "{key} = {value}").expect("write to string");
        }
        out
    }

    /// FNV-1a hash of the canonical text. Output paths and seeds are not
    /// part of the identity, so re-running the same experiment elsewhere
    /// groups with earlier runs.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.canonical_text().as_bytes() {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    fn validate(self) -> Result<Self, ConfigError> {
        if self.teacher_depths.len() != self.branches {
            return Err(ConfigError::Constraint(format!(
                "teacher_depths has {} entries but branches = {}",
                self.teacher_depths.len(),
                self.branches
            )));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Constraint("seeds must not be empty".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(ConfigError::Constraint(format!(
                "data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            )));
        }
        for &depth in self.teacher_depths.iter().chain([&self.student_depth]) {
            if depth < 8 || (depth - 2) % 6 != 0 {
                return Err(ConfigError::Constraint(format!(
                    "depth {depth} is not of the form 6n+2 with n >= 1"
                )));
            }
        }
        Ok(self)
    }
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

struct RawEntry {
    value: String,
    line: usize,
}

/// Parses and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Parses config text (see the module docs for the format).
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut entries: BTreeMap<String, RawEntry> = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = raw_line.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(ConfigError::BadSyntax {
                text: stripped.to_string(),
                line,
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !ExperimentConfig::KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { key, line });
        }
        if entries.contains_key(&key) {
            return Err(ConfigError::DuplicateKey { key, line });
        }
        entries.insert(key, RawEntry { value, line });
    }

    let take = |key: &str| entries.get(key);
    let bad = |key: &str, entry: &RawEntry, detail: String| ConfigError::BadValue {
        key: key.into(),
        line: entry.line,
        detail,
    };

    macro_rules! parse_or {
        ($key:expr, $default:expr, $ty:ty) => {
            match take($key) {
                Some(entry) => entry
                    .value
                    .parse::<$ty>()
                    .map_err(|e| bad($key, entry, e.to_string()))?,
                None => $default,
            }
        };
    }

    let dataset_name = take("dataset").map(|e| e.value.as_str()).unwrap_or("synthetic");
    let fine_labels = match take("label_mode") {
        None => true,
        Some(entry) => match entry.value.as_str() {
            "fine" => true,
            "coarse" => false,
            other => {
                return Err(bad(
                    "label_mode",
                    entry,
                    format!("expected fine|coarse, got {other}"),
                ))
            }
        },
    };

    let synth_image = match take("synth_image") {
        None => (8, 8, 3),
        Some(entry) => {
            let parts: Vec<&str> = entry.value.split('x').collect();
            let parsed: Option<Vec<usize>> =
                parts.iter().map(|p| p.parse::<usize>().ok()).collect();
            match parsed.as_deref() {
                Some([h, w, c]) => (*h, *w, *c),
                _ => {
                    return Err(bad(
                        "synth_image",
                        entry,
                        format!("expected HxWxC, got {}", entry.value),
                    ))
                }
            }
        }
    };

    let dataset = match dataset_name {
        "cifar10" => DatasetKind::Cifar10,
        "cifar100" => DatasetKind::Cifar100 { fine_labels },
        "synthetic" => DatasetKind::Synthetic {
            classes: parse_or!("synth_classes", 4, usize),
            per_class: parse_or!("synth_per_class", 100, usize),
            image: synth_image,
            separation: parse_or!("synth_separation", 5.0, f64),
        },
        other => {
            let entry = take("dataset").expect("present when named");
            return Err(bad(
                "dataset",
                entry,
                format!("expected cifar10|cifar100|synthetic, got {other}"),
            ));
        }
    };

    let parse_list_u = |key: &str, default: Vec<usize>| -> Result<Vec<usize>, ConfigError> {
        match take(key) {
            None => Ok(default),
            Some(entry) => entry
                .value
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(key, entry, e.to_string())),
        }
    };
    let parse_list_f = |key: &str, default: Vec<f64>| -> Result<Vec<f64>, ConfigError> {
        match take(key) {
            None => Ok(default),
            Some(entry) => entry
                .value
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(key, entry, e.to_string())),
        }
    };
    let seeds = match take("seeds") {
        None => vec![1, 2, 3],
        Some(entry) => entry
            .value
            .split(',')
            .map(|p| p.trim().parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad("seeds", entry, e.to_string()))?,
    };

    // Augmentation defaults to on for real image data, off for synthetic.
    let augment_default = !matches!(dataset, DatasetKind::Synthetic { .. });
    let branches = parse_or!("branches", 1, usize);

    let config = ExperimentConfig {
        data_root: PathBuf::from(
            take("data_root").map(|e| e.value.clone()).unwrap_or_else(|| "data".into()),
        ),
        data_fraction: parse_or!("data_fraction", 1.0, f64),
        student_depth: parse_or!("student_depth", 8, usize),
        branches,
        teacher_depths: parse_list_u("teacher_depths", vec![14])?,
        epochs: parse_or!("epochs", 60, usize),
        pretrain_epochs: parse_or!("pretrain_epochs", 30, usize),
        base_lr: parse_or!("base_lr", 0.01, f64),
        lr_drop_points: parse_list_f("lr_drop_points", vec![0.5, 0.75])?,
        drop_factor: parse_or!("drop_factor", 10.0, f64),
        weight_decay: parse_or!("weight_decay", 5e-4, f64),
        batch_size: parse_or!("batch_size", 128, usize),
        alpha: parse_or!("alpha", 0.5, f64),
        beta: parse_or!("beta", 0.5, f64),
        gamma: parse_or!("gamma", 0.6, f64),
        temperature: parse_or!("temperature", 10.0, f64),
        soften_student: parse_or!("soften_student", false, bool),
        augment: parse_or!("augment", augment_default, bool),
        freeze_teachers: parse_or!("freeze_teachers", false, bool),
        teacher_full_kd: parse_or!("teacher_full_kd", false, bool),
        seeds,
        with_control: parse_or!("with_control", false, bool),
        dump_features: parse_or!("dump_features", false, bool),
        output_dir: PathBuf::from(
            take("output_dir").map(|e| e.value.clone()).unwrap_or_else(|| "runs".into()),
        ),
        dataset,
    };
    config.validate()
}
