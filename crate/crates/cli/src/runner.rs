//! Experiment orchestration: dataset loading, the pretrain → joint-train →
//! evaluate pipeline, per-seed repetition and sweeps.
//!
//! Every run writes its own directory under the configured output root:
//!
//! ```text
//! <output`_dir>/<config-hash>-s<seed>[-control]/
//!   manifest.json        # full config + run identity + final status
//!   teacher<i>.trace.jsonl, trace.jsonl   # per-epoch rows, streamed
//!   teacher<i>.ckpt, student.ckpt, teachers.ckpt
//!   features.tsv         # optional feature dump
//!   record.json          # the MetricsRecord, one JSON line
//! ```
//!
//! Records are additionally appended to `<output_dir>/records.jsonl`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ekd_core::checkpoint::{save_checkpoint, CheckpointKind, CheckpointMeta};
use ekd_core::eval::{extract_features, top1_accuracy, EvalReport};
use ekd_core::model::{count_params, Ensemble, EnsembleSpec, ModelSpec, ParamState};
use ekd_core::train::{pretrain_teacher, train_ekd, train_supervised, TraceRow, TrainConfig};
use ekd_core::{
    channel_stats, count_flops, derive_seed, parse_cifar10, parse_cifar100, stratified_subsample,
    synthetic_blobs_split, LabelMode, LabeledImageSet,
};

use crate::config::{DatasetKind, ExperimentConfig};

/// Which objective a run used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Full distillation objective.
    Ekd,
    /// Same student, plain cross-entropy (the no-distillation baseline).
    Control,
}

/// Everything measured about one completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: String,
    pub variant: Variant,
    pub seed: u64,
    pub dataset: String,
    pub data_fraction: f64,
    pub ensemble_size: usize,
    pub student_depth: usize,
    pub teacher_depths: Vec<usize>,
    pub param_count: usize,
    pub flop_count: u64,
    pub trace: Vec<TraceRow>,
    pub final_eval: EvalReport,
    pub wall_time_s: f64,
}

/// The dataset root: the `EKD_DATA_ROOT` environment variable overrides the
/// configured path (and nothing else is overridable from the environment).
pub fn effective_data_root(config: &ExperimentConfig) -> PathBuf {
    std::env::var_os("EKD_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| config.data_root.clone())
}

fn read_required(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| {
        format!(
            "missing dataset file {}; download the official binary archive and unpack it there",
            path.display()
        )
    })
}

/// Loads the configured dataset's train and test splits.
pub fn load_dataset(config: &ExperimentConfig) -> Result<(LabeledImageSet, LabeledImageSet)> {
    match &config.dataset {
        DatasetKind::Cifar10 => {
            let dir = effective_data_root(config).join("cifar-10-batches-bin");
            let mut train_bytes = Vec::new();
            for i in 1..=5 {
                train_bytes.extend(read_required(&dir.join(format!("data_batch_{i}.bin")))?);
            }
            let train = parse_cifar10(&train_bytes, "cifar10-train")?;
            let test_bytes = read_required(&dir.join("test_batch.bin"))?;
            let test = parse_cifar10(&test_bytes, "cifar10-test")?;
            Ok((train, test))
        }
        DatasetKind::Cifar100 { fine_labels } => {
            let dir = effective_data_root(config).join("cifar-100-binary");
            let mode = if *fine_labels { LabelMode::Fine } else { LabelMode::Coarse };
            let train = parse_cifar100(&read_required(&dir.join("train.bin"))?, mode, "cifar100-train")?;
            let test = parse_cifar100(&read_required(&dir.join("test.bin"))?, mode, "cifar100-test")?;
            Ok((train, test))
        }
        DatasetKind::Synthetic {
            classes,
            per_class,
            image,
            separation,
        } => {
            // The synthetic dataset is fixed across run seeds, like a real
            // dataset would be; train and test share the class means.
            let (train, test) = synthetic_blobs_split(
                *classes,
                *per_class,
                (*per_class / 5).max(1),
                *image,
                *separation,
                derive_seed(0, "synth.data"),
            )?;
            Ok((train, test))
        }
    }
}

fn train_config(config: &ExperimentConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: config.base_lr,
        lr_drop_points: config.lr_drop_points.clone(),
        drop_factor: config.drop_factor,
        weight_decay: config.weight_decay,
        batch_size: config.batch_size,
        seed,
        loss_weights: config.loss_weights(),
        augment: config.augment,
        freeze_teachers: config.freeze_teachers,
        teacher_full_kd: config.teacher_full_kd,
    }
}

/// Appends one serialized row to a JSON-lines file as it completes, so a
/// crashed run still leaves a valid partial trace.
struct TraceWriter {
    file: File,
}

impl TraceWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: File::create(path)
                .with_context(|| format!("cannot create {}", path.display()))?,
        })
    }

    fn append(&mut self, row: &TraceRow) {
        if let Ok(line) = serde_json::to_string(row) {
            let _ = writeln!(self.file, "{line}");
            let _ = self.file.flush();
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: &'a str,
    config_hash: String,
    variant: Variant,
    seed: u64,
    status: &'a str,
    error: Option<String>,
    config: &'a ExperimentConfig,
}

fn write_manifest(
    dir: &Path,
    run_id: &str,
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    status: &str,
    error: Option<String>,
) -> Result<()> {
    let manifest = Manifest {
        run_id,
        config_hash: config.hash(),
        variant,
        seed,
        status,
        error,
        config,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn append_record(output_dir: &Path, record: &MetricsRecord) -> Result<()> {
    let line = serde_json::to_string(record)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(output_dir.join("records.jsonl"))?;
    writeln!(file, "{line}")?;
    Ok(())
}

fn model_spec(config: &ExperimentConfig, depth: usize) -> Result<ModelSpec> {
    ModelSpec::new(depth, config.num_classes()).map_err(Into::into)
}

/// One seed, one variant: the full pretrain → train → evaluate pipeline.
/// Any stage failure is recorded in the run manifest before it propagates.
fn run_one(
    config: &ExperimentConfig,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
    seed: u64,
    variant: Variant,
) -> Result<MetricsRecord> {
    let suffix = match variant {
        Variant::Ekd => String::new(),
        Variant::Control => "-control".into(),
    };
    let run_id = format!("{}-s{seed}{suffix}", config.hash());
    let dir = config.output_dir.join(&run_id);
    fs::create_dir_all(&dir)?;
    write_manifest(&dir, &run_id, config, variant, seed, "running", None)?;

    match execute_run(config, train_set, test_set, seed, variant, &run_id, &dir) {
        Ok(record) => {
            write_manifest(&dir, &run_id, config, variant, seed, "completed", None)?;
            Ok(record)
        }
        Err(err) => {
            write_manifest(&dir, &run_id, config, variant, seed, "failed", Some(format!("{err:#}")))?;
            Err(err)
        }
    }
}

fn execute_run(
    config: &ExperimentConfig,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
    seed: u64,
    variant: Variant,
    run_id: &str,
    dir: &std::path::Path,
) -> Result<MetricsRecord> {
    let started = Instant::now();
    let outcome = (|| -> Result<(ParamState, Vec<TraceRow>, Ensemble)> {
        let subsampled = if config.data_fraction < 1.0 {
            stratified_subsample(train_set, config.data_fraction, derive_seed(seed, "subsample"))?
        } else {
            train_set.clone()
        };

        let student_spec = model_spec(config, config.student_depth)?;
        match variant {
            Variant::Control => {
                let compnet = Ensemble::compnet(&student_spec, config.branches)?;
                let mut writer = TraceWriter::create(&dir.join("trace.jsonl"))?;
                let (params, trace) = train_supervised(
                    &compnet,
                    "init.student",
                    &subsampled,
                    Some(test_set),
                    &train_config(config, config.epochs, seed),
                    |row| writer.append(row),
                )?;
                save_checkpoint(
                    dir.join("student.ckpt"),
                    &CheckpointMeta {
                        kind: CheckpointKind::Student,
                        branches: config.branches,
                        specs: vec![student_spec.clone()],
                    },
                    &params,
                )?;
                Ok((params, trace.rows, compnet))
            }
            Variant::Ekd => {
                let teacher_specs: Vec<ModelSpec> = config
                    .teacher_depths
                    .iter()
                    .map(|&d| model_spec(config, d))
                    .collect::<Result<_>>()?;
                let mut teachers = Vec::with_capacity(teacher_specs.len());
                for (i, t_spec) in teacher_specs.iter().enumerate() {
                    let mut writer =
                        TraceWriter::create(&dir.join(format!("teacher{i}.trace.jsonl")))?;
                    let (params, _) = pretrain_teacher(
                        t_spec,
                        &subsampled,
                        Some(test_set),
                        &train_config(
                            config,
                            config.pretrain_epochs,
                            derive_seed(seed, &format!("pretrain.{i}")),
                        ),
                        |row| writer.append(row),
                    )?;
                    save_checkpoint(
                        dir.join(format!("teacher{i}.ckpt")),
                        &CheckpointMeta {
                            kind: CheckpointKind::Single,
                            branches: 1,
                            specs: vec![t_spec.clone()],
                        },
                        &params,
                    )?;
                    teachers.push(params);
                }

                let ensemble_spec =
                    EnsembleSpec::new(student_spec.clone(), config.branches, teacher_specs.clone())?;
                let mut writer = TraceWriter::create(&dir.join("trace.jsonl"))?;
                let outcome = train_ekd(
                    &ensemble_spec,
                    Some(&teachers),
                    &subsampled,
                    Some(test_set),
                    &train_config(config, config.epochs, seed),
                    |row| writer.append(row),
                )?;
                save_checkpoint(
                    dir.join("student.ckpt"),
                    &CheckpointMeta {
                        kind: CheckpointKind::Student,
                        branches: config.branches,
                        specs: vec![student_spec.clone()],
                    },
                    &outcome.student,
                )?;
                save_checkpoint(
                    dir.join("teachers.ckpt"),
                    &CheckpointMeta {
                        kind: CheckpointKind::Teachers,
                        branches: teacher_specs.len(),
                        specs: teacher_specs,
                    },
                    &outcome.teachers,
                )?;
                let student = ensemble_spec.student()?;
                Ok((outcome.student, outcome.trace.rows, student))
            }
        }
    })();

    let (params, trace, student) = outcome?;

    // Evaluation uses the training-split normalization, like training did.
    let subsampled = if config.data_fraction < 1.0 {
        stratified_subsample(train_set, config.data_fraction, derive_seed(seed, "subsample"))?
    } else {
        train_set.clone()
    };
    let norm = channel_stats(&subsampled);
    let model_id = format!(
        "depth{}-es{}-{}",
        config.student_depth,
        config.branches,
        match variant {
            Variant::Ekd => "ekd",
            Variant::Control => "control",
        }
    );
    let final_eval: EvalReport =
        top1_accuracy(&student, &params, test_set, &norm, config.batch_size, &model_id)
            .map_err(anyhow::Error::from)?;

    if config.dump_features {
        let dump = extract_features(&student, &params, test_set, &norm, config.batch_size)
            .map_err(anyhow::Error::from)?;
        fs::write(dir.join("features.tsv"), dump.to_tsv())?;
    }

    let student_spec = model_spec(config, config.student_depth)?;
    let (h, w, _) = test_set.image_shape();
    let record = MetricsRecord {
        run_id: run_id.to_string(),
        config_hash: config.hash(),
        variant,
        seed,
        dataset: config.dataset.name().to_string(),
        data_fraction: config.data_fraction,
        ensemble_size: config.branches,
        student_depth: config.student_depth,
        teacher_depths: config.teacher_depths.clone(),
        param_count: count_params(&params),
        flop_count: count_flops(&student_spec, (h, w)) * config.branches as u64,
        trace,
        final_eval,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    fs::write(dir.join("record.json"), serde_json::to_string(&record)?)?;
    append_record(&config.output_dir, &record)?;
    Ok(record)
}

/// Runs the experiment once per seed (plus the no-distillation control per
/// seed when requested) and persists every record.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    let (train_set, test_set) = load_dataset(config)?;
    fs::create_dir_all(&config.output_dir)?;
    let mut records = Vec::new();
    for &seed in &config.seeds {
        records.push(run_one(config, &train_set, &test_set, seed, Variant::Ekd)?);
        if config.with_control {
            records.push(run_one(config, &train_set, &test_set, seed, Variant::Control)?);
        }
    }
    Ok(records)
}

/// The sweepable experiment axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    DataFraction,
    EnsembleSize,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "data_fraction" | "data-fraction" => Ok(SweepAxis::DataFraction),
            "ensemble_size" | "ensemble-size" => Ok(SweepAxis::EnsembleSize),
            other => bail!("unknown sweep axis {other}; expected data-fraction or ensemble-size"),
        }
    }
}

/// Derives the per-value config for one sweep point.
///
/// Ensemble-size points take the first k entries of the configured teacher
/// list, so the teachers field acts as the ordered pool.
pub fn sweep_point(config: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut point = config.clone();
    match axis {
        SweepAxis::DataFraction => {
            let fraction: f64 = value
                .parse()
                .with_context(|| format!("bad data fraction {value}"))?;
            if !(fraction > 0.0 && fraction <= 1.0) {
                bail!("data fraction {fraction} is outside (0, 1]");
            }
            point.data_fraction = fraction;
        }
        SweepAxis::EnsembleSize => {
            let size: usize = value
                .parse()
                .with_context(|| format!("bad ensemble size {value}"))?;
            if size == 0 || size > config.teacher_depths.len() {
                bail!(
                    "ensemble size {size} needs 1..={} teachers in the pool",
                    config.teacher_depths.len()
                );
            }
            point.branches = size;
            point.teacher_depths = config.teacher_depths[..size].to_vec();
        }
    }
    Ok(point)
}

/// One `run_experiment` per axis value, grouped under a shared directory.
pub fn sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<MetricsRecord>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let axis_name = match axis {
        SweepAxis::DataFraction => "data-fraction",
        SweepAxis::EnsembleSize => "ensemble-size",
    };
    let sweep_root = config
        .output_dir
        .join(format!("sweep-{axis_name}-{}", config.hash()));
    let mut records = Vec::new();
    for value in values {
        let mut point = sweep_point(config, axis, value)?;
        point.output_dir = sweep_root.clone();
        records.extend(run_experiment(&point)?);
    }
    Ok(records)
}

/// Loads every `record.json` under a runs directory (sweeps included),
/// sorted by path for reproducible report inputs.
pub fn load_records(root: &Path) -> Result<Vec<MetricsRecord>> {
    let mut paths = Vec::new();
    collect_records(root, &mut paths)?;
    paths.sort();
    let mut records = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path)?;
        let record: MetricsRecord = serde_json::from_str(&text)
            .with_context(|| format!("malformed record {}", path.display()))?;
        records.push(record);
    }
    Ok(records)
}

fn collect_records(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_records(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "record.json") {
            out.push(path);
        }
    }
    Ok(())
}
