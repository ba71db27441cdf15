//! Integration tests for the experiment pipeline: run directories, record
//! persistence, sweeps, reports and the command-line surface.

use std::fs;
use std::path::Path;
use std::process::Command;

use ekd_cli::report::render_table;
use ekd_cli::{load_records, parse_config, run_experiment, sweep, SweepAxis, Variant};

fn tiny_config(output_dir: &Path, extra: &str) -> ekd_cli::ExperimentConfig {
    let text = format!
        ("dataset = synthetic\n\
          synth_classes = 3\n\
          synth_per_class = 20\n\
          synth_image = 6x6x3\n\
          synth_separation = 5\n\
          student_depth = 8\n\
          branches = 1\n\
          teacher_depths = 8\n\
          epochs = 1\n\
          pretrain_epochs = 1\n\
          batch_size = 16\n\
          seeds = 1\n\
          output_dir = {}\n\
          {extra}",
        output_dir.display()
    );
    parse_config(&text).unwrap()
}

#[test]
fn run_directory_holds_the_full_run_story() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "with_control = true\ndump_features = true\n");
    let records = run_experiment(&config).unwrap();
    assert_eq!(records.len(), 2); // ekd + control
    assert_eq!(records[0].variant, Variant::Ekd);
    assert_eq!(records[1].variant, Variant::Control);

    let ekd_dir = dir.path().join(&records[0].run_id);
    for file in [
        "manifest.json",
        "trace.jsonl",
        "teacher0.trace.jsonl",
        "teacher0.ckpt",
        "student.ckpt",
        "teachers.ckpt",
        "features.tsv",
        "record.json",
    ] {
        assert!(ekd_dir.join(file).exists(), "missing {file}");
    }
    // Exactly one teacher was pretrained for a single-branch run.
    assert!(!ekd_dir.join("teacher1.ckpt").exists());

    let manifest = fs::read_to_string(ekd_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"completed\""));
    assert!(manifest.contains("\"gamma\": 0.6"));

    // Streams and records agree on epoch count.
    let trace_lines = fs::read_to_string(ekd_dir.join("trace.jsonl")).unwrap();
    assert_eq!(trace_lines.lines().count(), 1);
    assert_eq!(records[0].trace.len(), 1);

    // The aggregate index holds both records; re-loading round-trips.
    let index = fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 2);
    let loaded = load_records(dir.path()).unwrap();
    assert_eq!(loaded.len(), 2);
    assert!(loaded.contains(&records[0]));
    assert!(loaded.contains(&records[1]));
}

#[test]
fn rerunning_the_same_config_reproduces_losses_exactly() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny_config(dir_a.path(), "")).unwrap();
    let b = run_experiment(&tiny_config(dir_b.path(), "")).unwrap();
    assert_eq!(a[0].trace[0].total_loss.to_bits(), b[0].trace[0].total_loss.to_bits());
    assert_eq!(a[0].final_eval.top1_ensemble, b[0].final_eval.top1_ensemble);
    assert_eq!(a[0].config_hash, b[0].config_hash);
}

#[test]
fn multiple_seeds_share_a_hash_but_not_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), "");
    config.seeds = vec![1, 2, 3];
    let records = run_experiment(&config).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.windows(2).all(|w| w[0].config_hash == w[1].config_hash));
    let seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![1, 2, 3]);
}

#[test]
fn ensemble_size_sweep_takes_prefix_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), "");
    config.branches = 2;
    config.teacher_depths = vec![8, 14];
    let records = sweep(
        &config,
        SweepAxis::EnsembleSize,
        &["1".into(), "2".into()],
    )
    .unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].ensemble_size, 1);
    assert_eq!(records[0].teacher_depths, vec![8]);
    assert_eq!(records[1].ensemble_size, 2);
    assert_eq!(records[1].teacher_depths, vec![8, 14]);

    // Grouped under one sweep directory.
    let sweep_dirs: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("sweep-ensemble-size-"))
        .collect();
    assert_eq!(sweep_dirs.len(), 1);

    // Oversized or empty sweeps are rejected.
    assert!(sweep(&config, SweepAxis::EnsembleSize, &["3".into()]).is_err());
    assert!(sweep(&config, SweepAxis::EnsembleSize, &[]).is_err());
}

#[test]
fn data_fraction_sweep_subsamples_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), "");
    if let ekd_cli::DatasetKind::Synthetic { per_class, .. } = &mut config.dataset {
        *per_class = 40;
    }
    config.seeds = vec![5];
    let records = sweep(
        &config,
        SweepAxis::DataFraction,
        &["0.5".into(), "1.0".into()],
    )
    .unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].data_fraction, 0.5);
    assert_eq!(records[1].data_fraction, 1.0);
    assert!(sweep(&config, SweepAxis::DataFraction, &["1.5".into()]).is_err());
}

#[test]
fn failed_runs_record_the_error_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), "");
    config.base_lr = 1e200; // guaranteed divergence
    let err = run_experiment(&config).unwrap_err();
    assert!(format!("{err:#}").contains("diverged"), "{err:#}");

    let run_dir = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.path().is_dir())
        .unwrap()
        .path();
    let manifest = fs::read_to_string(run_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed\""), "{manifest}");
    assert!(manifest.contains("diverged"), "{manifest}");
}

#[test]
fn cifar100_files_load_in_both_label_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data").join("cifar-100-binary");
    fs::create_dir_all(&data).unwrap();
    // Six train records and three test records, coarse byte then fine byte.
    let record = |coarse: u8, fine: u8| {
        let mut r = vec![coarse, fine];
        r.extend(vec![fine.wrapping_mul(7); 3072]);
        r
    };
    let mut train = Vec::new();
    for i in 0..6u8 {
        train.extend(record(i % 3, i % 5));
    }
    let mut test = Vec::new();
    for i in 0..3u8 {
        test.extend(record(i % 3, i % 5));
    }
    fs::write(data.join("train.bin"), &train).unwrap();
    fs::write(data.join("test.bin"), &test).unwrap();

    let base = format!(
        "dataset = cifar100\ndata_root = {}\noutput_dir = {}\n",
        dir.path().join("data").display(),
        dir.path().display()
    );
    let fine = parse_config(&base).unwrap();
    let (train_set, test_set) = ekd_cli::load_dataset(&fine).unwrap();
    assert_eq!((train_set.len(), test_set.len()), (6, 3));
    assert_eq!(train_set.num_classes(), 100);

    let coarse = parse_config(&format!("{base}label_mode = coarse\n")).unwrap();
    let (train_set, _) = ekd_cli::load_dataset(&coarse).unwrap();
    assert_eq!(train_set.num_classes(), 20);
    assert!(train_set.labels().iter().all(|&l| l < 20));
}

#[test]
fn missing_cifar_files_point_at_the_expected_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "dataset = cifar10\ndata_root = {}\noutput_dir = {}\n",
        dir.path().join("nowhere").display(),
        dir.path().display()
    );
    let config = parse_config(&text).unwrap();
    let err = run_experiment(&config).unwrap_err();
    let message = format!("{err:#}");
    assert!(message.contains("data_batch_1.bin"), "{message}");
}

#[test]
fn table_report_from_real_records_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "with_control = true\n");
    run_experiment(&config).unwrap();
    let records = load_records(dir.path()).unwrap();
    let a = render_table(&records).unwrap();
    let b = render_table(&records).unwrap();
    assert_eq!(a, b);
    assert!(a.lines().count() >= 2);
    assert!(a.starts_with("es\tteachers\t"));
}

// ----------------------------------------------------------- CLI surface

fn ekd_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ekd"))
}

#[test]
fn cli_inspect_model_prints_the_accounting_table() {
    let out = ekd_bin()
        .args(["inspect-model", "--depths", "8,14", "--branches", "7"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("resnet8\t0.08\t12.50"), "{text}");
    assert!(text.contains("resnet14\t"), "{text}");
    assert!(text.contains("resnet8-es7\t0.55\t87.51"), "{text}");
}

#[test]
fn cli_run_and_report_complete_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.cfg");
    let runs = dir.path().join("runs");
    fs::write(
        &config_path,
        format!(
            "dataset = synthetic\nsynth_classes = 3\nsynth_per_class = 15\n\
             synth_image = 6x6x3\nsynth_separation = 5\nbranches = 1\n\
             teacher_depths = 8\nepochs = 1\npretrain_epochs = 1\n\
             batch_size = 16\nseeds = 1\nwith_control = true\n\
             dump_features = true\noutput_dir = {}\n",
            runs.display()
        ),
    )
    .unwrap();

    let out = ekd_bin().args(["run", "--config"]).arg(&config_path).output().unwrap();
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );

    let table = dir.path().join("table.tsv");
    let out = ekd_bin()
        .args(["report", "--kind", "table", "--runs"])
        .arg(&runs)
        .arg("--out")
        .arg(&table)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(fs::read_to_string(&table).unwrap().starts_with("es\t"));

    let curve = dir.path().join("curve.svg");
    let out = ekd_bin()
        .args(["report", "--kind", "accuracy-curve", "--runs"])
        .arg(&runs)
        .arg("--out")
        .arg(&curve)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(fs::read_to_string(&curve).unwrap().starts_with("<svg"));
    assert!(curve.with_extension("tsv").exists());

    // The feature dump from the run feeds the scatter report.
    let records = load_records(&runs).unwrap();
    let features = runs.join(&records[0].run_id).join("features.tsv");
    let scatter = dir.path().join("scatter.svg");
    let out = ekd_bin()
        .args(["report", "--kind", "embedding-scatter", "--features"])
        .arg(&features)
        .arg("--out")
        .arg(&scatter)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(fs::read_to_string(&scatter).unwrap().contains("</svg>"));
}

#[test]
fn cli_parse_check_validates_synthesized_batches() {
    let dir = tempfile::tempdir().unwrap();
    // Two records per batch file, valid labels.
    for i in 1..=5 {
        let mut bytes = Vec::new();
        for r in 0..2u8 {
            bytes.push((r + i as u8) % 10);
            bytes.extend(vec![r; 3072]);
        }
        fs::write(dir.path().join(format!("data_batch_{i}.bin")), &bytes).unwrap();
    }
    let mut test_bytes = Vec::new();
    test_bytes.push(7u8);
    test_bytes.extend(vec![1u8; 3072]);
    fs::write(dir.path().join("test_batch.bin"), &test_bytes).unwrap();

    let out = ekd_bin()
        .args(["parse-check", "--dataset", "cifar10", "--dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("train: 10 images"), "{text}");

    // A corrupt label byte fails the check with a nonzero exit code.
    fs::write(dir.path().join("test_batch.bin"), {
        let mut bad = vec![11u8];
        bad.extend(vec![0u8; 3072]);
        bad
    })
    .unwrap();
    let out = ekd_bin()
        .args(["parse-check", "--dataset", "cifar10", "--dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn cli_rejects_bad_configs_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.cfg");
    fs::write(&config_path, "dataset = synthetic\nmomentum_ = 0.9\n").unwrap();
    let out = ekd_bin().args(["run", "--config"]).arg(&config_path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("momentum_"), "{err}");
    assert!(err.contains("line 2"), "{err}");
}
