use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ekd_cli::report::{
    emit_accuracy_curve, emit_embedding_scatter, emit_table, parse_feature_tsv, CurveAxis,
};
use ekd_cli::{load_config, load_records, run_experiment, sweep, SweepAxis};
use ekd_core::model::{count_params, Ensemble, ModelSpec, ParamState};
use ekd_core::{count_flops, parse_cifar10, parse_cifar100, LabelMode};

/// Ensemble knowledge distillation experiments: train compact multi-branch
/// students against deeper teacher ensembles and report the results.
#[derive(Parser)]
#[command(name = "ekd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config (all seeds, plus controls if configured).
    Run {
        /// Path to a key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run one experiment per value along a sweep axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// data-fraction or ensemble-size.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, e.g. 0.1,0.25,0.5,1.0 or 1,2,3.
        #[arg(long)]
        values: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Render a report from persisted run records.
    Report {
        #[arg(long, value_enum)]
        kind: ReportKind,
        /// Directory containing run records (scanned recursively).
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Feature dump (features.tsv) for embedding scatters.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Axis for accuracy curves: data-fraction or ensemble-size.
        #[arg(long, default_value = "data-fraction")]
        axis: String,
        /// Output file (tables: text; curves and scatters: SVG).
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter and FLOP counts for one or more architectures.
    InspectModel {
        /// Comma-separated depths, each 6n+2 (e.g. 8,14,20).
        #[arg(long, default_value = "8,14,20,26,32,44,56,110")]
        depths: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Also print the multi-branch student at this ensemble size.
        #[arg(long, default_value_t = 1)]
        branches: usize,
        /// Input height and width.
        #[arg(long, default_value_t = 32)]
        input: usize,
    },
    /// Validate dataset files and print per-class histograms.
    ParseCheck {
        #[arg(long, value_enum)]
        dataset: DatasetArg,
        /// Directory holding the binary files.
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Table,
    AccuracyCurve,
    EmbeddingScatter,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Cifar10,
    Cifar100,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output_dir } => {
            let mut config = load_config(&config)?;
            if let Some(dir) = output_dir {
                config.output_dir = dir;
            }
            let records = run_experiment(&config)?;
            for record in &records {
                println!(
                    "{}: top-1 {:.2}% over {} test samples ({:.1}s)",
                    record.run_id,
                    100.0 * record.final_eval.top1_ensemble,
                    record.final_eval.sample_count,
                    record.wall_time_s
                );
            }
            println!("{} record(s) under {}", records.len(), config.output_dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            output_dir,
        } => {
            let mut config = load_config(&config)?;
            if let Some(dir) = output_dir {
                config.output_dir = dir;
            }
            let axis = SweepAxis::parse(&axis)?;
            let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
            let records = sweep(&config, axis, &values)?;
            println!("{} record(s) under {}", records.len(), config.output_dir.display());
        }
        Command::Report {
            kind,
            runs,
            features,
            axis,
            out,
        } => match kind {
            ReportKind::Table => {
                let runs = runs.context("--runs is required for table reports")?;
                let records = load_records(&runs)?;
                emit_table(&records, &out)?;
                println!("wrote {}", out.display());
            }
            ReportKind::AccuracyCurve => {
                let runs = runs.context("--runs is required for accuracy curves")?;
                let records = load_records(&runs)?;
                let axis = match SweepAxis::parse(&axis)? {
                    SweepAxis::DataFraction => CurveAxis::DataFraction,
                    SweepAxis::EnsembleSize => CurveAxis::EnsembleSize,
                };
                let tsv = out.with_extension("tsv");
                emit_accuracy_curve(&records, axis, &out, &tsv)?;
                println!("wrote {} and {}", out.display(), tsv.display());
            }
            ReportKind::EmbeddingScatter => {
                let features =
                    features.context("--features is required for embedding scatters")?;
                let text = std::fs::read_to_string(&features)
                    .with_context(|| format!("cannot read {}", features.display()))?;
                let dump = parse_feature_tsv(&text)?;
                emit_embedding_scatter(&dump, &out)?;
                println!("wrote {}", out.display());
            }
        },
        Command::InspectModel {
            depths,
            classes,
            branches,
            input,
        } => {
            let depths: Vec<usize> = depths
                .split(',')
                .map(|d| d.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .context("depths must be integers")?;
            println!("model\tparams_million\tflops_million");
            for &depth in &depths {
                let spec = ModelSpec::new(depth, classes)?;
                let params = count_params(&ParamState::allocate(
                    &Ensemble::single(&spec).param_defs(),
                ));
                let flops = count_flops(&spec, (input, input));
                println!(
                    "resnet{depth}\t{:.2}\t{:.2}",
                    params as f64 / 1e6,
                    flops as f64 / 1e6
                );
            }
            if branches > 1 {
                let spec = ModelSpec::new(depths[0], classes)?;
                let compnet = Ensemble::compnet(&spec, branches)?;
                let params = count_params(&ParamState::allocate(&compnet.param_defs()));
                let flops = compnet.count_flops((input, input));
                println!(
                    "resnet{}-es{branches}\t{:.2}\t{:.2}",
                    depths[0],
                    params as f64 / 1e6,
                    flops as f64 / 1e6
                );
            }
        }
        Command::ParseCheck { dataset, dir } => match dataset {
            DatasetArg::Cifar10 => {
                let mut bytes = Vec::new();
                for i in 1..=5 {
                    let path = dir.join(format!("data_batch_{i}.bin"));
                    bytes.extend(std::fs::read(&path).with_context(|| {
                        format!("missing CIFAR-10 batch {}", path.display())
                    })?);
                }
                let train = parse_cifar10(&bytes, "cifar10-train")?;
                let test_path = dir.join("test_batch.bin");
                let test_bytes = std::fs::read(&test_path)
                    .with_context(|| format!("missing {}", test_path.display()))?;
                let test = parse_cifar10(&test_bytes, "cifar10-test")?;
                println!("train: {} images, histogram {:?}", train.len(), train.class_histogram());
                println!("test: {} images, histogram {:?}", test.len(), test.class_histogram());
            }
            DatasetArg::Cifar100 => {
                let train_path = dir.join("train.bin");
                let train_bytes = std::fs::read(&train_path)
                    .with_context(|| format!("missing {}", train_path.display()))?;
                let train = parse_cifar100(&train_bytes, LabelMode::Fine, "cifar100-train")?;
                let test_path = dir.join("test.bin");
                let test_bytes = std::fs::read(&test_path)
                    .with_context(|| format!("missing {}", test_path.display()))?;
                let test = parse_cifar100(&test_bytes, LabelMode::Fine, "cifar100-test")?;
                println!("train: {} images, {} classes", train.len(), train.num_classes());
                println!("test: {} images, {} classes", test.len(), test.num_classes());
                let hist = train.class_histogram();
                let (min, max) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
                println!("per-class counts: min {min}, max {max}");
            }
        },
    }
    Ok(())
}
