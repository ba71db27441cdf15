//! Report emission: ablation tables, accuracy-vs-axis curves and 2-D
//! embedding scatters. Every number comes straight out of persisted
//! records; nothing is recomputed at render time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use ekd_core::eval::{project_2d, FeatureDump, FeatureRow};

use crate::runner::{MetricsRecord, Variant};

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_comparable(records: &[MetricsRecord]) -> Result<()> {
    if records.is_empty() {
        bail!("no records to report on");
    }
    let dataset = &records[0].dataset;
    if records.iter().any(|r| &r.dataset != dataset) {
        bail!("records mix datasets; a table must compare runs on one dataset");
    }
    Ok(())
}

fn fmt_pct(values: &[f64]) -> String {
    if values.is_empty() {
        return "-".into();
    }
    let (mean, std) = mean_std(values);
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

/// The ensemble-size ablation table: one row per ensemble size with the
/// no-distillation and distilled accuracies, parameter and FLOP counts.
///
/// Deterministic byte-for-byte for the same records.
pub fn render_table(records: &[MetricsRecord]) -> Result<String> {
    check_comparable(records)?;

    // ensemble size -> (teacher depths, params, flops, control accs, ekd accs)
    #[derive(Default)]
    struct Row {
        teachers: Vec<usize>,
        params: usize,
        flops: u64,
        control: Vec<f64>,
        ekd: Vec<f64>,
    }
    let mut rows: BTreeMap<usize, Row> = BTreeMap::new();
    for record in records {
        let row = rows.entry(record.ensemble_size).or_default();
        row.teachers = record.teacher_depths.clone();
        row.params = record.param_count;
        row.flops = record.flop_count;
        match record.variant {
            Variant::Ekd => row.ekd.push(record.final_eval.top1_ensemble),
            Variant::Control => row.control.push(record.final_eval.top1_ensemble),
        }
    }

    let mut out = String::new();
    writeln!(
        out,
        "es\tteachers\tacc_no_ekd\tacc_with_ekd\tparams_million\tflops_million"
    )?;
    for (es, row) in &rows {
        let teachers = row
            .teachers
            .iter()
            .map(|d| format!("R{d}"))
            .collect::<Vec<_>>()
            .join("+");
        writeln!(
            out,
            "{es}\t{teachers}\t{}\t{}\t{:.2}\t{:.2}",
            fmt_pct(&row.control),
            fmt_pct(&row.ekd),
            row.params as f64 / 1e6,
            row.flops as f64 / 1e6,
        )?;
    }
    Ok(out)
}

pub fn emit_table(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let table = render_table(records)?;
    std::fs::write(path, table).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Mean±std accuracy per axis value, for both variants when present.
/// Returns (tsv text, svg text).
pub fn render_accuracy_curve(
    records: &[MetricsRecord],
    axis: CurveAxis,
) -> Result<(String, String)> {
    check_comparable(records)?;
    // axis value (scaled to sortable integer) -> accuracies per variant
    let mut groups: BTreeMap<i64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for record in records {
        let value = match axis {
            CurveAxis::DataFraction => record.data_fraction,
            CurveAxis::EnsembleSize => record.ensemble_size as f64,
        };
        let key = (value * 1e6).round() as i64;
        let entry = groups.entry(key).or_insert((value, Vec::new(), Vec::new()));
        match record.variant {
            Variant::Ekd => entry.1.push(record.final_eval.top1_ensemble),
            Variant::Control => entry.2.push(record.final_eval.top1_ensemble),
        }
    }

    let mut tsv = String::from("axis_value\tekd_mean\tekd_std\tekd_n\tcontrol_mean\tcontrol_std\tcontrol_n\n");
    let mut ekd_series = Vec::new();
    let mut control_series = Vec::new();
    for (value, ekd, control) in groups.values() {
        let (em, es) = if ekd.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(ekd) };
        let (cm, cs) = if control.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(control) };
        writeln!(
            tsv,
            "{value}\t{em:.6}\t{es:.6}\t{}\t{cm:.6}\t{cs:.6}\t{}",
            ekd.len(),
            control.len()
        )?;
        if !ekd.is_empty() {
            ekd_series.push((*value, em));
        }
        if !control.is_empty() {
            control_series.push((*value, cm));
        }
    }

    let axis_label = match axis {
        CurveAxis::DataFraction => "data fraction",
        CurveAxis::EnsembleSize => "ensemble size",
    };
    let svg = svg_curves(
        axis_label,
        "top-1 accuracy",
        &[("with distillation", "#d62728", &ekd_series),
          ("no distillation", "#1f77b4", &control_series)],
    );
    Ok((tsv, svg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveAxis {
    DataFraction,
    EnsembleSize,
}

pub fn emit_accuracy_curve(
    records: &[MetricsRecord],
    axis: CurveAxis,
    svg_path: &Path,
    tsv_path: &Path,
) -> Result<()> {
    let (tsv, svg) = render_accuracy_curve(records, axis)?;
    std::fs::write(tsv_path, tsv)?;
    std::fs::write(svg_path, svg)?;
    Ok(())
}

/// Parses a feature dump written by `FeatureDump::to_tsv`.
pub fn parse_feature_tsv(text: &str) -> Result<FeatureDump> {
    let mut rows = Vec::new();
    let mut dim = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let label: u8 = parts
            .next()
            .and_then(|p| p.parse().ok())
            .with_context(|| format!("line {}: bad label", i + 1))?;
        let branch: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .with_context(|| format!("line {}: bad branch", i + 1))?;
        let features: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("line {}: bad feature value", i + 1))?;
        dim = features.len();
        rows.push(FeatureRow {
            label,
            branch,
            features,
        });
    }
    Ok(FeatureDump {
        feature_dim: dim,
        rows,
    })
}

/// Projects a feature dump to 2-D and renders a class-colored scatter.
pub fn render_embedding_scatter(dump: &FeatureDump) -> Result<String> {
    let projection = project_2d(dump).map_err(anyhow::Error::from)?;
    let points: Vec<(f64, f64, usize)> = projection
        .points
        .iter()
        .zip(&projection.labels)
        .map(|(p, &label)| (p[0], p[1], usize::from(label)))
        .collect();
    Ok(svg_scatter(&points, projection.rank_deficient))
}

pub fn emit_embedding_scatter(dump: &FeatureDump, path: &Path) -> Result<()> {
    let svg = render_embedding_scatter(dump)?;
    std::fs::write(path, svg).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

// ------------------------------------------------------------ svg helpers

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if !min.is_finite() || !max.is_finite() {
        return (0.0, 1.0);
    }
    if (max - min).abs() < 1e-12 {
        return (min - 0.5, max + 0.5);
    }
    (min, max)
}

fn scale(v: f64, (min, max): (f64, f64), out_lo: f64, out_hi: f64) -> f64 {
    out_lo + (v - min) / (max - min) * (out_hi - out_lo)
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>\n",
        W / 2.0
    )
}

fn svg_axes(x_label: &str, y_label: &str) -> String {
    format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{x_label}</text>\n\
         <text x=\"16\" y=\"{cy}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 16 {cy})\">{y_label}</text>\n",
        m = MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        cx = W / 2.0,
        ly = H - 16.0,
        cy = H / 2.0,
    )
}

type Series<'a> = (&'a str, &'a str, &'a Vec<(f64, f64)>);

fn svg_curves(x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let xs = series.iter().flat_map(|(_, _, pts)| pts.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|(_, _, pts)| pts.iter().map(|p| p.1));
    let xb = bounds(xs);
    let yb = bounds(ys);

    let mut svg = svg_header("accuracy");
    svg.push_str(&svg_axes(x_label, y_label));
    for (i, (name, color, points)) in series.iter().enumerate() {
        if points.is_empty() {
            continue;
        }
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    scale(*x, xb, MARGIN, W - MARGIN),
                    scale(*y, yb, H - MARGIN, MARGIN)
                )
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for (x, y) in points.iter() {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                scale(*x, xb, MARGIN, W - MARGIN),
                scale(*y, yb, H - MARGIN, MARGIN)
            ));
        }
        let ly = MARGIN + 18.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{name}</text>\n",
            W - MARGIN - 150.0,
            ly - 10.0,
            W - MARGIN - 132.0,
            ly
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn svg_scatter(points: &[(f64, f64, usize)], rank_deficient: bool) -> String {
    let xb = bounds(points.iter().map(|p| p.0));
    let yb = bounds(points.iter().map(|p| p.1));
    let title = if rank_deficient {
        "feature embedding (rank-deficient)"
    } else {
        "feature embedding"
    };
    let mut svg = svg_header(title);
    svg.push_str(&svg_axes("component 1", "component 2"));
    for (x, y, class) in points {
        let color = PALETTE[class % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n",
            scale(*x, xb, MARGIN, W - MARGIN),
            scale(*y, yb, H - MARGIN, MARGIN)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
