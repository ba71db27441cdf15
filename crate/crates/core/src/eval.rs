//! Evaluation: top-1 accuracy, penultimate-feature extraction, 2-D
//! projection of feature dumps, and inference timing.

use std::time::Instant;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::data::{sequential_batches, DataError, LabeledImageSet, Normalization};
use crate::model::{Ensemble, ModelError, ParamState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model has {model} classes but the set has {set}")]
    ClassCountMismatch { model: usize, set: usize },
    #[error("2-d projection needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("timing needs at least 3 repetitions, got {0}")]
    TooFewRepetitions(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Accuracy of the combined prediction and of every branch on its own.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub top1_ensemble: f64,
    pub top1_per_branch: Vec<f64>,
    pub dataset: String,
    pub model: String,
    pub sample_count: usize,
}

/// One (sample, branch) feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub label: u8,
    pub branch: usize,
    pub features: Vec<f64>,
}

/// Pooled features for every sample and branch, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub feature_dim: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureDump {
    /// Tab-separated text: `label<TAB>branch<TAB>f0..f(M-1)`, one row per
    /// (sample, branch), samples outermost.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&row.label.to_string());
            out.push('\t');
            out.push_str(&row.branch.to_string());
            for v in &row.features {
                out.push('\t');
                out.push_str(&format!("{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &v) in row.iter().enumerate() {
        if v > best.0 {
            best = (v, k);
        }
    }
    best.1
}

/// Inference-mode top-1 accuracy: the ensemble prediction is the argmax of
/// the combined logits (softmax omitted, it cannot change the argmax), and
/// every branch is also scored on its own logits.
pub fn top1_accuracy(
    ensemble: &Ensemble,
    params: &ParamState,
    set: &LabeledImageSet,
    norm: &Normalization,
    batch_size: usize,
    model_id: &str,
) -> Result<EvalReport, EvalError> {
    if ensemble.num_classes() != set.num_classes() {
        return Err(EvalError::ClassCountMismatch {
            model: ensemble.num_classes(),
            set: set.num_classes(),
        });
    }
    let branches = ensemble.num_members();
    let mut combined_correct = 0usize;
    let mut branch_correct = vec![0usize; branches];
    let mut total = 0usize;
    for batch in sequential_batches(set, batch_size, norm)? {
        let out = ensemble.forward_eval(params, &batch.images)?;
        for (i, &label) in batch.labels.iter().enumerate() {
            let want = usize::from(label);
            if argmax(out.combined_logits.row(i)) == want {
                combined_correct += 1;
            }
            for (b, logits) in out.branch_logits.iter().enumerate() {
                if argmax(logits.row(i)) == want {
                    branch_correct[b] += 1;
                }
            }
        }
        total += batch.labels.len();
    }
    let denom = total.max(1) as f64;
    Ok(EvalReport {
        top1_ensemble: combined_correct as f64 / denom,
        top1_per_branch: branch_correct.iter().map(|&c| c as f64 / denom).collect(),
        dataset: set.split_name().to_string(),
        model: model_id.to_string(),
        sample_count: total,
    })
}

/// Post-pooling feature vectors per sample and branch, before the heads.
pub fn extract_features(
    ensemble: &Ensemble,
    params: &ParamState,
    set: &LabeledImageSet,
    norm: &Normalization,
    batch_size: usize,
) -> Result<FeatureDump, EvalError> {
    if ensemble.num_classes() != set.num_classes() {
        return Err(EvalError::ClassCountMismatch {
            model: ensemble.num_classes(),
            set: set.num_classes(),
        });
    }
    let mut rows = Vec::with_capacity(set.len() * ensemble.num_members());
    let mut dim = 0;
    for batch in sequential_batches(set, batch_size, norm)? {
        let out = ensemble.forward_eval(params, &batch.images)?;
        for (i, &label) in batch.labels.iter().enumerate() {
            for (b, feats) in out.features.iter().enumerate() {
                dim = feats.dim().1;
                rows.push(FeatureRow {
                    label,
                    branch: b,
                    features: feats.row(i).to_vec(),
                });
            }
        }
    }
    Ok(FeatureDump {
        feature_dim: dim,
        rows,
    })
}

/// 2-D coordinates of every dump row under a variance-maximizing linear
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    pub branches: Vec<usize>,
    /// Set when the data had rank < 2; missing directions are zero-filled.
    pub rank_deficient: bool,
}

/// Projects the dump onto its two leading principal components.
///
/// Deterministic including sign: each component is flipped so its
/// largest-magnitude coefficient is positive.
pub fn project_2d(dump: &FeatureDump) -> Result<Projection2d, EvalError> {
    let n = dump.rows.len();
    if n < 3 {
        return Err(EvalError::TooFewRows(n));
    }
    let m = dump.feature_dim;

    let mut data = Array2::<f64>::zeros((n, m));
    for (i, row) in dump.rows.iter().enumerate() {
        for (j, &v) in row.features.iter().enumerate() {
            data[[i, j]] = v;
        }
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("n >= 3");
    for mut row in data.rows_mut() {
        row -= &mean;
    }

    let mut cov = Array2::<f64>::zeros((m, m));
    ndarray::linalg::general_mat_mul(1.0 / n as f64, &data.t(), &data, 0.0, &mut cov);
    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov);

    // Indices of the two largest eigenvalues.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).expect("finite"));
    let scale = eigenvalues[order[0]].abs().max(1e-300);
    let usable = |idx: usize| eigenvalues[order[idx]] > 1e-12 * scale.max(1.0);

    let mut axes = Vec::new();
    for (idx, &col) in order.iter().take(2.min(m)).enumerate() {
        if usable(idx) {
            let mut axis: Array1<f64> = eigenvectors.column(col).to_owned();
            // Sign convention: largest-magnitude coefficient positive.
            let lead = axis
                .iter()
                .cloned()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if lead < 0.0 {
                axis.mapv_inplace(|v| -v);
            }
            axes.push(axis);
        }
    }
    let rank_deficient = axes.len() < 2;

    let mut points = Vec::with_capacity(n);
    for row in data.rows() {
        let mut p = [0.0f64; 2];
        for (k, axis) in axes.iter().enumerate() {
            p[k] = row.dot(axis);
        }
        points.push(p);
    }
    Ok(Projection2d {
        points,
        labels: dump.rows.iter().map(|r| r.label).collect(),
        branches: dump.rows.iter().map(|r| r.branch).collect(),
        rank_deficient,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors-as-columns).
fn jacobi_eigen(matrix: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let m = matrix.dim().0;
    let mut a = matrix.clone();
    let mut v = Array2::<f64>::eye(m);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..m {
            for q in (p + 1)..m {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..m {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = Array1::from_shape_fn(m, |i| a[[i, i]]);
    (eigenvalues, v)
}

/// Median wall-clock milliseconds per inference batch.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTiming {
    pub runs_ms: Vec<f64>,
    pub median_ms: f64,
}

/// Times `repetitions` inference passes after one untimed warm-up pass.
pub fn measure_inference(
    ensemble: &Ensemble,
    params: &ParamState,
    batch: &ndarray::Array4<f64>,
    repetitions: usize,
) -> Result<InferenceTiming, EvalError> {
    if repetitions < 3 {
        return Err(EvalError::TooFewRepetitions(repetitions));
    }
    ensemble.forward_eval(params, batch)?; // warm-up
    let mut runs_ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = ensemble.forward_eval(params, batch)?;
        std::hint::black_box(&out.combined_logits);
        runs_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = runs_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median_ms = sorted[sorted.len() / 2];
    Ok(InferenceTiming { runs_ms, median_ms })
}
