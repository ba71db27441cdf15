//! The composite distillation objective.
//!
//! The training loss is
//! `alpha * CE(P_t, y) + beta * CE(P_s, y) + gamma * L_KD`, where the
//! distillation term pairs the combined logits and each branch/teacher pair
//! through a tempered KL divergence plus an untempered MSE:
//!
//! `L_KD = KL(P_s, P_t/T) + MSE(P_s, P_t) + sum_i [KL(Q_s_i, Q_t_i/T) + MSE(Q_s_i, Q_t_i)]`
//!
//! Only the teacher side is softened by the temperature; the
//! `soften_student` flag opts into the conventional symmetric softening.
//! There is no `T^2` gradient rescaling. Teacher logits are treated as
//! constants inside `L_KD`: teachers receive gradient only through their own
//! cross-entropy term. Every term is an arithmetic mean over the batch, so
//! loss magnitudes are batch-size invariant.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::BranchOutputs;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid input: logits contain NaN or infinite entries")]
    NonFiniteInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {label} is outside [0, {num_classes})")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("student has {students} branches but teacher has {teachers}")]
    BranchCountMismatch { students: usize, teachers: usize },
    #[error("batch sizes differ: logits {logits} vs labels {labels}")]
    BatchMismatch { logits: usize, labels: usize },
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    /// Divide student logits by the temperature inside the KL terms as well.
    pub soften_student: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.6,
            temperature: 10.0,
            soften_student: false,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<(), LossError> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(LossError::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Every constituent of one training-loss evaluation, in nats and
/// squared-logit units. `total` is computed once from the stored parts:
/// `alpha*ce_teacher + beta*ce_student + gamma*(kd_combined_kl +
/// kd_combined_mse + kd_branch_kl_sum + kd_branch_mse_sum)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_teacher: f64,
    pub ce_student: f64,
    pub kd_combined_kl: f64,
    pub kd_combined_mse: f64,
    pub kd_branch_kl_sum: f64,
    pub kd_branch_mse_sum: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn kd_sum(&self) -> f64 {
        self.kd_combined_kl + self.kd_combined_mse + self.kd_branch_kl_sum + self.kd_branch_mse_sum
    }
}

/// The distillation term alone, before weighting by gamma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdParts {
    pub combined_kl: f64,
    pub combined_mse: f64,
    pub branch_kl_sum: f64,
    pub branch_mse_sum: f64,
}

impl KdParts {
    pub fn sum(&self) -> f64 {
        self.combined_kl + self.combined_mse + self.branch_kl_sum + self.branch_mse_sum
    }
}

/// Gradients of the training loss with respect to every logit bundle.
#[derive(Debug, Clone)]
pub struct LogitGrads {
    /// One gradient per student branch's logits.
    pub student: Vec<Array2<f64>>,
    /// One gradient per teacher member's logits.
    pub teachers: Vec<Array2<f64>>,
}

fn check_finite(z: &Array2<f64>) -> Result<(), LossError> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteInput);
    }
    Ok(())
}

/// Numerically safe softmax of one logit vector.
pub fn softmax(z: &Array1<f64>) -> Result<Array1<f64>, LossError> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteInput);
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = z.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    Ok(out)
}

/// Row-wise log-softmax with max subtraction.
fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - log_sum);
    }
    out
}

fn check_labels(logits: &Array2<f64>, labels: &[u8]) -> Result<(), LossError> {
    let (batch, classes) = logits.dim();
    if batch != labels.len() {
        return Err(LossError::BatchMismatch {
            logits: batch,
            labels: labels.len(),
        });
    }
    for &label in labels {
        if usize::from(label) >= classes {
            return Err(LossError::LabelOutOfRange {
                label,
                num_classes: classes,
            });
        }
    }
    Ok(())
}

/// Batch-mean negative log-likelihood of the true classes.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> Result<f64, LossError> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(
    logits: &Array2<f64>,
    labels: &[u8],
) -> Result<(f64, Array2<f64>), LossError> {
    check_finite(logits)?;
    check_labels(logits, labels)?;
    let batch = logits.dim().0 as f64;
    let log_p = log_softmax_rows(logits);
    let mut grad = log_p.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        loss -= log_p[[i, usize::from(label)]];
        grad[[i, usize::from(label)]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / batch);
    Ok((loss / batch, grad))
}

/// Batch-mean KL divergence between the student distribution and the
/// temperature-softened teacher distribution.
pub fn kl_loss(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    temperature: f64,
    soften_student: bool,
) -> Result<f64, LossError> {
    Ok(kl_with_grad(student_logits, teacher_logits, temperature, soften_student)?.0)
}

/// KL divergence and its gradient with respect to the student logits; the
/// teacher side is a constant.
pub fn kl_with_grad(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    temperature: f64,
    soften_student: bool,
) -> Result<(f64, Array2<f64>), LossError> {
    check_finite(student_logits)?;
    check_finite(teacher_logits)?;
    if student_logits.dim() != teacher_logits.dim() {
        return Err(LossError::LengthMismatch {
            left: student_logits.len(),
            right: teacher_logits.len(),
        });
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(LossError::NonPositiveTemperature(temperature));
    }

    let student_scaled = if soften_student {
        student_logits.mapv(|v| v / temperature)
    } else {
        student_logits.clone()
    };
    let log_p = log_softmax_rows(&student_scaled);
    let log_r = log_softmax_rows(&teacher_logits.mapv(|v| v / temperature));

    let (batch, _) = student_logits.dim();
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros(student_logits.raw_dim());
    for i in 0..batch {
        let mut row_kl = 0.0;
        for k in 0..student_logits.dim().1 {
            let p = log_p[[i, k]].exp();
            row_kl += p * (log_p[[i, k]] - log_r[[i, k]]);
        }
        total += row_kl.max(0.0);
        let scale = if soften_student { 1.0 / temperature } else { 1.0 };
        for k in 0..student_logits.dim().1 {
            let p = log_p[[i, k]].exp();
            grad[[i, k]] = scale * p * ((log_p[[i, k]] - log_r[[i, k]]) - row_kl);
        }
    }
    grad.mapv_inplace(|v| v / batch as f64);
    Ok((total / batch as f64, grad))
}

/// Mean squared difference over all entries (batch mean of the per-row
/// entry means).
pub fn mse_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, LossError> {
    Ok(mse_with_grad(a, b)?.0)
}

/// MSE and its gradient with respect to the first argument.
pub fn mse_with_grad(a: &Array2<f64>, b: &Array2<f64>) -> Result<(f64, Array2<f64>), LossError> {
    check_finite(a)?;
    check_finite(b)?;
    if a.dim() != b.dim() {
        return Err(LossError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len() as f64;
    let diff = a - b;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.mapv(|d| 2.0 * d / n);
    Ok((loss, grad))
}

fn check_pairing(student: &BranchOutputs, teacher: &BranchOutputs) -> Result<(), LossError> {
    if student.num_branches() != teacher.num_branches() {
        return Err(LossError::BranchCountMismatch {
            students: student.num_branches(),
            teachers: teacher.num_branches(),
        });
    }
    Ok(())
}

/// The distillation term: combined-logit KL and MSE plus the per-pair sums,
/// branches paired with teachers by index.
pub fn kd_loss(
    student: &BranchOutputs,
    teacher: &BranchOutputs,
    weights: &LossWeights,
) -> Result<KdParts, LossError> {
    weights.validate()?;
    check_pairing(student, teacher)?;
    let t = weights.temperature;
    let soften = weights.soften_student;
    let combined_kl = kl_loss(&student.combined_logits, &teacher.combined_logits, t, soften)?;
    let combined_mse = mse_loss(&student.combined_logits, &teacher.combined_logits)?;
    let mut branch_kl_sum = 0.0;
    let mut branch_mse_sum = 0.0;
    for (qs, qt) in student.branch_logits.iter().zip(&teacher.branch_logits) {
        branch_kl_sum += kl_loss(qs, qt, t, soften)?;
        branch_mse_sum += mse_loss(qs, qt)?;
    }
    Ok(KdParts {
        combined_kl,
        combined_mse,
        branch_kl_sum,
        branch_mse_sum,
    })
}

/// The full training objective.
pub fn train_loss(
    student: &BranchOutputs,
    teacher: &BranchOutputs,
    labels: &[u8],
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    Ok(train_loss_with_grads(student, teacher, labels, weights, false)?.0)
}

/// The full training objective plus gradients for every logit bundle.
///
/// Student branches receive the whole objective. Teachers receive only
/// `alpha * CE(P_t, y)` unless `teacher_full_kd` additionally routes the
/// distillation term into the teacher logits.
pub fn train_loss_with_grads(
    student: &BranchOutputs,
    teacher: &BranchOutputs,
    labels: &[u8],
    weights: &LossWeights,
    teacher_full_kd: bool,
) -> Result<(LossBreakdown, LogitGrads), LossError> {
    weights.validate()?;
    check_pairing(student, teacher)?;
    let (alpha, beta, gamma) = (weights.alpha, weights.beta, weights.gamma);
    let t = weights.temperature;
    let soften = weights.soften_student;

    let (ce_teacher, g_ce_teacher) = cross_entropy_with_grad(&teacher.combined_logits, labels)?;
    let (ce_student, g_ce_student) = cross_entropy_with_grad(&student.combined_logits, labels)?;

    let (combined_kl, g_combined_kl) =
        kl_with_grad(&student.combined_logits, &teacher.combined_logits, t, soften)?;
    let (combined_mse, g_combined_mse) =
        mse_with_grad(&student.combined_logits, &teacher.combined_logits)?;

    // Gradient shared by every student branch through the combined logits.
    let mut g_combined = g_ce_student.mapv(|v| beta * v);
    g_combined.zip_mut_with(&g_combined_kl, |acc, &g| *acc += gamma * g);
    g_combined.zip_mut_with(&g_combined_mse, |acc, &g| *acc += gamma * g);

    let mut branch_kl_sum = 0.0;
    let mut branch_mse_sum = 0.0;
    let mut student_grads = Vec::with_capacity(student.num_branches());
    for (qs, qt) in student.branch_logits.iter().zip(&teacher.branch_logits) {
        let (kl, g_kl) = kl_with_grad(qs, qt, t, soften)?;
        let (mse, g_mse) = mse_with_grad(qs, qt)?;
        branch_kl_sum += kl;
        branch_mse_sum += mse;
        let mut g = g_combined.clone();
        g.zip_mut_with(&g_kl, |acc, &v| *acc += gamma * v);
        g.zip_mut_with(&g_mse, |acc, &v| *acc += gamma * v);
        student_grads.push(g);
    }

    let g_teacher_base = g_ce_teacher.mapv(|v| alpha * v);
    let mut teacher_grads: Vec<Array2<f64>> = (0..teacher.num_branches())
        .map(|_| g_teacher_base.clone())
        .collect();
    if teacher_full_kd {
        // Optional mode: the distillation term also reaches the teachers.
        let g_comb_t =
            kd_teacher_grad(&student.combined_logits, &teacher.combined_logits, t, soften)?;
        for (i, g) in teacher_grads.iter_mut().enumerate() {
            g.zip_mut_with(&g_comb_t, |acc, &v| *acc += gamma * v);
            let g_branch_t =
                kd_teacher_grad(&student.branch_logits[i], &teacher.branch_logits[i], t, soften)?;
            g.zip_mut_with(&g_branch_t, |acc, &v| *acc += gamma * v);
        }
    }

    let total = alpha * ce_teacher
        + beta * ce_student
        + gamma * (combined_kl + combined_mse + branch_kl_sum + branch_mse_sum);
    let breakdown = LossBreakdown {
        ce_teacher,
        ce_student,
        kd_combined_kl: combined_kl,
        kd_combined_mse: combined_mse,
        kd_branch_kl_sum: branch_kl_sum,
        kd_branch_mse_sum: branch_mse_sum,
        total,
    };
    Ok((
        breakdown,
        LogitGrads {
            student: student_grads,
            teachers: teacher_grads,
        },
    ))
}

/// Gradient of `KL(student, teacher/T) + MSE(student, teacher)` with respect
/// to the teacher logits, for the optional full-objective teacher mode.
fn kd_teacher_grad(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    temperature: f64,
    soften_student: bool,
) -> Result<Array2<f64>, LossError> {
    let (batch, classes) = student_logits.dim();
    let student_scaled = if soften_student {
        student_logits.mapv(|v| v / temperature)
    } else {
        student_logits.clone()
    };
    let log_p = log_softmax_rows(&student_scaled);
    let log_r = log_softmax_rows(&teacher_logits.mapv(|v| v / temperature));
    let mut grad = Array2::<f64>::zeros(student_logits.raw_dim());
    for i in 0..batch {
        for k in 0..classes {
            let p = log_p[[i, k]].exp();
            let r = log_r[[i, k]].exp();
            grad[[i, k]] = (r - p) / temperature;
        }
    }
    let n = student_logits.len() as f64;
    let mse_part = (student_logits - teacher_logits).mapv(|d| -2.0 * d / n);
    grad.mapv_inplace(|v| v / batch as f64);
    Ok(grad + mse_part)
}
