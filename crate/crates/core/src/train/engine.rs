//! The two training stages: plain supervised runs (teacher pretraining and
//! no-distillation controls) and the joint distillation stage.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, channel_stats, sequential_batches, LabeledImageSet, Normalization};
use crate::derive_seed;
use crate::loss::{cross_entropy_with_grad, train_loss_with_grads, LossBreakdown, LossError};
use crate::model::{
    BnStatUpdate, BranchOutputs, Ensemble, EnsembleSpec, ModelSpec, ParamGrads, ParamState,
};

use super::{init_params, lr_at, Adam, TrainConfig, TrainError, BN_MOMENTUM};

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub ce_teacher: f64,
    pub ce_student: f64,
    pub kd_combined_kl: f64,
    pub kd_combined_mse: f64,
    pub kd_branch_kl_sum: f64,
    pub kd_branch_mse_sum: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

/// Per-epoch rows of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

/// Result of the joint distillation stage.
#[derive(Debug)]
pub struct EkdOutcome {
    pub student: ParamState,
    pub teachers: ParamState,
    pub trace: TrainTrace,
}

/// Non-finite activations mean the run exploded; report that as divergence
/// rather than an input error.
fn diverged_or(err: LossError, epoch: usize) -> TrainError {
    match err {
        LossError::NonFiniteInput => TrainError::Diverged { epoch },
        other => TrainError::Loss(other),
    }
}

fn apply_bn_updates(params: &mut ParamState, updates: &[BnStatUpdate]) {
    for up in updates {
        let unbias = if up.count > 1 {
            up.count as f64 / (up.count as f64 - 1.0)
        } else {
            1.0
        };
        {
            let rm = params.get_mut(&up.mean_name).as_slice_mut().expect("contiguous");
            for (r, &m) in rm.iter_mut().zip(up.mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
        }
        let rv = params.get_mut(&up.var_name).as_slice_mut().expect("contiguous");
        for (r, &v) in rv.iter_mut().zip(up.var_biased.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (v * unbias);
        }
    }
}

fn argmax_accuracy(logits: &Array2<f64>, labels: &[u8]) -> (usize, usize) {
    let mut correct = 0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (k, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, k);
            }
        }
        if best.1 == usize::from(label) {
            correct += 1;
        }
    }
    (correct, labels.len())
}

/// Inference-mode top-1 accuracy of the combined logits over a whole set.
pub(crate) fn eval_accuracy(
    ensemble: &Ensemble,
    params: &ParamState,
    set: &LabeledImageSet,
    norm: &Normalization,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in sequential_batches(set, batch_size, norm)? {
        let out = ensemble.forward_eval(params, &batch.images)?;
        let (c, n) = argmax_accuracy(&out.combined_logits, &batch.labels);
        correct += c;
        total += n;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Running averages of the loss breakdown over one epoch.
#[derive(Default)]
struct EpochStats {
    sums: [f64; 7],
    batches: usize,
    correct: usize,
    seen: usize,
}

impl EpochStats {
    fn add(&mut self, b: &LossBreakdown, correct: usize, seen: usize) {
        let parts = [
            b.total,
            b.ce_teacher,
            b.ce_student,
            b.kd_combined_kl,
            b.kd_combined_mse,
            b.kd_branch_kl_sum,
            b.kd_branch_mse_sum,
        ];
        for (acc, p) in self.sums.iter_mut().zip(parts) {
            *acc += p;
        }
        self.batches += 1;
        self.correct += correct;
        self.seen += seen;
    }

    fn row(&self, epoch: usize, lr: f64, test_accuracy: Option<f64>, wall: f64) -> TraceRow {
        let n = self.batches.max(1) as f64;
        TraceRow {
            epoch,
            lr,
            total_loss: self.sums[0] / n,
            ce_teacher: self.sums[1] / n,
            ce_student: self.sums[2] / n,
            kd_combined_kl: self.sums[3] / n,
            kd_combined_mse: self.sums[4] / n,
            kd_branch_kl_sum: self.sums[5] / n,
            kd_branch_mse_sum: self.sums[6] / n,
            train_accuracy: self.correct as f64 / self.seen.max(1) as f64,
            test_accuracy,
            wall_time_s: wall,
        }
    }
}

/// Trains one ensemble on plain cross-entropy of its combined logits.
///
/// Used for teacher pretraining and for the no-distillation student control.
/// The trace stores the loss in `ce_student`/`total_loss`.
pub fn train_supervised(
    ensemble: &Ensemble,
    init_tag: &str,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TraceRow),
) -> Result<(ParamState, TrainTrace), TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = init_params(&ensemble.param_defs(), derive_seed(config.seed, init_tag));
    let norm = channel_stats(train_set);
    let mut optimizer = Adam::new(&params);
    let batch_seed = derive_seed(config.seed, "batches");
    let mut trace = TrainTrace::default();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, config)?;
        let mut stats = EpochStats::default();
        for batch in batch_iterator(
            train_set,
            config.batch_size,
            batch_seed,
            epoch,
            config.augment,
            &norm,
        )? {
            let (out, caches, bn_updates) = ensemble.forward_train(&params, &batch.images)?;
            let (loss, grad) = cross_entropy_with_grad(&out.combined_logits, &batch.labels)
                .map_err(|e| diverged_or(e, epoch))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let breakdown = LossBreakdown {
                ce_teacher: 0.0,
                ce_student: loss,
                kd_combined_kl: 0.0,
                kd_combined_mse: 0.0,
                kd_branch_kl_sum: 0.0,
                kd_branch_mse_sum: 0.0,
                total: loss,
            };
            let (correct, seen) = argmax_accuracy(&out.combined_logits, &batch.labels);
            stats.add(&breakdown, correct, seen);

            let mut grads = ParamGrads::zeros_like(&params);
            let per_branch: Vec<Array2<f64>> =
                (0..ensemble.num_members()).map(|_| grad.clone()).collect();
            ensemble.backward(&params, &caches, &per_branch, &mut grads);
            apply_bn_updates(&mut params, &bn_updates);
            optimizer.step(&mut params, &grads, lr, config.weight_decay);
        }
        let test_accuracy = match test_set {
            Some(set) => Some(eval_accuracy(ensemble, &params, set, &norm, config.batch_size)?),
            None => None,
        };
        let row = stats.row(epoch, lr, test_accuracy, start.elapsed().as_secs_f64());
        on_epoch(&row);
        trace.rows.push(row);
    }
    Ok((params, trace))
}

/// Pretrains a single teacher network from scratch on ground-truth labels.
///
/// Parameter names carry the standalone `net.` prefix; the joint stage
/// renames them into their ensemble slot.
pub fn pretrain_teacher(
    spec: &ModelSpec,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    config: &TrainConfig,
    on_epoch: impl FnMut(&TraceRow),
) -> Result<(ParamState, TrainTrace), TrainError> {
    let ensemble = Ensemble::single(spec);
    train_supervised(&ensemble, "init.teacher", train_set, test_set, config, on_epoch)
}

/// Checks that a pretrained teacher state carries exactly the tensors its
/// ensemble slot expects.
fn validate_teacher_state(
    index: usize,
    state: &ParamState,
    expected: &[crate::model::ParamDef],
) -> Result<(), TrainError> {
    for def in expected {
        match state.position(&def.name) {
            None => {
                return Err(TrainError::TeacherMismatch {
                    index,
                    detail: format!("missing tensor {}", def.name),
                })
            }
            Some(pos) => {
                let got = state.tensor(pos).shape().to_vec();
                if got != def.shape {
                    return Err(TrainError::TeacherMismatch {
                        index,
                        detail: format!(
                            "tensor {} has shape {:?}, expected {:?}",
                            def.name, got, def.shape
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

/// The joint stage: teachers and the multi-branch student are trained
/// together. Student parameters follow the full objective; teachers follow
/// their cross-entropy term only (or the full objective when
/// `teacher_full_kd` is set), and are left untouched when frozen.
pub fn train_ekd(
    spec: &EnsembleSpec,
    pretrained_teachers: Option<&[ParamState]>,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TraceRow),
) -> Result<EkdOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let student = spec.student()?;
    let teachnet = spec.teachnet()?;

    let mut student_params =
        init_params(&student.param_defs(), derive_seed(config.seed, "init.student"));
    let mut teacher_params = match pretrained_teachers {
        Some(states) => {
            if states.len() != spec.teachers.len() {
                return Err(TrainError::TeacherMismatch {
                    index: states.len(),
                    detail: format!(
                        "{} pretrained states for {} teachers",
                        states.len(),
                        spec.teachers.len()
                    ),
                });
            }
            let renamed: Vec<ParamState> = states
                .iter()
                .enumerate()
                .map(|(i, s)| s.renamed_prefix("net.", &format!("teacher{i}.")))
                .collect();
            for (i, (state, plan)) in renamed.iter().zip(teachnet.members()).enumerate() {
                let defs: Vec<_> = plan.param_defs();
                validate_teacher_state(i, state, &defs)?;
            }
            ParamState::merge(renamed)
        }
        None => init_params(&teachnet.param_defs(), derive_seed(config.seed, "init.teachers")),
    };

    let norm = channel_stats(train_set);
    let mut student_opt = Adam::new(&student_params);
    let mut teacher_opt = Adam::new(&teacher_params);
    let batch_seed = derive_seed(config.seed, "batches");
    let mut trace = TrainTrace::default();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, config)?;
        let mut stats = EpochStats::default();
        for batch in batch_iterator(
            train_set,
            config.batch_size,
            batch_seed,
            epoch,
            config.augment,
            &norm,
        )? {
            let (student_out, student_caches, student_bn) =
                student.forward_train(&student_params, &batch.images)?;

            let teacher_pass: (BranchOutputs, Option<_>, Vec<BnStatUpdate>) =
                if config.freeze_teachers {
                    let out = teachnet.forward_eval(&teacher_params, &batch.images)?;
                    (out, None, Vec::new())
                } else {
                    let (out, caches, updates) =
                        teachnet.forward_train(&teacher_params, &batch.images)?;
                    (out, Some(caches), updates)
                };
            let (teacher_out, teacher_caches, teacher_bn) = teacher_pass;

            let (breakdown, logit_grads) = train_loss_with_grads(
                &student_out,
                &teacher_out,
                &batch.labels,
                &config.loss_weights,
                config.teacher_full_kd,
            )
            .map_err(|e| diverged_or(e, epoch))?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let (correct, seen) = argmax_accuracy(&student_out.combined_logits, &batch.labels);
            stats.add(&breakdown, correct, seen);

            let mut student_grads = ParamGrads::zeros_like(&student_params);
            student.backward(
                &student_params,
                &student_caches,
                &logit_grads.student,
                &mut student_grads,
            );
            apply_bn_updates(&mut student_params, &student_bn);
            student_opt.step(&mut student_params, &student_grads, lr, config.weight_decay);

            if let Some(caches) = &teacher_caches {
                let mut teacher_grads = ParamGrads::zeros_like(&teacher_params);
                teachnet.backward(
                    &teacher_params,
                    caches,
                    &logit_grads.teachers,
                    &mut teacher_grads,
                );
                apply_bn_updates(&mut teacher_params, &teacher_bn);
                teacher_opt.step(&mut teacher_params, &teacher_grads, lr, config.weight_decay);
            }
        }
        let test_accuracy = match test_set {
            Some(set) => {
                Some(eval_accuracy(&student, &student_params, set, &norm, config.batch_size)?)
            }
            None => None,
        };
        let row = stats.row(epoch, lr, test_accuracy, start.elapsed().as_secs_f64());
        on_epoch(&row);
        trace.rows.push(row);
    }

    Ok(EkdOutcome {
        student: student_params,
        teachers: teacher_params,
        trace,
    })
}
