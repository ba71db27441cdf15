use super::*;
use crate::data::synthetic_blobs;
use crate::derive_seed;
use crate::loss::{train_loss, LossWeights};
use crate::model::{count_params, Ensemble, EnsembleSpec, ModelSpec};

fn tiny_spec(classes: usize) -> ModelSpec {
    ModelSpec::with_widths(8, [4, 8, 8], classes).unwrap()
}

fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: 0.01,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    }
}

// ----------------------------------------------------------------- init

#[test]
fn init_biases_zero_and_bn_at_rest() {
    let ensemble = Ensemble::single(&tiny_spec(4));
    let defs = ensemble.param_defs();
    let params = init_params(&defs, 1);
    for def in &defs {
        let tensor = params.get(&def.name);
        match def.kind {
            crate::model::ParamKind::Bias | crate::model::ParamKind::BnShift
            | crate::model::ParamKind::BnRunningMean => {
                assert!(tensor.iter().all(|&v| v == 0.0), "{}", def.name);
            }
            crate::model::ParamKind::BnScale | crate::model::ParamKind::BnRunningVar => {
                assert!(tensor.iter().all(|&v| v == 1.0), "{}", def.name);
            }
            crate::model::ParamKind::Weight => {
                assert!(tensor.iter().any(|&v| v != 0.0), "{}", def.name);
            }
        }
    }
}

#[test]
fn init_weight_statistics_match_the_gaussian() {
    // A wide single layer gives over 1e5 draws from the same stream.
    let spec = ModelSpec::with_widths(8, [64, 64, 64], 10).unwrap();
    let ensemble = Ensemble::single(&spec);
    let params = init_params(&ensemble.param_defs(), 9);
    let mut values = Vec::new();
    for (name, tensor, _) in params.iter() {
        if name.ends_with(".weight") {
            values.extend(tensor.iter().cloned());
        }
    }
    assert!(values.len() > 100_000, "{}", values.len());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.001, "mean {mean}");
    assert!(std > 0.009 && std < 0.011, "std {std}");
}

#[test]
fn init_is_bit_deterministic_per_seed() {
    let ensemble = Ensemble::single(&tiny_spec(4));
    let defs = ensemble.param_defs();
    let a = init_params(&defs, 7);
    let b = init_params(&defs, 7);
    let c = init_params(&defs, 8);
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
}

// ------------------------------------------------------------- schedule

#[test]
fn lr_schedule_matches_published_protocol() {
    let config = TrainConfig {
        epochs: 500,
        base_lr: 0.01,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &config).unwrap(), 0.01);
    assert_eq!(lr_at(249, &config).unwrap(), 0.01);
    assert_eq!(lr_at(250, &config).unwrap(), 0.001);
    assert_eq!(lr_at(374, &config).unwrap(), 0.001);
    assert_eq!(lr_at(375, &config).unwrap(), 0.0001);
    assert_eq!(lr_at(499, &config).unwrap(), 0.0001);
    assert!(matches!(
        lr_at(500, &config),
        Err(TrainError::EpochOutOfRange { epoch: 500, epochs: 500 })
    ));
}

#[test]
fn lr_boundaries_use_ceil_of_the_fraction() {
    let config = TrainConfig {
        epochs: 10,
        base_lr: 1.0,
        lr_drop_points: vec![0.33],
        drop_factor: 2.0,
        ..TrainConfig::default()
    };
    // ceil(3.3) = 4 is the first dropped epoch.
    assert_eq!(lr_at(3, &config).unwrap(), 1.0);
    assert_eq!(lr_at(4, &config).unwrap(), 0.5);
}

#[test]
fn config_validation_rejects_bad_fields() {
    let no_epochs = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    assert!(no_epochs.validate().is_err());
    let bad_drop_point = TrainConfig {
        lr_drop_points: vec![1.0],
        ..TrainConfig::default()
    };
    assert!(bad_drop_point.validate().is_err());
    let bad_factor = TrainConfig {
        drop_factor: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad_factor.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}

// --------------------------------------------------------------- engine

#[test]
fn zero_lr_run_leaves_parameters_at_initialisation() {
    let set = synthetic_blobs(3, 20, (8, 8, 3), 3.0, 2).unwrap();
    let spec = tiny_spec(3);
    let mut config = quick_config(2, 5);
    config.base_lr = 0.0;
    let (params, trace) = pretrain_teacher(&spec, &set, None, &config, |_| {}).unwrap();
    let fresh = init_params(
        &Ensemble::single(&spec).param_defs(),
        derive_seed(config.seed, "init.teacher"),
    );
    // Gradient steps are scaled by lr = 0; batch-norm running statistics
    // still move, so compare the trainable tensors only.
    for (name, tensor, trainable) in params.iter() {
        if trainable {
            let init = fresh.get(name);
            assert!(
                tensor.iter().zip(init.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name} moved under zero lr"
            );
        }
    }
    assert_eq!(trace.rows.len(), 2);
}

#[test]
fn pretraining_learns_separable_blobs() {
    let set = synthetic_blobs(3, 100, (8, 8, 3), 5.0, 3).unwrap();
    let spec = tiny_spec(3);
    // 300 samples, batch 32 -> 10 steps per epoch; 20 epochs = 200 steps.
    let config = quick_config(20, 11);
    let (_, trace) = pretrain_teacher(&spec, &set, None, &config, |_| {}).unwrap();
    let final_acc = trace.rows.last().unwrap().train_accuracy;
    assert!(final_acc >= 0.95, "train accuracy {final_acc}");
}

#[test]
fn same_seed_reproduces_the_first_epoch_bitwise() {
    let set = synthetic_blobs(3, 30, (8, 8, 3), 3.0, 4).unwrap();
    let spec = tiny_spec(3);
    let config = quick_config(1, 21);
    let (params_a, trace_a) = pretrain_teacher(&spec, &set, None, &config, |_| {}).unwrap();
    let (params_b, trace_b) = pretrain_teacher(&spec, &set, None, &config, |_| {}).unwrap();
    assert_eq!(
        trace_a.rows[0].total_loss.to_bits(),
        trace_b.rows[0].total_loss.to_bits()
    );
    let (a, b) = (&trace_a.rows[0], &trace_b.rows[0]);
    assert_eq!(a.ce_student.to_bits(), b.ce_student.to_bits());
    assert_eq!(a.lr, b.lr);
    assert_eq!(a.train_accuracy, b.train_accuracy);
    assert!(params_a.bit_eq(&params_b));
}

#[test]
fn trace_lr_column_matches_the_schedule() {
    let set = synthetic_blobs(2, 16, (4, 4, 3), 3.0, 5).unwrap();
    let spec = ModelSpec::with_widths(8, [2, 4, 4], 2).unwrap();
    let config = TrainConfig {
        epochs: 8,
        base_lr: 0.04,
        lr_drop_points: vec![0.5, 0.75],
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let (_, trace) = pretrain_teacher(&spec, &set, None, &config, |_| {}).unwrap();
    assert_eq!(trace.rows.len(), 8);
    for row in &trace.rows {
        assert_eq!(row.lr, lr_at(row.epoch, &config).unwrap());
    }
}

#[test]
fn ekd_without_ce_and_kd_matches_plain_supervised_bitwise() {
    let set = synthetic_blobs(3, 24, (8, 8, 3), 3.0, 6).unwrap();
    let student = tiny_spec(3);
    let teachers = vec![tiny_spec(3), ModelSpec::with_widths(14, [4, 8, 8], 3).unwrap()];
    let spec = EnsembleSpec::new(student.clone(), 2, teachers).unwrap();

    let mut config = quick_config(2, 31);
    config.loss_weights = LossWeights {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let outcome = train_ekd(&spec, None, &set, None, &config, |_| {}).unwrap();

    let compnet = Ensemble::compnet(&student, 2).unwrap();
    let (plain_params, plain_trace) =
        train_supervised(&compnet, "init.student", &set, None, &config, |_| {}).unwrap();

    for (ekd_row, plain_row) in outcome.trace.rows.iter().zip(&plain_trace.rows) {
        assert_eq!(ekd_row.total_loss.to_bits(), plain_row.total_loss.to_bits());
        assert_eq!(ekd_row.ce_student.to_bits(), plain_row.ce_student.to_bits());
        assert_eq!(ekd_row.train_accuracy, plain_row.train_accuracy);
    }
    assert!(outcome.student.bit_eq(&plain_params));
}

#[test]
fn frozen_teachers_with_zero_alpha_never_change() {
    let set = synthetic_blobs(3, 24, (8, 8, 3), 3.0, 7).unwrap();
    let student = tiny_spec(3);
    let teachers = vec![tiny_spec(3), tiny_spec(3)];
    let spec = EnsembleSpec::new(student, 2, teachers).unwrap();

    let mut config = quick_config(3, 41);
    config.freeze_teachers = true;
    config.loss_weights = LossWeights {
        alpha: 0.0,
        ..LossWeights::default()
    };
    let outcome = train_ekd(&spec, None, &set, None, &config, |_| {}).unwrap();
    let fresh = init_params(
        &spec.teachnet().unwrap().param_defs(),
        derive_seed(config.seed, "init.teachers"),
    );
    assert!(outcome.teachers.bit_eq(&fresh));
}

#[test]
fn unfrozen_teachers_move_under_their_ce_term() {
    let set = synthetic_blobs(3, 24, (8, 8, 3), 3.0, 8).unwrap();
    let spec = EnsembleSpec::new(tiny_spec(3), 1, vec![tiny_spec(3)]).unwrap();
    let config = quick_config(1, 51);
    let outcome = train_ekd(&spec, None, &set, None, &config, |_| {}).unwrap();
    let fresh = init_params(
        &spec.teachnet().unwrap().param_defs(),
        derive_seed(config.seed, "init.teachers"),
    );
    assert!(!outcome.teachers.bit_eq(&fresh));
}

#[test]
fn joint_loss_decreases_over_the_first_epochs() {
    let set = synthetic_blobs(3, 60, (8, 8, 3), 5.0, 9).unwrap();
    let spec = EnsembleSpec::new(tiny_spec(3), 1, vec![tiny_spec(3)]).unwrap();
    let config = quick_config(6, 61);
    let outcome = train_ekd(&spec, None, &set, None, &config, |_| {}).unwrap();
    let first = outcome.trace.rows[0].total_loss;
    let later = outcome.trace.rows[5].total_loss;
    assert!(later < first, "{later} !< {first}");
}

#[test]
fn pretrained_teachers_slot_into_the_joint_stage() {
    let set = synthetic_blobs(3, 24, (8, 8, 3), 4.0, 10).unwrap();
    let t_spec = tiny_spec(3);
    let config = quick_config(1, 71);
    let (teacher, _) = pretrain_teacher(&t_spec, &set, None, &config, |_| {}).unwrap();

    let spec = EnsembleSpec::new(tiny_spec(3), 1, vec![t_spec]).unwrap();
    let outcome =
        train_ekd(&spec, Some(std::slice::from_ref(&teacher)), &set, None, &config, |_| {}).unwrap();
    assert_eq!(count_params(&outcome.teachers), count_params(&teacher));

    // A teacher of the wrong architecture is rejected with its index.
    let wrong = EnsembleSpec::new(
        tiny_spec(3),
        1,
        vec![ModelSpec::with_widths(14, [4, 8, 8], 3).unwrap()],
    )
    .unwrap();
    let err = train_ekd(&wrong, Some(&[teacher]), &set, None, &config, |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::TeacherMismatch { index: 0, .. }));
}

#[test]
fn absurd_learning_rate_reports_divergence() {
    let set = synthetic_blobs(3, 24, (8, 8, 3), 3.0, 11).unwrap();
    let spec = EnsembleSpec::new(tiny_spec(3), 1, vec![tiny_spec(3)]).unwrap();
    let mut config = quick_config(3, 81);
    config.base_lr = 1e200;
    let err = train_ekd(&spec, None, &set, None, &config, |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err:?}");
}

// ------------------------------------------------- end-to-end gradients

/// Central-difference check of the whole pipeline: losses through both
/// batch-norm'd residual networks down to individual student parameters.
#[test]
fn train_loss_gradient_matches_finite_differences_end_to_end() {
    use crate::model::{ParamGrads, ParamState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let student_spec = tiny_spec(4);
    let student = Ensemble::compnet(&student_spec, 2).unwrap();
    let teachers =
        Ensemble::teachnet(&[tiny_spec(4), ModelSpec::with_widths(14, [4, 8, 8], 4).unwrap()])
            .unwrap();

    // Larger weights keep batch-norm's inverse-std moderate, so a 1e-5
    // finite-difference step cannot push any pre-activation across a ReLU
    // kink (verified by the step sweep converging at 1e-10 for small steps).
    let mut student_params = init_params(&student.param_defs(), 1001);
    for i in 0..student_params.len() {
        if student_params.name(i).ends_with(".weight") {
            student_params.tensor_mut(i).mapv_inplace(|v| v * 10.0);
        }
    }
    let teacher_params = init_params(&teachers.param_defs(), 1002);

    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let images =
        ndarray::Array4::from_shape_simple_fn((3, 3, 8, 8), || rng.random_range(-1.0..1.0));
    let labels = [0u8, 2, 3];
    let weights = LossWeights::default();

    let (teacher_out, _, _) = teachers.forward_train(&teacher_params, &images).unwrap();

    // Analytic gradient.
    let (student_out, caches, _) = student.forward_train(&student_params, &images).unwrap();
    let (_, logit_grads) = crate::loss::train_loss_with_grads(
        &student_out,
        &teacher_out,
        &labels,
        &weights,
        false,
    )
    .unwrap();
    let mut grads = ParamGrads::zeros_like(&student_params);
    student.backward(&student_params, &caches, &logit_grads.student, &mut grads);

    // Loss as a pure function of the student parameters.
    let loss_of = |params: &ParamState| -> f64 {
        let (out, _, _) = student.forward_train(params, &images).unwrap();
        train_loss(&out, &teacher_out, &labels, &weights).unwrap().total
    };

    // 100 randomly chosen trainable scalars.
    let trainable: Vec<usize> =
        (0..student_params.len()).filter(|&i| student_params.is_trainable(i)).collect();
    let total_scalars: usize = trainable.iter().map(|&i| student_params.tensor(i).len()).sum();
    let step = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 100 {
        let flat = rng.random_range(0..total_scalars);
        let (tensor_idx, offset) = {
            let mut rest = flat;
            let mut found = (trainable[0], 0usize);
            for &i in &trainable {
                let len = student_params.tensor(i).len();
                if rest < len {
                    found = (i, rest);
                    break;
                }
                rest -= len;
            }
            found
        };

        let original = student_params.tensor(tensor_idx).as_slice().unwrap()[offset];
        let mut perturbed = student_params.clone();
        perturbed.tensor_mut(tensor_idx).as_slice_mut().unwrap()[offset] = original + step;
        let plus = loss_of(&perturbed);
        perturbed.tensor_mut(tensor_idx).as_slice_mut().unwrap()[offset] = original - step;
        let minus = loss_of(&perturbed);
        let numeric = (plus - minus) / (2.0 * step);

        let analytic = grads
            .get(tensor_idx)
            .map(|g| g.as_slice().unwrap()[offset])
            .unwrap_or(0.0);
        // The 1e-6 floor covers directions whose true gradient is zero
        // (conv biases cancel inside batch norm): there the finite
        // difference resolves nothing but roundoff (~1e-11 at this step).
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        assert!(
            rel <= 1e-4,
            "{}[{offset}]: numeric {numeric} vs analytic {analytic} (rel {rel})",
            student_params.name(tensor_idx)
        );
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}
