//! Ensemble knowledge distillation for compact CIFAR-scale ResNets.
//!
//! A compact multi-branch student network (CompNet) is trained against an
//! ensemble of deeper teacher networks (TeachNet) with a composite objective:
//! cross-entropy on ground-truth labels for both sides, plus a distillation
//! term pairing each student branch with one teacher through tempered-KL and
//! MSE losses on the logits.
//!
//! The crate is organised around that pipeline:
//!
//! - [`data`]: CIFAR-10/100 binary parsing, stratified subsampling, synthetic
//!   blob fixtures and seeded, optionally augmented batch iteration.
//! - [`nn`]: the tensor layer primitives (convolution, batch norm, ReLU,
//!   pooling, linear) with hand-written backward passes.
//! - [`model`]: 6n+2 CIFAR ResNet construction, multi-branch ensembles and
//!   parameter/FLOP accounting.
//! - [`loss`]: softmax, cross-entropy, tempered KL, MSE and the combined
//!   distillation objective with analytic logit gradients.
//! - [`train`]: seeded initialisation, the step-decay schedule, ADAM, teacher
//!   pretraining and the joint distillation stage.
//! - [`checkpoint`]: versioned named-tensor snapshots.
//! - [`eval`]: top-1 accuracy, feature extraction, 2-D projection and
//!   inference timing.
//!
//! Everything is deterministic given the configured seeds: two runs with the
//! same configuration produce bit-identical parameters, batch orders and loss
//! values.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod train;

pub use data::{
    batch_iterator, channel_stats, parse_cifar10, parse_cifar100, serialize_cifar10,
    serialize_cifar100, stratified_subsample, synthetic_blobs, synthetic_blobs_split, Batch,
    BatchStream, DataError, LabelMode, LabeledImageSet, Normalization,
};
pub use loss::{kd_loss, train_loss, LossBreakdown, LossError, LossWeights};
pub use model::{
    count_flops, count_params, BranchOutputs, EnsembleSpec, ModelError, ModelSpec, ParamState,
};
pub use train::{init_params, lr_at, pretrain_teacher, train_ekd, TrainConfig, TrainError, TrainTrace};

/// Derives an independent sub-seed from a base seed and a purpose tag.
///
/// Every random stream in a run (per-branch init, per-epoch shuffles,
/// augmentation draws) is keyed this way so streams never alias.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalising mix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
