//! Model construction and accounting: 6n+2 CIFAR ResNets, multi-branch
//! student/teacher ensembles, parameter and FLOP counting.

mod ensemble;
mod params;
mod resnet;

pub use ensemble::Ensemble;
pub use params::{ParamDef, ParamGrads, ParamKind, ParamState};
pub use resnet::{BnStatUpdate, NetCache, NetOutput, ResNetPlan, BN_EPS};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid depth {0}: a residual classifier needs depth = 6n+2 with n >= 1")]
    InvalidDepth(usize),
    #[error("invalid stage widths {0:?}: widths must be positive")]
    InvalidWidths([usize; 3]),
    #[error("invalid class count {0}: need at least 2 classes")]
    InvalidClassCount(usize),
    #[error("shape mismatch at {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },
    #[error("student branch count {students} does not match teacher count {teachers}")]
    BranchPairing { students: usize, teachers: usize },
    #[error("ensemble members disagree on class count")]
    ClassCountMismatch,
    #[error("an ensemble needs at least one member")]
    EmptyEnsemble,
}

/// Architecture description of one residual classifier.
///
/// `depth` counts weighted layers and must be 6n+2; each of the three stages
/// then holds n two-convolution blocks at the configured widths.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub depth: usize,
    pub stage_widths: [usize; 3],
    pub num_classes: usize,
}

/// The stage widths every paper-scale network uses.
pub const DEFAULT_STAGE_WIDTHS: [usize; 3] = [16, 32, 64];

impl ModelSpec {
    pub fn new(depth: usize, num_classes: usize) -> Result<Self, ModelError> {
        Self::with_widths(depth, DEFAULT_STAGE_WIDTHS, num_classes)
    }

    pub fn with_widths(
        depth: usize,
        stage_widths: [usize; 3],
        num_classes: usize,
    ) -> Result<Self, ModelError> {
        if depth < 8 || !(depth - 2).is_multiple_of(6) {
            return Err(ModelError::InvalidDepth(depth));
        }
        if stage_widths.contains(&0) {
            return Err(ModelError::InvalidWidths(stage_widths));
        }
        if num_classes < 2 {
            return Err(ModelError::InvalidClassCount(num_classes));
        }
        Ok(Self {
            depth,
            stage_widths,
            num_classes,
        })
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }

    /// Dimension of the pooled feature vector (the last stage width).
    pub fn feature_dim(&self) -> usize {
        self.stage_widths[2]
    }
}

/// Student-plus-teachers configuration for one distillation run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub student_branch: ModelSpec,
    pub num_branches: usize,
    pub teachers: Vec<ModelSpec>,
}

impl EnsembleSpec {
    pub fn new(
        student_branch: ModelSpec,
        num_branches: usize,
        teachers: Vec<ModelSpec>,
    ) -> Result<Self, ModelError> {
        if num_branches != teachers.len() {
            return Err(ModelError::BranchPairing {
                students: num_branches,
                teachers: teachers.len(),
            });
        }
        if teachers
            .iter()
            .any(|t| t.num_classes != student_branch.num_classes)
        {
            return Err(ModelError::ClassCountMismatch);
        }
        Ok(Self {
            student_branch,
            num_branches,
            teachers,
        })
    }

    pub fn student(&self) -> Result<Ensemble, ModelError> {
        Ensemble::compnet(&self.student_branch, self.num_branches)
    }

    pub fn teachnet(&self) -> Result<Ensemble, ModelError> {
        Ensemble::teachnet(&self.teachers)
    }
}

/// Per-branch features and logits plus their sum.
///
/// `combined_logits` is always the elementwise sum of `branch_logits`, taken
/// in branch order; the constructor is the only way to build one.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub features: Vec<Array2<f64>>,
    pub branch_logits: Vec<Array2<f64>>,
    pub combined_logits: Array2<f64>,
}

impl BranchOutputs {
    pub fn new(features: Vec<Array2<f64>>, branch_logits: Vec<Array2<f64>>) -> Self {
        assert!(!branch_logits.is_empty(), "at least one branch required");
        let mut combined = branch_logits[0].clone();
        for logits in &branch_logits[1..] {
            combined += logits;
        }
        Self {
            features,
            branch_logits,
            combined_logits: combined,
        }
    }

    pub fn num_branches(&self) -> usize {
        self.branch_logits.len()
    }
}

/// Total scalar count over all learnable tensors.
pub fn count_params(params: &ParamState) -> usize {
    params.param_count()
}

/// Multiply-accumulate count of one network for one sample.
///
/// Convolutions (including projection shortcuts) and the linear head count
/// one FLOP per multiply-accumulate; batch norm, ReLU and pooling are free.
/// A static function of the architecture, not of parameter values.
pub fn count_flops(spec: &ModelSpec, input: (usize, usize)) -> u64 {
    ResNetPlan::new("", spec.clone(), 3).count_flops(input)
}
