//! Multi-branch networks: the compact student (identical parallel branches)
//! and the teacher ensemble (members of differing depths). Branch logits are
//! summed in branch order to form the combined logits.

use ndarray::Array2;

use super::params::{ParamDef, ParamGrads, ParamState};
use super::resnet::{BnStatUpdate, NetCache, ResNetPlan};
use super::{BranchOutputs, ModelError, ModelSpec};

/// A set of parallel member networks over a shared [`ParamState`].
#[derive(Debug, Clone)]
pub struct Ensemble {
    plans: Vec<ResNetPlan>,
}

impl Ensemble {
    /// Compact student: `branches` copies of one architecture.
    pub fn compnet(branch_spec: &ModelSpec, branches: usize) -> Result<Self, ModelError> {
        if branches == 0 {
            return Err(ModelError::EmptyEnsemble);
        }
        let plans = (0..branches)
            .map(|i| ResNetPlan::new(format!("branch{i}."), branch_spec.clone(), 3))
            .collect();
        Ok(Self { plans })
    }

    /// Teacher ensemble: one member per spec, in the given order.
    pub fn teachnet(specs: &[ModelSpec]) -> Result<Self, ModelError> {
        if specs.is_empty() {
            return Err(ModelError::EmptyEnsemble);
        }
        if specs.windows(2).any(|w| w[0].num_classes != w[1].num_classes) {
            return Err(ModelError::ClassCountMismatch);
        }
        let plans = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| ResNetPlan::new(format!("teacher{i}."), spec.clone(), 3))
            .collect();
        Ok(Self { plans })
    }

    /// A single standalone network (used for teacher pretraining).
    pub fn single(spec: &ModelSpec) -> Self {
        Self {
            plans: vec![ResNetPlan::new("net.", spec.clone(), 3)],
        }
    }

    pub fn num_members(&self) -> usize {
        self.plans.len()
    }

    pub fn members(&self) -> &[ResNetPlan] {
        &self.plans
    }

    pub fn num_classes(&self) -> usize {
        self.plans[0].spec.num_classes
    }

    pub fn param_defs(&self) -> Vec<ParamDef> {
        self.plans.iter().flat_map(|p| p.param_defs()).collect()
    }

    pub fn forward_train(
        &self,
        params: &ParamState,
        images: &ndarray::Array4<f64>,
    ) -> Result<(BranchOutputs, Vec<NetCache>, Vec<BnStatUpdate>), ModelError> {
        let mut features = Vec::with_capacity(self.plans.len());
        let mut logits = Vec::with_capacity(self.plans.len());
        let mut caches = Vec::with_capacity(self.plans.len());
        let mut updates = Vec::new();
        for plan in &self.plans {
            let (out, cache, mut ups) = plan.forward_train(params, images)?;
            features.push(out.features);
            logits.push(out.logits);
            caches.push(cache);
            updates.append(&mut ups);
        }
        Ok((BranchOutputs::new(features, logits), caches, updates))
    }

    pub fn forward_eval(
        &self,
        params: &ParamState,
        images: &ndarray::Array4<f64>,
    ) -> Result<BranchOutputs, ModelError> {
        let mut features = Vec::with_capacity(self.plans.len());
        let mut logits = Vec::with_capacity(self.plans.len());
        for plan in &self.plans {
            let out = plan.forward_eval(params, images)?;
            features.push(out.features);
            logits.push(out.logits);
        }
        Ok(BranchOutputs::new(features, logits))
    }

    /// Backward every member from its own logit gradient.
    pub fn backward(
        &self,
        params: &ParamState,
        caches: &[NetCache],
        dlogits: &[Array2<f64>],
        grads: &mut ParamGrads,
    ) {
        debug_assert_eq!(caches.len(), self.plans.len());
        debug_assert_eq!(dlogits.len(), self.plans.len());
        for ((plan, cache), dl) in self.plans.iter().zip(caches).zip(dlogits) {
            plan.backward(params, cache, dl, grads);
        }
    }

    /// Total multiply-accumulates over all members for one sample.
    pub fn count_flops(&self, input: (usize, usize)) -> u64 {
        self.plans.iter().map(|p| p.count_flops(input)).sum()
    }
}
