//! Named-tensor parameter storage.

use std::collections::HashMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4};

/// How a tensor should be initialised and whether the optimizer touches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weight: zero-mean Gaussian.
    Weight,
    /// Convolution or linear bias: zero.
    Bias,
    /// Batch-norm scale: one.
    BnScale,
    /// Batch-norm shift: zero.
    BnShift,
    /// Running mean: zero, not trained.
    BnRunningMean,
    /// Running variance: one, not trained.
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

/// Shape and kind of one tensor a model plan wants allocated.
#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// All learnable tensors (plus batch-norm running statistics) of a model,
/// addressed by name. Insertion order is fixed by the plan that declared
/// them, which keeps optimizer and checkpoint traversals deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamState {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Allocates every declared tensor at its resting value: ones for
    /// batch-norm scales and running variances, zeros for everything else.
    /// Weight randomisation is the trainer's job.
    pub fn allocate(defs: &[ParamDef]) -> Self {
        let mut state = Self::new();
        for def in defs {
            let fill = match def.kind {
                ParamKind::BnScale | ParamKind::BnRunningVar => 1.0,
                _ => 0.0,
            };
            state.insert(
                def.name.clone(),
                ArrayD::from_elem(def.shape.clone(), fill),
                def.kind.trainable(),
            );
        }
        state
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>, trainable: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn tensor(&self, index: usize) -> &ArrayD<f64> {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut ArrayD<f64> {
        &mut self.tensors[index]
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = self.index[name];
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn view4(&self, name: &str) -> ArrayView4<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("4-d tensor")
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d tensor")
    }

    pub fn view1(&self, name: &str) -> ArrayView1<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d tensor")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }

    /// Total scalar count over the learnable tensors (running statistics are
    /// state, not parameters).
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &tr)| tr)
            .map(|(t, _)| t.len())
            .sum()
    }

    /// True when every tensor is bitwise equal.
    pub fn bit_eq(&self, other: &ParamState) -> bool {
        if self.names != other.names {
            return false;
        }
        self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
            a.shape() == b.shape()
                && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    /// True when any entry is NaN or infinite.
    pub fn any_non_finite(&self) -> bool {
        self.tensors
            .iter()
            .any(|t| t.iter().any(|v| !v.is_finite()))
    }

    /// A copy with `old` replaced by `new` at the front of every name.
    /// Names that do not start with `old` are kept as-is.
    pub fn renamed_prefix(&self, old: &str, new: &str) -> ParamState {
        let mut out = ParamState::new();
        for (name, tensor, trainable) in self.iter() {
            let renamed = match name.strip_prefix(old) {
                Some(rest) => format!("{new}{rest}"),
                None => name.to_string(),
            };
            out.insert(renamed, tensor.clone(), trainable);
        }
        out
    }

    /// The subset of tensors whose names start with `prefix`, prefix intact.
    pub fn extract_prefix(&self, prefix: &str) -> ParamState {
        let mut out = ParamState::new();
        for (name, tensor, trainable) in self.iter() {
            if name.starts_with(prefix) {
                out.insert(name.to_string(), tensor.clone(), trainable);
            }
        }
        out
    }

    /// Concatenates several states into one (names must not collide).
    pub fn merge(states: impl IntoIterator<Item = ParamState>) -> ParamState {
        let mut out = ParamState::new();
        for state in states {
            for (name, tensor, trainable) in state.iter() {
                out.insert(name.to_string(), tensor.clone(), trainable);
            }
        }
        out
    }
}

impl Default for ParamState {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-tensor gradients aligned with a [`ParamState`]'s indices.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamState) -> Self {
        Self {
            slots: vec![None; params.len()],
        }
    }

    /// Adds `grad` into the slot for `name`.
    pub fn accumulate<D: ndarray::Dimension>(
        &mut self,
        params: &ParamState,
        name: &str,
        grad: ndarray::Array<f64, D>,
    ) {
        let i = params.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let grad = grad.into_dyn();
        match &mut self.slots[i] {
            Some(existing) => *existing += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn get(&self, index: usize) -> Option<&ArrayD<f64>> {
        self.slots[index].as_ref()
    }

    /// Scales every accumulated gradient, e.g. to average over branches.
    pub fn scale(&mut self, factor: f64) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|v| v * factor);
        }
    }

    /// Merges another gradient set into this one.
    pub fn add(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => *a += b,
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn param_count_skips_running_stats() {
        let mut p = ParamState::new();
        p.insert("w", ArrayD::zeros(vec![2, 3]), true);
        p.insert("rm", ArrayD::zeros(vec![3]), false);
        assert_eq!(p.param_count(), 6);
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn accumulate_adds_in_place() {
        let mut p = ParamState::new();
        p.insert("w", ArrayD::zeros(vec![2]), true);
        let mut g = ParamGrads::zeros_like(&p);
        g.accumulate(&p, "w", ndarray::arr1(&[1.0, 2.0]));
        g.accumulate(&p, "w", ndarray::arr1(&[0.5, 0.5]));
        let got = g.get(0).unwrap();
        assert_eq!(got.as_slice().unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn bit_eq_detects_single_bit_change() {
        let mut a = ParamState::new();
        a.insert("w", ArrayD::from_elem(vec![1], 1.0), true);
        let mut b = a.clone();
        assert!(a.bit_eq(&b));
        b.get_mut("w")[[0]] = 1.0 + f64::EPSILON;
        assert!(!a.bit_eq(&b));
    }
}
