//! Stratified subsampling for data-fraction experiments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, LabeledImageSet};

/// Draws `round(fraction * count)` samples from every class.
///
/// Selection is a pure function of `seed`; the surviving samples keep their
/// original relative order. `fraction == 1.0` returns the set unchanged.
pub fn stratified_subsample(
    set: &LabeledImageSet,
    fraction: f64,
    seed: u64,
) -> Result<LabeledImageSet, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction { fraction });
    }
    if fraction == 1.0 {
        return Ok(set.clone());
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes()];
    for i in 0..set.len() {
        per_class[usize::from(set.label(i))].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::new();
    for (class, indices) in per_class.iter_mut().enumerate() {
        if indices.is_empty() {
            continue;
        }
        let target = (fraction * indices.len() as f64).round() as usize;
        if target == 0 {
            return Err(DataError::InfeasibleFraction { fraction, class });
        }
        indices.shuffle(&mut rng);
        selected.extend_from_slice(&indices[..target]);
    }
    selected.sort_unstable();

    let name = format!("{}@{fraction}", set.split_name());
    Ok(set.subset(&selected, name))
}
