//! Synthetic Gaussian-blob datasets for fast training and pipeline tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, LabeledImageSet};

/// Pixel-unit standard deviation of the per-sample noise.
pub const BLOB_NOISE_SIGMA: f64 = 8.0;

/// Generates `num_classes * per_class` images of Gaussian noise around
/// class-specific mean patterns.
///
/// Class means sit at `128 + separation * sigma * u_c` where `u_c` is a
/// random unit direction in pixel space, so `separation` measures the
/// distance between class centres in noise standard deviations. Separation 0
/// collapses every class onto the same centre; a nearest-mean classifier is
/// essentially perfect from roughly 10 upwards.
pub fn synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    image_shape: (usize, usize, usize),
    separation: f64,
    seed: u64,
) -> Result<LabeledImageSet, DataError> {
    let (set, _) = synthetic_blobs_split(num_classes, per_class, 0, image_shape, separation, seed)?;
    Ok(set)
}

/// Train/test pair drawn around one shared set of class means, so the test
/// split measures generalization over fresh noise rather than a different
/// classification problem.
pub fn synthetic_blobs_split(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    image_shape: (usize, usize, usize),
    separation: f64,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet), DataError> {
    if per_class_train == 0 || num_classes == 0 {
        return Err(DataError::EmptyClass);
    }
    if separation < 0.0 {
        return Err(DataError::NegativeSeparation(separation));
    }
    let (h, w, c) = image_shape;
    let dim = h * w * c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut direction: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut direction {
            *v = 128.0 + separation * BLOB_NOISE_SIGMA * (*v / norm);
        }
        means.push(direction);
    }

    let mut draw = |per_class: usize, split: &str| -> Result<LabeledImageSet, DataError> {
        let total = num_classes * per_class;
        let mut pixels = Vec::with_capacity(total * dim);
        let mut labels = Vec::with_capacity(total);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                labels.push(class as u8);
                for &m in mean {
                    let noise: f64 = normal.sample(&mut rng);
                    let value = (m + BLOB_NOISE_SIGMA * noise).round().clamp(0.0, 255.0);
                    pixels.push(value as u8);
                }
            }
        }
        LabeledImageSet::new(pixels, labels, image_shape, num_classes, split)
    };

    let train = draw(per_class_train, "synthetic")?;
    let test = draw(per_class_test, "synthetic-test")?;
    Ok((train, test))
}
