//! Seeded, optionally augmented batch production.
//!
//! The visiting order is a pure function of `(dataset, batch_size, seed,
//! epoch)`: a fresh ChaCha stream is derived from `(seed, epoch)`, used once
//! for the epoch permutation and then for the per-image augmentation draws in
//! batch order. Augmentation (pad-4 random crop plus horizontal flip) runs on
//! raw pixel bytes; normalization is applied afterwards.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, LabeledImageSet};
use crate::derive_seed;

const CROP_PAD: usize = 4;

/// Per-channel normalization constants, conventionally computed from the
/// training split of the run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// No-op normalization for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Per-channel mean and population standard deviation over a whole set.
///
/// A constant channel gets std 1.0 so normalization stays finite.
pub fn channel_stats(set: &LabeledImageSet) -> Normalization {
    let (h, w, c) = set.image_shape();
    let per_image = h * w;
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    for i in 0..set.len() {
        for px in set.image(i).chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                let v = f64::from(v);
                sum[ch] += v;
                sum_sq[ch] += v * v;
            }
        }
    }
    let count = (set.len() * per_image).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / count - m * m).max(0.0);
            if var == 0.0 {
                1.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    Normalization { mean, std }
}

/// One batch of normalized images (NCHW) and their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f64>,
    pub labels: Vec<u8>,
    /// Indices into the source set, in batch order.
    pub indices: Vec<usize>,
}

/// Iterator over the batches of one epoch.
pub struct BatchStream<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    augment: bool,
    norm: Normalization,
    rng: ChaCha8Rng,
}

/// Builds the batch sequence for `epoch` over `set`.
///
/// `batch_size` larger than the set yields a single short batch. The last
/// batch may be short; all others have exactly `batch_size` items.
pub fn batch_iterator<'a>(
    set: &'a LabeledImageSet,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    augment: bool,
    norm: &Normalization,
) -> Result<BatchStream<'a>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch.{epoch}")));
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng);
    Ok(BatchStream {
        set,
        order,
        cursor: 0,
        batch_size,
        augment,
        norm: norm.clone(),
        rng,
    })
}

/// Batches in dataset order, unaugmented: the evaluation-time iteration.
pub fn sequential_batches<'a>(
    set: &'a LabeledImageSet,
    batch_size: usize,
    norm: &Normalization,
) -> Result<BatchStream<'a>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    Ok(BatchStream {
        set,
        order: (0..set.len()).collect(),
        cursor: 0,
        batch_size,
        augment: false,
        norm: norm.clone(),
        rng: ChaCha8Rng::seed_from_u64(0),
    })
}

impl BatchStream<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Writes image `index` into channel-major `out`, augmenting when asked.
    fn render(&mut self, index: usize, out: &mut [f64], (h, w, c): (usize, usize, usize)) {
        let src = self.set.image(index);
        let (dy, dx, flip) = if self.augment {
            let dy = self.rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
            let dx = self.rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
            (dy, dx, self.rng.random::<bool>())
        } else {
            (0, 0, false)
        };
        for row in 0..h {
            for col in 0..w {
                let sr = row as isize + dy;
                let sc_unflipped = col as isize + dx;
                let sc = if flip {
                    w as isize - 1 - sc_unflipped
                } else {
                    sc_unflipped
                };
                let in_bounds = sr >= 0 && sr < h as isize && sc >= 0 && sc < w as isize;
                for ch in 0..c {
                    let raw = if in_bounds {
                        f64::from(src[(sr as usize * w + sc as usize) * c + ch])
                    } else {
                        0.0
                    };
                    out[ch * h * w + row * w + col] = (raw - self.norm.mean[ch]) / self.norm.std[ch];
                }
            }
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;

        let shape = self.set.image_shape();
        let (h, w, c) = shape;
        let mut images = Array4::<f64>::zeros((indices.len(), c, h, w));
        let stride = c * h * w;
        let mut buf = vec![0.0f64; stride];
        for (slot, &index) in indices.iter().enumerate() {
            self.render(index, &mut buf, shape);
            images.as_slice_mut().expect("contiguous")[slot * stride..(slot + 1) * stride]
                .copy_from_slice(&buf);
        }

        let labels: Vec<u8> = indices.iter().map(|&i| self.set.label(i)).collect();
        Some(Batch {
            images,
            labels,
            indices,
        })
    }
}
