//! Dataset ingestion and batch production.
//!
//! Images are held exactly as stored on disk: one byte per channel value in
//! H×W×C order. Conversion to normalized floating point happens at batch
//! time, so parsing followed by re-serialization is byte-exact.

mod batch;
mod cifar;
mod subsample;
mod synth;

pub use batch::{batch_iterator, channel_stats, sequential_batches, Batch, BatchStream, Normalization};
pub use cifar::{
    parse_cifar10, parse_cifar100, serialize_cifar10, serialize_cifar100, LabelMode,
};
pub use subsample::stratified_subsample;
pub use synth::{synthetic_blobs, synthetic_blobs_split};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed file: {len} bytes is not a multiple of the {record}-byte record size")]
    MalformedFile { len: usize, record: usize },
    #[error("corrupt record {index}: label byte {label} is outside [0, {num_classes})")]
    CorruptRecord {
        index: usize,
        label: u8,
        num_classes: usize,
    },
    #[error("images ({images}) and labels ({labels}) have different lengths")]
    LengthMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        num_classes: usize,
    },
    #[error("fraction {fraction} is outside (0, 1]")]
    InvalidFraction { fraction: f64 },
    #[error("fraction {fraction} leaves class {class} empty after rounding")]
    InfeasibleFraction { fraction: f64, class: usize },
    #[error("per_class must be at least 1")]
    EmptyClass,
    #[error("separation must be nonnegative, got {0}")]
    NegativeSeparation(f64),
    #[error("batch_size must be at least 1")]
    ZeroBatchSize,
    #[error("cannot serialize a {h}x{w}x{c} set with {num_classes} classes as {format}")]
    UnserializableShape {
        h: usize,
        w: usize,
        c: usize,
        num_classes: usize,
        format: &'static str,
    },
    #[error("set lacks the paired coarse/fine labels needed to rebuild CIFAR-100 records")]
    MissingPairedLabels,
}

/// A decoded image-classification dataset.
///
/// Pixels are flat `H*W*C` bytes per image (channel-interleaved), labels are
/// class ids in `[0, num_classes)`. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImageSet {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    split_name: String,
    /// For CIFAR-100 sets, the label byte not selected by the parse mode
    /// (coarse when `labels` holds fine ids, and vice versa). Kept so records
    /// can be rebuilt byte-exactly.
    paired_labels: Option<Vec<u8>>,
}

impl LabeledImageSet {
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<u8>,
        (height, width, channels): (usize, usize, usize),
        num_classes: usize,
        split_name: impl Into<String>,
    ) -> Result<Self, DataError> {
        let image_len = height * width * channels;
        let images = pixels.len().checked_div(image_len).unwrap_or(0);
        if images * image_len != pixels.len() || images != labels.len() {
            return Err(DataError::LengthMismatch {
                images,
                labels: labels.len(),
            });
        }
        for (index, &label) in labels.iter().enumerate() {
            if usize::from(label) >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    index,
                    label,
                    num_classes,
                });
            }
        }
        Ok(Self {
            pixels,
            labels,
            height,
            width,
            channels,
            num_classes,
            split_name: split_name.into(),
            paired_labels: None,
        })
    }

    pub(crate) fn with_paired_labels(mut self, paired: Vec<u8>) -> Self {
        debug_assert_eq!(paired.len(), self.labels.len());
        self.paired_labels = Some(paired);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (height, width, channels) of every image in the set.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_name(&self) -> &str {
        &self.split_name
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub(crate) fn paired_labels(&self) -> Option<&[u8]> {
        self.paired_labels.as_deref()
    }

    /// Raw bytes of one image, `H*W*C` long, channel-interleaved.
    pub fn image(&self, index: usize) -> &[u8] {
        let n = self.height * self.width * self.channels;
        &self.pixels[index * n..(index + 1) * n]
    }

    /// Per-class sample counts, indexed by class id.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &label in &self.labels {
            hist[usize::from(label)] += 1;
        }
        hist
    }

    /// Builds a new set from a subset of indices, preserving order.
    pub(crate) fn subset(&self, indices: &[usize], split_name: impl Into<String>) -> Self {
        let n = self.height * self.width * self.channels;
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        let mut paired = self.paired_labels.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
            if let (Some(out), Some(src)) = (paired.as_mut(), self.paired_labels.as_ref()) {
                out.push(src[i]);
            }
        }
        Self {
            pixels,
            labels,
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            split_name: split_name.into(),
            paired_labels: paired,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_label_out_of_range() {
        let err = LabeledImageSet::new(vec![0; 4], vec![3], (2, 2, 1), 3, "t").unwrap_err();
        assert!(matches!(err, DataError::LabelOutOfRange { label: 3, .. }));
    }

    #[test]
    fn rejects_length_mismatch() {
        let err = LabeledImageSet::new(vec![0; 8], vec![0], (2, 2, 1), 3, "t").unwrap_err();
        assert!(matches!(err, DataError::LengthMismatch { .. }));
    }

    #[test]
    fn histogram_counts_labels() {
        let set =
            LabeledImageSet::new(vec![0; 12], vec![0, 2, 2], (2, 2, 1), 3, "t").unwrap();
        assert_eq!(set.class_histogram(), vec![1, 0, 2]);
    }
}
