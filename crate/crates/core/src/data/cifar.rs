//! CIFAR-10/100 binary record parsing and re-serialization.
//!
//! CIFAR-10 records are 3073 bytes: one label byte followed by three
//! 1024-byte channel planes (R, G, B), row-major within each plane.
//! CIFAR-100 records are 3074 bytes: a coarse label byte, a fine label byte,
//! then the same pixel planes.

use super::{DataError, LabeledImageSet};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
const PLANE: usize = SIDE * SIDE;
const PIXEL_BYTES: usize = PLANE * CHANNELS;
pub const CIFAR10_RECORD: usize = 1 + PIXEL_BYTES;
pub const CIFAR100_RECORD: usize = 2 + PIXEL_BYTES;
pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR100_FINE_CLASSES: usize = 100;
pub const CIFAR100_COARSE_CLASSES: usize = 20;

/// Which of the two CIFAR-100 label bytes becomes the class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Fine,
    Coarse,
}

/// Converts one channel-plane pixel block into interleaved H×W×C bytes.
fn planes_to_hwc(planes: &[u8], out: &mut Vec<u8>) {
    for row in 0..SIDE {
        for col in 0..SIDE {
            for ch in 0..CHANNELS {
                out.push(planes[ch * PLANE + row * SIDE + col]);
            }
        }
    }
}

/// Converts one interleaved H×W×C image back into channel planes.
fn hwc_to_planes(hwc: &[u8], out: &mut Vec<u8>) {
    for ch in 0..CHANNELS {
        for row in 0..SIDE {
            for col in 0..SIDE {
                out.push(hwc[(row * SIDE + col) * CHANNELS + ch]);
            }
        }
    }
}

pub fn parse_cifar10(raw_bytes: &[u8], split_name: &str) -> Result<LabeledImageSet, DataError> {
    if !raw_bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(DataError::MalformedFile {
            len: raw_bytes.len(),
            record: CIFAR10_RECORD,
        });
    }
    let records = raw_bytes.len() / CIFAR10_RECORD;
    let mut pixels = Vec::with_capacity(records * PIXEL_BYTES);
    let mut labels = Vec::with_capacity(records);
    for (index, record) in raw_bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = record[0];
        if usize::from(label) >= CIFAR10_CLASSES {
            return Err(DataError::CorruptRecord {
                index,
                label,
                num_classes: CIFAR10_CLASSES,
            });
        }
        labels.push(label);
        planes_to_hwc(&record[1..], &mut pixels);
    }
    LabeledImageSet::new(
        pixels,
        labels,
        (SIDE, SIDE, CHANNELS),
        CIFAR10_CLASSES,
        split_name,
    )
}

pub fn parse_cifar100(
    raw_bytes: &[u8],
    label_mode: LabelMode,
    split_name: &str,
) -> Result<LabeledImageSet, DataError> {
    if !raw_bytes.len().is_multiple_of(CIFAR100_RECORD) {
        return Err(DataError::MalformedFile {
            len: raw_bytes.len(),
            record: CIFAR100_RECORD,
        });
    }
    let num_classes = match label_mode {
        LabelMode::Fine => CIFAR100_FINE_CLASSES,
        LabelMode::Coarse => CIFAR100_COARSE_CLASSES,
    };
    let records = raw_bytes.len() / CIFAR100_RECORD;
    let mut pixels = Vec::with_capacity(records * PIXEL_BYTES);
    let mut labels = Vec::with_capacity(records);
    let mut paired = Vec::with_capacity(records);
    for (index, record) in raw_bytes.chunks_exact(CIFAR100_RECORD).enumerate() {
        let (coarse, fine) = (record[0], record[1]);
        let (selected, other) = match label_mode {
            LabelMode::Fine => (fine, coarse),
            LabelMode::Coarse => (coarse, fine),
        };
        if usize::from(selected) >= num_classes {
            return Err(DataError::CorruptRecord {
                index,
                label: selected,
                num_classes,
            });
        }
        labels.push(selected);
        paired.push(other);
        planes_to_hwc(&record[2..], &mut pixels);
    }
    Ok(LabeledImageSet::new(
        pixels,
        labels,
        (SIDE, SIDE, CHANNELS),
        num_classes,
        split_name,
    )?
    .with_paired_labels(paired))
}

/// Rebuilds the exact CIFAR-10 byte stream a set was parsed from.
///
/// Also used to export synthetic 32×32×3 sets in the official record layout.
pub fn serialize_cifar10(set: &LabeledImageSet) -> Result<Vec<u8>, DataError> {
    let (h, w, c) = set.image_shape();
    if (h, w, c) != (SIDE, SIDE, CHANNELS) || set.num_classes() > CIFAR10_CLASSES {
        return Err(DataError::UnserializableShape {
            h,
            w,
            c,
            num_classes: set.num_classes(),
            format: "cifar10",
        });
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR10_RECORD);
    for i in 0..set.len() {
        out.push(set.label(i));
        hwc_to_planes(set.image(i), &mut out);
    }
    Ok(out)
}

/// Rebuilds the exact CIFAR-100 byte stream a set was parsed from.
///
/// Requires the paired coarse/fine labels captured at parse time.
pub fn serialize_cifar100(set: &LabeledImageSet) -> Result<Vec<u8>, DataError> {
    let (h, w, c) = set.image_shape();
    if (h, w, c) != (SIDE, SIDE, CHANNELS) {
        return Err(DataError::UnserializableShape {
            h,
            w,
            c,
            num_classes: set.num_classes(),
            format: "cifar100",
        });
    }
    let paired = set.paired_labels().ok_or(DataError::MissingPairedLabels)?;
    let fine_mode = set.num_classes() == CIFAR100_FINE_CLASSES;
    let mut out = Vec::with_capacity(set.len() * CIFAR100_RECORD);
    for (i, &other) in paired.iter().enumerate() {
        let (coarse, fine) = if fine_mode {
            (other, set.label(i))
        } else {
            (set.label(i), other)
        };
        out.push(coarse);
        out.push(fine);
        hwc_to_planes(set.image(i), &mut out);
    }
    Ok(out)
}
