//! Versioned binary checkpoints: model metadata plus named f64 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "EKDCKPT\0" | version u32 | kind u8 | branches u32
//! spec count u32 | per spec: depth, w0, w1, w2, classes (u32 each)
//! tensor count u32
//! per tensor: name len u32 | name bytes | trainable u8
//!             ndim u32 | dims u32... | values f64-LE...
//! ```
//!
//! Loading reproduces every tensor bit-for-bit, NaN payloads included.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use thiserror::Error;

use crate::model::{ModelSpec, ParamDef, ParamState};

const MAGIC: &[u8; 8] = b"EKDCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor {tensor} has shape {got:?}, expected {expected:?}")]
    ShapeDisagreement {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint lacks tensor {tensor}")]
    MissingTensor { tensor: String },
}

/// What kind of model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    /// One standalone network (a pretrained teacher).
    Single,
    /// A multi-branch student.
    Student,
    /// A whole teacher ensemble.
    Teachers,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Single => 0,
            CheckpointKind::Student => 1,
            CheckpointKind::Teachers => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, CheckpointError> {
        match tag {
            0 => Ok(CheckpointKind::Single),
            1 => Ok(CheckpointKind::Student),
            2 => Ok(CheckpointKind::Teachers),
            other => Err(CheckpointError::Malformed(format!("unknown kind tag {other}"))),
        }
    }
}

/// Everything needed to rebuild the model the tensors belong to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    /// Branch count for students, member count for ensembles, 1 otherwise.
    pub branches: usize,
    /// One spec per distinct member architecture, in member order.
    pub specs: Vec<ModelSpec>,
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u8(r: &mut impl Read) -> Result<u8, CheckpointError> {
    let mut buf = [0u8; 1];
    read_exact_or_truncated(r, &mut buf)?;
    Ok(buf[0])
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    meta: &CheckpointMeta,
    params: &ParamState,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    w.write_all(&[meta.kind.tag()])?;
    write_u32(&mut w, meta.branches as u32)?;
    write_u32(&mut w, meta.specs.len() as u32)?;
    for spec in &meta.specs {
        write_u32(&mut w, spec.depth as u32)?;
        for &width in &spec.stage_widths {
            write_u32(&mut w, width as u32)?;
        }
        write_u32(&mut w, spec.num_classes as u32)?;
    }
    write_u32(&mut w, params.len() as u32)?;
    for (name, tensor, trainable) in params.iter() {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(trainable)])?;
        write_u32(&mut w, tensor.ndim() as u32)?;
        for &dim in tensor.shape() {
            write_u32(&mut w, dim as u32)?;
        }
        for &value in tensor.iter() {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(CheckpointMeta, ParamState), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let kind = CheckpointKind::from_tag(read_u8(&mut r)?)?;
    let branches = read_u32(&mut r)? as usize;
    let spec_count = read_u32(&mut r)? as usize;
    let mut specs = Vec::with_capacity(spec_count);
    for _ in 0..spec_count {
        let depth = read_u32(&mut r)? as usize;
        let widths = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let classes = read_u32(&mut r)? as usize;
        let spec = ModelSpec::with_widths(depth, widths, classes)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        specs.push(spec);
    }

    let tensor_count = read_u32(&mut r)? as usize;
    let mut params = ParamState::new();
    for _ in 0..tensor_count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or_truncated(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let trainable = read_u8(&mut r)? != 0;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            read_exact_or_truncated(&mut r, &mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let tensor = ArrayD::from_shape_vec(shape.clone(), values)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params.insert(name, tensor, trainable);
    }

    Ok((CheckpointMeta { kind, branches, specs }, params))
}

/// Checks a loaded state against the tensors a model plan expects, naming
/// the first disagreement in plan order.
pub fn validate_params(params: &ParamState, defs: &[ParamDef]) -> Result<(), CheckpointError> {
    for def in defs {
        match params.position(&def.name) {
            None => {
                return Err(CheckpointError::MissingTensor {
                    tensor: def.name.clone(),
                })
            }
            Some(pos) => {
                let got = params.tensor(pos).shape().to_vec();
                if got != def.shape {
                    return Err(CheckpointError::ShapeDisagreement {
                        tensor: def.name.clone(),
                        expected: def.shape.clone(),
                        got,
                    });
                }
            }
        }
    }
    Ok(())
}
