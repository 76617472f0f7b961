//! Versioned on-disk model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "SEQFNCP1"                         8 bytes
//! u32    header length
//! JSON   header: format_version, spec (tagged by arch), meta,
//!        param record count, optional optimizer hyperparameters
//! then, per record (parameters first, then optimizer m/v if present):
//!   u16   name length, name bytes
//!   u8    ndim, ndim x u32 dims
//!   u32   payload length (= 4 * numel)
//!   f32   payload, little-endian
//!   u32   CRC32 of everything above in the record
//! ```
//!
//! Payloads are always 32-bit floats regardless of the runtime mode, so
//! save -> load -> save is byte-identical.

use crate::arch::ArchSpec;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::OptimState;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SEQFNCP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: String },
    #[error("checksum mismatch in record {record:?}")]
    ChecksumMismatch { record: String },
    #[error("record {record:?}: payload length {len} does not match shape {shape:?}")]
    RecordShape {
        record: String,
        len: usize,
        shape: Vec<usize>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub best_metric: Option<f64>,
    pub metric_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimHeader {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ArchSpec,
    meta: CheckpointMeta,
    param_records: usize,
    optim: Option<OptimHeader>,
}

/// A model snapshot: spec, parameters, optional optimizer state, metadata.
pub struct Checkpoint<F: Scalar> {
    pub spec: ArchSpec,
    pub params: ParamSet<F>,
    pub optim: Option<OptimState<F>>,
    pub meta: CheckpointMeta,
}

fn write_record<F: Scalar>(
    w: &mut impl Write,
    name: &str,
    tensor: &Tensor<F>,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::with_capacity(16 + name.len() + 4 * tensor.numel());
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    let shape = tensor.shape();
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(4 * tensor.numel() as u32).to_le_bytes());
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_f32().to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    w.write_all(&buf)?;
    w.write_all(&crc.to_le_bytes())?;
    Ok(())
}

struct RecordReader<'a, R: Read> {
    r: &'a mut R,
}

impl<R: Read> RecordReader<'_, R> {
    fn read_exact_ctx(&mut self, buf: &mut [u8], context: &str) -> Result<(), CheckpointError> {
        self.r.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                CheckpointError::Truncated {
                    context: context.to_string(),
                }
            } else {
                CheckpointError::Io(e)
            }
        })
    }

    fn read_record<F: Scalar>(&mut self) -> Result<(String, Tensor<F>), CheckpointError> {
        let mut raw: Vec<u8> = Vec::new();
        let mut b2 = [0u8; 2];
        self.read_exact_ctx(&mut b2, "record name length")?;
        raw.extend_from_slice(&b2);
        let name_len = u16::from_le_bytes(b2) as usize;

        let mut name_buf = vec![0u8; name_len];
        self.read_exact_ctx(&mut name_buf, "record name")?;
        raw.extend_from_slice(&name_buf);
        let name = String::from_utf8(name_buf)
            .map_err(|_| CheckpointError::Header("record name is not UTF-8".into()))?;

        let mut b1 = [0u8; 1];
        self.read_exact_ctx(&mut b1, "record rank")?;
        raw.extend_from_slice(&b1);
        let ndim = b1[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut b4 = [0u8; 4];
        for _ in 0..ndim {
            self.read_exact_ctx(&mut b4, "record shape")?;
            raw.extend_from_slice(&b4);
            shape.push(u32::from_le_bytes(b4) as usize);
        }

        self.read_exact_ctx(&mut b4, "record payload length")?;
        raw.extend_from_slice(&b4);
        let payload_len = u32::from_le_bytes(b4) as usize;
        let numel: usize = shape.iter().product();
        if payload_len != 4 * numel {
            return Err(CheckpointError::RecordShape {
                record: name,
                len: payload_len,
                shape,
            });
        }

        let mut payload = vec![0u8; payload_len];
        self.read_exact_ctx(&mut payload, "record payload")?;
        raw.extend_from_slice(&payload);

        self.read_exact_ctx(&mut b4, "record checksum")?;
        let crc_stored = u32::from_le_bytes(b4);
        if crc32fast::hash(&raw) != crc_stored {
            return Err(CheckpointError::ChecksumMismatch { record: name });
        }

        let data: Vec<F> = payload
            .chunks_exact(4)
            .map(|c| F::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let tensor = Tensor::new(shape.clone(), data).map_err(|_| CheckpointError::RecordShape {
            record: name.clone(),
            len: payload_len,
            shape,
        })?;
        Ok((name, tensor))
    }
}

/// Serialize a checkpoint to `path`; the byte stream is deterministic.
pub fn save_checkpoint<F: Scalar>(
    path: impl AsRef<Path>,
    ckpt: &Checkpoint<F>,
) -> Result<(), CheckpointError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format_version: FORMAT_VERSION,
        spec: ckpt.spec.clone(),
        meta: ckpt.meta.clone(),
        param_records: ckpt.params.len(),
        optim: ckpt.optim.as_ref().map(|o| OptimHeader {
            step: o.step,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (name, tensor) in ckpt.params.iter() {
        write_record(&mut w, name, tensor)?;
    }
    if let Some(optim) = &ckpt.optim {
        for (name, tensor) in optim.m.iter() {
            write_record(&mut w, &format!("optim.m.{name}"), tensor)?;
        }
        for (name, tensor) in optim.v.iter() {
            write_record(&mut w, &format!("optim.v.{name}"), tensor)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header, CheckpointError> {
    let mut rr = RecordReader { r };
    let mut magic = [0u8; 8];
    rr.read_exact_ctx(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    rr.read_exact_ctx(&mut b4, "header length")?;
    let header_len = u32::from_le_bytes(b4) as usize;
    let mut header_buf = vec![0u8; header_len];
    rr.read_exact_ctx(&mut header_buf, "header")?;
    let header: Header = serde_json::from_slice(&header_buf)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: header.format_version,
        });
    }
    Ok(header)
}

/// Read only the header: spec and metadata, without the payloads.
pub fn peek_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ArchSpec, CheckpointMeta), CheckpointError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    Ok((header.spec, header.meta))
}

/// Load a full checkpoint, verifying per-record checksums. A corrupt or
/// truncated file returns an error; no partial model escapes.
pub fn load_checkpoint<F: Scalar>(
    path: impl AsRef<Path>,
) -> Result<Checkpoint<F>, CheckpointError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    let mut rr = RecordReader { r: &mut r };

    let mut params = ParamSet::new();
    for _ in 0..header.param_records {
        let (name, tensor) = rr.read_record::<F>()?;
        params.push(name, tensor);
    }
    let optim = match &header.optim {
        None => None,
        Some(oh) => {
            let mut m = ParamSet::new();
            for _ in 0..header.param_records {
                let (name, tensor) = rr.read_record::<F>()?;
                let stripped = name.strip_prefix("optim.m.").ok_or_else(|| {
                    CheckpointError::Header(format!("expected optim.m record, found {name:?}"))
                })?;
                m.push(stripped.to_string(), tensor);
            }
            let mut v = ParamSet::new();
            for _ in 0..header.param_records {
                let (name, tensor) = rr.read_record::<F>()?;
                let stripped = name.strip_prefix("optim.v.").ok_or_else(|| {
                    CheckpointError::Header(format!("expected optim.v record, found {name:?}"))
                })?;
                v.push(stripped.to_string(), tensor);
            }
            Some(OptimState {
                step: oh.step,
                lr: oh.lr,
                beta1: oh.beta1,
                beta2: oh.beta2,
                eps: oh.eps,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        spec: header.spec,
        params,
        optim,
        meta: header.meta,
    })
}
