//! Dense tensors and the `MTN1` container.
//!
//! Container layout:
//! - magic bytes `MTN1\n`
//! - one UTF-8 header line: `{"dtype":"f32","shape":[...]}\n`
//! - `prod(shape)` little-endian `f32` values, row-major

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MTN1\n";

/// Row-major dense array. Values are held as `f64`; the container stores `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Tensor(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Tensor(format!(
                "non-finite value {v} at flat index {i}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("1-D tensor of finite values")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
}

/// Encodes a tensor as an `MTN1` byte stream.
pub fn encode_mtn(tensor: &Tensor) -> Vec<u8> {
    let header = serde_json::to_string(&Header {
        dtype: "f32".into(),
        shape: tensor.shape.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 1 + tensor.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for v in &tensor.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes an `MTN1` byte stream. `origin` is only used in error messages.
pub fn decode_mtn(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let parse = |offset: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(parse(0, "missing MTN1 magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| parse(MAGIC.len(), "unterminated header line".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])
        .map_err(|e| parse(MAGIC.len() + e.column().saturating_sub(1), e.to_string()))?;
    if header.dtype != "f32" {
        return Err(parse(
            MAGIC.len(),
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    let payload_start = MAGIC.len() + nl + 1;
    let payload = &bytes[payload_start..];
    let count: usize = header.shape.iter().product();
    if payload.len() != count * 4 {
        return Err(parse(
            payload_start,
            format!(
                "shape {:?} needs {} payload bytes ({} floats), found {} bytes",
                header.shape,
                count * 4,
                count,
                payload.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(parse(
                payload_start + i * 4,
                format!("non-finite value {v}"),
            ));
        }
        data.push(v as f64);
    }
    Ok(Tensor {
        shape: header.shape,
        data,
    })
}

pub fn read_mtn(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mtn(&bytes, path)
}

pub fn write_mtn(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_mtn(tensor))
        .map_err(|e| Error::io(path, e))
}
