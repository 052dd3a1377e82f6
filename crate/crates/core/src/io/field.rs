//! Field files: `MGPD`, a little-endian `u32` header length, a JSON header,
//! then the row-major payload as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::OmegaSample;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MGPD";
pub const FIELD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// Diffusivity.
    Nu,
    /// Solution.
    U,
    /// Pointwise difference of two solutions.
    Diff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub version: u32,
    pub kind: FieldKind,
    pub rank: usize,
    pub resolution: usize,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<OmegaSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub dtype: String,
}

fn one() -> usize {
    1
}

impl FieldHeader {
    pub fn new(kind: FieldKind, rank: usize, resolution: usize) -> Self {
        FieldHeader {
            version: FIELD_VERSION,
            kind,
            rank,
            resolution,
            batch: 1,
            omega: None,
            seed: None,
            index: None,
            dtype: "f64le".into(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, 1];
        s.extend(std::iter::repeat_n(self.resolution, self.rank));
        s
    }
}

pub fn write_field(header: &FieldHeader, field: &Tensor, mut w: impl Write) -> Result<()> {
    if field.shape() != header.shape().as_slice() {
        return Err(Error::Format(format!(
            "field of shape {:?} does not match header shape {:?}",
            field.shape(),
            header.shape()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("field header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(field.len() * 8);
    for v in field.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_field(mut r: impl Read) -> Result<(FieldHeader, Tensor)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("field file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a field file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated field header".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated field header".into()))?;
    let header: FieldHeader = serde_json::from_slice(&json)?;
    if header.version != FIELD_VERSION {
        return Err(Error::Format(format!("unsupported field version {}", header.version)));
    }
    if header.dtype != "f64le" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let shape = header.shape();
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|_| {
        Error::Format(format!("truncated field payload: expected {n} values"))
    })?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after field payload".into()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, Tensor::new(shape, data)?))
}

pub fn save_field(header: &FieldHeader, field: &Tensor, path: &Path) -> Result<()> {
    write_field(header, field, BufWriter::new(File::create(path)?))
}

pub fn load_field(path: &Path) -> Result<(FieldHeader, Tensor)> {
    read_field(BufReader::new(File::open(path)?))
}
