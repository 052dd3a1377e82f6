//! Binary checkpoints: `MGPC`, a little-endian `u32` header length, a JSON
//! header, then every parameter as little-endian `f64` in declaration order,
//! then each batch-norm layer's running means followed by its variances.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adaptation, ModelState, UNetSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGPC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub spec: UNetSpec,
    pub fingerprint: String,
    pub adaptation_history: Vec<Adaptation>,
    pub parameter_count: usize,
    /// Free-form training metadata.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_checkpoint(state: &ModelState, extra: serde_json::Value, mut w: impl Write) -> Result<()> {
    let header = CheckpointHeader {
        version: VERSION,
        spec: state.spec.clone(),
        fingerprint: state.fingerprint(),
        adaptation_history: state.history.clone(),
        parameter_count: state.parameter_count(),
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    for v in state.flat_params() {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in state.bn_stats() {
        for v in s.mean.iter().chain(&s.var) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(CheckpointHeader, ModelState)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    let mut state = ModelState::skeleton(&header.spec, &header.adaptation_history)?;
    if state.fingerprint() != header.fingerprint || state.parameter_count() != header.parameter_count {
        return Err(Error::Format("checkpoint header is inconsistent with its architecture".into()));
    }
    let params = read_f64s(&mut r, header.parameter_count)?;
    state.set_flat_params(&params)?;
    for s in state.bn_stats_mut() {
        let c = s.channels();
        let v = read_f64s(&mut r, 2 * c)?;
        s.mean.copy_from_slice(&v[..c]);
        s.var.copy_from_slice(&v[c..]);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok((header, state))
}

pub fn save_checkpoint(state: &ModelState, extra: serde_json::Value, path: &Path) -> Result<()> {
    write_checkpoint(state, extra, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelState)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
