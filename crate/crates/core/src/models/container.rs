//! Weight file format: named f64 arrays with shape metadata and a config
//! fingerprint header.
//!
//! Layout (little-endian):
//!   magic `FERW` | u32 version | u64 header_len | header JSON | raw f64 data
//!
//! The header lists arrays in order; data is concatenated row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{FerError, Result};

const MAGIC: &[u8; 4] = b"FERW";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug)]
pub struct NamedArrays {
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl NamedArrays {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

pub fn save_container(path: &Path, data: &NamedArrays) -> Result<()> {
    let header = Header {
        fingerprint: data.fingerprint.clone(),
        meta: data.meta.clone(),
        arrays: data
            .arrays
            .iter()
            .map(|(name, a)| ArrayEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| FerError::Load(format!("header encode: {e}")))?;
    let file = File::create(path).map_err(|e| FerError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| FerError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for (_, a) in &data.arrays {
        let owned;
        let slice = match a.as_slice() {
            Some(s) => s,
            None => {
                owned = a.iter().cloned().collect::<Vec<f64>>();
                &owned
            }
        };
        for v in slice {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<NamedArrays> {
    let file = File::open(path).map_err(|e| FerError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| FerError::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(FerError::Load(format!("{path:?}: not a weight container")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(FerError::Load(format!(
            "{path:?}: unsupported container version {version}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(io)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| FerError::Load(format!("{path:?}: bad header: {e}")))?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(io)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| FerError::Load(format!("{path:?}: array {}: {e}", entry.name)))?;
        arrays.push((entry.name, arr));
    }
    Ok(NamedArrays {
        fingerprint: header.fingerprint,
        meta: header.meta,
        arrays,
    })
}
