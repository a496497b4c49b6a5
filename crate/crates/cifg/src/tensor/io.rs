//! Binary checkpoint format.
//!
//! Layout: the magic string `CIFG1`, then for each named array in
//! lexicographic name order:
//!
//! ```text
//! u64 LE  name length in bytes
//! bytes   UTF-8 name
//! u64 LE  rank
//! u64 LE  dims[rank]
//! f64 LE  row-major data (product of dims values)
//! ```
//!
//! Optimizer state shares the format under the reserved name prefix `opt/`.
//! Round trips are exact: f64 bits pass through untouched.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CIFG1";

pub fn write_checkpoint(path: &Path, entries: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, arr) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(arr.ndim() as u64).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let standard = arr.as_standard_layout();
        for &v in standard.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "not a checkpoint (bad magic): {}",
            path.display()
        )));
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let mut out = BTreeMap::new();
    let take_u64 = |bytes: &[u8], pos: &mut usize| -> Result<u64> {
        if *pos + 8 > bytes.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let v = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap());
        *pos += 8;
        Ok(v)
    };
    while pos < bytes.len() {
        let name_len = take_u64(&bytes, &mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(Error::Data("truncated checkpoint name".into()));
        }
        let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
            .map_err(|_| Error::Data("checkpoint name is not UTF-8".into()))?;
        pos += name_len;
        let rank = take_u64(&bytes, &mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u64(&bytes, &mut pos)? as usize);
        }
        let count: usize = dims.iter().product();
        if pos + count * 8 > bytes.len() {
            return Err(Error::Data(format!("truncated data for {name}")));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
            pos += 8;
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Data(format!("bad shape for {name}: {e}")))?;
        out.insert(name, arr);
    }
    Ok(out)
}
