//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 octets  "NTAR"
//! version u16       currently 1
//! count   u32       number of entries
//! entry:  name_len u16, name utf-8, ndim u8, ndim x u32 dims,
//!         prod(dims) x f64 values
//! ```
//!
//! The archive is a flat map; callers namespace related tensors with
//! dotted prefixes (`actor.param.enc.w_ih`, `meta.episode`, ...).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::store::Tensor;
use super::NnError;

const MAGIC: &[u8; 4] = b"NTAR";
const VERSION: u16 = 1;

pub fn save_archive(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(NnError::BadArchive(format!("name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        if tensor.shape.len() > u8::MAX as usize {
            return Err(NnError::BadArchive(format!("rank too high for {name}")));
        }
        w.write_all(&[tensor.shape.len() as u8])?;
        for &dim in &tensor.shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<BTreeMap<String, Tensor>, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::BadArchive(format!(
            "bad magic {magic:?}, not a tensor archive"
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(NnError::BadArchive(format!(
            "unsupported archive version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| NnError::BadArchive(format!("invalid utf-8 name: {e}")))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        if entries.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(NnError::BadArchive(format!("duplicate entry {name}")));
        }
    }
    Ok(entries)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, NnError> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
