//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian): magic `SCG1`, version `u32`, then one
//! record per parameter until end of file: name length `u32`, UTF-8 name,
//! rank `u32`, `rank` dims as `u64`, then the `f64` payload.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, TsgError};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SCG1";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value().shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32().ok_or("truncated name length")? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or("truncated name")?)
            .map_err(|e| format!("name is not UTF-8: {e}"))?
            .to_string();
        let rank = r.u32().ok_or("truncated rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or("truncated dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 8).ok_or_else(|| format!("truncated payload for {name}"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        records.push((name, tensor));
    }
    Ok(records)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode(store))?;
    f.flush()?;
    Ok(())
}

/// Loads a checkpoint into a store with exactly the same parameter set.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path)?;
    let records = decode(&bytes).map_err(|reason| TsgError::Format {
        path: path.to_path_buf(),
        reason,
    })?;
    if records.len() != store.len() {
        return Err(TsgError::Version(format!(
            "checkpoint has {} parameters, model expects {}",
            records.len(),
            store.len()
        )));
    }
    for (name, tensor) in records {
        let id = store
            .id_of(&name)
            .ok_or_else(|| TsgError::Version(format!("unexpected parameter {name}")))?;
        store
            .set_value(id, tensor)
            .map_err(|e| TsgError::Version(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a.weight",
            Tensor::new(vec![2, 3], (0..6).map(|v| v as f64 * 0.25).collect()).unwrap(),
        )
        .unwrap();
        s.add("b", Tensor::vector(vec![-1.5])).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], b"SCG1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(&bytes[12..20], b"a.weight");
        // rank 2, dims 2 and 3
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[48..56].try_into().unwrap()), 0.25);
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.scg");
        let src = store();
        save(&path, &src).unwrap();
        let mut dst = store();
        dst.value_mut(dst.id_of("b").unwrap()).fill(9.0);
        load_into(&path, &mut dst).unwrap();
        for (id, p) in src.iter() {
            assert_eq!(p.value(), dst.value(id));
        }
    }

    #[test]
    fn mismatched_model_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.scg");
        save(&path, &store()).unwrap();
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[3, 2])).unwrap();
        other.add("b", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(load_into(&path, &mut other), Err(TsgError::Version(_))));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = encode(&store());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"XXXX\x01\x00\x00\x00").is_err());
    }
}
