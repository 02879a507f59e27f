//! Flat binary parameter checkpoints.
//!
//! Layout: magic `"DGPN"`, format version as little-endian u32, then one
//! record per store entry in insertion order:
//! name length (u64 LE), name bytes (UTF-8), rank (u64 LE), extents
//! (u64 LE each), payload (f64 LE each). Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::TensorError;
use crate::optim::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGPN";
pub const FORMAT_VERSION: u32 = 1;

pub fn save(store: &ParameterStore, path: &Path) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, tensor, _) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all records of a checkpoint in file order.
pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)
        .map_err(|_| TensorError::Checkpoint("file too short for version".into()))?;
    let version = u32::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut records = Vec::new();
    loop {
        let mut len8 = [0u8; 8];
        match r.read_exact(&mut len8) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len8) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| TensorError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
        r.read_exact(&mut len8)
            .map_err(|_| TensorError::Checkpoint(format!("truncated rank for {name}")))?;
        let rank = u64::from_le_bytes(len8) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len8)
                .map_err(|_| TensorError::Checkpoint(format!("truncated extents for {name}")))?;
            shape.push(u64::from_le_bytes(len8) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut len8)
                .map_err(|_| TensorError::Checkpoint(format!("truncated payload for {name}")))?;
            data.push(f64::from_le_bytes(len8));
        }
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

/// Load a checkpoint into an existing store of the same architecture.
/// Every record must match an entry by name and shape, and every entry must
/// be present in the file.
pub fn load_into(store: &mut ParameterStore, path: &Path) -> Result<(), TensorError> {
    let records = load_records(path)?;
    let mut seen = std::collections::HashSet::new();
    for (name, tensor) in &records {
        let existing = store.get(name).ok_or_else(|| {
            TensorError::Checkpoint(format!("checkpoint has unknown parameter {name}"))
        })?;
        if existing.shape() != tensor.shape() {
            return Err(TensorError::Checkpoint(format!(
                "{name}: checkpoint shape {:?} vs model {:?}",
                tensor.shape(),
                existing.shape()
            )));
        }
        seen.insert(name.clone());
    }
    let missing: Vec<String> = store
        .names()
        .filter(|n| !seen.contains(*n))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint is missing parameters: {missing:?}"
        )));
    }
    for (name, tensor) in records {
        store.set_data(&name, tensor.data())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new(0.001);
        s.add_parameter("layer.w", Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]).unwrap())
            .unwrap();
        s.add_parameter("layer.b", Tensor::vector(vec![1e-300, -0.0, 3.125])).unwrap();
        s.add_buffer("norm.mean", Tensor::vector(vec![0.5, 0.25])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dgpn");
        let p2 = dir.path().join("b.dgpn");
        let store = sample_store();
        save(&store, &p1).unwrap();

        let mut other = sample_store();
        // perturb, then restore from file
        let mut g = crate::optim::Gradients::new();
        g.insert("layer.w", vec![1.0; 6]);
        g.insert("layer.b", vec![-1.0; 3]);
        other.adam_step(&g).unwrap();
        load_into(&mut other, &p1).unwrap();
        save(&other, &p2).unwrap();

        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(store.checksum(), other.checksum());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.dgpn");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(load_records(&p).is_err());
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.dgpn");
        save(&sample_store(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_records(&p).is_err());
    }

    #[test]
    fn shape_mismatch_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.dgpn");
        save(&sample_store(), &p).unwrap();
        let mut other = ParameterStore::new(0.001);
        other.add_parameter("layer.w", Tensor::zeros(vec![3, 2])).unwrap();
        other.add_parameter("layer.b", Tensor::zeros(vec![3])).unwrap();
        other.add_buffer("norm.mean", Tensor::zeros(vec![2])).unwrap();
        assert!(load_into(&mut other, &p).is_err());
    }
}
