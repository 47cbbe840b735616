//! `METCKPT1` checkpoints: magic, format version, a manifest of
//! `(name, shape, element offset)` records, then the raw little-endian `f64`
//! payload.

use std::io::{Read, Write};

use super::{DiffError, ParameterStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"METCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

fn ckpt_err(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

pub fn write_checkpoint(mut w: impl Write, store: &ParameterStore) -> Result<(), DiffError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += p.value.len() as u64;
    }
    w.write_all(&offset.to_le_bytes())?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint into `(manifest, tensors)` in manifest order.
pub fn read_checkpoint(mut r: impl Read) -> Result<(Vec<CheckpointEntry>, Vec<Tensor>), DiffError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(ckpt_err("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ckpt_err("name is not utf-8"))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(ckpt_err("rank too large"));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let offset = read_u64(&mut r)?;
        entries.push(CheckpointEntry { name, shape, offset });
    }
    let total = read_u64(&mut r)?;
    let mut expected = 0u64;
    for e in &entries {
        if e.offset != expected {
            return Err(ckpt_err(format!("entry `{}` has offset {} (expected {expected})", e.name, e.offset)));
        }
        expected += e.shape.iter().product::<usize>() as u64;
    }
    if expected != total {
        return Err(ckpt_err("element total does not match manifest"));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        let count: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok((entries, tensors))
}

impl ParameterStore {
    /// Overwrites values from checkpoint tensors matched by name and shape.
    pub fn load_values(&mut self, entries: &[CheckpointEntry], tensors: &[Tensor]) -> Result<(), DiffError> {
        if entries.len() != self.len() {
            return Err(ckpt_err(format!("checkpoint has {} tensors, model has {}", entries.len(), self.len())));
        }
        for (e, t) in entries.iter().zip(tensors) {
            let id = self.id(&e.name)?;
            if self.value(id).shape() != t.shape() {
                return Err(ckpt_err(format!("shape mismatch for `{}`", e.name)));
            }
            self.value_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_manifest_total() {
        let mut store = ParameterStore::new();
        store.add("a", Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap()).unwrap();
        store.add("b.bias", Tensor::vector(vec![0.25, -1e-300])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store).unwrap();
        assert_eq!(&buf[..8], b"METCKPT1");
        let (entries, tensors) = read_checkpoint(&buf[..]).unwrap();
        let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        assert_eq!(total, store.num_elements());
        let mut other = store.clone();
        other.set_flat_values(&vec![0.0; 8]);
        other.load_values(&entries, &tensors).unwrap();
        assert_eq!(other.flat_values(), store.flat_values());
    }

    #[test]
    fn rejects_corruption() {
        let mut store = ParameterStore::new();
        store.add("a", Tensor::vector(vec![1.0])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
