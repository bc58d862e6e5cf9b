//! Flat binary model checkpoints.
//!
//! Layout: magic `DKPT`, version u32 LE, tensor count u32 LE; then per
//! tensor: name length u16 LE, name bytes (UTF-8), rank u8, extents
//! u32 LE each, and the row-major f64 LE payload. All store tensors are
//! written, running statistics included.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DKPT";
pub const VERSION: u32 = 1;

/// Serialize every tensor of the store, in store order.
pub fn checkpoint_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let items = store.items();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(
        u32::try_from(items.len())
            .map_err(|_| Error::Contract("too many tensors for a checkpoint".into()))?
            .to_le_bytes(),
    );
    for item in items {
        let name = item.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("tensor name '{}' too long", item.name)))?;
        out.extend(name_len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = item.value.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Contract(format!("tensor '{}' rank too high", item.name)))?;
        out.push(rank);
        for &e in shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::Contract(format!("tensor '{}' extent too large", item.name)))?;
            out.extend(e.to_le_bytes());
        }
        for &v in item.value.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<P: AsRef<Path>>(store: &ParamStore, path: P) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(store)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let slice = self.bytes.get(self.at..self.at + n).ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated reading {} at offset {}",
                self.path, what, self.at
            ))
        })?;
        self.at += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse a checkpoint into (name, tensor) pairs in file order.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {:?} is not a checkpoint file",
            path.display(),
            magic
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|e| Error::Format(format!("{}: bad tensor name: {}", path.display(), e)))?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8, "tensor data")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after the last tensor",
            path.display(),
            bytes.len() - r.at
        )));
    }
    Ok(out)
}

/// Copy loaded tensors into a freshly initialized store by name. The
/// name sets must match exactly and shapes must agree.
pub fn restore_into(store: &mut ParamStore, loaded: Vec<(String, Tensor)>) -> Result<()> {
    if loaded.len() != store.items().len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.items().len()
        )));
    }
    for (name, tensor) in loaded {
        let idx = store
            .index_of(&name)
            .ok_or_else(|| Error::Contract(format!("checkpoint tensor '{}' not in model", name)))?;
        let item = &mut store.items_mut()[idx];
        if item.value.shape() != tensor.shape() {
            return Err(Error::Contract(format!(
                "tensor '{}' shape {:?} does not match model shape {:?}",
                name,
                tensor.shape(),
                item.value.shape()
            )));
        }
        item.value = tensor;
    }
    Ok(())
}
