//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!   magic `MTPC`, version u32, count u32, then per parameter:
//!   name_len u32, name bytes (UTF-8), rank u32, dims u64 × rank,
//!   payload f64 × prod(dims).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"MTPC";
const VERSION: u32 = 1;

pub fn write_params<W: Write>(
    mut w: W,
    store: &ParamStore,
    trainable_only: bool,
) -> Result<()> {
    let entries: Vec<_> = store
        .iter()
        .filter(|(_, p)| !trainable_only || p.trainable)
        .collect();
    let io_err = |e: std::io::Error| Error::io("<container>", e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (_, p) in entries {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&2u32.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(p.value.rows() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&(p.value.cols() as u64).to_le_bytes())
            .map_err(io_err)?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let bad = |m: &str| Error::Container(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 20 {
            return Err(bad("implausible name length"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let rank = read_u32(&mut r)?;
        if rank != 2 {
            return Err(Error::Container(format!("unsupported rank {rank}")));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let numel = rows
            .checked_mul(cols)
            .ok_or_else(|| bad("dimension overflow"))?;
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Container("truncated integer".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Container("truncated integer".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_params_file(path: &Path, store: &ParamStore, trainable_only: bool) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    write_params(std::io::BufWriter::new(file), store, trainable_only)
}

pub fn read_params_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_params(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_bits() {
        let mut store = ParamStore::new();
        store.register("a.w", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-300, f64::MAX]).unwrap(), true);
        store.register("frozen", Tensor::scalar(7.0), false);
        store.register("b.bias", Tensor::row_vector(vec![0.125; 4]), true);

        let mut all = Vec::new();
        write_params(&mut all, &store, false).unwrap();
        let back = read_params(all.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].0, "a.w");
        assert_eq!(back[0].1, store.value(store.id("a.w").unwrap()).clone());
        assert_eq!(back[1].0, "frozen");

        let mut trainable = Vec::new();
        write_params(&mut trainable, &store, true).unwrap();
        let back = read_params(trainable.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.iter().all(|(n, _)| n != "frozen"));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_params(&b"NOPE"[..]).is_err());
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(1.0), true);
        let mut bytes = Vec::new();
        write_params(&mut bytes, &store, false).unwrap();
        assert!(read_params(&bytes[..bytes.len() - 3]).is_err());
    }
}
