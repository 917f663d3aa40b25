//! Binary weight files.
//!
//! Little-endian: magic `ESWT`, `u32` version (1), `u32` tensor count, then
//! per tensor (sorted by name) a `u32` name length, the UTF-8 name, a `u32`
//! rank, `rank` `u32` dims and the `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::WeightFileError;
use crate::graph::WeightStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ESWT";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_weights(w: &mut impl Write, store: &WeightStore<f32>) -> Result<(), WeightFileError> {
    w.write_all(&MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, store.len() as u32)?;
    for (name, t) in store.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights(r: &mut impl Read) -> Result<WeightStore<f32>, WeightFileError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(WeightFileError::Magic(magic));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(WeightFileError::Version(version));
    }
    let count = get_u32(r)?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| WeightFileError::Name)?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(&shape, data).map_err(|_| WeightFileError::Malformed(name.clone()))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_weights(path: impl AsRef<Path>, store: &WeightStore<f32>) -> Result<(), WeightFileError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore<f32>, WeightFileError> {
    read_weights(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> WeightStore<f32> {
        let mut s = WeightStore::new();
        s.insert("b.bias", Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        s.insert("a.weight", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.25));
        s
    }

    #[test]
    fn roundtrip() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &store()).unwrap();
        assert_eq!(&buf[..4], b"ESWT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        // Sorted: `a.weight` comes first.
        assert_eq!(&buf[16..24], b"a.weight");
        assert_eq!(read_weights(&mut buf.as_slice()).unwrap(), store());
    }

    #[test]
    fn rejects_bad_headers() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &store()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(&mut bad.as_slice()), Err(WeightFileError::Magic(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_weights(&mut bad.as_slice()), Err(WeightFileError::Version(2))));
        assert!(matches!(read_weights(&mut &buf[..buf.len() - 3]), Err(WeightFileError::Io(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&path, &store()).unwrap();
        assert_eq!(load_weights(&path).unwrap(), store());
    }
}
