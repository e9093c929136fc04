//! Named-tensor container ("RSTN").
//!
//! Layout: magic "RSTN", version u32 LE, entry count u32 LE, then per entry:
//! name length u16 LE + UTF-8 name, dtype code u8 (0 = f32), rank u8,
//! extents u32 LE each, payload f32 LE row-major.
//!
//! Values are stored as f32. Loading widens losslessly back to the engine's
//! f64, so a save/load cycle after [`Tensor::commit_f32`] is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RSTN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_tensors(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {name}")));
        }
        if t.shape().len() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor rank too large for {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&[DTYPE_F32, t.shape().len() as u8]).map_err(io_err)?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io_err)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format(format!("{}: invalid tensor name", path.display())))?;
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr).map_err(io_err)?;
        if hdr[0] != DTYPE_F32 {
            return Err(Error::Format(format!("{}: unknown dtype {}", path.display(), hdr[0])));
        }
        let rank = hdr[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(io_err)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_after_commit_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rstn");
        let mut rng = Rng::new(40);
        let mut a = Tensor::uniform(&[3, 4, 5], -2.0, 2.0, &mut rng);
        let mut b = Tensor::uniform(&[7], -1.0, 1.0, &mut rng);
        a.commit_f32();
        b.commit_f32();
        write_tensors(&path, &[("x/a".into(), &a), ("x/b".into(), &b)]).unwrap();
        let loaded = read_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "x/a");
        assert_eq!(loaded[0].1.data(), a.data());
        assert_eq!(loaded[0].1.shape(), a.shape());
        assert_eq!(loaded[1].1.data(), b.data());

        // Writing the loaded tensors again reproduces identical bytes.
        let path2 = dir.path().join("t2.rstn");
        let refs: Vec<(String, &Tensor)> =
            loaded.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_tensors(&path2, &refs).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rstn");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));
    }
}
