//! Checkpoint file format.
//!
//! A checkpoint is a flat file mapping parameter names to shapes and
//! row-major 64-bit little-endian values:
//!
//! ```text
//! magic   4 bytes  b"PPCK"
//! version u32 LE   currently 1
//! count   u32 LE   number of parameters
//! then per parameter, in store order:
//!   name_len u32 LE | name UTF-8 | ndim u32 LE | ndim × dim u32 LE | numel × f64 LE
//! ```
//!
//! Refiner parameters live in the same namespace under the `refiner.`
//! prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"PPCK";
const VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for e in store.entries() {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::MalformedFile {
                    offset: at,
                    reason: "unexpected end of checkpoint".into(),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut r = Counted {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::MalformedFile {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::MalformedFile {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let at = r.offset;
        let mut name_bytes = vec![0u8; name_len];
        r.exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::MalformedFile {
            offset: at,
            reason: "parameter name is not UTF-8".into(),
        })?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        store
            .add(name, shape, data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(store)
}
