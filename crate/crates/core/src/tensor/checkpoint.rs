//! Parameter checkpoint format.
//!
//! ```text
//! magic    "DYFP"
//! version  u32
//! count    u64                       number of named parameters
//! repeated count times:
//!   name   u32 byte length + UTF-8 bytes
//!   rank   u32
//!   dims   rank x u64
//!   data   prod(dims) x f64
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::binio::{put_dims, put_f64, put_str, put_u32, put_u64, Reader};
use crate::error::Result;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DYFP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(w: &mut impl Write, params: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u64(w, params.len() as u64)?;
    for (name, t) in params {
        put_str(w, name)?;
        put_dims(w, t.shape())?;
        for v in t.data() {
            put_f64(w, *v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(r, "DYFP");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.malformed(format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let dims = r.dims()?;
        let len: usize = dims.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(dims, data)?));
    }
    r.expect_eof()?;
    Ok(out)
}
