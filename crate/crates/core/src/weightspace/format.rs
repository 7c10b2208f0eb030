//! OVCK1 checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      6 bytes  "OVCK1\0"
//! version    u16      1
//! count      u32      number of tensors
//! meta_len   u32      byte length of the metadata section
//! meta       meta_len UTF-8 "key=value\n" lines
//! per tensor:
//!   name_len u16, name (UTF-8)
//!   rank     u8, dims u32 x rank
//!   dtype    u8 (0 = f32, 1 = f64)
//!   payload  product(dims) elements, raw little-endian
//! crc32      u32      over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::numkit::{Scalar, Tensor};
use crate::{Checkpoint, Error, FormatError, Result};

pub const MAGIC: &[u8; 6] = b"OVCK1\0";
pub const VERSION: u16 = 1;

pub fn encode<S: Scalar>(ckpt: &Checkpoint<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.len() as u32).to_le_bytes());
    let mut meta = String::new();
    for (k, v) in ckpt.meta() {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("metadata entry {k:?} cannot be encoded")));
        }
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for (name, t) in ckpt.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        if t.rank() > u8::MAX as usize {
            return Err(Error::invalid(format!("{name}: rank too large")));
        }
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("{name}: dim too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(S::DTYPE);
        out.reserve(t.len() * S::BYTES);
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { offset: self.pos, needed: n - (self.buf.len() - self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>, FormatError> {
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(FormatError::Truncated { offset: bytes.len(), needed: MAGIC.len() - bytes.len() })
        } else {
            Err(FormatError::BadMagic)
        };
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    // Everything but the trailing CRC is parsed structurally first, so that
    // truncation reports as such rather than as a checksum mismatch.
    if bytes.len() < MAGIC.len() + 4 {
        return Err(FormatError::Truncated { offset: bytes.len(), needed: MAGIC.len() + 4 - bytes.len() });
    }
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let meta_len = r.u32()? as usize;
    let meta_raw = std::str::from_utf8(r.take(meta_len)?).map_err(|_| FormatError::InvalidUtf8("metadata"))?;
    let mut ckpt = Checkpoint::<S>::new();
    for line in meta_raw.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Malformed(format!("metadata line {line:?}")))?;
        ckpt.set_meta(k, v);
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| FormatError::InvalidUtf8("tensor name"))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let dtype = r.u8()?;
        if dtype > 1 {
            return Err(FormatError::UnknownDtype(dtype));
        }
        if dtype != S::DTYPE {
            return Err(FormatError::DtypeMismatch { expected: S::DTYPE, found: dtype });
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed(format!("{name}: shape overflow")))?;
        let raw = r.take(numel.checked_mul(S::BYTES).ok_or_else(|| FormatError::Malformed("payload overflow".into()))?)?;
        let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(format!("{name}: {e}")))?;
        ckpt.insert(name, t).map_err(|e| FormatError::Malformed(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(FormatError::Malformed(format!("{} trailing byte(s) before checksum", body.len() - r.pos)));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    Ok(ckpt)
}

/// Writes atomically: the bytes go to `<path>.tmp` which is then renamed.
pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(ckpt)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
