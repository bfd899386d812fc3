//! Versioned binary container shared by model weights, fusion transforms,
//! classifiers and ensembles.
//!
//! Layout: the 8 magic bytes `ETSEFM1\0`, a one-byte kind tag, then a
//! kind-specific body. All integers and floats are little-endian; float
//! arrays are a `u64` length followed by `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ETSEFM1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Model = 1,
    Transform = 2,
    Classifier = 3,
    Ensemble = 4,
}

impl Kind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Kind::Model,
            2 => Kind::Transform,
            3 => Kind::Classifier,
            4 => Kind::Ensemble,
            _ => return None,
        })
    }
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        for &x in v {
            self.usize(x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bool(&mut self, b: bool) {
        self.u8(b as u8);
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: PathBuf,
}

impl<'a> Reader<'a> {
    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.origin, format!("{} (offset {})", msg.into(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err("length overflow"))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(self.err("array length exceeds remaining data"));
        }
        Ok(n)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.err("invalid bool")),
        }
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

/// Types stored in the container.
pub trait Persist: Sized {
    const KIND: Kind;
    fn write_body(&self, w: &mut Writer);
    fn read_body(r: &mut Reader<'_>) -> Result<Self>;
}

pub fn to_bytes<T: Persist>(value: &T) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u8(T::KIND as u8);
    value.write_body(&mut w);
    w.buf
}

pub fn from_bytes<T: Persist>(bytes: &[u8], origin: &Path) -> Result<T> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        origin: origin.to_path_buf(),
    };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(origin, "bad magic bytes"));
    }
    let tag = r.u8()?;
    match Kind::from_u8(tag) {
        Some(k) if k == T::KIND => {}
        Some(k) => {
            return Err(Error::format(
                origin,
                format!("container holds {k:?}, expected {:?}", T::KIND),
            ))
        }
        None => return Err(Error::format(origin, format!("unknown kind tag {tag}"))),
    }
    let v = T::read_body(&mut r)?;
    r.finish()?;
    Ok(v)
}

pub fn save<T: Persist>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(value)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Persist>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Probe(Vec<f64>, String);

    impl Persist for Probe {
        const KIND: Kind = Kind::Transform;
        fn write_body(&self, w: &mut Writer) {
            w.f64s(&self.0);
            w.str(&self.1);
        }
        fn read_body(r: &mut Reader<'_>) -> Result<Self> {
            Ok(Probe(r.f64s()?, r.str()?))
        }
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&Probe(vec![1.5], "x".into()));
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes[8], Kind::Transform as u8);
        assert_eq!(&bytes[9..17], &1u64.to_le_bytes());
        assert_eq!(&bytes[17..25], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_wrong_kind_and_truncation() {
        let mut bytes = to_bytes(&Probe(vec![1.0, 2.0], "abc".into()));
        let p = Path::new("probe");
        assert!(from_bytes::<Probe>(&bytes, p).is_ok());
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(from_bytes::<Probe>(&bytes, p), Err(Error::Format { .. })));
        bytes[8] = Kind::Model as u8;
        assert!(matches!(from_bytes::<Probe>(&bytes, p), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(from_bytes::<Probe>(&bytes, p).is_err());
    }
}
