//! Canonical binary encoding for everything that crosses the wire.
//!
//! The format is deliberately boring: fixed-width little-endian integers,
//! length-prefixed byte strings, a single leading tag byte per message, and
//! fields serialized in declaration order. Two encodings of the same value
//! are bit-identical, which the deterministic simulator relies on.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("buffer truncated while decoding {0}")]
    Truncated(&'static str),
    #[error("unknown tag byte {0}")]
    UnknownTag(u8),
    #[error("invalid value for {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
    #[error("length field {got} exceeds limit {limit}")]
    Oversize { got: usize, limit: usize },
}

/// Hard cap on any single length field; protects decoders from hostile input.
pub const MAX_FIELD_LEN: usize = 64 << 20;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_bytes(&mut self, v: &[u8]) {
        self.put_u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated(what));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn take_u8(&mut self, what: &'static str) -> Result<u8, WireError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn take_u32(&mut self, what: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn take_u64(&mut self, what: &'static str) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn take_i64(&mut self, what: &'static str) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn take_bytes(&mut self, what: &'static str) -> Result<Vec<u8>, WireError> {
        let n = self.take_u32(what)? as usize;
        if n > MAX_FIELD_LEN {
            return Err(WireError::Oversize { got: n, limit: MAX_FIELD_LEN });
        }
        Ok(self.take(n, what)?.to_vec())
    }

    pub fn take_count(&mut self, what: &'static str) -> Result<usize, WireError> {
        let n = self.take_u32(what)? as usize;
        if n > MAX_FIELD_LEN {
            return Err(WireError::Oversize { got: n, limit: MAX_FIELD_LEN });
        }
        Ok(n)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Types with a canonical binary form.
pub trait Wire: Sized {
    fn encode(&self, w: &mut Writer);
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.into_vec()
    }

    /// Decode from a slice, rejecting trailing garbage.
    fn from_bytes(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let v = Self::decode(&mut r)?;
        if r.remaining() > 0 {
            return Err(WireError::Trailing(r.remaining()));
        }
        Ok(v)
    }
}

impl Wire for Vec<u8> {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(self);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        r.take_bytes("bytes")
    }
}

impl Wire for u64 {
    fn encode(&self, w: &mut Writer) {
        w.put_u64(*self);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        r.take_u64("u64")
    }
}

pub fn encode_vec<T: Wire>(items: &[T], w: &mut Writer) {
    w.put_u32(items.len() as u32);
    for it in items {
        it.encode(w);
    }
}

pub fn decode_vec<T: Wire>(r: &mut Reader<'_>, what: &'static str) -> Result<Vec<T>, WireError> {
    let n = r.take_count(what)?;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        out.push(T::decode(r)?);
    }
    Ok(out)
}

pub fn encode_option<T: Wire>(v: &Option<T>, w: &mut Writer) {
    match v {
        None => w.put_u8(0),
        Some(x) => {
            w.put_u8(1);
            x.encode(w);
        }
    }
}

pub fn decode_option<T: Wire>(r: &mut Reader<'_>, what: &'static str) -> Result<Option<T>, WireError> {
    match r.take_u8(what)? {
        0 => Ok(None),
        1 => Ok(Some(T::decode(r)?)),
        _ => Err(WireError::Invalid(what)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_scalars() {
        let mut w = Writer::new();
        w.put_u8(7);
        w.put_u32(0xdead_beef);
        w.put_u64(u64::MAX);
        w.put_i64(-42);
        w.put_bytes(b"hello");
        let buf = w.into_vec();
        let mut r = Reader::new(&buf);
        assert_eq!(r.take_u8("a").unwrap(), 7);
        assert_eq!(r.take_u32("b").unwrap(), 0xdead_beef);
        assert_eq!(r.take_u64("c").unwrap(), u64::MAX);
        assert_eq!(r.take_i64("d").unwrap(), -42);
        assert_eq!(r.take_bytes("e").unwrap(), b"hello");
        assert_eq!(r.remaining(), 0);
    }

    #[test]
    fn truncated_read_fails() {
        let mut r = Reader::new(&[1, 2]);
        assert_eq!(r.take_u32("x"), Err(WireError::Truncated("x")));
    }

    #[test]
    fn oversize_length_rejected() {
        let mut w = Writer::new();
        w.put_u32(u32::MAX);
        let buf = w.into_vec();
        let mut r = Reader::new(&buf);
        assert!(matches!(r.take_bytes("x"), Err(WireError::Oversize { .. })));
    }
}
