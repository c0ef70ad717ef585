//! DRSM v1: the self-describing binary message format shared by producers,
//! consumers and the control channel.
//!
//! Payload layout (all integers little-endian):
//!
//! ```text
//! magic 0x44 0x52 | version 0x01 | entry count u16
//! entry := key len u8 | key bytes | tag u8 | value
//!   0x01 U64 (8)  0x02 I64 (8)  0x03 F64 (8)
//!   0x04 Str  (u32 len + utf-8)  0x05 Blob (u32 len + bytes)
//!   0x06 Tensor (dtype u8 | rank u8 | rank x u32 dims | raw data)
//! ```
//!
//! On a byte stream every payload is preceded by its u32 length.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x44, 0x52];
pub const VERSION: u8 = 0x01;
pub const MAX_KEY_LEN: usize = 255;
pub const MAX_RANK: usize = 8;
/// Upper bound accepted by [`read_frame`]; protects against garbage length prefixes.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

const TAG_U64: u8 = 0x01;
const TAG_I64: u8 = 0x02;
const TAG_F64: u8 = 0x03;
const TAG_STR: u8 = 0x04;
const TAG_BLOB: u8 = 0x05;
const TAG_TENSOR: u8 = 0x06;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum WireError {
    #[error("key `{0}` exceeds 255 bytes")]
    KeyTooLong(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("message has {0} entries, at most 65535 allowed")]
    TooManyEntries(usize),
    #[error("unsupported tensor rank {0}")]
    UnsupportedRank(usize),
    #[error("tensor data does not fit in a u32 length")]
    TensorTooLarge,
    #[error("tensor data is {actual} bytes, dims require {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("bad magic {0:02x} {1:02x}")]
    BadMagic(u8, u8),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("payload truncated")]
    Truncated,
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("unknown value tag {0:#04x}")]
    UnknownTag(u8),
    #[error("unknown tensor dtype {0:#04x}")]
    UnknownDtype(u8),
    #[error("invalid utf-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("missing or mistyped stream header key `{0}`")]
    MissingHeader(&'static str),
    #[error("frame length {0} exceeds limit")]
    FrameTooLarge(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    U8,
    F32,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0x00,
            DType::F32 => 0x01,
            DType::I64 => 0x02,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            0x00 => Ok(DType::U8),
            0x01 => Ok(DType::F32),
            0x02 => Ok(DType::I64),
            other => Err(WireError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::I64 => 8,
        }
    }
}

/// Dense row-major tensor. Element bytes are stored little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    dims: Vec<u32>,
    data: Vec<u8>,
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

impl Tensor {
    pub fn new(dtype: DType, dims: Vec<u32>, data: Vec<u8>) -> Result<Self, WireError> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(WireError::UnsupportedRank(dims.len()));
        }
        let expected = element_count(&dims)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or(WireError::TensorTooLarge)?;
        if expected > u32::MAX as usize {
            return Err(WireError::TensorTooLarge);
        }
        if expected != data.len() {
            return Err(WireError::ShapeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { dtype, dims, data })
    }

    pub fn from_u8(dims: Vec<u32>, data: Vec<u8>) -> Result<Self, WireError> {
        Tensor::new(DType::U8, dims, data)
    }

    pub fn from_f32(dims: Vec<u32>, values: &[f32]) -> Result<Self, WireError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor::new(DType::F32, dims, data)
    }

    pub fn from_i64(dims: Vec<u32>, values: &[i64]) -> Result<Self, WireError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor::new(DType::I64, dims, data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dtype.size()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f32(&self) -> Option<Vec<f32>> {
        (self.dtype == DType::F32).then(|| {
            self.data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        })
    }

    pub fn to_i64(&self) -> Option<Vec<i64>> {
        (self.dtype == DType::I64).then(|| {
            self.data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    U64(u64),
    I64(i64),
    F64(f64),
    Str(String),
    Blob(Vec<u8>),
    Tensor(Tensor),
}

impl Value {
    pub fn as_u64(&self) -> Option<u64> {
        match self {
            Value::U64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Value::Tensor(t) => Some(t),
            _ => None,
        }
    }
}

/// Ordered key/value map. Keys are unique; insertion order is the wire order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Message {
    entries: Vec<(String, Value)>,
}

impl Message {
    pub fn new() -> Self {
        Message::default()
    }

    /// Message with the stream header keys `btid` and `frame` already set.
    pub fn with_header(btid: u64, frame: u64) -> Self {
        let mut m = Message::new();
        m.insert("btid", Value::U64(btid));
        m.insert("frame", Value::U64(frame));
        m
    }

    /// Inserts or replaces `key`. A replaced entry keeps its position.
    pub fn insert(&mut self, key: impl Into<String>, value: Value) {
        let key = key.into();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn tensor(&self, key: &str) -> Option<&Tensor> {
        self.get(key).and_then(Value::as_tensor)
    }

    pub fn entries(&self) -> &[(String, Value)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn btid(&self) -> Option<u64> {
        self.get("btid").and_then(Value::as_u64)
    }

    pub fn frame(&self) -> Option<u64> {
        self.get("frame").and_then(Value::as_u64)
    }
}

/// Checks that `btid` and `frame` are present as U64.
pub fn validate_stream_header(m: &Message) -> Result<(u64, u64), WireError> {
    let btid = m.btid().ok_or(WireError::MissingHeader("btid"))?;
    let frame = m.frame().ok_or(WireError::MissingHeader("frame"))?;
    Ok((btid, frame))
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(64);
    encode_into(m, &mut out)?;
    Ok(out)
}

pub fn encode_into(m: &Message, out: &mut Vec<u8>) -> Result<(), WireError> {
    if m.entries.len() > u16::MAX as usize {
        return Err(WireError::TooManyEntries(m.entries.len()));
    }
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(m.entries.len() as u16).to_le_bytes());
    for (i, (key, value)) in m.entries.iter().enumerate() {
        if key.len() > MAX_KEY_LEN {
            return Err(WireError::KeyTooLong(key.clone()));
        }
        if m.entries[..i].iter().any(|(k, _)| k == key) {
            return Err(WireError::DuplicateKey(key.clone()));
        }
        out.push(key.len() as u8);
        out.extend_from_slice(key.as_bytes());
        match value {
            Value::U64(v) => {
                out.push(TAG_U64);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::I64(v) => {
                out.push(TAG_I64);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::F64(v) => {
                out.push(TAG_F64);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::Str(s) => {
                out.push(TAG_STR);
                put_bytes(out, s.as_bytes())?;
            }
            Value::Blob(b) => {
                out.push(TAG_BLOB);
                put_bytes(out, b)?;
            }
            Value::Tensor(t) => {
                if t.dims.is_empty() || t.dims.len() > MAX_RANK {
                    return Err(WireError::UnsupportedRank(t.dims.len()));
                }
                if t.data.len() > u32::MAX as usize {
                    return Err(WireError::TensorTooLarge);
                }
                out.push(TAG_TENSOR);
                out.push(t.dtype.code());
                out.push(t.dims.len() as u8);
                for d in &t.dims {
                    out.extend_from_slice(&d.to_le_bytes());
                }
                out.extend_from_slice(&t.data);
            }
        }
    }
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) -> Result<(), WireError> {
    let len = u32::try_from(bytes.len()).map_err(|_| WireError::TensorTooLarge)?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn b8(&mut self) -> Result<[u8; 8], WireError> {
        Ok(self.take(8)?.try_into().unwrap())
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(2)?;
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic[0], magic[1]));
    }
    let version = cur.u8()?;
    if version != VERSION {
        return Err(WireError::BadVersion(version));
    }
    let count = cur.u16()? as usize;
    let mut entries: Vec<(String, Value)> = Vec::with_capacity(count);
    for _ in 0..count {
        let klen = cur.u8()? as usize;
        let key = std::str::from_utf8(cur.take(klen)?)
            .map_err(|_| WireError::InvalidUtf8("key"))?
            .to_owned();
        if entries.iter().any(|(k, _)| *k == key) {
            return Err(WireError::DuplicateKey(key));
        }
        let value = match cur.u8()? {
            TAG_U64 => Value::U64(u64::from_le_bytes(cur.b8()?)),
            TAG_I64 => Value::I64(i64::from_le_bytes(cur.b8()?)),
            TAG_F64 => Value::F64(f64::from_le_bytes(cur.b8()?)),
            TAG_STR => {
                let len = cur.u32()? as usize;
                let s = std::str::from_utf8(cur.take(len)?)
                    .map_err(|_| WireError::InvalidUtf8("string value"))?;
                Value::Str(s.to_owned())
            }
            TAG_BLOB => {
                let len = cur.u32()? as usize;
                Value::Blob(cur.take(len)?.to_vec())
            }
            TAG_TENSOR => {
                let dtype = DType::from_code(cur.u8()?)?;
                let rank = cur.u8()? as usize;
                if rank == 0 || rank > MAX_RANK {
                    return Err(WireError::UnsupportedRank(rank));
                }
                let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
                let nbytes = element_count(&dims)
                    .and_then(|n| n.checked_mul(dtype.size()))
                    .filter(|&n| n <= u32::MAX as usize)
                    .ok_or(WireError::TensorTooLarge)?;
                let data = cur.take(nbytes)?.to_vec();
                Value::Tensor(Tensor { dtype, dims, data })
            }
            other => return Err(WireError::UnknownTag(other)),
        };
        entries.push((key, value));
    }
    if cur.pos != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(Message { entries })
}

/// Writes `payload` preceded by its u32 length.
pub fn write_frame<W: Write + ?Sized>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame exceeds u32 length"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)
}

/// Reads one length-prefixed payload. `Ok(None)` on a clean end of stream
/// (EOF before the first length byte); a partial frame is `UnexpectedEof`.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            WireError::FrameTooLarge(len),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_message_layout() {
        let bytes = encode_message(&Message::with_header(7, 0)).unwrap();
        assert_eq!(&bytes[..5], &[0x44, 0x52, 0x01, 0x02, 0x00]);
        assert_eq!(
            &bytes[5..19],
            &[0x04, b'b', b't', b'i', b'd', 0x01, 7, 0, 0, 0, 0, 0, 0, 0]
        );
        assert_eq!(bytes.len(), 34);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_message(&Message::with_header(0, 0)).unwrap();
        bytes[0] = 0;
        bytes[1] = 0;
        assert_eq!(decode_message(&bytes), Err(WireError::BadMagic(0, 0)));
    }

    #[test]
    fn truncated_mid_tensor() {
        let mut m = Message::with_header(1, 2);
        m.insert(
            "image",
            Value::Tensor(Tensor::from_u8(vec![4, 4, 3], vec![9; 48]).unwrap()),
        );
        let bytes = encode_message(&m).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 20, 40] {
            assert_eq!(decode_message(&bytes[..cut]), Err(WireError::Truncated));
        }
    }

    #[test]
    fn duplicate_key_rejected_on_decode() {
        let mut bytes = vec![0x44, 0x52, 0x01, 0x02, 0x00];
        for _ in 0..2 {
            bytes.extend_from_slice(&[1, b'k', TAG_U64, 1, 0, 0, 0, 0, 0, 0, 0]);
        }
        assert_eq!(
            decode_message(&bytes),
            Err(WireError::DuplicateKey("k".into()))
        );
    }

    #[test]
    fn invalid_utf8_string() {
        let bytes = vec![0x44, 0x52, 0x01, 0x01, 0x00, 1, b's', TAG_STR, 1, 0, 0, 0, 0xff];
        assert!(matches!(
            decode_message(&bytes),
            Err(WireError::InvalidUtf8(_))
        ));
    }

    #[test]
    fn encode_errors() {
        let mut m = Message::new();
        m.insert("k".repeat(256), Value::U64(0));
        assert!(matches!(encode_message(&m), Err(WireError::KeyTooLong(_))));

        assert_eq!(
            Tensor::from_u8(vec![1; 9], vec![0]),
            Err(WireError::UnsupportedRank(9))
        );
        assert_eq!(
            Tensor::from_u8(vec![], vec![]),
            Err(WireError::UnsupportedRank(0))
        );
        assert_eq!(
            Tensor::from_u8(vec![65536, 65536], vec![]),
            Err(WireError::TensorTooLarge)
        );
    }

    #[test]
    fn zero_sized_tensor_is_legal() {
        let t = Tensor::from_f32(vec![0, 4], &[]).unwrap();
        let mut m = Message::with_header(0, 0);
        m.insert("bboxes", Value::Tensor(t.clone()));
        let back = decode_message(&encode_message(&m).unwrap()).unwrap();
        assert_eq!(back.tensor("bboxes"), Some(&t));
    }

    #[test]
    fn stream_header_validation() {
        assert_eq!(validate_stream_header(&Message::with_header(1, 9)), Ok((1, 9)));

        let mut m = Message::new();
        m.insert("frame", Value::U64(9));
        assert_eq!(validate_stream_header(&m), Err(WireError::MissingHeader("btid")));

        let mut m = Message::new();
        m.insert("btid", Value::Str("x".into()));
        m.insert("frame", Value::U64(0));
        assert_eq!(validate_stream_header(&m), Err(WireError::MissingHeader("btid")));
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut m = Message::with_header(1, 2);
        m.insert("btid", Value::U64(5));
        assert_eq!(m.entries()[0], ("btid".to_string(), Value::U64(5)));
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn frame_roundtrip_and_clean_eof() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"abc");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());

        let mut partial = &buf[..5];
        assert_eq!(
            read_frame(&mut partial).unwrap_err().kind(),
            io::ErrorKind::UnexpectedEof
        );
    }
}
