//! On-disk recordings of one producer's message stream.
//!
//! `DRSH` magic, a version byte, DRSM-framed payloads, then a trailer made of
//! the marker length `0xFFFF_FFFF` followed by the u64 message count.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::wire::{self, Message, WireError};

pub const SHARD_MAGIC: [u8; 4] = *b"DRSH";
pub const SHARD_VERSION: u8 = 1;
const TRAILER_MARKER: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a shard file (bad magic)")]
    BadMagic,
    #[error("unsupported shard version {0}")]
    BadVersion(u8),
    #[error("shard truncated")]
    Truncated,
    #[error("trailer count {expected} but {actual} messages present")]
    CountMismatch { expected: u64, actual: u64 },
    #[error("bytes after trailer")]
    TrailingData,
    #[error("wire: {0}")]
    Wire(#[from] WireError),
}

pub struct ShardWriter<W: Write> {
    out: W,
    count: u64,
}

impl ShardWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, ShardError> {
        ShardWriter::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> ShardWriter<W> {
    pub fn new(mut out: W) -> Result<Self, ShardError> {
        out.write_all(&SHARD_MAGIC)?;
        out.write_all(&[SHARD_VERSION])?;
        Ok(ShardWriter { out, count: 0 })
    }

    pub fn append(&mut self, m: &Message) -> Result<(), ShardError> {
        let payload = wire::encode_message(m)?;
        self.append_payload(&payload)
    }

    pub fn append_payload(&mut self, payload: &[u8]) -> Result<(), ShardError> {
        wire::write_frame(&mut self.out, payload)?;
        self.count += 1;
        Ok(())
    }

    /// Writes the trailer and returns the underlying writer.
    pub fn finish(mut self) -> Result<W, ShardError> {
        self.out.write_all(&TRAILER_MARKER.to_le_bytes())?;
        self.out.write_all(&self.count.to_le_bytes())?;
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Iterates raw payloads; the trailer count is checked when the stream ends.
pub struct ShardReader<R: Read> {
    input: R,
    seen: u64,
    done: bool,
}

impl ShardReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ShardError> {
        ShardReader::new(BufReader::new(File::open(path)?))
    }
}

fn eof_as_truncated(e: io::Error) -> ShardError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        ShardError::Truncated
    } else {
        ShardError::Io(e)
    }
}

impl<R: Read> ShardReader<R> {
    pub fn new(mut input: R) -> Result<Self, ShardError> {
        let mut head = [0u8; 5];
        input.read_exact(&mut head).map_err(eof_as_truncated)?;
        if head[..4] != SHARD_MAGIC {
            return Err(ShardError::BadMagic);
        }
        if head[4] != SHARD_VERSION {
            return Err(ShardError::BadVersion(head[4]));
        }
        Ok(ShardReader {
            input,
            seen: 0,
            done: false,
        })
    }

    fn next_payload(&mut self) -> Result<Option<Vec<u8>>, ShardError> {
        let mut len = [0u8; 4];
        self.input.read_exact(&mut len).map_err(eof_as_truncated)?;
        let len = u32::from_le_bytes(len);
        if len == TRAILER_MARKER {
            let mut count = [0u8; 8];
            self.input.read_exact(&mut count).map_err(eof_as_truncated)?;
            let expected = u64::from_le_bytes(count);
            if expected != self.seen {
                return Err(ShardError::CountMismatch {
                    expected,
                    actual: self.seen,
                });
            }
            let mut extra = [0u8; 1];
            if self.input.read(&mut extra)? != 0 {
                return Err(ShardError::TrailingData);
            }
            return Ok(None);
        }
        if len > wire::MAX_FRAME_LEN {
            return Err(ShardError::Wire(WireError::FrameTooLarge(len)));
        }
        let mut payload = vec![0u8; len as usize];
        self.input.read_exact(&mut payload).map_err(eof_as_truncated)?;
        self.seen += 1;
        Ok(Some(payload))
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<Vec<u8>, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_payload() {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads and decodes a whole shard.
pub fn read_shard(path: impl AsRef<Path>) -> Result<Vec<Message>, ShardError> {
    ShardReader::open(path)?
        .map(|p| Ok(wire::decode_message(&p?)?))
        .collect()
}
