//! Byte-level helpers shared by the checkpoint and embedding-store formats.
//!
//! All on-disk formats here are little-endian and versioned. Readers track
//! the byte offset so malformed files fail with a located format error
//! instead of a panic.

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("format error at byte {offset}: bad magic, expected {expected:?}")]
    BadMagic { offset: u64, expected: [u8; 4] },
    #[error("format error at byte {offset}: unsupported version {got} (expected {expected})")]
    BadVersion { offset: u64, got: u32, expected: u32 },
    #[error("format error at byte {offset}: truncated file")]
    Truncated { offset: u64 },
    #[error("format error at byte {offset}: invalid UTF-8 string")]
    InvalidUtf8 { offset: u64 },
    #[error("format error at byte {offset}: {what} value {got} out of range")]
    OutOfRange {
        offset: u64,
        what: &'static str,
        got: u64,
    },
    #[error("format error at byte {offset}: non-finite value")]
    NonFinite { offset: u64 },
    #[error("format error at byte {offset}: {len} trailing bytes after payload")]
    TrailingBytes { offset: u64, len: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sequential reader that remembers how many bytes it has consumed.
pub struct TrackingReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> TrackingReader<R> {
    pub fn new(inner: R) -> Self {
        TrackingReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(FormatError::Truncated {
                    offset: self.offset,
                })
            }
            Err(e) => Err(FormatError::Io(e)),
        }
    }

    pub fn read_magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let at = self.offset;
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf)?;
        if buf != expected {
            return Err(FormatError::BadMagic {
                offset: at,
                expected,
            });
        }
        Ok(())
    }

    pub fn read_u8(&mut self) -> Result<u8, FormatError> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    pub fn read_u16(&mut self) -> Result<u16, FormatError> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn read_u32(&mut self) -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&mut self) -> Result<u64, FormatError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f32(&mut self) -> Result<f32, FormatError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn read_f64(&mut self) -> Result<f64, FormatError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn read_version(&mut self, expected: u32) -> Result<(), FormatError> {
        let at = self.offset;
        let got = self.read_u32()?;
        if got != expected {
            return Err(FormatError::BadVersion {
                offset: at,
                got,
                expected,
            });
        }
        Ok(())
    }

    /// u16 length followed by that many bytes of UTF-8.
    pub fn read_short_string(&mut self) -> Result<String, FormatError> {
        let len = self.read_u16()? as usize;
        let at = self.offset;
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| FormatError::InvalidUtf8 { offset: at })
    }

    /// Confirms the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<(), FormatError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(FormatError::TrailingBytes {
                offset: self.offset,
                len: 1,
            }),
            Err(e) => Err(FormatError::Io(e)),
        }
    }
}

pub fn write_short_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    let bytes = s.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize, "string too long for format");
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)
}

/// Writes `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension()
            .and_then(|e| e.to_str())
            .unwrap_or("partial")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
