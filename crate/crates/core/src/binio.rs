//! Little-endian helpers shared by the `SPLC`, `SPLH` and `SPLQ` file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        expected: self.offset + buf.len() as u64,
                        found: self.offset + read as u64,
                    })
                }
                Ok(m) => read += m,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset;
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        if &buf != expected {
            return Err(Error::Format {
                offset: at,
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        let mut buf = [0u8; 1];
        self.fill(&mut buf)?;
        Ok(buf[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    /// Reads `count` little-endian u32 words. `hint_total` is the byte size the
    /// header implies, reported when the payload runs short.
    pub(crate) fn u32_block(&mut self, count: usize, hint_total: u64) -> Result<Vec<u32>> {
        let mut bytes = vec![0u8; count * 4];
        self.fill(&mut bytes).map_err(|e| match e {
            Error::Truncated { found, .. } => Error::Truncated {
                expected: hint_total,
                found,
            },
            other => other,
        })?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn f32_block(&mut self, count: usize, hint_total: u64) -> Result<Vec<f32>> {
        Ok(self
            .u32_block(count, hint_total)?
            .into_iter()
            .map(f32::from_bits)
            .collect())
    }

    /// Fails if any bytes follow the expected payload.
    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format {
                offset: self.offset,
                detail: "trailing bytes after payload".into(),
            }),
        }
    }
}

pub(crate) fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_u32_block<W: Write>(w: &mut W, vals: &[u32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn put_f32_block<W: Write>(w: &mut W, vals: impl IntoIterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} does not fit in u32")))
}
