//! Grayscale portable float maps: `Pf` header, negative scale for
//! little-endian payloads, scanlines stored bottom row first.

use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::Map;

pub fn encode(map: &Map) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(4 * map.data.len());
    for row in map.data.chunks(map.width.max(1)).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, message: message.into() }
    }

    /// Next whitespace-delimited header token; consumes exactly one trailing
    /// whitespace byte.
    fn token(&mut self) -> Result<&str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail("unexpected end of header"));
        }
        let end = self.pos;
        if self.pos < self.bytes.len() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..end])
            .map_err(|_| Error::Format { offset: start, message: "header is not ASCII".into() })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Map> {
    let mut cur = Cursor { bytes, pos: 0 };
    match cur.token()? {
        "Pf" => {}
        "PF" => return Err(Error::Format { offset: 0, message: "color PFM (PF) is not a depth map".into() }),
        other => return Err(Error::Format { offset: 0, message: format!("bad magic {other:?}, expected \"Pf\"") }),
    }
    let dim = |cur: &mut Cursor, what: &str| -> Result<usize> {
        let at = cur.pos;
        let tok = cur.token()?;
        tok.parse::<usize>().map_err(|_| Error::Format { offset: at, message: format!("bad {what} {tok:?}") })
    };
    let width = dim(&mut cur, "width")?;
    let height = dim(&mut cur, "height")?;
    let at = cur.pos;
    let scale_tok = cur.token()?;
    let scale: f64 =
        scale_tok.parse().map_err(|_| Error::Format { offset: at, message: format!("bad scale {scale_tok:?}") })?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format { offset: at, message: "scale must be non-zero".into() });
    }
    let little = scale < 0.0;
    let n = width.checked_mul(height).ok_or_else(|| cur.fail("extents overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < 4 * n {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: need {} bytes, found {}", 4 * n, payload.len()),
        });
    }
    let mut data = vec![0f32; n];
    for (i, chunk) in payload[..4 * n].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v;
    }
    Map::new(width, height, data)
}

pub fn write(path: &Path, map: &Map) -> Result<()> {
    super::write_file(path, &encode(map))
}

pub fn read(path: &Path) -> Result<Map> {
    decode(&std::fs::read(path)?)
}
