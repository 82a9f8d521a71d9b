//! Binary PGM (P5) with maxval 255, the only image codec of the dataset.

use std::io::Write;

use crate::error::{Error, Result};

/// Grayscale raster with one byte per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm<W: Write>(out: &mut W, img: &Gray8) -> Result<()> {
    out.write_all(&encode_pgm(img))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments that run to the end of the line.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self
                    .bytes
                    .get(self.pos)
                    .is_some_and(|&c| c != b'\n' && c != b'\r')
                {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Parses a decimal field, returning it with its starting offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            let msg = match self.bytes.get(start) {
                None => format!("unexpected end of file, expected {what}"),
                Some(b) => format!("expected {what}, found byte 0x{b:02x}"),
            };
            return Err(Error::format(start, msg));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map(|v| (v, start))
            .map_err(|_| Error::format(start, format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Gray8> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "truncated magic number"));
    }
    if &bytes[..2] != b"P5" {
        return Err(Error::format(0, "not a binary PGM (expected magic P5)"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let (width, _) = cur.number("width")?;
    let (height, _) = cur.number("height")?;
    let (maxval, maxval_at) = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_at,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => {
            return Err(Error::format(
                cur.pos,
                "expected one whitespace byte after maxval",
            ))
        }
        None => {
            return Err(Error::format(
                cur.pos,
                "unexpected end of file after maxval",
            ))
        }
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("empty raster {width}x{height}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(2, "raster size overflows"))?;
    let body = &bytes[cur.pos..];
    if body.len() < n {
        return Err(Error::format(
            bytes.len(),
            format!("truncated raster: {} of {n} pixel bytes", body.len()),
        ));
    }
    if body.len() > n {
        return Err(Error::format(cur.pos + n, "trailing bytes after raster"));
    }
    Ok(Gray8 {
        width,
        height,
        pixels: body.to_vec(),
    })
}
