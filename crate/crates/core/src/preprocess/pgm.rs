//! Binary 8-bit grayscale PGM (`P5`) reading and writing.

use std::path::Path;

use super::LineImage;
use crate::error::{Error, Result};

fn bad(msg: impl Into<String>) -> Error {
    Error::format("pgm", msg)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| bad(format!("{what} out of range")))
    }
}

/// Decodes a `P5` image with `maxval ≤ 255`, mapping each sample `v` to `v / maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<LineImage> {
    if !bytes.starts_with(b"P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    if !h
        .bytes
        .get(2)
        .is_some_and(|b| b.is_ascii_whitespace() || *b == b'#')
    {
        return Err(bad("missing separator after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("maxval {maxval} is not an 8-bit range")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace before raster"));
    }
    let start = h.pos + 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| bad("image extent overflows"))?;
    let raster = bytes
        .get(start..)
        .filter(|r| r.len() >= n)
        .ok_or_else(|| bad(format!("raster truncated: need {n} bytes")))?;
    let max = maxval as f64;
    let pixels = raster[..n]
        .iter()
        .map(|&v| {
            if usize::from(v) > maxval {
                Err(bad("sample above maxval"))
            } else {
                Ok(f64::from(v) / max)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LineImage::new(height, width, pixels)
}

/// Encodes with `maxval = 255`, rounding each pixel to the nearest level.
pub fn encode_pgm(img: &LineImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.pixels()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LineImage> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &LineImage) -> Result<()> {
    std::fs::write(path.as_ref(), encode_pgm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_with_comments() {
        let mut bytes = b"P5\n# made by hand\n3 1\n255\n".to_vec();
        bytes.extend([0u8, 51, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 3));
        for (p, e) in img.pixels().iter().zip([0.0, 0.2, 1.0]) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_decode_is_stable_on_quantized_images() {
        let levels: Vec<f64> = (0..12).map(|i| f64::from(i * 20) / 255.0).collect();
        let img = LineImage::new(3, 4, levels).unwrap();
        let bytes = encode_pgm(&img);
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_pgm(&back), bytes);
    }

    #[test]
    fn rejects_malformed_headers() {
        assert!(decode_pgm(b"P2\n1 1\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n0 4\n255\n").is_err());
        assert!(decode_pgm(b"P5\n99999999999999999999 4\n255\n").is_err());
        assert!(decode_pgm(b"P5\n1 1\n10\n\x0b").is_err());
    }
}
