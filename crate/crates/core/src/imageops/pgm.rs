//! Binary PGM (`P5`, maxval 255).

use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Pgm {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("malformed header: expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Pgm {
                offset: start,
                msg: format!("malformed header: {what} out of range"),
            })
    }
}

pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(cur.err("malformed header: missing magic"));
    }
    if &bytes[..2] != b"P5" {
        return Err(cur.err("unsupported magic"));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Pgm {
            offset: maxval_at,
            msg: format!("maxval {maxval} unsupported, expected 255"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("malformed header: missing separator before raster")),
    }
    if width == 0 || height == 0 {
        return Err(cur.err("malformed header: zero dimension"));
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| cur.err("malformed header: dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Pgm {
            offset: bytes.len(),
            msg: format!(
                "truncated pixel payload: need {need} bytes, found {}",
                payload.len()
            ),
        });
    }
    GrayImage::new(width, height, payload[..need].to_vec())
}

pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn load_pgm_file(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_pgm(&bytes).map_err(|e| match e {
        Error::Pgm { offset, msg } => Error::Pgm {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn save_pgm_file(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_pgm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(s: &str, px: &[u8]) -> Vec<u8> {
        let mut v = s.as_bytes().to_vec();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn decodes_exact_values() {
        let img = load_pgm(&header("P5 2 2 255\n", &[0, 64, 128, 255])).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixels(), &[0, 64, 128, 255]);
    }

    #[test]
    fn rejects_other_magic() {
        let err = load_pgm(&header("P6 2 2 255\n", &[0; 12])).unwrap_err();
        assert!(err.to_string().contains("unsupported magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let err = load_pgm(&header("P5 2 2 255\n", &[1, 2, 3])).unwrap_err();
        match err {
            Error::Pgm { offset, msg } => {
                assert!(msg.contains("truncated"));
                assert_eq!(offset, 14);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_maxval() {
        let err = load_pgm(&header("P5 1 1 65535\n", &[0, 0])).unwrap_err();
        match err {
            Error::Pgm { offset, msg } => {
                assert!(msg.contains("maxval"));
                assert_eq!(offset, 7);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn header_comments_and_malformed_numbers() {
        let img = load_pgm(&header("P5\n# made by hand\n1 1\n255\n", &[9])).unwrap();
        assert_eq!(img.pixels(), &[9]);
        assert!(load_pgm(b"P5 x 1 255\n\0").is_err());
        assert!(load_pgm(b"P").is_err());
    }

    #[test]
    fn write_then_read() {
        let img = GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 250]).unwrap();
        assert_eq!(load_pgm(&write_pgm(&img)).unwrap(), img);
    }
}
