//! Binary PPM (P6) and PGM (P5) codecs.
//!
//! Images are 3-channel 8-bit, masks single-channel `{0, 255}`, prior
//! visualizations single-channel grayscale. Write→read round trips are
//! bit-exact; malformed input reports the byte offset of the problem.

use std::fs;
use std::path::Path;

use pfenet_core::episodes::{BitMask, RgbImage};

use crate::error::{CliError, Result};

struct Parser<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Parser<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(CliError::Format {
            path: self.path.to_path_buf(),
            offset: self.offset,
            message: message.into(),
        })
    }

    fn byte(&mut self) -> Result<u8> {
        match self.bytes.get(self.offset) {
            Some(&b) => {
                self.offset += 1;
                Ok(b)
            }
            None => self.fail("unexpected end of file"),
        }
    }

    fn magic(&mut self, expected: &[u8; 2]) -> Result<()> {
        let m0 = self.byte()?;
        let m1 = self.byte()?;
        if [m0, m1] != *expected {
            self.offset -= 2;
            return self.fail(format!(
                "bad magic: expected {}",
                String::from_utf8_lossy(expected)
            ));
        }
        Ok(())
    }

    /// Skips whitespace and `#` comments, then reads a decimal integer.
    fn number(&mut self) -> Result<usize> {
        loop {
            match self.bytes.get(self.offset) {
                Some(b) if b.is_ascii_whitespace() => self.offset += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.offset) {
                        self.offset += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.offset;
        while let Some(b) = self.bytes.get(self.offset) {
            if b.is_ascii_digit() {
                self.offset += 1;
            } else {
                break;
            }
        }
        if start == self.offset {
            return self.fail("expected a decimal number");
        }
        std::str::from_utf8(&self.bytes[start..self.offset])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.fail("number out of range"), Ok)
    }

    /// One whitespace byte separates the header from raw data.
    fn raw_data(&mut self, len: usize) -> Result<&'a [u8]> {
        let sep = self.byte()?;
        if !sep.is_ascii_whitespace() {
            self.offset -= 1;
            return self.fail("expected whitespace before raw data");
        }
        if self.bytes.len() < self.offset + len {
            self.offset = self.bytes.len();
            return self.fail(format!(
                "truncated data: expected {len} bytes, found {}",
                self.bytes.len() - self.offset
            ));
        }
        let data = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(data)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn parse_header<'a>(parser: &mut Parser<'a>, magic: &[u8; 2]) -> Result<(usize, usize)> {
    parser.magic(magic)?;
    let width = parser.number()?;
    let height = parser.number()?;
    let maxval = parser.number()?;
    if maxval != 255 {
        return parser.fail(format!("unsupported maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return parser.fail("zero image dimension");
    }
    Ok((width, height))
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = read_file(path)?;
    let mut parser = Parser {
        bytes: &bytes,
        offset: 0,
        path,
    };
    let (width, height) = parse_header(&mut parser, b"P6")?;
    let data = parser.raw_data(width * height * 3)?.to_vec();
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

pub fn write_mask_pgm(path: &Path, mask: &BitMask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn read_mask_pgm(path: &Path) -> Result<BitMask> {
    let bytes = read_file(path)?;
    let mut parser = Parser {
        bytes: &bytes,
        offset: 0,
        path,
    };
    let (width, height) = parse_header(&mut parser, b"P5")?;
    let raw = parser.raw_data(width * height)?;
    let mut data = Vec::with_capacity(raw.len());
    for (i, &v) in raw.iter().enumerate() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                parser.offset = parser.offset - raw.len() + i;
                return parser.fail(format!("mask value {other} is neither 0 nor 255"));
            }
        }
    }
    Ok(BitMask {
        width,
        height,
        data,
    })
}

/// Grayscale PGM of values in `[0, 1]`, quantized as `round(255·v)`.
pub fn write_gray_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (255.0 * v).round() as u8));
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn read_gray_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = read_file(path)?;
    let mut parser = Parser {
        bytes: &bytes,
        offset: 0,
        path,
    };
    let (width, height) = parse_header(&mut parser, b"P5")?;
    let data = parser.raw_data(width * height)?.to_vec();
    Ok((data, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pfenet-pnm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut img = RgbImage::new(7, 5);
        for v in img.data.iter_mut() {
            *v = rng.gen();
        }
        let path = tmp("roundtrip.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, img);
        // writing again produces identical bytes
        let first = std::fs::read(&path).unwrap();
        write_ppm(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn mask_roundtrip_and_strict_values() {
        let mut mask = BitMask::new(4, 3);
        mask.data[5] = 1;
        mask.data[11] = 1;
        let path = tmp("mask.pgm");
        write_mask_pgm(&path, &mask).unwrap();
        assert_eq!(read_mask_pgm(&path).unwrap(), mask);

        // a 128 byte in the payload is rejected with its offset
        let mut bytes = std::fs::read(&path).unwrap();
        let len = bytes.len();
        bytes[len - 1] = 128;
        std::fs::write(&path, bytes).unwrap();
        match read_mask_pgm(&path).unwrap_err() {
            CliError::Format { offset, .. } => assert_eq!(offset, len - 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let path = tmp("trunc.ppm");
        let img = RgbImage::new(4, 4);
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_ppm(&path).unwrap_err(),
            CliError::Format { .. }
        ));
    }

    #[test]
    fn bad_magic_and_comments() {
        let path = tmp("comment.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 2\n255\n\x00\xff\xff\x00").unwrap();
        let mask = read_mask_pgm(&path).unwrap();
        assert_eq!(mask.data, vec![0, 1, 1, 0]);

        std::fs::write(&path, b"P4\n2 2\n255\n\x00\xff\xff\x00").unwrap();
        assert!(matches!(
            read_mask_pgm(&path).unwrap_err(),
            CliError::Format { offset: 0, .. }
        ));
    }

    #[test]
    fn gray_pgm_quantizes_by_rounding() {
        let path = tmp("gray.pgm");
        write_gray_pgm(&path, &[0.0, 0.25, 0.5, 1.0], 2, 2).unwrap();
        let (data, w, h) = read_gray_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(data, vec![0, 64, 128, 255]);
    }
}
