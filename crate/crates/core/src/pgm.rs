//! 8-bit binary PGM (`P5`) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape("GrayImage::new", width * height, pixels.len()));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(start as u64, "truncated PGM header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(Error::format(0, "not a binary PGM (P5) file"));
        }
        let num = |s: String| s.parse::<usize>().map_err(|_| Error::format(0, format!("bad PGM header field {s:?}")));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::format(0, format!("unsupported PGM maxval {maxval}")));
        }
        let data_start = pos + 1;
        let n = width * height;
        if bytes.len() < data_start + n {
            return Err(Error::format(bytes.len() as u64, "truncated PGM pixel data"));
        }
        let pixels = bytes[data_start..data_start + n].iter().map(|&b| b as f64 / maxval as f64).collect();
        Ok(GrayImage { width, height, pixels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_8_bits() {
        let img = GrayImage::new(3, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        let back = GrayImage::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_ascii_pgm() {
        assert!(GrayImage::from_bytes(b"P2\n1 1\n255\n0\n").is_err());
    }
}
