//! 8-bit RGB images with PPM (P6) serialization and the grayscale probe
//! used by the pixel-difference features.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        RgbImage { width, height, data: vec![0; (width * height * 3) as usize] }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Grayscale intensity (r+g+b)/3 at the nearest pixel, clamped to the
    /// image border. This is the probe used by intensity-difference features.
    pub fn gray_at(&self, x: f64, y: f64) -> f64 {
        let xi = (x.round().max(0.0) as i64).min(self.width as i64 - 1) as u32;
        let yi = (y.round().max(0.0) as i64).min(self.height as i64 - 1) as u32;
        let [r, g, b] = self.pixel(xi, yi);
        (r as f64 + g as f64 + b as f64) / 3.0
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(file, "P6\n{} {}\n255\n", self.width, self.height)?;
        file.write_all(&self.data)?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (magic, rest) = parse_token(&bytes)?;
        if magic != b"P6" {
            return Err(Error::Format("ppm: expected magic P6".into()));
        }
        let (w, rest) = parse_number(rest)?;
        let (h, rest) = parse_number(rest)?;
        let (maxval, rest) = parse_number(rest)?;
        if maxval != 255 {
            return Err(Error::Format(format!("ppm: unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let rest = &rest[1..];
        let n = (w * h * 3) as usize;
        if rest.len() < n {
            return Err(Error::Format("ppm: truncated pixel data".into()));
        }
        Ok(RgbImage { width: w, height: h, data: rest[..n].to_vec() })
    }
}

/// Skips whitespace and `#` comments, returns the next token and the rest
/// starting at the delimiter after it.
fn parse_token(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let mut i = 0;
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        break;
    }
    let start = i;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    if start == i {
        return Err(Error::Format("pnm: unexpected end of header".into()));
    }
    Ok((&bytes[start..i], &bytes[i..]))
}

fn parse_number(bytes: &[u8]) -> Result<(u32, &[u8])> {
    let (tok, rest) = parse_token(bytes)?;
    let s = std::str::from_utf8(tok).map_err(|_| Error::Format("pnm: bad header".into()))?;
    let v = s.parse::<u32>().map_err(|_| Error::Format(format!("pnm: bad number {s:?}")))?;
    Ok((v, rest))
}

pub(crate) use parse_number as pnm_parse_number;
pub(crate) use parse_token as pnm_parse_token;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_clamps_to_border() {
        let mut img = RgbImage::new(4, 3);
        img.set_pixel(0, 0, [30, 30, 30]);
        img.set_pixel(3, 2, [90, 120, 150]);
        assert_eq!(img.gray_at(-100.0, -100.0), 30.0);
        assert_eq!(img.gray_at(1e6, 1e6), 120.0);
    }

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = RgbImage::new(7, 5);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 37 % 256) as u8;
        }
        img.save_ppm(&path).unwrap();
        let back = RgbImage::load_ppm(&path).unwrap();
        assert_eq!(img, back);
        let bytes1 = std::fs::read(&path).unwrap();
        back.save_ppm(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }
}
