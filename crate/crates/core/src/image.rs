//! 8-bit RGB rasters and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major, pixel-interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(invalid(format!(
                "{}x{} RGB image needs {} samples, got {}",
                width,
                height,
                width * height * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * CHANNELS] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * CHANNELS;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbour resize; output samples are a subset of input samples.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(invalid("cannot resize to or from an empty image"));
        }
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                out.set_pixel(x, y, self.pixel(sx, sy));
            }
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let total: u64 = self.data.iter().zip(&other.data).map(|(&a, &b)| a.abs_diff(b) as u64).sum();
        total as f64 / self.data.len() as f64
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = ppm_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::Parse("not a binary PPM (expected P6)".into()));
        }
        let width = ppm_number(bytes, &mut pos)?;
        let height = ppm_number(bytes, &mut pos)?;
        let maxval = ppm_number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::Parse(format!("unsupported PPM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Parse("truncated PPM header".into()));
        }
        pos += 1;
        let len = width * height * CHANNELS;
        let raster = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Parse(format!("PPM raster truncated: need {len} bytes")))?;
        Self::new(width, height, raster.to_vec())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_ppm(&bytes).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad PPM header field {:?}", String::from_utf8_lossy(tok))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let data: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = RasterImage::new(5, 3, data).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(RasterImage::from_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = RasterImage::from_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1, 2, 3]);
    }

    #[test]
    fn ppm_rejects_bad_input() {
        assert!(RasterImage::from_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(RasterImage::from_ppm(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(RasterImage::from_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(RasterImage::from_ppm(b"").is_err());
    }

    #[test]
    fn nearest_resize_keeps_sample_values() {
        let img = RasterImage::new(2, 1, vec![10, 20, 30, 40, 50, 60]).unwrap();
        let big = img.resize_nearest(4, 2).unwrap();
        assert_eq!(big.pixel(0, 0), [10, 20, 30]);
        assert_eq!(big.pixel(1, 1), [10, 20, 30]);
        assert_eq!(big.pixel(2, 0), [40, 50, 60]);
        assert_eq!(big.pixel(3, 1), [40, 50, 60]);
    }
}
