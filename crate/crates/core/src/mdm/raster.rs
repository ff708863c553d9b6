//! Raw raster images: a 12-byte header of little-endian `u32` width, height
//! and channel count, followed by `width * height * channels` bytes in
//! row-major, channel-interleaved order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const HEADER: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: &[u8]) {
        let base = (y * self.width + x) * self.channels;
        for c in 0..self.channels {
            self.pixels[base + c] = rgb[c % rgb.len()];
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.pixels.len());
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::InvalidArgument("raster file shorter than its header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (width, height, channels) = (field(0), field(1), field(2));
        if width == 0 || height == 0 || !(1..=4).contains(&channels) {
            return Err(Error::InvalidArgument(format!(
                "bad raster header {width}x{height}x{channels}"
            )));
        }
        let expected = width * height * channels;
        if bytes.len() - HEADER != expected {
            return Err(Error::InvalidArgument(format!(
                "raster payload has {} bytes, header implies {expected}",
                bytes.len() - HEADER
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels: bytes[HEADER..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = self.get(self.width - 1 - x, y, c);
                    out.pixels[(y * self.width + x) * self.channels + c] = v;
                }
            }
        }
        out
    }

    /// Non-overlapping `patch×patch` tiles in raster order, each flattened as
    /// `(row, col, channel)` and mapped to `pixel/255 - 0.5`.
    pub fn patches<T: Scalar>(&self, patch: usize, channels: usize) -> Result<Tensor<T>> {
        if patch == 0 || self.width % patch != 0 || self.height % patch != 0 || self.channels != channels {
            return Err(Error::InvalidArgument(format!(
                "image {}x{}x{} cannot be cut into {patch}x{patch}x{channels} patches",
                self.width, self.height, self.channels
            )));
        }
        let (gr, gc) = (self.height / patch, self.width / patch);
        let dim = patch * patch * channels;
        let mut data = Vec::with_capacity(gr * gc * dim);
        for py in 0..gr {
            for px in 0..gc {
                for y in 0..patch {
                    for x in 0..patch {
                        for c in 0..channels {
                            let v = self.get(px * patch + x, py * patch + y, c);
                            data.push(T::lit(v as f64 / 255.0 - 0.5));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![gr * gc, dim], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut img = RasterImage::new(4, 2, 3);
        img.set(1, 1, &[10, 20, 30]);
        assert_eq!(RasterImage::from_bytes(&img.to_bytes()).unwrap(), img);
        assert!(RasterImage::from_bytes(&img.to_bytes()[..20]).is_err());
    }

    #[test]
    fn patches_are_tiled_in_raster_order() {
        let mut img = RasterImage::new(4, 4, 1);
        img.set(2, 0, &[255]);
        let p = img.patches::<f64>(2, 1).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(1)[0], 0.5);
        assert_eq!(p.row(0)[0], -0.5);
    }
}
