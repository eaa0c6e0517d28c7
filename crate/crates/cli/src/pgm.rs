//! Binary greyscale PGM (`P5`) images and tile grids.

use std::fs;
use std::path::Path;

use crate::error::CliError;

pub const GUTTER: usize = 2;
pub const GUTTER_VALUE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    /// Reads a `P5` image with maxval 255; comments are not supported.
    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes.get(pos)?.is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes.get(pos)?.is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "255" {
            return None;
        }
        let width: usize = fields[1].parse().ok()?;
        let height: usize = fields[2].parse().ok()?;
        let pixels = bytes.get(pos..)?.to_vec();
        (pixels.len() == width * height).then_some(Self { width, height, pixels })
    }
}

/// Fixed affine map of `[lo, hi]` onto `0..=255`, clamped.
pub fn map_fixed(v: f64, lo: f64, hi: f64) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stretches the tile's own range onto `0..=255`; a constant tile is mid grey.
pub fn map_minmax(vals: &[f64]) -> Vec<u8> {
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; vals.len()];
    }
    vals.iter().map(|&v| map_fixed(v, lo, hi)).collect()
}

/// `rows x cols` tiles of `tile_w x tile_h` pixels, separated and framed by
/// gutters.
#[derive(Debug, Clone)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub tile_w: usize,
    pub tile_h: usize,
    pub image: Gray,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, tile_w: usize, tile_h: usize) -> Self {
        let width = cols * tile_w + (cols + 1) * GUTTER;
        let height = rows * tile_h + (rows + 1) * GUTTER;
        Self {
            rows,
            cols,
            tile_w,
            tile_h,
            image: Gray::filled(width, height, GUTTER_VALUE),
        }
    }

    /// Top-left pixel of tile `(r, c)`.
    pub fn origin(&self, r: usize, c: usize) -> (usize, usize) {
        (GUTTER + c * (self.tile_w + GUTTER), GUTTER + r * (self.tile_h + GUTTER))
    }

    pub fn put(&mut self, r: usize, c: usize, tile: &[u8]) {
        assert_eq!(tile.len(), self.tile_w * self.tile_h, "tile size");
        let (x0, y0) = self.origin(r, c);
        let w = self.image.width;
        for (ty, line) in tile.chunks_exact(self.tile_w).enumerate() {
            let start = (y0 + ty) * w + x0;
            self.image.pixels[start..start + self.tile_w].copy_from_slice(line);
        }
    }
}

/// Tile shape for `n` pixels: square when `n` is a perfect square, one row
/// otherwise.
pub fn tile_shape(n: usize) -> (usize, usize) {
    let s = (n as f64).sqrt().round() as usize;
    if s * s == n {
        (s, s)
    } else {
        (n, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry() {
        let mut g = Grid::new(2, 3, 4, 4);
        assert_eq!((g.image.width, g.image.height), (3 * 4 + 4 * 2, 2 * 4 + 3 * 2));
        g.put(1, 2, &[7; 16]);
        let (x, y) = g.origin(1, 2);
        assert_eq!(g.image.get(x, y), 7);
        assert_eq!(g.image.get(x + 3, y + 3), 7);
        assert_eq!(g.image.get(x - 1, y), GUTTER_VALUE);
        assert_eq!(g.image.get(x + 4, y), GUTTER_VALUE);
    }

    #[test]
    fn encode_decode() {
        let g = Gray {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 20, 30, 40, 255],
        };
        let bytes = g.encode();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(Gray::decode(&bytes), Some(g));
        assert_eq!(Gray::decode(b"P2\n1 1\n255\n\x00"), None);
    }

    #[test]
    fn mappings() {
        assert_eq!(map_fixed(-0.5, -0.5, 0.5), 0);
        assert_eq!(map_fixed(0.5, -0.5, 0.5), 255);
        assert_eq!(map_fixed(9.0, -0.5, 0.5), 255);
        assert_eq!(map_minmax(&[1.0, 1.0]), vec![128, 128]);
        assert_eq!(map_minmax(&[2.0, 4.0, 3.0]), vec![0, 255, 128]);
        assert_eq!(tile_shape(784), (28, 28));
        assert_eq!(tile_shape(6), (6, 1));
    }
}
