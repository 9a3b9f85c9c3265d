//! Single-channel raster images and PGM persistence.
//!
//! All pipeline stages exchange `GrayImage`: row-major f32 intensities in
//! [0,1]. Continuous coordinates put pixel (row `i`, col `j`) at the point
//! (x = j, y = i).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    Dimension {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("pixel buffer length {len} does not match {h}x{w}")]
    BufferLength { len: usize, h: usize, w: usize },
    #[error("not a binary PGM (P5) file: {0}")]
    BadPgm(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Grayscale raster, row-major, intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BufferLength {
                len: data.len(),
                h: height,
                w: width,
            });
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// True when every intensity is finite and inside [0,1].
    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Bilinear sample with coordinates clamped to the image rectangle.
    pub fn sample_clamped(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        self.bilinear(x, y)
    }

    /// Bilinear sample; returns `fill` for points outside the pixel grid.
    pub fn sample_or(&self, x: f32, y: f32, fill: f32) -> f32 {
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f32 || y > (self.height - 1) as f32 {
            fill
        } else {
            self.bilinear(x, y)
        }
    }

    fn bilinear(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let v00 = self.get(y0, x0);
        let v01 = self.get(y0, x1);
        let v10 = self.get(y1, x0);
        let v11 = self.get(y1, x1);
        let top = v00 + (v01 - v00) * fx;
        let bot = v10 + (v11 - v10) * fx;
        top + (bot - top) * fy
    }

    /// Column-reversed copy, same dimensions.
    pub fn flip_horizontal(&self) -> GrayImage {
        GrayImage::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    /// Bilinear resample to a new size (pixel-center aligned).
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> GrayImage {
        if new_height == self.height && new_width == self.width {
            return self.clone();
        }
        let sx = self.width as f32 / new_width as f32;
        let sy = self.height as f32 / new_height as f32;
        GrayImage::from_fn(new_height, new_width, |y, x| {
            let src_x = (x as f32 + 0.5) * sx - 0.5;
            let src_y = (y as f32 + 0.5) * sy - 0.5;
            self.sample_clamped(src_x, src_y)
        })
    }

    /// Write as 8-bit binary PGM (P5); intensities quantized by round(v*255).
    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let io_err = |source| ImageError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height).map_err(io_err)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes).map_err(io_err)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<GrayImage, ImageError> {
        let io_err = |source| ImageError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(io_err)?;
        parse_pgm(&raw, path)
    }
}

fn parse_pgm(raw: &[u8], path: &Path) -> Result<GrayImage, ImageError> {
    let bad = |msg: &str| ImageError::BadPgm(format!("{}: {}", path.display(), msg));
    if raw.len() < 2 || &raw[0..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    // Header tokens: width, height, maxval. '#' starts a comment to end of line.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < raw.len() {
            let b = raw[pos];
            if b == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&raw[start..pos]).unwrap();
        *field = text.parse().map_err(|_| bad("bad header field"))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if raw.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let data = raw[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    GrayImage::from_vec(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_involution() {
        let img = GrayImage::from_fn(5, 7, |y, x| (y * 7 + x) as f32 / 35.0);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn flip_moves_first_column_last() {
        let img = GrayImage::from_fn(3, 4, |y, x| (y * 4 + x) as f32 / 12.0);
        let flipped = img.flip_horizontal();
        for y in 0..3 {
            assert_eq!(flipped.get(y, 0), img.get(y, 3));
        }
    }

    #[test]
    fn flip_fixes_symmetric_image() {
        let img = GrayImage::from_fn(4, 5, |_, x| {
            let c = (x as f32 - 2.0).abs();
            c / 2.0
        });
        assert_eq!(img.flip_horizontal(), img);
    }

    #[test]
    fn bilinear_at_pixel_centers_is_exact() {
        let img = GrayImage::from_fn(4, 4, |y, x| (y * 4 + x) as f32 / 16.0);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(img.sample_clamped(x as f32, y as f32), img.get(y, x));
            }
        }
    }

    #[test]
    fn bilinear_midpoint() {
        let img = GrayImage::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((img.sample_clamped(0.5, 0.5) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pgm_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = GrayImage::from_fn(6, 9, |y, x| ((y * 9 + x) % 256) as f32 / 255.0);
        img.write_pgm(&path).unwrap();
        let back = GrayImage::read_pgm(&path).unwrap();
        assert_eq!(back.height(), 6);
        assert_eq!(back.width(), 9);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\n0000").unwrap();
        assert!(matches!(
            GrayImage::read_pgm(&path),
            Err(ImageError::BadPgm(_))
        ));
    }
}
