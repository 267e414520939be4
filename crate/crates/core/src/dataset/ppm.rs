//! Binary PPM (P6, maxval 255) images and their conversion to tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: fill.repeat(width * height),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if bytes.get(..2) != Some(b"P6") {
            return Err(format_err(0, "bad magic, expected P6"));
        }
        pos += 2;
        let width = header_number(bytes, &mut pos, "width")?;
        let height = header_number(bytes, &mut pos, "height")?;
        let maxval = header_number(bytes, &mut pos, "maxval")?;
        if maxval != 255 {
            return Err(format_err(pos, &format!("unsupported maxval {maxval}, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(format_err(pos, "zero image dimension"));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(format_err(pos, "missing whitespace after maxval")),
        }
        let need = 3 * width * height;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(format_err(
                pos + raster.len(),
                &format!("truncated raster: {} of {need} bytes", raster.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: raster[..need].to_vec(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    /// Nearest-neighbour resample: target pixel `(x, y)` reads source
    /// `(x·W/w, y·H/h)`.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut out = Self::new(width, height, [0; 3]);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                out.put(x, y, self.get(x * self.width / width, sy));
            }
        }
        out
    }

    /// `[3, H, W]` tensor with values `v / 127.5 − 1`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut data = vec![0f32; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("raster shape")
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and clamping to `[0, 255]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid(format!("expected [3, H, W] image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let mut img = Self::new(w, h, [0; 3]);
        for i in 0..plane {
            for c in 0..3 {
                img.pixels[3 * i + c] = to_byte(t.data()[c * plane + i]);
            }
        }
        Ok(img)
    }
}

fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn format_err(offset: usize, reason: &str) -> Error {
    Error::Format {
        what: "PPM image",
        offset: offset as u64,
        reason: reason.to_owned(),
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    // whitespace and `#` comments may precede each field
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(start, &format!("missing {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(start, &format!("invalid {what}")))
}

/// Read a PPM file as a `[3, size, size]` tensor in `[−1, 1]`.
pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Tensor<f32>> {
    Ok(RgbImage::load(path)?.resize_nearest(size, size).to_tensor())
}

/// Tile `rows` of equally sized `[3, S, S]` images on a black background
/// with `gutter` pixels around and between cells.
pub fn image_grid(rows: &[Vec<Tensor<f32>>], gutter: usize) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("empty image grid"))?;
    let (cell_h, cell_w) = (first.shape()[1], first.shape()[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * cell_w + (cols + 1) * gutter;
    let height = rows.len() * cell_h + (rows.len() + 1) * gutter;
    let mut grid = RgbImage::new(width, height, [0; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.shape() != first.shape() {
                return Err(Error::shape("image_grid", first.shape(), img.shape()));
            }
            let tile = RgbImage::from_tensor(img)?;
            let (x0, y0) = (gutter + c * (cell_w + gutter), gutter + r * (cell_h + gutter));
            for y in 0..cell_h {
                for x in 0..cell_w {
                    grid.put(x0 + x, y0 + y, tile.get(x, y));
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_map_to_unit_range() {
        let mut img = RgbImage::new(2, 1, [0; 3]);
        img.put(1, 0, [255; 3]);
        let t = img.to_tensor();
        assert_eq!(t.data(), &[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn mid_gray_pixel() {
        let bytes = b"P6\n1 1\n255\n\x7f\x7f\x7f";
        let t = RgbImage::parse(bytes).unwrap().to_tensor();
        for &v in t.data() {
            assert!((v - (127.0 / 127.5 - 1.0)).abs() < 1e-7);
            assert!((v + 0.0039).abs() < 1e-4);
        }
    }

    #[test]
    fn downsample_by_two_takes_even_pixels() {
        let mut img = RgbImage::new(64, 64, [0; 3]);
        for y in 0..64 {
            for x in 0..64 {
                img.put(x, y, [x as u8, y as u8, (x * y % 251) as u8]);
            }
        }
        let small = img.resize_nearest(32, 32);
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(small.get(j, i), img.get(2 * j, 2 * i));
            }
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(RgbImage::parse(b"P3\n1 1\n255\n\0\0\0"), Err(Error::Format { .. })));
        assert!(RgbImage::parse(b"P6\n1 1\n65535\n\0\0\0").is_err());
        assert!(RgbImage::parse(b"P6\n2 2\n255\n\0\0\0").is_err());
        let with_comment = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03";
        assert_eq!(RgbImage::parse(with_comment).unwrap().get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::new(3, 2, [10, 20, 30]);
        img.put(2, 1, [255, 0, 7]);
        assert_eq!(RgbImage::parse(&img.to_ppm()).unwrap(), img);
        assert_eq!(RgbImage::from_tensor(&img.to_tensor()).unwrap(), img);
    }

    #[test]
    fn grid_layout() {
        let cell = Tensor::<f32>::ones(&[3, 32, 32]);
        let rows = vec![vec![cell.clone(); 4]; 2];
        let g = image_grid(&rows, 2).unwrap();
        assert_eq!((g.width, g.height), (138, 70));
        assert_eq!(g.get(0, 0), [0; 3]);
        assert_eq!(g.get(2, 2), [255; 3]);
        assert_eq!(g.get(34, 2), [0; 3]);
    }
}
