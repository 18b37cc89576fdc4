use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Pixel normalization applied before the network: `(p/255 − 0.5)/0.25`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(invalid!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Pixel with coordinates clamped to the border.
    pub fn get_clamped(&self, x: i64, y: i64) -> u8 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.get(x, y)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + width]);
        }
        Self { width, height, pixels }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Binary P5 with maxval 255. Header comments are allowed; errors
    /// report the header line.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut line = 1usize;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                if bytes[pos] == b'\n' {
                    line += 1;
                }
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse(line, "truncated PGM header"));
            }
            tokens.push((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), line));
        }
        let (magic, l) = &tokens[0];
        if magic != "P5" {
            return Err(Error::parse(*l, format!("expected magic P5, got {magic:?}")));
        }
        let num = |i: usize, what: &str| -> Result<usize> {
            let (t, l) = &tokens[i];
            t.parse::<usize>()
                .ok()
                .filter(|v| *v > 0)
                .ok_or_else(|| Error::parse(*l, format!("bad {what} {t:?}")))
        };
        let (width, height, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
        if maxval != 255 {
            return Err(Error::parse(tokens[3].1, format!("maxval must be 255, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::parse(tokens[3].1, "missing raster"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != width * height {
            return Err(Error::parse(
                tokens[3].1,
                format!("expected {} raster bytes, found {}", width * height, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: data.to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_pgm(&bytes)
    }
}

/// Stacks equally sized images into a normalized `[N, 1, H, W]` batch.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid!("empty image batch"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(invalid!("batch mixes {}x{} and {w}x{h} images", img.width, img.height));
        }
        data.extend(img.pixels.iter().map(|&p| (p as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_comments() {
        let img = GrayImage::new(3, 2, vec![0, 10, 255, 7, 8, 9]).unwrap();
        assert_eq!(GrayImage::from_pgm(&img.to_pgm()).unwrap(), img);
        let mut with_comment = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        with_comment.extend_from_slice(&img.pixels);
        assert_eq!(GrayImage::from_pgm(&with_comment).unwrap(), img);
    }

    #[test]
    fn malformed_headers_report_lines() {
        assert!(matches!(GrayImage::from_pgm(b"P2\n1 1\n255\n\x00"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(GrayImage::from_pgm(b"P5\n1 x\n255\n\x00"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(GrayImage::from_pgm(b"P5\n1 1\n65535\n\x00"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(GrayImage::from_pgm(b"P5\n2 2\n255\n\x00"), Err(Error::Parse { line: 3, .. })));
        assert!(GrayImage::from_pgm(b"P5\n2").is_err());
    }

    #[test]
    fn normalization() {
        let img = GrayImage::new(2, 1, vec![0, 255]).unwrap();
        let t = images_to_tensor(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 1, 2]);
        assert_eq!(t.data(), &[-2.0, 2.0, -2.0, 2.0]);
    }
}
