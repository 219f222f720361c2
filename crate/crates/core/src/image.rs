//! 8-bit grayscale images and the binary PGM container.

use thiserror::Error;

/// Comment line that marks a PGM as ciphertext.
pub const ENCRYPTED_MARKER: &str = "# MIPP-ENC";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("PGM: {0}")]
    Pgm(String),
}

/// Row-major grayscale raster: `height` rows (M) of `width` pixels (N).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        let expected = width
            .checked_mul(height)
            .ok_or(ImageError::EmptyDimensions { width, height })?;
        if pixels.len() != expected {
            return Err(ImageError::PixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    /// Integer luma conversion (ITU-R BT.601 weights) from packed RGB.
    pub fn from_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Self, ImageError> {
        if rgb.len() != width * height * 3 {
            return Err(ImageError::PixelCount {
                expected: width * height * 3,
                actual: rgb.len(),
            });
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|c| {
                let y = 299 * u32::from(c[0]) + 587 * u32::from(c[1]) + 114 * u32::from(c[2]);
                ((y + 500) / 1000) as u8
            })
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub(crate) fn with_pixels(&self, pixels: Vec<u8>) -> GrayImage {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

/// Serializes to binary PGM (`P5`, maxval 255).
pub fn write_pgm(img: &GrayImage, encrypted: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixel_count() + 32);
    out.extend_from_slice(b"P5\n");
    if encrypted {
        out.extend_from_slice(ENCRYPTED_MARKER.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(format!("{} {}\n255\n", img.width(), img.height()).as_bytes());
    out.extend_from_slice(img.pixels());
    out
}

/// A decoded PGM and whether it carried the ciphertext marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmFile {
    pub image: GrayImage,
    pub encrypted: bool,
}

pub fn read_pgm(bytes: &[u8]) -> Result<PgmFile, ImageError> {
    let err = |m: &str| ImageError::Pgm(m.to_string());
    let mut pos = 0;
    let mut encrypted = false;
    let mut tokens: Vec<usize> = Vec::with_capacity(3);

    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err("missing P5 magic"));
    }
    pos += 2;
    while tokens.len() < 3 {
        match bytes.get(pos) {
            None => return Err(err("truncated header")),
            Some(b'#') => {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map(|e| pos + e)
                    .ok_or_else(|| err("unterminated comment"))?;
                let comment = std::str::from_utf8(&bytes[pos..end]).unwrap_or("");
                if comment.trim_end() == ENCRYPTED_MARKER {
                    encrypted = true;
                }
                pos = end + 1;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = pos;
                while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                    pos += 1;
                }
                let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
                tokens.push(text.parse().map_err(|_| err("header number out of range"))?);
            }
            Some(_) => return Err(err("unexpected byte in header")),
        }
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err("missing separator after maxval")),
    }
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| err("dimensions overflow"))?;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() >= count)
        .ok_or_else(|| err("truncated raster"))?;
    let image = GrayImage::new(width, height, raster[..count].to_vec())?;
    Ok(PgmFile { image, encrypted })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_plain_and_encrypted() {
        let img = GrayImage::from_fn(5, 3, |x, y| (x * 40 + y) as u8).unwrap();
        for enc in [false, true] {
            let bytes = write_pgm(&img, enc);
            let back = read_pgm(&bytes).unwrap();
            assert_eq!(back.image, img);
            assert_eq!(back.encrypted, enc);
        }
        let text = String::from_utf8_lossy(&write_pgm(&img, true)).to_string();
        assert!(text.starts_with("P5\n# MIPP-ENC\n5 3\n255\n"));
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(read_pgm(b"P6\n1 1\n255\n\0").is_err());
        assert!(read_pgm(b"P5\n2 2\n255\n\0\0").is_err());
        assert!(read_pgm(b"P5\n2 2\n65535\n\0\0\0\0").is_err());
        assert!(read_pgm(b"P5\n0 2\n255\n").is_err());
        assert!(read_pgm(b"P5").is_err());
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n# second\n255\n\x01\x02";
        let f = read_pgm(bytes).unwrap();
        assert_eq!(f.image.pixels(), &[1, 2]);
        assert!(!f.encrypted);
    }

    #[test]
    fn dimension_checks() {
        assert!(GrayImage::new(0, 3, vec![]).is_err());
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn luma_of_primaries() {
        let img = GrayImage::from_rgb(3, 1, &[255, 0, 0, 0, 255, 0, 255, 255, 255]).unwrap();
        assert_eq!(img.pixels(), &[76, 150, 255]);
    }
}
