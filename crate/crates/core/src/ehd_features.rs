//! Edge histogram descriptor (EHD) extraction.
//!
//! The image is split into a 4x4 grid of sub-images. Every 2x2-pixel block
//! inside a sub-image is run through five directional filters and counted
//! under the filter with the strongest response, provided that response
//! exceeds the edge threshold. Counts are quantized to `[0, 255]` so each
//! bin is a valid plaintext for the secure-sum encryption.

use std::fmt;
use std::ops::Deref;

use thiserror::Error;

use crate::image::GrayImage;

/// Number of edge categories per sub-image.
pub const EDGE_TYPES: usize = 5;
/// Descriptor length for the default 4x4 grid.
pub const DEFAULT_DIM: usize = 80;
/// Largest bin value after quantization.
pub const MAX_BIN: u32 = 255;

const EHD_HEADER: &str = "MIPP-EHD-1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureError {
    #[error("image is {width}x{height}; at least {min}x{min} is required")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("feature bin {value} at index {index} exceeds {MAX_BIN}")]
    BinOutOfRange { index: usize, value: u32 },
    #[error("feature vector is empty")]
    Empty,
    #[error("invalid EHD configuration: {0}")]
    Config(String),
    #[error("EHD file: {0}")]
    Format(String),
}

/// The five edge categories, in bin order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeType {
    Vertical = 0,
    Horizontal = 1,
    Diagonal45 = 2,
    Diagonal135 = 3,
    NonDirectional = 4,
}

impl EdgeType {
    pub const ALL: [EdgeType; EDGE_TYPES] = [
        EdgeType::Vertical,
        EdgeType::Horizontal,
        EdgeType::Diagonal45,
        EdgeType::Diagonal135,
        EdgeType::NonDirectional,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EhdConfig {
    /// Sub-images per side.
    pub grid: usize,
    /// Block side in pixels; the filters operate on 2x2 blocks.
    pub block: usize,
    pub edge_threshold: f64,
}

impl Default for EhdConfig {
    fn default() -> Self {
        EhdConfig {
            grid: 4,
            block: 2,
            edge_threshold: 11.0,
        }
    }
}

impl EhdConfig {
    pub fn dim(&self) -> usize {
        self.grid * self.grid * EDGE_TYPES
    }

    pub fn min_side(&self) -> usize {
        self.grid * self.block
    }
}

/// Quantized descriptor `a_1..a_l`, each bin in `[0, 255]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureVector(Vec<u32>);

impl FeatureVector {
    pub fn new(bins: Vec<u32>) -> Result<Self, FeatureError> {
        if bins.is_empty() {
            return Err(FeatureError::Empty);
        }
        if let Some((index, &value)) = bins.iter().enumerate().find(|(_, &v)| v > MAX_BIN) {
            return Err(FeatureError::BinOutOfRange { index, value });
        }
        Ok(FeatureVector(bins))
    }

    pub fn bins(&self) -> &[u32] {
        &self.0
    }

    pub fn as_u64(&self) -> Vec<u64> {
        self.0.iter().map(|&v| u64::from(v)).collect()
    }
}

impl Deref for FeatureVector {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Elementwise squares of a [`FeatureVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquaredFeature(Vec<u32>);

impl SquaredFeature {
    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn as_u64(&self) -> Vec<u64> {
        self.0.iter().map(|&v| u64::from(v)).collect()
    }
}

pub fn square_feature(f: &FeatureVector) -> SquaredFeature {
    SquaredFeature(f.iter().map(|&a| a * a).collect())
}

/// Extracts the descriptor with the given configuration.
pub fn extract_ehd(img: &GrayImage, cfg: &EhdConfig) -> Result<FeatureVector, FeatureError> {
    if cfg.grid == 0 {
        return Err(FeatureError::Config("grid must be positive".into()));
    }
    if cfg.block != 2 {
        return Err(FeatureError::Config("only 2x2 blocks are supported".into()));
    }
    let min = cfg.min_side();
    if img.width() < min || img.height() < min {
        return Err(FeatureError::TooSmall {
            width: img.width(),
            height: img.height(),
            min,
        });
    }

    let mut bins = Vec::with_capacity(cfg.dim());
    for sy in 0..cfg.grid {
        let (y0, y1) = span(img.height(), cfg.grid, sy);
        for sx in 0..cfg.grid {
            let (x0, x1) = span(img.width(), cfg.grid, sx);
            let mut counts = [0u32; EDGE_TYPES];
            let mut blocks = 0u32;
            let mut y = y0;
            while y + cfg.block <= y1 {
                let mut x = x0;
                while x + cfg.block <= x1 {
                    blocks += 1;
                    if let Some(edge) = classify_block(img, x, y, cfg.edge_threshold) {
                        counts[edge as usize] += 1;
                    }
                    x += cfg.block;
                }
                y += cfg.block;
            }
            bins.extend(counts.iter().map(|&c| MAX_BIN * c / blocks));
        }
    }
    FeatureVector::new(bins)
}

/// Sub-image bounds along one axis; the last cell absorbs the remainder.
fn span(len: usize, grid: usize, i: usize) -> (usize, usize) {
    let step = len / grid;
    let end = if i + 1 == grid { len } else { (i + 1) * step };
    (i * step, end)
}

/// Strongest filter response on the 2x2 block at `(x, y)`, if above threshold.
pub fn classify_block(img: &GrayImage, x: usize, y: usize, threshold: f64) -> Option<EdgeType> {
    let a0 = f64::from(img.get(x, y));
    let a1 = f64::from(img.get(x + 1, y));
    let a2 = f64::from(img.get(x, y + 1));
    let a3 = f64::from(img.get(x + 1, y + 1));
    let s2 = std::f64::consts::SQRT_2;
    let responses = [
        (a0 - a1 + a2 - a3).abs(),
        (a0 + a1 - a2 - a3).abs(),
        (s2 * a0 - s2 * a3).abs(),
        (s2 * a1 - s2 * a2).abs(),
        (2.0 * a0 - 2.0 * a1 - 2.0 * a2 + 2.0 * a3).abs(),
    ];
    let (best, value) = responses
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    (value > threshold).then_some(EdgeType::ALL[best])
}

/// Writes features as `.ehd` text: header, then one comma-separated vector per line.
pub fn write_ehd(features: &[FeatureVector]) -> String {
    let dim = features.first().map_or(DEFAULT_DIM, |f| f.len());
    let mut out = format!("{EHD_HEADER} l={dim}\n");
    for f in features {
        out.push_str(&f.to_string());
        out.push('\n');
    }
    out
}

pub fn read_ehd(text: &str) -> Result<Vec<FeatureVector>, FeatureError> {
    let fmt_err = |m: String| FeatureError::Format(m);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fmt_err("empty file".into()))?;
    let dim: usize = header
        .strip_prefix(EHD_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("l="))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| fmt_err(format!("bad header {header:?}")))?;
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let bins = line
                .split(',')
                .map(|v| v.trim().parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| fmt_err(format!("line {}: not an integer list", n + 2)))?;
            if bins.len() != dim {
                return Err(fmt_err(format!(
                    "line {}: expected {dim} bins, found {}",
                    n + 2,
                    bins.len()
                )));
            }
            FeatureVector::new(bins)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, _| if x % 2 == 0 { 0 } else { 255 }).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = GrayImage::new(32, 32, vec![77; 1024]).unwrap();
        let f = extract_ehd(&img, &EhdConfig::default()).unwrap();
        assert_eq!(f.len(), 80);
        assert!(f.iter().all(|&b| b == 0));
    }

    #[test]
    fn single_block_filter_bank() {
        // [0 255; 0 255]: vertical = |0-255+0-255| = 510, horizontal = 0,
        // 45 = 135 = 255·sqrt(2) ≈ 360.6, non-directional = 0.
        let img = stripes(2, 2);
        assert_eq!(classify_block(&img, 0, 0, 11.0), Some(EdgeType::Vertical));
        let flat = GrayImage::new(2, 2, vec![10, 10, 10, 20]).unwrap();
        // vertical 10, horizontal 10, 45: 14.1, 135: 0, nondir 20
        assert_eq!(classify_block(&flat, 0, 0, 11.0), Some(EdgeType::NonDirectional));
        assert_eq!(classify_block(&flat, 0, 0, 25.0), None);
    }

    #[test]
    fn vertical_stripes_fill_vertical_bins() {
        let f = extract_ehd(&stripes(64, 48), &EhdConfig::default()).unwrap();
        for (i, &b) in f.iter().enumerate() {
            let expected = if i % EDGE_TYPES == EdgeType::Vertical as usize { 255 } else { 0 };
            assert_eq!(b, expected, "bin {i}");
        }
    }

    #[test]
    fn horizontal_stripes_fill_horizontal_bins() {
        let img = GrayImage::from_fn(40, 40, |_, y| if y % 2 == 0 { 200 } else { 10 }).unwrap();
        let f = extract_ehd(&img, &EhdConfig::default()).unwrap();
        for (i, &b) in f.iter().enumerate() {
            let expected = if i % EDGE_TYPES == EdgeType::Horizontal as usize { 255 } else { 0 };
            assert_eq!(b, expected);
        }
    }

    #[test]
    fn too_small_rejected() {
        let img = GrayImage::new(7, 8, vec![0; 56]).unwrap();
        assert!(matches!(
            extract_ehd(&img, &EhdConfig::default()),
            Err(FeatureError::TooSmall { .. })
        ));
        let ok = GrayImage::new(8, 8, vec![0; 64]).unwrap();
        assert_eq!(extract_ehd(&ok, &EhdConfig::default()).unwrap().len(), 80);
    }

    #[test]
    fn non_square_remainder_goes_to_last_cell() {
        assert_eq!(span(10, 4, 0), (0, 2));
        assert_eq!(span(10, 4, 3), (6, 10));
        let img = GrayImage::from_fn(37, 23, |x, y| ((x * 13) ^ (y * 7)) as u8).unwrap();
        let f = extract_ehd(&img, &EhdConfig::default()).unwrap();
        assert_eq!(f.len(), 80);
        assert!(f.iter().all(|&b| b <= 255));
    }

    #[test]
    fn periodic_shift_leaves_bins_unchanged() {
        let pattern = |x: usize, y: usize| if (x + 2 * y) % 6 < 3 { 30u8 } else { 220 };
        let a = GrayImage::from_fn(64, 64, pattern).unwrap();
        // period 6 horizontally
        let b = GrayImage::from_fn(64, 64, |x, y| pattern(x + 6, y)).unwrap();
        let cfg = EhdConfig::default();
        let fa = extract_ehd(&a, &cfg).unwrap();
        assert!(fa.iter().any(|&v| v > 0));
        assert_eq!(fa, extract_ehd(&b, &cfg).unwrap());
    }

    #[test]
    fn squares() {
        let f = FeatureVector::new(vec![2, 3, 4]).unwrap();
        assert_eq!(square_feature(&f).values(), &[4, 9, 16]);
        let z = FeatureVector::new(vec![0, 0, 0]).unwrap();
        assert_eq!(square_feature(&z).values(), &[0, 0, 0]);
        let m = FeatureVector::new(vec![255; 80]).unwrap();
        assert!(square_feature(&m).values().iter().all(|&v| v == 65025));
    }

    #[test]
    fn bins_above_255_rejected() {
        assert_eq!(
            FeatureVector::new(vec![1, 256]).unwrap_err(),
            FeatureError::BinOutOfRange { index: 1, value: 256 }
        );
    }

    #[test]
    fn ehd_file_roundtrip() {
        let fs = vec![
            FeatureVector::new(vec![1, 2, 3]).unwrap(),
            FeatureVector::new(vec![255, 0, 9]).unwrap(),
        ];
        let text = write_ehd(&fs);
        assert!(text.starts_with("MIPP-EHD-1 l=3\n1,2,3\n"));
        assert_eq!(read_ehd(&text).unwrap(), fs);
        assert!(read_ehd("MIPP-EHD-1 l=3\n1,2\n").is_err());
        assert!(read_ehd("nope\n").is_err());
    }
}
