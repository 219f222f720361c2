//! Synthetic labelled texture corpus.
//!
//! Each image is a mosaic of 2x2 blocks, each either flat or an oriented
//! stripe/checker block matching one of the five edge types. A category
//! belongs to a density regime, which fixes the mean edge rate and how far
//! the rate varies between sub-images. A scene permutes those sub-image
//! rates, so images of one scene share a layout while every image of the
//! regime has nearly the same edge count and spread. Within a sub-image a
//! `signal` share of the edges takes the category's dominant orientation
//! and the rest cycle through all five.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::ehd_features::EdgeType;
use crate::ids::ImageId;
use crate::image::GrayImage;
use crate::rng::{child_seed, seeded_rng};

use super::corpus::{LabeledCorpus, LabeledImage};

const GRID: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryStyle {
    pub name: String,
    pub dominant: EdgeType,
    /// Share of each sub-image's edges with the dominant orientation.
    pub signal: f64,
    /// Mean fraction of edge blocks per sub-image.
    pub level: f64,
    /// Largest deviation of a sub-image's edge fraction from `level`.
    pub spread: f64,
    /// Distinct layouts; image `k` uses scene `k % scenes`.
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub styles: Vec<CategoryStyle>,
    pub per_category: usize,
    pub queries_per_category: usize,
    pub size: usize,
    /// Standard deviation of the per-image shift of `level`.
    pub jitter: f64,
    pub seed: Vec<u8>,
}

impl SyntheticConfig {
    /// Ten categories of 100 images, 64x64 pixels, five queries each.
    pub fn standard(seed: &[u8]) -> Self {
        use EdgeType::*;
        let regimes = [
            ("sparse", 0.15, 0.12, [Vertical, Horizontal, NonDirectional].as_slice()),
            ("medium", 0.40, 0.20, [Diagonal45, Diagonal135, Vertical].as_slice()),
            ("dense", 0.70, 0.25, [Horizontal, Diagonal45, Diagonal135, NonDirectional].as_slice()),
        ];
        let mut styles = Vec::new();
        for (regime, level, spread, dominants) in regimes {
            for d in dominants {
                styles.push(CategoryStyle {
                    name: format!("{regime}-{}", edge_name(*d)),
                    dominant: *d,
                    signal: 0.03,
                    level,
                    spread,
                    scenes: 10,
                });
            }
        }
        SyntheticConfig {
            styles,
            per_category: 100,
            queries_per_category: 5,
            size: 64,
            jitter: 0.02,
            seed: seed.to_vec(),
        }
    }

    /// Builds the corpus and a disjoint set of query images.
    pub fn generate(&self) -> (LabeledCorpus, Vec<LabeledImage>) {
        let mut items = Vec::new();
        let mut queries = Vec::new();
        for (c, style) in self.styles.iter().enumerate() {
            let scenes: Vec<Vec<f64>> = (0..style.scenes.max(1))
                .map(|s| {
                    let mut rng = seeded_rng("mipp/synthetic/scene", &child_seed(&self.seed, &style.name, s as u64));
                    let n = GRID * GRID;
                    let mut offsets: Vec<f64> = (0..n)
                        .map(|i| style.spread * (2.0 * i as f64 / (n - 1) as f64 - 1.0))
                        .collect();
                    offsets.shuffle(&mut rng);
                    offsets
                })
                .collect();
            let total = self.per_category + self.queries_per_category;
            for k in 0..total {
                let mut rng = seeded_rng(
                    "mipp/synthetic",
                    &child_seed(&self.seed, &style.name, (c * 100_000 + k) as u64),
                );
                let image = render(style, &scenes[k % scenes.len()], self.size, self.jitter, &mut rng);
                let (list, id) = if k < self.per_category {
                    (&mut items, format!("{}.{k:04}", style.name))
                } else {
                    (&mut queries, format!("{}.q{:02}", style.name, k - self.per_category))
                };
                list.push(LabeledImage {
                    id: ImageId::new(id).expect("generated ids are valid"),
                    category: style.name.clone(),
                    owner: 0,
                    image,
                });
            }
        }
        let categories = self.styles.iter().map(|s| s.name.clone()).collect();
        (LabeledCorpus { items, categories }, queries)
    }
}

pub fn edge_name(e: EdgeType) -> &'static str {
    match e {
        EdgeType::Vertical => "vertical",
        EdgeType::Horizontal => "horizontal",
        EdgeType::Diagonal45 => "diag45",
        EdgeType::Diagonal135 => "diag135",
        EdgeType::NonDirectional => "nondir",
    }
}

fn render(style: &CategoryStyle, scene: &[f64], size: usize, jitter: f64, rng: &mut ChaCha20Rng) -> GrayImage {
    let cell = size / GRID;
    let side = cell / 2;
    let shift = Normal::new(0.0, jitter).expect("jitter is finite and non-negative").sample(rng);
    let mut pixels = vec![0u8; size * size];
    for sy in 0..GRID {
        for sx in 0..GRID {
            let rate = (style.level + shift + scene[sy * GRID + sx]).clamp(0.0, 1.0);
            let edges = (rate * (side * side) as f64).round() as usize;
            let dominant = (style.signal * edges as f64).round() as usize;
            let start = rng.gen_range(0..EdgeType::ALL.len());
            let mut kinds: Vec<Option<EdgeType>> = (0..side * side)
                .map(|i| match i {
                    i if i < dominant => Some(style.dominant),
                    i if i < edges => Some(EdgeType::ALL[(start + i) % EdgeType::ALL.len()]),
                    _ => None,
                })
                .collect();
            kinds.shuffle(rng);
            let background: i32 = rng.gen_range(60..=190);
            for (b, kind) in kinds.into_iter().enumerate() {
                let block = match kind {
                    Some(e) => edge_block(e, background, rng.gen_range(40..=110)),
                    None => [background; 4],
                };
                let (bx, by) = (2 * (b % side), 2 * (b / side));
                for (i, v) in block.iter().enumerate() {
                    let noise: i32 = rng.gen_range(-1..=1);
                    let x = sx * cell + bx + i % 2;
                    let y = sy * cell + by + i / 2;
                    pixels[y * size + x] = (v + noise).clamp(0, 255) as u8;
                }
            }
        }
    }
    GrayImage::new(size, size, pixels).expect("dimensions are positive")
}

/// Block values `[a0, a1, a2, a3]` whose strongest filter is `edge`.
fn edge_block(edge: EdgeType, mid: i32, contrast: i32) -> [i32; 4] {
    let (lo, hi) = (mid - contrast / 2, mid + contrast / 2);
    match edge {
        EdgeType::Vertical => [hi, lo, hi, lo],
        EdgeType::Horizontal => [hi, hi, lo, lo],
        EdgeType::Diagonal45 => [hi, mid, mid, lo],
        EdgeType::Diagonal135 => [mid, hi, lo, mid],
        EdgeType::NonDirectional => [hi, lo, lo, hi],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehd_features::{extract_ehd, EhdConfig};

    fn small() -> SyntheticConfig {
        let mut cfg = SyntheticConfig::standard(b"t");
        cfg.per_category = 6;
        cfg.queries_per_category = 2;
        cfg
    }

    #[test]
    fn shape_and_determinism() {
        let (corpus, queries) = small().generate();
        assert_eq!(corpus.len(), 60);
        assert_eq!(queries.len(), 20);
        assert_eq!(corpus.categories.len(), 10);
        assert!(queries.iter().all(|q| q.id.as_str().contains(".q")));
        assert_eq!(small().generate().0, corpus);
        let mut other = small();
        other.seed = b"u".to_vec();
        assert_ne!(other.generate().0, corpus);
    }

    #[test]
    fn edge_counts_follow_the_regime() {
        let (corpus, _) = small().generate();
        let cfg = EhdConfig::default();
        let mean = |prefix: &str| {
            let items: Vec<_> = corpus.items.iter().filter(|i| i.category.starts_with(prefix)).collect();
            items
                .iter()
                .map(|i| extract_ehd(&i.image, &cfg).unwrap().bins().iter().sum::<u32>() as f64)
                .sum::<f64>()
                / items.len() as f64
        };
        let (s, m, d) = (mean("sparse"), mean("medium"), mean("dense"));
        assert!(s < m && m < d, "{s} {m} {d}");
    }

    #[test]
    fn every_block_type_is_classified_as_intended() {
        for e in EdgeType::ALL {
            let b = edge_block(e, 120, 60);
            let img = GrayImage::new(2, 2, b.iter().map(|&v| v as u8).collect()).unwrap();
            assert_eq!(crate::ehd_features::classify_block(&img, 0, 0, 11.0), Some(e));
        }
    }
}
