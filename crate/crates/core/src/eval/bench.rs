//! Wall-clock comparison of plaintext, indexed and index-free retrieval.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::cloud_node::{CloudNode, NewImage, QueryEnvelope, RetrievalPath, StorageReport};
use crate::ehd_features::{FeatureVector, DEFAULT_DIM};
use crate::feature_crypto::{encrypt_feature_pair, EncryptedFeature};
use crate::group_crypto::GroupParams;
use crate::ids::{AccessKey, ImageId, UserId};
use crate::image::GrayImage;
use crate::rng::{child_seed, seeded_rng};

use super::{owner_id, rank_plain, EvalError, Method};

/// Fewest repetitions per measurement.
pub const MIN_REPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Euclidean ranking over plaintext features.
    Plain,
    /// Re-aggregates every stored ciphertext per query.
    EncNoIndex,
    /// Looks up precomputed sums.
    EncWithIndex,
    /// Recovers the sums of every stored feature.
    IndexBuild,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [
        BenchMode::Plain,
        BenchMode::EncNoIndex,
        BenchMode::EncWithIndex,
        BenchMode::IndexBuild,
    ];
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Plain => "plain",
            BenchMode::EncNoIndex => "enc_no_index",
            BenchMode::EncWithIndex => "enc_with_index",
            BenchMode::IndexBuild => "index_build",
        })
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BenchMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown bench mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub size: usize,
    pub reps: usize,
    pub median: Duration,
}

pub const BENCH_TSV_HEADER: &str = "mode\tsize\treps\tmedian_ms";

impl BenchRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.3}",
            self.mode,
            self.size,
            self.reps,
            self.median.as_secs_f64() * 1e3
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Storage of the largest corpus benchmarked with encryption.
    pub storage: Option<StorageReport>,
}

pub fn storage_tsv(report: &StorageReport) -> String {
    format!(
        "item\tbytes\nimages\t{}\nindex\t{}\nencrypted_features\t{}\nencrypted_images\t{}\nindex_to_feature_ratio\t{:.6}\n",
        report.images,
        report.index_bytes,
        report.feature_bytes,
        report.image_bytes,
        report.index_bytes as f64 / report.feature_bytes.max(1) as f64
    )
}

/// Random descriptors with EHD-like sparsity, deterministic in `seed`.
pub fn random_features(n: usize, seed: &[u8]) -> Vec<FeatureVector> {
    let mut rng = seeded_rng("mipp/bench/features", seed);
    (0..n)
        .map(|_| {
            let bins = (0..DEFAULT_DIM)
                .map(|_| if rng.gen_bool(0.4) { rng.gen_range(0..=255) } else { 0 })
                .collect();
            FeatureVector::new(bins).expect("bins are in range")
        })
        .collect()
}

/// Encrypts `features` for upload with small placeholder images.
pub fn encrypt_uploads(
    params: &GroupParams,
    features: &[FeatureVector],
    seed: &[u8],
) -> Result<Vec<NewImage>, EvalError> {
    let image = GrayImage::new(8, 8, vec![0x5a; 64]).expect("valid size");
    features
        .iter()
        .enumerate()
        .map(|(k, f)| {
            Ok(NewImage {
                image_id: ImageId::new(format!("b{k:07}")).expect("valid id"),
                image: image.clone(),
                feature: encrypt_feature_pair(params, f, &child_seed(seed, "mipp/bench/enc", k as u64))?,
            })
        })
        .collect()
}

/// A one-owner cloud over pre-encrypted uploads, with a matching query.
pub struct BenchCloud {
    pub cloud: CloudNode,
    pub query: QueryEnvelope,
}

impl BenchCloud {
    pub fn new(params: &GroupParams, uploads: Vec<NewImage>, query: EncryptedFeature) -> Result<Self, EvalError> {
        let uid = UserId::new("bench").expect("valid id");
        let ak = AccessKey::from_bytes([0xb5; 32]);
        let cloud = CloudNode::new(params.clone());
        cloud.register_owner(owner_id(0), [(uid.clone(), ak)].into_iter().collect(), uploads)?;
        Ok(BenchCloud {
            cloud,
            query: QueryEnvelope { eq: query, uid, ak, h: 100 },
        })
    }
}

pub fn median(mut samples: Vec<Duration>) -> Duration {
    samples.sort_unstable();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<(), EvalError>) -> Result<Duration, EvalError> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed());
    }
    Ok(median(samples))
}

/// Times each mode at each corpus size. `on_row` sees every row as soon
/// as it is measured, so an interrupted run still leaves a partial table.
pub fn run_bench(
    params: &GroupParams,
    sizes: &[usize],
    modes: &[BenchMode],
    reps: usize,
    seed: &[u8],
    mut on_row: impl FnMut(&BenchRow),
) -> Result<BenchReport, EvalError> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::Consistency("bench sizes must be ascending".into()));
    }
    let reps = reps.max(MIN_REPS);
    let largest = sizes.last().copied().unwrap_or(0);
    let features = random_features(largest, seed);
    let query = random_features(1, &[seed, b"/query"].concat()).remove(0);
    let needs_cipher = modes.iter().any(|m| *m != BenchMode::Plain);
    let uploads = if needs_cipher {
        encrypt_uploads(params, &features, seed)?
    } else {
        Vec::new()
    };
    let eq = encrypt_feature_pair(params, &query, &[seed, b"/eq"].concat())?;

    let mut rows = Vec::new();
    let mut storage = None;
    for &size in sizes {
        let bench = if needs_cipher {
            Some(BenchCloud::new(params, uploads[..size].to_vec(), eq.clone())?)
        } else {
            None
        };
        for &mode in modes {
            let median = match (mode, &bench) {
                (BenchMode::Plain, _) => time_reps(reps, || {
                    std::hint::black_box(rank_plain(&features[..size], &query, Method::Euclidean, 100));
                    Ok(())
                })?,
                (BenchMode::EncWithIndex, Some(b)) => time_reps(reps, || {
                    std::hint::black_box(b.cloud.retrieve_top_h_via(&b.query, RetrievalPath::Index)?);
                    Ok(())
                })?,
                (BenchMode::EncNoIndex, Some(b)) => time_reps(reps, || {
                    std::hint::black_box(b.cloud.retrieve_top_h_via(&b.query, RetrievalPath::NoIndex)?);
                    Ok(())
                })?,
                (BenchMode::IndexBuild, Some(_)) => time_reps(reps, || {
                    let cloud = CloudNode::new(params.clone());
                    cloud.register_owner(owner_id(0), Default::default(), uploads[..size].to_vec())?;
                    Ok(())
                })?,
                (_, None) => unreachable!("cipher modes build a cloud"),
            };
            let row = BenchRow {
                mode,
                size,
                reps,
                median,
            };
            on_row(&row);
            rows.push(row);
        }
        if let Some(b) = bench {
            storage = Some(b.cloud.snapshot().storage_report());
        }
    }
    Ok(BenchReport { rows, storage })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        let ms = |v: &[u64]| v.iter().map(|&m| Duration::from_millis(m)).collect::<Vec<_>>();
        assert_eq!(median(ms(&[5, 1, 3])), Duration::from_millis(3));
        assert_eq!(median(ms(&[4, 1, 3, 2])), Duration::from_micros(2500));
    }

    #[test]
    fn small_bench_produces_all_rows() {
        let params = GroupParams::generate(64, b"bench").unwrap();
        let mut streamed = 0;
        let report = run_bench(&params, &[10, 40], &BenchMode::ALL, 5, b"s", |_| streamed += 1).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert_eq!(streamed, 8);
        let storage = report.storage.unwrap();
        assert_eq!(storage.images, 40);
        assert!(storage.index_bytes < storage.feature_bytes);
        assert!(run_bench(&params, &[40, 10], &BenchMode::ALL, 5, b"s", |_| {}).is_err());
        assert_eq!("enc_with_index".parse::<BenchMode>().unwrap(), BenchMode::EncWithIndex);
        assert!(report.rows[0].to_tsv().starts_with("plain\t10\t5\t"));
    }
}
