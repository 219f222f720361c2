//! Shared fixtures for the benchmarks.

use mipp_core::eval::bench::{encrypt_uploads, random_features, BenchCloud};
use mipp_core::eval::SyntheticConfig;
use mipp_core::{encrypt_feature_pair, GrayImage, GroupParams};

/// Parameters small enough to keep setup fast.
pub fn test_params() -> GroupParams {
    GroupParams::generate(64, b"mipp-bench").expect("64-bit parameters")
}

/// A one-owner cloud holding `n` encrypted random features.
pub fn cloud_with(params: &GroupParams, n: usize) -> BenchCloud {
    let features = random_features(n, b"mipp-bench/corpus");
    let uploads = encrypt_uploads(params, &features, b"mipp-bench/corpus").expect("encrypt corpus");
    let q = random_features(1, b"mipp-bench/query").remove(0);
    let eq = encrypt_feature_pair(params, &q, b"mipp-bench/query").expect("encrypt query");
    BenchCloud::new(params, uploads, eq).expect("register owner")
}

/// A handful of synthetic 64x64 texture images.
pub fn sample_images(n: usize) -> Vec<GrayImage> {
    let mut cfg = SyntheticConfig::standard(b"mipp-bench");
    cfg.per_category = n.div_ceil(cfg.styles.len()).max(1);
    cfg.queries_per_category = 0;
    let (corpus, _) = cfg.generate();
    corpus.items.into_iter().take(n).map(|i| i.image).collect()
}
