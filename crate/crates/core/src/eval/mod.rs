//! Evaluation harness: corpora, retrieval quality, leakage distribution and
//! timing.

pub mod bench;
pub mod corpus;
pub mod leakage;
pub mod metrics;
pub mod synthetic;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::cloud_node::{CloudError, CloudNode, NewImage, QueryEnvelope};
use crate::ehd_features::{extract_ehd, EhdConfig, FeatureError, FeatureVector};
use crate::feature_crypto::{encrypt_feature_pair, FeatureCryptoError};
use crate::group_crypto::GroupParams;
use crate::ids::{AccessKey, ImageId, OwnerId, UserId};
use crate::image_cipher::{image_enc, keygen, CipherError};
use crate::rng::{child_seed, seeded_rng};
use crate::similarity::{scaled_new_dis_radicand, squared_euclidean};

pub use corpus::{load_corpus, LabeledCorpus, LabeledImage};
pub use leakage::{leakage_histogram, LeakageHistogram};
pub use metrics::{compute_metrics, GroundTruth, MetricsReport};
pub use synthetic::SyntheticConfig;

/// Cutoffs reported by the retrieval-quality sweep.
pub const CUTOFF_SWEEP: [usize; 4] = [10, 20, 50, 100];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{} file(s) could not be ingested:{}", .0.len(), format_issues(.0))]
    Ingest(Vec<corpus::IngestIssue>),
    #[error("cutoff {cutoff} exceeds the {available} available results")]
    Cutoff { cutoff: usize, available: usize },
    #[error("inconsistent evaluation input: {0}")]
    Consistency(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    FeatureCrypto(#[from] FeatureCryptoError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn format_issues(issues: &[corpus::IngestIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("\n  {}: {}", i.path.display(), i.reason))
        .collect()
}

/// Distance used to rank a corpus against a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euclidean,
    NewDis,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euclidean => "euclidean",
            Method::NewDis => "newdis",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euclidean" | "euc" => Ok(Method::Euclidean),
            "newdis" | "new" => Ok(Method::NewDis),
            _ => Err(format!("unknown method {s:?}; use euclidean or newdis")),
        }
    }
}

/// Indices of the `h` corpus features closest to `q`, nearest first.
/// Ties keep corpus order.
pub fn rank_plain(features: &[FeatureVector], q: &FeatureVector, method: Method, h: usize) -> Vec<usize> {
    let mut keyed: Vec<(i128, usize)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let key = match method {
                Method::Euclidean => i128::from(squared_euclidean(f, q).expect("equal dimensions")),
                Method::NewDis => scaled_new_dis_radicand(f, q).expect("equal dimensions"),
            };
            (key, i)
        })
        .collect();
    let h = h.min(keyed.len());
    if h < keyed.len() {
        keyed.select_nth_unstable(h);
        keyed.truncate(h);
    }
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Per-query ranked result ids plus the query's label.
pub type Runs = Vec<(Vec<ImageId>, String)>;

pub fn extract_all(images: &[LabeledImage], cfg: &EhdConfig) -> Result<Vec<FeatureVector>, EvalError> {
    images
        .iter()
        .map(|i| extract_ehd(&i.image, cfg).map_err(EvalError::from))
        .collect()
}

/// Plaintext rankings of every query under `method`.
pub fn plain_runs(
    corpus: &LabeledCorpus,
    features: &[FeatureVector],
    queries: &[LabeledImage],
    query_features: &[FeatureVector],
    method: Method,
    h: usize,
) -> Runs {
    queries
        .iter()
        .zip(query_features)
        .map(|(q, qf)| {
            let ids = rank_plain(features, qf, method, h)
                .into_iter()
                .map(|i| corpus.items[i].id.clone())
                .collect();
            (ids, q.category.clone())
        })
        .collect()
}

/// A cloud loaded with an encrypted corpus and one user every owner
/// authorizes.
pub struct EncryptedDeployment {
    pub cloud: CloudNode,
    pub uid: UserId,
    pub ak: AccessKey,
    seed: Vec<u8>,
}

impl EncryptedDeployment {
    /// Encrypts every image and feature under its owner's key and registers
    /// owners `owner-0`, `owner-1`, ... with the cloud.
    pub fn build(
        params: &GroupParams,
        corpus: &LabeledCorpus,
        features: &[FeatureVector],
        seed: &[u8],
    ) -> Result<Self, EvalError> {
        let uid = UserId::new("evaluator").expect("valid id");
        let ak = AccessKey::random(&mut seeded_rng("mipp/eval/ak", seed));
        let cloud = CloudNode::new(params.clone());
        let owners: BTreeSet<usize> = corpus.items.iter().map(|i| i.owner).collect();
        let max_pixels = corpus.items.iter().map(|i| i.image.pixel_count()).max().unwrap_or(1);
        for owner in owners {
            let sk = keygen(128, max_pixels, &child_seed(seed, "mipp/eval/owner-sk", owner as u64))?;
            let mut uploads = Vec::new();
            for (k, (item, f)) in corpus.items.iter().zip(features).enumerate() {
                if item.owner != owner {
                    continue;
                }
                uploads.push(NewImage {
                    image_id: item.id.clone(),
                    image: image_enc(&sk, &item.image)?,
                    feature: encrypt_feature_pair(params, f, &child_seed(seed, "mipp/eval/feature", k as u64))?,
                });
            }
            cloud.register_owner(
                owner_id(owner),
                [(uid.clone(), ak)].into_iter().collect(),
                uploads,
            )?;
        }
        Ok(EncryptedDeployment {
            cloud,
            uid,
            ak,
            seed: seed.to_vec(),
        })
    }

    /// Cloud-side rankings of every query, computed from encrypted features.
    pub fn runs(
        &self,
        queries: &[LabeledImage],
        query_features: &[FeatureVector],
        h: usize,
    ) -> Result<Runs, EvalError> {
        queries
            .iter()
            .zip(query_features)
            .enumerate()
            .map(|(k, (q, qf))| {
                let envelope = QueryEnvelope {
                    eq: encrypt_feature_pair(
                        self.cloud.params(),
                        qf,
                        &child_seed(&self.seed, "mipp/eval/query", k as u64),
                    )?,
                    uid: self.uid.clone(),
                    ak: self.ak,
                    h,
                };
                let ids = self
                    .cloud
                    .retrieve_top_h(&envelope)?
                    .into_iter()
                    .map(|r| r.image_id)
                    .collect();
                Ok((ids, q.category.clone()))
            })
            .collect()
    }
}

pub fn owner_id(index: usize) -> OwnerId {
    OwnerId::new(format!("owner-{index}")).expect("valid id")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[u32]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn plain_ranking_orders_and_truncates() {
        let feats = vec![fv(&[9, 9, 9]), fv(&[1, 2, 3]), fv(&[1, 2, 4]), fv(&[0, 10, 0])];
        assert_eq!(rank_plain(&feats, &fv(&[1, 2, 3]), Method::Euclidean, 2), [1, 2]);
        assert_eq!(rank_plain(&feats, &fv(&[1, 2, 3]), Method::Euclidean, 10).len(), 4);
        // NewDis prefers the flat vector over the identical one here.
        let q = fv(&[0, 10, 0]);
        let feats = vec![fv(&[0, 10, 0]), fv(&[3, 3, 4])];
        assert_eq!(rank_plain(&feats, &q, Method::Euclidean, 2), [0, 1]);
        assert_eq!(rank_plain(&feats, &q, Method::NewDis, 2), [1, 0]);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("euclidean".parse::<Method>().unwrap(), Method::Euclidean);
        assert_eq!("newdis".parse::<Method>().unwrap(), Method::NewDis);
        assert!("cosine".parse::<Method>().is_err());
        assert_eq!(Method::NewDis.to_string(), "newdis");
    }
}
