//! Encryption of a feature vector together with its squared companion.
//!
//! The pair `(ef, eff)` lets the cloud recover exactly two numbers per
//! image, `S1 = Σ a_j` and `S2 = Σ a_j²`, which is all the distance in
//! [`crate::similarity`] needs.

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use thiserror::Error;

use crate::ehd_features::{square_feature, FeatureVector};
use crate::group_crypto::{aggregate_and_recover, encrypt_vector, GroupError, GroupParams, SumCiphertext};
use crate::rng::derive_seed;
use crate::similarity::{SimilarityError, SumPair};

const EFT_HEADER: &str = "MIPP-EFT-1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureCryptoError {
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("feature was encrypted under params {found}, expected {expected}")]
    ParamsMismatch { expected: String, found: String },
    #[error("ef has {ef} elements but eff has {eff}")]
    LengthMismatch { ef: usize, eff: usize },
    #[error("recovered sums fail the Cauchy-Schwarz check: {0}")]
    Corrupted(#[from] SimilarityError),
    #[error("recovered sum does not fit in 64 bits")]
    SumTooLarge,
    #[error("EFT record: {0}")]
    Format(String),
}

/// Ciphertexts of `a_j` (`ef`) and of `a_j²` (`eff`), tagged with the params id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedFeature {
    pub params_id: String,
    pub ef: SumCiphertext,
    pub eff: SumCiphertext,
}

impl EncryptedFeature {
    pub fn dim(&self) -> usize {
        self.ef.len()
    }

    /// Text form: header with params id and dimension, then the `ef` and
    /// `eff` lines as comma-separated decimals.
    pub fn to_record(&self) -> String {
        let join = |ct: &SumCiphertext| {
            ct.elements()
                .iter()
                .map(BigUint::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{EFT_HEADER} params={} l={}\n{}\n{}\n",
            self.params_id,
            self.dim(),
            join(&self.ef),
            join(&self.eff)
        )
    }

    pub fn from_record(text: &str) -> Result<Self, FeatureCryptoError> {
        let bad = |m: &str| FeatureCryptoError::Format(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty record"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(EFT_HEADER) {
            return Err(bad("missing MIPP-EFT-1 header"));
        }
        let params_id = parts
            .next()
            .and_then(|p| p.strip_prefix("params="))
            .ok_or_else(|| bad("missing params="))?
            .to_string();
        let dim: usize = parts
            .next()
            .and_then(|p| p.strip_prefix("l="))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| bad("missing l="))?;
        let mut parse_line = || -> Result<SumCiphertext, FeatureCryptoError> {
            let line = lines.next().ok_or_else(|| bad("truncated record"))?;
            let c = line
                .split(',')
                .map(|v| v.trim().parse::<BigUint>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("ciphertext is not a decimal list"))?;
            if c.len() != dim {
                return Err(bad("ciphertext length does not match l"));
            }
            Ok(SumCiphertext::from_elements(c))
        };
        let ef = parse_line()?;
        let eff = parse_line()?;
        Ok(EncryptedFeature { params_id, ef, eff })
    }
}

/// Encrypts `f` and its elementwise square under independent rings.
pub fn encrypt_feature_pair(
    params: &GroupParams,
    f: &FeatureVector,
    seed: &[u8],
) -> Result<EncryptedFeature, FeatureCryptoError> {
    let ef = encrypt_vector(params, &f.as_u64(), &derive_seed("mipp/ef", seed))?;
    let eff = encrypt_vector(params, &square_feature(f).as_u64(), &derive_seed("mipp/eff", seed))?;
    Ok(EncryptedFeature {
        params_id: params.params_id(),
        ef,
        eff,
    })
}

/// Recovers `(S1, S2)` from an encrypted feature.
pub fn recover_sums(params: &GroupParams, ef: &EncryptedFeature) -> Result<SumPair, FeatureCryptoError> {
    let expected = params.params_id();
    if ef.params_id != expected {
        return Err(FeatureCryptoError::ParamsMismatch {
            expected,
            found: ef.params_id.clone(),
        });
    }
    if ef.ef.len() != ef.eff.len() {
        return Err(FeatureCryptoError::LengthMismatch {
            ef: ef.ef.len(),
            eff: ef.eff.len(),
        });
    }
    let to_u64 = |v: BigUint| v.to_u64().ok_or(FeatureCryptoError::SumTooLarge);
    let s1 = to_u64(aggregate_and_recover(params, &ef.ef)?)?;
    let s2 = to_u64(aggregate_and_recover(params, &ef.eff)?)?;
    Ok(SumPair::new(s1, s2, ef.dim())?)
}
