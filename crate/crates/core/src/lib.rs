//! Multi-owner encrypted content-based image retrieval.
//!
//! Owners encrypt images with a keystream cipher and their edge histogram
//! features with a ring-structured secure-sum scheme. The cloud recovers two
//! sums per image, ranks authorized images for a user's encrypted query and
//! returns ciphertexts; the key management center re-encrypts them to a
//! per-session user key.

pub mod cloud_node;
pub mod ehd_features;
pub mod eval;
pub mod feature_crypto;
pub mod group_crypto;
pub mod ids;
pub mod image;
pub mod image_cipher;
pub mod kmc_node;
pub mod protocol_sim;
pub mod rng;
pub mod similarity;

pub use cloud_node::{CloudError, CloudNode, CloudSnapshot, NewImage, QueryEnvelope, RetrievalPath, RetrievedImage, UpdateCommand};
pub use ehd_features::{extract_ehd, EhdConfig, FeatureVector};
pub use feature_crypto::{encrypt_feature_pair, recover_sums, EncryptedFeature};
pub use group_crypto::{GroupParams, Profile};
pub use ids::{AccessKey, ImageId, OwnerId, SessionId, UserId};
pub use image::GrayImage;
pub use image_cipher::{image_dec, image_enc, keygen, KeyStream};
pub use kmc_node::{KeyVault, ResultImage};
pub use similarity::{euc_dis, new_dis, sim_from_sums, SumPair};
