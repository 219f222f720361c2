//! Keystream generation and the pixelwise XOR image cipher.
//!
//! Pixel `(j, k)` of an `M x N` image is combined with keystream byte
//! `j·N + k`, so every image encrypted under one key starts at offset 0.
//! Reusing a keystream across images is a two-time pad: the XOR of two
//! ciphertexts under the same key equals the XOR of their plaintexts.
//! Owners who need to limit that exposure should rotate keys and push
//! re-encrypted images through the update path.

use std::fmt;

use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::GrayImage;
use crate::rng::seeded_rng;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CipherError {
    #[error("keystream length must be at least 1")]
    InvalidLength,
    #[error("keystream holds {available} bytes but the image needs {required}")]
    KeyTooShort { required: usize, available: usize },
    #[error("keystream hex: {0}")]
    Hex(String),
}

/// Secret byte stream used as SK (owners) or USK (query users).
#[derive(Clone, PartialEq, Eq)]
pub struct KeyStream {
    bytes: Vec<u8>,
}

impl fmt::Debug for KeyStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyStream(len={}, fp={})", self.bytes.len(), self.fingerprint())
    }
}

impl KeyStream {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CipherError> {
        if bytes.is_empty() {
            return Err(CipherError::InvalidLength);
        }
        Ok(KeyStream { bytes })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }

    pub fn from_hex(text: &str) -> Result<Self, CipherError> {
        let bytes = hex::decode(text.trim()).map_err(|e| CipherError::Hex(e.to_string()))?;
        Self::from_bytes(bytes)
    }

    /// Non-secret identifier: first 8 bytes of SHA-256, hex.
    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(&self.bytes)[..8])
    }
}

/// Derives a `required_len`-byte keystream from `seed` with a ChaCha20 stream.
///
/// `security_k` is bound into the derivation so keys of different strength
/// classes never coincide.
pub fn keygen(security_k: u32, required_len: usize, seed: &[u8]) -> Result<KeyStream, CipherError> {
    if required_len == 0 {
        return Err(CipherError::InvalidLength);
    }
    let mut rng = seeded_rng(&format!("mipp/keystream/k={security_k}"), seed);
    let mut bytes = vec![0u8; required_len];
    rng.fill_bytes(&mut bytes);
    Ok(KeyStream { bytes })
}

pub fn image_enc(sk: &KeyStream, w: &GrayImage) -> Result<GrayImage, CipherError> {
    xor_with_key(sk, w)
}

/// Identical to [`image_enc`]; XOR is its own inverse.
pub fn image_dec(sk: &KeyStream, ew: &GrayImage) -> Result<GrayImage, CipherError> {
    xor_with_key(sk, ew)
}

fn xor_with_key(sk: &KeyStream, img: &GrayImage) -> Result<GrayImage, CipherError> {
    let required = img.pixel_count();
    if sk.len() < required {
        return Err(CipherError::KeyTooShort {
            required,
            available: sk.len(),
        });
    }
    let n = img.width();
    let mut out = Vec::with_capacity(required);
    for j in 0..img.height() {
        for k in 0..n {
            out.push(sk.bytes[j * n + k] ^ img.get(k, j));
        }
    }
    Ok(img.with_pixels(out))
}
