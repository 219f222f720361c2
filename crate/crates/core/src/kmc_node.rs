//! Key management center: keeps owner keystreams, holds each query user's
//! keystream for exactly one session, and re-encrypts retrieval results
//! from owner keys to the user's key.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::ids::{IdError, ImageId, OwnerId, SessionId, UserId};
use crate::image::GrayImage;
use crate::image_cipher::{image_dec, image_enc, CipherError, KeyStream};

const VAULT_HEADER: &str = "MIPP-VAULT-1";

#[derive(Debug, Error)]
pub enum KmcError {
    #[error("owner {0} is not enrolled")]
    UnknownOwner(OwnerId),
    #[error("user {0} is not enrolled")]
    UnknownUser(UserId),
    #[error("owner {0} already has a key; pass rotate to replace it")]
    KeyExists(OwnerId),
    #[error("no key on file for owner {0}")]
    MissingOwnerKey(OwnerId),
    #[error("no session key for user {uid} in session {session}")]
    MissingSessionKey { uid: UserId, session: SessionId },
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error("vault file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vault format: {0}")]
    Format(String),
}

impl From<IdError> for KmcError {
    fn from(e: IdError) -> Self {
        KmcError::Format(e.to_string())
    }
}

/// Outcome of a user key deposit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyDeposit {
    Fresh,
    /// The same keystream was used by this user in an earlier session.
    Reused,
}

/// One entry of a result list travelling between cloud, KMC and user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultImage {
    pub owner_id: OwnerId,
    pub image_id: ImageId,
    pub image: GrayImage,
}

#[derive(Debug, Clone, Default)]
pub struct KeyVault {
    owners: BTreeSet<OwnerId>,
    users: BTreeSet<UserId>,
    owner_keys: BTreeMap<OwnerId, KeyStream>,
    // one pending key per (user, session); a user may have parallel sessions
    user_keys: BTreeMap<(UserId, SessionId), KeyStream>,
    // fingerprints of every USK a user has deposited
    used_user_keys: BTreeMap<UserId, BTreeSet<String>>,
}

impl KeyVault {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an owner and the users its AUL names.
    pub fn enroll(&mut self, owner: OwnerId, authorized: impl IntoIterator<Item = UserId>) {
        self.owners.insert(owner);
        self.users.extend(authorized);
    }

    pub fn enroll_user(&mut self, uid: UserId) {
        self.users.insert(uid);
    }

    pub fn store_owner_key(&mut self, oid: &OwnerId, sk: KeyStream, rotate: bool) -> Result<(), KmcError> {
        if !self.owners.contains(oid) {
            return Err(KmcError::UnknownOwner(oid.clone()));
        }
        if self.owner_keys.contains_key(oid) && !rotate {
            return Err(KmcError::KeyExists(oid.clone()));
        }
        self.owner_keys.insert(oid.clone(), sk);
        Ok(())
    }

    pub fn owner_key(&self, oid: &OwnerId) -> Option<&KeyStream> {
        self.owner_keys.get(oid)
    }

    /// Binds `usk` to `session`.
    pub fn store_user_key(
        &mut self,
        uid: &UserId,
        usk: KeyStream,
        session: SessionId,
    ) -> Result<KeyDeposit, KmcError> {
        if !self.users.contains(uid) {
            return Err(KmcError::UnknownUser(uid.clone()));
        }
        let fresh = self
            .used_user_keys
            .entry(uid.clone())
            .or_default()
            .insert(usk.fingerprint());
        self.user_keys.insert((uid.clone(), session), usk);
        Ok(if fresh { KeyDeposit::Fresh } else { KeyDeposit::Reused })
    }

    pub fn user_key(&self, uid: &UserId, session: SessionId) -> Option<&KeyStream> {
        self.user_keys.get(&(uid.clone(), session))
    }

    /// Drops the user's key for `session`.
    pub fn end_session(&mut self, uid: &UserId, session: SessionId) {
        self.user_keys.remove(&(uid.clone(), session));
    }

    /// Decrypts each result under its owner's key and re-encrypts it under
    /// the session key, preserving order. The session key is discarded on
    /// success.
    pub fn reencrypt_results(
        &mut self,
        er: &[ResultImage],
        uid: &UserId,
        session: SessionId,
    ) -> Result<Vec<ResultImage>, KmcError> {
        let usk = self
            .user_key(uid, session)
            .ok_or_else(|| KmcError::MissingSessionKey {
                uid: uid.clone(),
                session,
            })?;
        let ner = er
            .iter()
            .map(|r| {
                let sk = self
                    .owner_keys
                    .get(&r.owner_id)
                    .ok_or_else(|| KmcError::MissingOwnerKey(r.owner_id.clone()))?;
                let plain = image_dec(sk, &r.image)?;
                Ok(ResultImage {
                    owner_id: r.owner_id.clone(),
                    image_id: r.image_id.clone(),
                    image: image_enc(usk, &plain)?,
                })
            })
            .collect::<Result<Vec<_>, KmcError>>()?;
        self.end_session(uid, session);
        Ok(ner)
    }

    /// Persists enrollment and owner keys. Session keys are never written.
    ///
    /// The file holds every owner secret in hex; it must live on the trusted
    /// KMC host and is created with mode 0600 on Unix.
    pub fn save(&self, path: &Path) -> Result<(), KmcError> {
        let mut out = format!("{VAULT_HEADER}\n");
        for oid in &self.owners {
            match self.owner_keys.get(oid) {
                Some(k) => out.push_str(&format!("owner\t{oid}\t{}\n", k.to_hex())),
                None => out.push_str(&format!("owner\t{oid}\t-\n")),
            }
        }
        for uid in &self.users {
            out.push_str(&format!("user\t{uid}\n"));
        }
        for (uid, fps) in &self.used_user_keys {
            for fp in fps {
                out.push_str(&format!("used\t{uid}\t{fp}\n"));
            }
        }
        write_private(path, out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KmcError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(VAULT_HEADER) {
            return Err(KmcError::Format("missing vault header".into()));
        }
        let mut vault = KeyVault::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["owner", oid, key] => {
                    let oid = OwnerId::new(*oid)?;
                    if *key != "-" {
                        vault.owner_keys.insert(oid.clone(), KeyStream::from_hex(key)?);
                    }
                    vault.owners.insert(oid);
                }
                ["user", uid] => {
                    vault.users.insert(UserId::new(*uid)?);
                }
                ["used", uid, fp] => {
                    vault
                        .used_user_keys
                        .entry(UserId::new(*uid)?)
                        .or_default()
                        .insert(fp.to_string());
                }
                _ => return Err(KmcError::Format(format!("line {line:?}"))),
            }
        }
        Ok(vault)
    }
}

#[cfg(unix)]
fn write_private(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(path)?;
    f.write_all(bytes)
}

#[cfg(not(unix))]
fn write_private(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    fs::write(path, bytes)
}
