//! In-process simulation of the full workflow between owners, users, the
//! cloud and the KMC.
//!
//! Setup: each owner uploads encrypted images and features to the cloud (①)
//! and deposits its image key at the KMC (②). A query session then runs
//! ③ user → cloud, ④ user → KMC, ⑤ cloud → KMC, ⑥ KMC → cloud and
//! ⑦ cloud → user. Every hop is encoded with [`wire`] and decoded by the
//! receiver, and every message the cloud receives is scanned for owner
//! plaintexts.

pub mod wire;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cloud_node::{CloudError, CloudNode, NewImage, QueryEnvelope};
use crate::ehd_features::{extract_ehd, EhdConfig, FeatureError, FeatureVector};
use crate::feature_crypto::{encrypt_feature_pair, FeatureCryptoError};
use crate::group_crypto::GroupParams;
use crate::ids::{AccessKey, ImageId, OwnerId, SessionId, UserId};
use crate::image::{write_pgm, GrayImage};
use crate::image_cipher::{image_dec, image_enc, keygen, CipherError, KeyStream};
use crate::kmc_node::{KeyDeposit, KeyVault, KmcError, ResultImage};
use crate::rng::{child_seed, derive_seed, seeded_rng};
use crate::similarity::euc_dis;

pub use wire::{decode_message, encode_message, Message, MessageKind, Payload, WireError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Kmc(#[from] KmcError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    FeatureCrypto(#[from] FeatureCryptoError),
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error("user {0} is not registered in the simulation")]
    UnknownUser(UserId),
    #[error("owner {0} is already registered in the simulation")]
    DuplicateOwner(OwnerId),
    #[error("user {0} reused a session key")]
    KeyReuse(UserId),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// Fixed inputs of a simulated deployment.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: Vec<u8>,
    /// Keystream length for owner and user keys; bounds the image size.
    pub max_image_pixels: usize,
    pub security_k: u32,
    pub ehd: EhdConfig,
}

impl SimConfig {
    pub fn new(seed: &[u8]) -> Self {
        SimConfig {
            seed: seed.to_vec(),
            max_image_pixels: 256 * 256,
            security_k: 128,
            ehd: EhdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Actor {
    Owner(OwnerId),
    User(UserId),
    Cloud,
    Kmc,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Owner(o) => write!(f, "owner:{o}"),
            Actor::User(u) => write!(f, "user:{u}"),
            Actor::Cloud => f.write_str("cloud"),
            Actor::Kmc => f.write_str("kmc"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Sent {
        kind: MessageKind,
        from: Actor,
        to: Actor,
        bytes: usize,
        /// First 8 bytes of SHA-256 over the encoded frame.
        digest: [u8; 8],
    },
    AuthorizationFailed { uid: UserId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub session: SessionId,
    pub event: Event,
}

impl TranscriptEntry {
    pub fn kind(&self) -> Option<MessageKind> {
        match &self.event {
            Event::Sent { kind, .. } => Some(*kind),
            Event::AuthorizationFailed { .. } => None,
        }
    }
}

impl fmt::Display for TranscriptEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.event {
            Event::Sent {
                kind,
                from,
                to,
                bytes,
                digest,
            } => write!(
                f,
                "{}\t{}\t{kind}\t{from}\t{to}\t{bytes}\t{}",
                self.session,
                kind.step(),
                hex::encode(digest)
            ),
            Event::AuthorizationFailed { uid } => write!(
                f,
                "{}\t-\tAuthorizationFailed\tcloud\tuser:{uid}\t0\t-",
                self.session
            ),
        }
    }
}

/// Writes entries one per line: session, step, kind, from, to, bytes, digest.
pub fn format_log(entries: &[TranscriptEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

/// A result as the user ranks it after decryption.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub owner_id: OwnerId,
    pub image_id: ImageId,
    /// Euclidean distance between plaintext EHD vectors; infinite if the
    /// image is too small to describe.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionOutcome {
    Completed {
        /// Decrypted images in the order the cloud ranked them.
        received: Vec<ResultImage>,
        /// User-side ranking by plaintext distance.
        ranked: Vec<RankedResult>,
    },
    Unauthorized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionTranscript {
    pub session: SessionId,
    pub entries: Vec<TranscriptEntry>,
    pub outcome: SessionOutcome,
}

impl SessionTranscript {
    pub fn kinds(&self) -> Vec<MessageKind> {
        self.entries.iter().filter_map(TranscriptEntry::kind).collect()
    }

    pub fn to_log(&self) -> String {
        format_log(&self.entries)
    }
}

#[derive(Debug, Clone)]
pub struct QueryRequest {
    pub uid: UserId,
    pub image: GrayImage,
    pub h: usize,
    /// Distinguishes sessions of the same user; seeds the session id and key.
    pub nonce: u64,
}

/// Where an owner plaintext was found in cloud-visible bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exposure {
    pub location: String,
    pub owner_id: OwnerId,
    pub image_id: ImageId,
    pub what: &'static str,
}

struct OwnerActor {
    images: BTreeMap<ImageId, GrayImage>,
    features: BTreeMap<ImageId, FeatureVector>,
}

pub struct World {
    config: SimConfig,
    cloud: CloudNode,
    kmc: Mutex<KeyVault>,
    owners: BTreeMap<OwnerId, OwnerActor>,
    users: BTreeMap<UserId, AccessKey>,
    setup_log: Vec<TranscriptEntry>,
    scanner: PlaintextScanner,
    exposures: Mutex<Vec<Exposure>>,
}

impl World {
    pub fn new(params: GroupParams, config: SimConfig) -> Self {
        World {
            config,
            cloud: CloudNode::new(params),
            kmc: Mutex::new(KeyVault::new()),
            owners: BTreeMap::new(),
            users: BTreeMap::new(),
            setup_log: Vec::new(),
            scanner: PlaintextScanner::default(),
            exposures: Mutex::new(Vec::new()),
        }
    }

    /// Resumes a deployment from persisted cloud and KMC state. Owner
    /// plaintexts are not part of that state, so only message traffic from
    /// owners added afterwards is scanned.
    pub fn restore(cloud: CloudNode, kmc: KeyVault, users: BTreeMap<UserId, AccessKey>, config: SimConfig) -> Self {
        World {
            config,
            cloud,
            kmc: Mutex::new(kmc),
            owners: BTreeMap::new(),
            users,
            setup_log: Vec::new(),
            scanner: PlaintextScanner::default(),
            exposures: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn users(&self) -> &BTreeMap<UserId, AccessKey> {
        &self.users
    }

    /// A copy of the KMC's persistent state.
    pub fn kmc_state(&self) -> KeyVault {
        self.kmc.lock().expect("kmc lock").clone()
    }

    pub fn cloud(&self) -> &CloudNode {
        &self.cloud
    }

    pub fn setup_log(&self) -> &[TranscriptEntry] {
        &self.setup_log
    }

    pub fn access_key(&self, uid: &UserId) -> Option<AccessKey> {
        self.users.get(uid).copied()
    }

    pub fn owner_plaintext(&self, owner: &OwnerId, image: &ImageId) -> Option<&GrayImage> {
        self.owners.get(owner)?.images.get(image)
    }

    pub fn kmc_holds_session_key(&self, uid: &UserId, session: SessionId) -> bool {
        self.kmc.lock().expect("kmc lock").user_key(uid, session).is_some()
    }

    /// Registers a user with the KMC and mints its access key. A user keeps
    /// one access key for every owner that authorizes it.
    pub fn add_user(&mut self, uid: &UserId) -> AccessKey {
        if let Some(ak) = self.users.get(uid) {
            return *ak;
        }
        let mut rng = seeded_rng("mipp/sim/ak", &[&self.config.seed[..], uid.as_str().as_bytes()].concat());
        let ak = AccessKey::random(&mut rng);
        self.users.insert(uid.clone(), ak);
        self.kmc.lock().expect("kmc lock").enroll_user(uid.clone());
        ak
    }

    /// Runs setup steps ① and ② for one owner.
    pub fn add_owner(
        &mut self,
        owner_id: &OwnerId,
        images: Vec<(ImageId, GrayImage)>,
        authorized: &[UserId],
    ) -> Result<(), SimError> {
        if self.owners.contains_key(owner_id) {
            return Err(SimError::DuplicateOwner(owner_id.clone()));
        }
        let aul: Vec<(UserId, AccessKey)> = authorized
            .iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|uid| (uid.clone(), self.add_user(uid)))
            .collect();

        let seed = &self.config.seed;
        let owner_seed = [seed.as_slice(), owner_id.as_str().as_bytes()].concat();
        let sk = keygen(
            self.config.security_k,
            self.config.max_image_pixels,
            &derive_seed("mipp/sim/owner-sk", &owner_seed),
        )?;
        let mut actor = OwnerActor {
            images: BTreeMap::new(),
            features: BTreeMap::new(),
        };
        let mut uploads = Vec::with_capacity(images.len());
        for (image_id, image) in images {
            let f = extract_ehd(&image, &self.config.ehd)?;
            let feature_seed = [owner_seed.as_slice(), image_id.as_str().as_bytes()].concat();
            let feature = encrypt_feature_pair(
                self.cloud.params(),
                &f,
                &derive_seed("mipp/sim/owner-feature", &feature_seed),
            )?;
            uploads.push(NewImage {
                image_id: image_id.clone(),
                image: image_enc(&sk, &image)?,
                feature,
            });
            actor.features.insert(image_id.clone(), f);
            actor.images.insert(image_id, image);
        }
        self.scanner.add_owner(owner_id, &actor);
        self.owners.insert(owner_id.clone(), actor);

        let setup = SessionId::default();
        let owner = Actor::Owner(owner_id.clone());
        let upload = Message {
            session: setup,
            payload: Payload::OwnerUpload {
                owner_id: owner_id.clone(),
                aul: aul.clone(),
                images: uploads,
            },
        };
        let deposit = Message {
            session: setup,
            payload: Payload::OwnerKeyDeposit {
                owner_id: owner_id.clone(),
                authorized: aul.into_iter().map(|(u, _)| u).collect(),
                sk,
            },
        };
        let mut mailbox = Mailbox::default();
        mailbox.post(owner.clone(), Actor::Cloud, &upload);
        mailbox.post(owner, Actor::Kmc, &deposit);
        while let Some((to, bytes)) = mailbox.next() {
            let msg = self.receive(&to, &bytes)?;
            match (to, msg.payload) {
                (Actor::Cloud, Payload::OwnerUpload { owner_id, aul, images }) => {
                    self.cloud
                        .register_owner(owner_id, aul.into_iter().collect(), images)?;
                }
                (Actor::Kmc, Payload::OwnerKeyDeposit { owner_id, authorized, sk }) => {
                    let mut kmc = self.kmc.lock().expect("kmc lock");
                    kmc.enroll(owner_id.clone(), authorized);
                    kmc.store_owner_key(&owner_id, sk, false)?;
                }
                (to, payload) => return Err(unexpected(&to, payload.kind())),
            }
        }
        self.setup_log.extend(mailbox.log);
        Ok(())
    }

    /// Runs steps ③ to ⑦ for one query.
    pub fn run_session(&self, req: &QueryRequest) -> Result<SessionTranscript, SimError> {
        let ak = *self
            .users
            .get(&req.uid)
            .ok_or_else(|| SimError::UnknownUser(req.uid.clone()))?;
        let user_seed = [
            self.config.seed.as_slice(),
            req.uid.as_str().as_bytes(),
            &req.nonce.to_be_bytes(),
        ]
        .concat();
        let session = SessionId(
            derive_seed("mipp/sim/session", &user_seed)[..16]
                .try_into()
                .expect("16 bytes"),
        );
        let h = u32::try_from(req.h).map_err(|_| SimError::Protocol("h exceeds u32".into()))?;

        // User side: describe and encrypt the query, mint a fresh key.
        let query_feature = extract_ehd(&req.image, &self.config.ehd)?;
        let eq = encrypt_feature_pair(
            self.cloud.params(),
            &query_feature,
            &derive_seed("mipp/sim/query-feature", &user_seed),
        )?;
        let usk = keygen(
            self.config.security_k,
            self.config.max_image_pixels,
            &child_seed(&user_seed, "mipp/sim/usk", 0),
        )?;

        let user = Actor::User(req.uid.clone());
        let mut mailbox = Mailbox::default();
        mailbox.post(
            user.clone(),
            Actor::Cloud,
            &Message {
                session,
                payload: Payload::UserQuery {
                    uid: req.uid.clone(),
                    ak,
                    h,
                    eq,
                },
            },
        );
        mailbox.post(
            user.clone(),
            Actor::Kmc,
            &Message {
                session,
                payload: Payload::UserKeyDeposit {
                    uid: req.uid.clone(),
                    usk: usk.clone(),
                },
            },
        );

        let result = self.pump(&mut mailbox, session, &req.uid, &usk, &query_feature);
        if !matches!(result, Ok(SessionOutcome::Completed { .. })) {
            self.kmc.lock().expect("kmc lock").end_session(&req.uid, session);
        }
        Ok(SessionTranscript {
            session,
            entries: mailbox.log,
            outcome: result?,
        })
    }

    fn pump(
        &self,
        mailbox: &mut Mailbox,
        session: SessionId,
        uid: &UserId,
        usk: &KeyStream,
        query_feature: &FeatureVector,
    ) -> Result<SessionOutcome, SimError> {
        while let Some((to, bytes)) = mailbox.next() {
            let msg = self.receive(&to, &bytes)?;
            if msg.session != session {
                return Err(SimError::Protocol(format!(
                    "message for session {} inside session {session}",
                    msg.session
                )));
            }
            match (to, msg.payload) {
                (Actor::Cloud, Payload::UserQuery { uid, ak, h, eq }) => {
                    if self.cloud.verify_user(&uid, &ak).is_empty() {
                        mailbox.log.push(TranscriptEntry {
                            session,
                            event: Event::AuthorizationFailed { uid },
                        });
                        // Pending deliveries, including the key deposit, are dropped.
                        return Ok(SessionOutcome::Unauthorized);
                    }
                    let envelope = QueryEnvelope {
                        eq,
                        uid: uid.clone(),
                        ak,
                        h: h as usize,
                    };
                    let results = self
                        .cloud
                        .retrieve_top_h(&envelope)?
                        .into_iter()
                        .map(|r| ResultImage {
                            owner_id: r.owner_id,
                            image_id: r.image_id,
                            image: r.image,
                        })
                        .collect();
                    mailbox.post(
                        Actor::Cloud,
                        Actor::Kmc,
                        &Message {
                            session,
                            payload: Payload::CloudToKmc { uid, ak, results },
                        },
                    );
                }
                (Actor::Kmc, Payload::UserKeyDeposit { uid, usk }) => {
                    let deposit = self
                        .kmc
                        .lock()
                        .expect("kmc lock")
                        .store_user_key(&uid, usk, session)?;
                    if deposit == KeyDeposit::Reused {
                        return Err(SimError::KeyReuse(uid));
                    }
                }
                (Actor::Kmc, Payload::CloudToKmc { uid, results, .. }) => {
                    let ner = self
                        .kmc
                        .lock()
                        .expect("kmc lock")
                        .reencrypt_results(&results, &uid, session)?;
                    mailbox.post(
                        Actor::Kmc,
                        Actor::Cloud,
                        &Message {
                            session,
                            payload: Payload::KmcToCloud { uid, results: ner },
                        },
                    );
                }
                (Actor::Cloud, Payload::KmcToCloud { uid, results }) => {
                    mailbox.post(
                        Actor::Cloud,
                        Actor::User(uid),
                        &Message {
                            session,
                            payload: Payload::CloudToUser { results },
                        },
                    );
                }
                (Actor::User(to_uid), Payload::CloudToUser { results }) if &to_uid == uid => {
                    return self.finish_user(results, usk, query_feature);
                }
                (to, payload) => return Err(unexpected(&to, payload.kind())),
            }
        }
        Err(SimError::Protocol("session ended without a reply to the user".into()))
    }

    /// Decrypts the results and ranks them by plaintext Euclidean distance
    /// between locally extracted EHD vectors.
    fn finish_user(
        &self,
        results: Vec<ResultImage>,
        usk: &KeyStream,
        query_feature: &FeatureVector,
    ) -> Result<SessionOutcome, SimError> {
        let received = results
            .into_iter()
            .map(|r| {
                Ok(ResultImage {
                    image: image_dec(usk, &r.image)?,
                    ..r
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        let mut ranked = received
            .iter()
            .map(|r| {
                let distance = match extract_ehd(&r.image, &self.config.ehd) {
                    Ok(f) => euc_dis(&f, query_feature)?,
                    Err(_) => f64::INFINITY,
                };
                Ok(RankedResult {
                    owner_id: r.owner_id.clone(),
                    image_id: r.image_id.clone(),
                    distance,
                })
            })
            .collect::<Result<Vec<_>, crate::similarity::SimilarityError>>()
            .map_err(|e| SimError::Protocol(e.to_string()))?;
        ranked.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| (&a.owner_id, &a.image_id).cmp(&(&b.owner_id, &b.image_id)))
        });
        Ok(SessionOutcome::Completed { received, ranked })
    }

    fn receive(&self, to: &Actor, bytes: &[u8]) -> Result<Message, SimError> {
        if *to == Actor::Cloud {
            let kind = MessageKind::ALL
                .into_iter()
                .find(|k| bytes.get(4) == Some(&k.step()))
                .map_or("unknown", MessageKind::name);
            let found = self.scanner.scan(bytes, &format!("message {kind}"));
            self.exposures.lock().expect("exposure lock").extend(found);
        }
        Ok(decode_message(bytes)?)
    }

    /// Every owner plaintext found in bytes the cloud received or stores.
    pub fn plaintext_exposures(&self) -> Vec<Exposure> {
        let mut out = self.exposures.lock().expect("exposure lock").clone();
        let snap = self.cloud.snapshot();
        for (oid, rec) in snap.owners() {
            for (iid, stored) in &rec.images {
                let at = format!("stored {oid}/{iid}");
                out.extend(self.scanner.scan(&write_pgm(&stored.image, true), &at));
                out.extend(self.scanner.scan(stored.feature.to_record().as_bytes(), &at));
            }
        }
        out.extend(self.scanner.scan(snap.index_tsv().as_bytes(), "index"));
        out
    }
}

fn unexpected(to: &Actor, kind: MessageKind) -> SimError {
    SimError::Protocol(format!("{to} cannot handle {kind}"))
}

/// FIFO of encoded frames with a send log.
#[derive(Default)]
struct Mailbox {
    queue: VecDeque<(Actor, Vec<u8>)>,
    log: Vec<TranscriptEntry>,
}

impl Mailbox {
    fn post(&mut self, from: Actor, to: Actor, msg: &Message) {
        let bytes = encode_message(msg);
        let digest: [u8; 8] = Sha256::digest(&bytes)[..8].try_into().expect("8 bytes");
        self.log.push(TranscriptEntry {
            session: msg.session,
            event: Event::Sent {
                kind: msg.kind(),
                from,
                to: to.clone(),
                bytes: bytes.len(),
                digest,
            },
        });
        self.queue.push_back((to, bytes));
    }

    fn next(&mut self) -> Option<(Actor, Vec<u8>)> {
        self.queue.pop_front()
    }
}

const SCAN_WINDOW: usize = 16;

struct Needle {
    bytes: Vec<u8>,
    owner_id: OwnerId,
    image_id: ImageId,
    what: &'static str,
}

/// Substring search for many plaintext needles at once, keyed by each
/// needle's first [`SCAN_WINDOW`] bytes.
#[derive(Default)]
struct PlaintextScanner {
    needles: Vec<Needle>,
    by_prefix: HashMap<[u8; SCAN_WINDOW], Vec<usize>>,
}

impl PlaintextScanner {
    fn add_owner(&mut self, owner_id: &OwnerId, actor: &OwnerActor) {
        for (iid, img) in &actor.images {
            self.add(img.pixels().to_vec(), owner_id, iid, "image");
        }
        for (iid, f) in &actor.features {
            let raw: Vec<u8> = f.iter().map(|&b| b as u8).collect();
            self.add(raw, owner_id, iid, "feature");
            self.add(f.to_string().into_bytes(), owner_id, iid, "feature-text");
        }
    }

    fn add(&mut self, bytes: Vec<u8>, owner_id: &OwnerId, image_id: &ImageId, what: &'static str) {
        if bytes.len() < SCAN_WINDOW {
            return;
        }
        let prefix: [u8; SCAN_WINDOW] = bytes[..SCAN_WINDOW].try_into().expect("window");
        self.by_prefix.entry(prefix).or_default().push(self.needles.len());
        self.needles.push(Needle {
            bytes,
            owner_id: owner_id.clone(),
            image_id: image_id.clone(),
            what,
        });
    }

    fn scan(&self, haystack: &[u8], location: &str) -> Vec<Exposure> {
        let mut found = Vec::new();
        if self.needles.is_empty() {
            return found;
        }
        for (i, window) in haystack.windows(SCAN_WINDOW).enumerate() {
            let Some(ids) = self.by_prefix.get(window) else {
                continue;
            };
            for &id in ids {
                let n = &self.needles[id];
                if haystack[i..].starts_with(&n.bytes) {
                    found.push(Exposure {
                        location: location.to_string(),
                        owner_id: n.owner_id.clone(),
                        image_id: n.image_id.clone(),
                        what: n.what,
                    });
                }
            }
        }
        found
    }
}
