//! Canonical byte encoding of protocol messages.
//!
//! Frame: 4-byte big-endian length of everything after it, 1-byte kind tag,
//! 16-byte session id, then the kind's body. Body fields are big-endian
//! `u32` scalars or `u32`-length-prefixed byte strings; lists carry a `u32`
//! count. Every value has exactly one encoding.

use std::fmt;

use thiserror::Error;

use crate::cloud_node::NewImage;
use crate::feature_crypto::EncryptedFeature;
use crate::ids::{AccessKey, ImageId, OwnerId, SessionId, UserId};
use crate::image::GrayImage;
use crate::image_cipher::KeyStream;
use crate::kmc_node::ResultImage;

const HEADER_LEN: usize = 4 + 1 + 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("decode error at byte {offset}: {reason}")]
pub struct WireError {
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    OwnerUpload = 1,
    OwnerKeyDeposit = 2,
    UserQuery = 3,
    UserKeyDeposit = 4,
    CloudToKmc = 5,
    KmcToCloud = 6,
    CloudToUser = 7,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::OwnerUpload,
        MessageKind::OwnerKeyDeposit,
        MessageKind::UserQuery,
        MessageKind::UserKeyDeposit,
        MessageKind::CloudToKmc,
        MessageKind::KmcToCloud,
        MessageKind::CloudToUser,
    ];

    /// Workflow step number, 1 through 7.
    pub fn step(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::OwnerUpload => "OwnerUpload",
            MessageKind::OwnerKeyDeposit => "OwnerKeyDeposit",
            MessageKind::UserQuery => "UserQuery",
            MessageKind::UserKeyDeposit => "UserKeyDeposit",
            MessageKind::CloudToKmc => "CloudToKmc",
            MessageKind::KmcToCloud => "KmcToCloud",
            MessageKind::CloudToUser => "CloudToUser",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// ① owner → cloud: AUL, encrypted images and features.
    OwnerUpload {
        owner_id: OwnerId,
        aul: Vec<(UserId, AccessKey)>,
        images: Vec<NewImage>,
    },
    /// ② owner → KMC: image key and the users it authorizes.
    OwnerKeyDeposit {
        owner_id: OwnerId,
        authorized: Vec<UserId>,
        sk: KeyStream,
    },
    /// ③ user → cloud.
    UserQuery {
        uid: UserId,
        ak: AccessKey,
        h: u32,
        eq: EncryptedFeature,
    },
    /// ④ user → KMC: fresh per-session key.
    UserKeyDeposit { uid: UserId, usk: KeyStream },
    /// ⑤ cloud → KMC: results under owner keys.
    CloudToKmc {
        uid: UserId,
        ak: AccessKey,
        results: Vec<ResultImage>,
    },
    /// ⑥ KMC → cloud: results under the user's key.
    KmcToCloud { uid: UserId, results: Vec<ResultImage> },
    /// ⑦ cloud → user.
    CloudToUser { results: Vec<ResultImage> },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::OwnerUpload { .. } => MessageKind::OwnerUpload,
            Payload::OwnerKeyDeposit { .. } => MessageKind::OwnerKeyDeposit,
            Payload::UserQuery { .. } => MessageKind::UserQuery,
            Payload::UserKeyDeposit { .. } => MessageKind::UserKeyDeposit,
            Payload::CloudToKmc { .. } => MessageKind::CloudToKmc,
            Payload::KmcToCloud { .. } => MessageKind::KmcToCloud,
            Payload::CloudToUser { .. } => MessageKind::CloudToUser,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub session: SessionId,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

pub fn encode_message(m: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(256));
    w.0.extend_from_slice(&[0; 4]);
    w.0.push(m.kind() as u8);
    w.0.extend_from_slice(&m.session.0);
    match &m.payload {
        Payload::OwnerUpload { owner_id, aul, images } => {
            w.str(owner_id.as_str());
            w.u32(aul.len());
            for (uid, ak) in aul {
                w.str(uid.as_str());
                w.bytes(ak.as_bytes());
            }
            w.u32(images.len());
            for img in images {
                w.str(img.image_id.as_str());
                w.image(&img.image);
                w.str(&img.feature.to_record());
            }
        }
        Payload::OwnerKeyDeposit { owner_id, authorized, sk } => {
            w.str(owner_id.as_str());
            w.u32(authorized.len());
            for uid in authorized {
                w.str(uid.as_str());
            }
            w.bytes(sk.as_bytes());
        }
        Payload::UserQuery { uid, ak, h, eq } => {
            w.str(uid.as_str());
            w.bytes(ak.as_bytes());
            w.u32(*h as usize);
            w.str(&eq.to_record());
        }
        Payload::UserKeyDeposit { uid, usk } => {
            w.str(uid.as_str());
            w.bytes(usk.as_bytes());
        }
        Payload::CloudToKmc { uid, ak, results } => {
            w.str(uid.as_str());
            w.bytes(ak.as_bytes());
            w.results(results);
        }
        Payload::KmcToCloud { uid, results } => {
            w.str(uid.as_str());
            w.results(results);
        }
        Payload::CloudToUser { results } => w.results(results),
    }
    let len = (w.0.len() - 4) as u32;
    w.0[..4].copy_from_slice(&len.to_be_bytes());
    w.0
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < HEADER_LEN {
        return Err(r.err(format!("frame shorter than the {HEADER_LEN}-byte header")));
    }
    let declared = r.u32()? as usize;
    if declared != bytes.len() - 4 {
        return Err(WireError {
            offset: 0,
            reason: format!("length prefix {declared} but {} bytes follow", bytes.len() - 4),
        });
    }
    let tag = r.take(1)?[0];
    let kind = MessageKind::from_tag(tag).ok_or_else(|| WireError {
        offset: 4,
        reason: format!("unknown kind tag {tag}"),
    })?;
    let session = SessionId(r.take(16)?.try_into().expect("16 bytes"));
    let payload = match kind {
        MessageKind::OwnerUpload => {
            let owner_id = r.id(OwnerId::new)?;
            let n = r.count(4)?;
            let mut aul = Vec::with_capacity(n);
            for _ in 0..n {
                aul.push((r.id(UserId::new)?, r.access_key()?));
            }
            let n = r.count(4)?;
            let mut images = Vec::with_capacity(n);
            for _ in 0..n {
                let image_id = r.id(ImageId::new)?;
                let image = r.image()?;
                let feature = r.feature()?;
                images.push(NewImage {
                    image_id,
                    image,
                    feature,
                });
            }
            Payload::OwnerUpload { owner_id, aul, images }
        }
        MessageKind::OwnerKeyDeposit => {
            let owner_id = r.id(OwnerId::new)?;
            let n = r.count(4)?;
            let mut authorized = Vec::with_capacity(n);
            for _ in 0..n {
                authorized.push(r.id(UserId::new)?);
            }
            let sk = r.key()?;
            Payload::OwnerKeyDeposit {
                owner_id,
                authorized,
                sk,
            }
        }
        MessageKind::UserQuery => Payload::UserQuery {
            uid: r.id(UserId::new)?,
            ak: r.access_key()?,
            h: r.u32()?,
            eq: r.feature()?,
        },
        MessageKind::UserKeyDeposit => Payload::UserKeyDeposit {
            uid: r.id(UserId::new)?,
            usk: r.key()?,
        },
        MessageKind::CloudToKmc => Payload::CloudToKmc {
            uid: r.id(UserId::new)?,
            ak: r.access_key()?,
            results: r.results()?,
        },
        MessageKind::KmcToCloud => Payload::KmcToCloud {
            uid: r.id(UserId::new)?,
            results: r.results()?,
        },
        MessageKind::CloudToUser => Payload::CloudToUser {
            results: r.results()?,
        },
    };
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Message { session, payload })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("field exceeds u32 range");
        self.0.extend_from_slice(&v.to_be_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }

    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    fn image(&mut self, img: &GrayImage) {
        self.u32(img.width());
        self.u32(img.height());
        self.bytes(img.pixels());
    }

    fn results(&mut self, results: &[ResultImage]) {
        self.u32(results.len());
        for r in results {
            self.str(r.owner_id.as_str());
            self.str(r.image_id.as_str());
            self.image(&r.image);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: String) -> WireError {
        WireError {
            offset: self.pos,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// A list count, bounded by what the remaining bytes could hold.
    fn count(&mut self, min_item_len: usize) -> Result<usize, WireError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item_len) > self.buf.len() - self.pos {
            return Err(WireError {
                offset: at,
                reason: format!("list of {n} items cannot fit in the remaining bytes"),
            });
        }
        Ok(n)
    }

    fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        self.take(n).map_err(|e| WireError {
            offset: at,
            reason: format!("field length {n}: {}", e.reason),
        })
    }

    fn text(&mut self) -> Result<&'a str, WireError> {
        let at = self.pos;
        std::str::from_utf8(self.bytes()?).map_err(|_| WireError {
            offset: at,
            reason: "field is not UTF-8".into(),
        })
    }

    fn id<T, E: fmt::Display>(&mut self, make: impl Fn(String) -> Result<T, E>) -> Result<T, WireError> {
        let at = self.pos;
        let s = self.text()?;
        make(s.to_string()).map_err(|e| WireError {
            offset: at,
            reason: e.to_string(),
        })
    }

    fn access_key(&mut self) -> Result<AccessKey, WireError> {
        let at = self.pos;
        let b: [u8; 32] = self.bytes()?.try_into().map_err(|_| WireError {
            offset: at,
            reason: "access key must be 32 bytes".into(),
        })?;
        Ok(AccessKey::from_bytes(b))
    }

    fn key(&mut self) -> Result<KeyStream, WireError> {
        let at = self.pos;
        KeyStream::from_bytes(self.bytes()?.to_vec()).map_err(|e| WireError {
            offset: at,
            reason: e.to_string(),
        })
    }

    fn image(&mut self) -> Result<GrayImage, WireError> {
        let at = self.pos;
        let w = self.u32()? as usize;
        let h = self.u32()? as usize;
        let pixels = self.bytes()?.to_vec();
        GrayImage::new(w, h, pixels).map_err(|e| WireError {
            offset: at,
            reason: e.to_string(),
        })
    }

    fn feature(&mut self) -> Result<EncryptedFeature, WireError> {
        let at = self.pos;
        let text = self.text()?;
        let f = EncryptedFeature::from_record(text).map_err(|e| WireError {
            offset: at,
            reason: e.to_string(),
        })?;
        // Reject non-canonical spellings such as leading zeros.
        if f.to_record() != text {
            return Err(WireError {
                offset: at,
                reason: "feature record is not in canonical form".into(),
            });
        }
        Ok(f)
    }

    fn results(&mut self) -> Result<Vec<ResultImage>, WireError> {
        let n = self.count(4)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(ResultImage {
                owner_id: self.id(OwnerId::new)?,
                image_id: self.id(ImageId::new)?,
                image: self.image()?,
            });
        }
        Ok(out)
    }
}
