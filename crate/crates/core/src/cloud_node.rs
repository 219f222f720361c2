//! The honest-but-curious cloud.
//!
//! Stores encrypted images and features per owner, keeps the retrieval
//! index of recovered sums `(S1, S2)` per image, checks users against the
//! authorized user lists and ranks authorized images for a query.
//!
//! The index deliberately holds the plaintext sums: that is what makes a
//! query cost one aggregation instead of one per stored image, and it is
//! also exactly what the cloud learns about each image.
//!
//! Readers work on an immutable [`CloudSnapshot`]. Updates build a new
//! snapshot under a writer lock and publish it in one swap, so a retrieval
//! never sees a half-applied command.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::feature_crypto::{recover_sums, EncryptedFeature, FeatureCryptoError};
use crate::group_crypto::{GroupError, GroupParams};
use crate::ids::{AccessKey, IdError, ImageId, OwnerId, UserId};
use crate::image::{read_pgm, write_pgm, GrayImage, ImageError};
use crate::similarity::{scaled_sim_radicand, SimilarityError, SumPair};

/// Result count used when a query does not ask for one.
pub const DEFAULT_TOP_H: usize = 100;

const MANIFEST_HEADER: &str = "MIPP-OWNER-1";
const INDEX_HEADER: &str = "owner_id\timage_id\ts1\ts2";

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("owner {0} is already registered")]
    DuplicateOwner(OwnerId),
    #[error("image {image} already exists for owner {owner}")]
    DuplicateImage { owner: OwnerId, image: ImageId },
    #[error("unknown owner {0}")]
    UnknownOwner(OwnerId),
    #[error("image {image} does not belong to owner {owner}")]
    ForeignImage { owner: OwnerId, image: ImageId },
    #[error("user {0} is not authorized by any owner")]
    Unauthorized(UserId),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("feature params {found} do not match cloud params {expected}")]
    ParamsMismatch { expected: String, found: String },
    #[error(transparent)]
    Feature(#[from] FeatureCryptoError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("storage format: {0}")]
    Format(String),
}

impl From<IdError> for CloudError {
    fn from(e: IdError) -> Self {
        CloudError::Format(e.to_string())
    }
}

impl From<ImageError> for CloudError {
    fn from(e: ImageError) -> Self {
        CloudError::Format(e.to_string())
    }
}

impl From<GroupError> for CloudError {
    fn from(e: GroupError) -> Self {
        CloudError::Format(e.to_string())
    }
}

/// One encrypted image and its encrypted feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredImage {
    pub image: GrayImage,
    pub feature: EncryptedFeature,
}

/// Upload payload for a single image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewImage {
    pub image_id: ImageId,
    pub image: GrayImage,
    pub feature: EncryptedFeature,
}

#[derive(Debug, Clone, Default)]
pub struct OwnerRecord {
    pub aul: BTreeSet<(UserId, AccessKey)>,
    pub images: BTreeMap<ImageId, Arc<StoredImage>>,
}

/// Row of the retrieval index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry<'a> {
    pub owner_id: &'a OwnerId,
    pub image_id: &'a ImageId,
    pub sums: SumPair,
}

/// `Q = {EQ, EQQ, UID, AK}` plus the requested result count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryEnvelope {
    pub eq: EncryptedFeature,
    pub uid: UserId,
    pub ak: AccessKey,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalPath {
    /// Look up precomputed sums in the index.
    Index,
    /// Re-aggregate every stored ciphertext per query.
    NoIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedImage {
    pub owner_id: OwnerId,
    pub image_id: ImageId,
    pub image: GrayImage,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateCommand {
    Add(Vec<NewImage>),
    Delete(Vec<ImageId>),
    /// Replace ciphertexts of existing images; index rows stay as they are.
    Update(Vec<NewImage>),
}

/// Byte counts of the serialized cloud state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StorageReport {
    pub images: usize,
    pub index_bytes: usize,
    pub feature_bytes: usize,
    pub image_bytes: usize,
}

/// Immutable view of everything the cloud holds.
#[derive(Debug, Clone, Default)]
pub struct CloudSnapshot {
    owners: BTreeMap<OwnerId, OwnerRecord>,
    index: BTreeMap<OwnerId, BTreeMap<ImageId, SumPair>>,
}

impl CloudSnapshot {
    pub fn owners(&self) -> &BTreeMap<OwnerId, OwnerRecord> {
        &self.owners
    }

    pub fn index_len(&self) -> usize {
        self.index.values().map(BTreeMap::len).sum()
    }

    pub fn index_entries(&self) -> impl Iterator<Item = IndexEntry<'_>> {
        self.index.iter().flat_map(|(owner_id, rows)| {
            rows.iter().map(move |(image_id, sums)| IndexEntry {
                owner_id,
                image_id,
                sums: *sums,
            })
        })
    }

    pub fn index_row(&self, owner: &OwnerId, image: &ImageId) -> Option<SumPair> {
        self.index.get(owner)?.get(image).copied()
    }

    /// Index as TSV mirroring the (owner, image, S1, S2) table.
    pub fn index_tsv(&self) -> String {
        let mut out = String::from(INDEX_HEADER);
        out.push('\n');
        for row in self.index_entries() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                row.owner_id, row.image_id, row.sums.s1, row.sums.s2
            ));
        }
        out
    }

    pub fn storage_report(&self) -> StorageReport {
        let mut report = StorageReport {
            index_bytes: self.index_tsv().len(),
            ..StorageReport::default()
        };
        for rec in self.owners.values() {
            for stored in rec.images.values() {
                report.images += 1;
                report.feature_bytes += stored.feature.to_record().len();
                report.image_bytes += write_pgm(&stored.image, true).len();
            }
        }
        report
    }

    /// Every owner's image ids match its index rows one to one.
    pub fn is_consistent(&self) -> bool {
        self.owners.iter().all(|(oid, rec)| {
            let rows = self.index.get(oid);
            rows.map_or(0, BTreeMap::len) == rec.images.len()
                && rec
                    .images
                    .keys()
                    .all(|iid| rows.is_some_and(|r| r.contains_key(iid)))
        }) && self.index.keys().all(|oid| self.owners.contains_key(oid))
    }
}

pub struct CloudNode {
    params: GroupParams,
    current: RwLock<Arc<CloudSnapshot>>,
    writer: Mutex<()>,
}

impl CloudNode {
    pub fn new(params: GroupParams) -> Self {
        CloudNode {
            params,
            current: RwLock::new(Arc::new(CloudSnapshot::default())),
            writer: Mutex::new(()),
        }
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn snapshot(&self) -> Arc<CloudSnapshot> {
        Arc::clone(&self.current.read().expect("snapshot lock poisoned"))
    }

    fn modify<T>(
        &self,
        f: impl FnOnce(&mut CloudSnapshot) -> Result<T, CloudError>,
    ) -> Result<T, CloudError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        *self.current.write().expect("snapshot lock poisoned") = Arc::new(next);
        Ok(out)
    }

    /// Stores a new owner's images and builds their index rows.
    pub fn register_owner(
        &self,
        owner_id: OwnerId,
        aul: BTreeSet<(UserId, AccessKey)>,
        images: Vec<NewImage>,
    ) -> Result<(), CloudError> {
        let rows = self.index_rows(&owner_id, &images, &BTreeMap::new())?;
        self.modify(|snap| {
            if snap.owners.contains_key(&owner_id) {
                return Err(CloudError::DuplicateOwner(owner_id.clone()));
            }
            let mut rec = OwnerRecord {
                aul,
                images: BTreeMap::new(),
            };
            insert_images(&mut rec, images);
            snap.owners.insert(owner_id.clone(), rec);
            snap.index.insert(owner_id, rows);
            Ok(())
        })
    }

    /// Recovers index rows for `images`, rejecting ids already present.
    fn index_rows(
        &self,
        owner_id: &OwnerId,
        images: &[NewImage],
        existing: &BTreeMap<ImageId, Arc<StoredImage>>,
    ) -> Result<BTreeMap<ImageId, SumPair>, CloudError> {
        let mut rows = BTreeMap::new();
        for img in images {
            if existing.contains_key(&img.image_id) || rows.contains_key(&img.image_id) {
                return Err(CloudError::DuplicateImage {
                    owner: owner_id.clone(),
                    image: img.image_id.clone(),
                });
            }
            rows.insert(img.image_id.clone(), recover_sums(&self.params, &img.feature)?);
        }
        Ok(rows)
    }

    /// Owners whose AUL contains `(uid, ak)`.
    pub fn verify_user(&self, uid: &UserId, ak: &AccessKey) -> BTreeSet<OwnerId> {
        authorized_owners(&self.snapshot(), uid, ak)
    }

    pub fn retrieve_top_h(&self, q: &QueryEnvelope) -> Result<Vec<RetrievedImage>, CloudError> {
        self.retrieve_top_h_via(q, RetrievalPath::Index)
    }

    /// Ranks every image of every authorizing owner by `Sim` and returns
    /// the `h` closest. Ties break on `(owner_id, image_id)`.
    pub fn retrieve_top_h_via(
        &self,
        q: &QueryEnvelope,
        path: RetrievalPath,
    ) -> Result<Vec<RetrievedImage>, CloudError> {
        if q.h == 0 {
            return Err(CloudError::InvalidQuery("h must be at least 1".into()));
        }
        let snap = self.snapshot();
        let owners = authorized_owners(&snap, &q.uid, &q.ak);
        if owners.is_empty() {
            return Err(CloudError::Unauthorized(q.uid.clone()));
        }
        let query = recover_sums(&self.params, &q.eq)?;

        let mut scored: Vec<(i128, &OwnerId, &ImageId)> = Vec::new();
        for oid in &owners {
            match path {
                RetrievalPath::Index => {
                    for (iid, sums) in snap.index.get(oid).into_iter().flatten() {
                        scored.push((scaled_sim_radicand(sums, &query)?, oid, iid));
                    }
                }
                RetrievalPath::NoIndex => {
                    for (iid, stored) in &snap.owners[oid].images {
                        let sums = recover_sums(&self.params, &stored.feature)?;
                        scored.push((scaled_sim_radicand(&sums, &query)?, oid, iid));
                    }
                }
            }
        }

        let h = q.h.min(scored.len());
        if h < scored.len() {
            scored.select_nth_unstable(h);
            scored.truncate(h);
        }
        scored.sort_unstable();
        Ok(scored
            .into_iter()
            .map(|(key, oid, iid)| RetrievedImage {
                owner_id: oid.clone(),
                image_id: iid.clone(),
                image: snap.owners[oid].images[iid].image.clone(),
                distance: (key as f64 / query.l as f64).sqrt(),
            })
            .collect())
    }

    pub fn apply_update(&self, owner_id: &OwnerId, command: UpdateCommand) -> Result<(), CloudError> {
        let snap = self.snapshot();
        let rec = snap
            .owners
            .get(owner_id)
            .ok_or_else(|| CloudError::UnknownOwner(owner_id.clone()))?;
        // Expensive recovery happens outside the writer lock.
        let new_rows = match &command {
            UpdateCommand::Add(images) => Some(self.index_rows(owner_id, images, &rec.images)?),
            _ => None,
        };
        drop(snap);

        self.modify(|snap| {
            let rec = snap
                .owners
                .get_mut(owner_id)
                .ok_or_else(|| CloudError::UnknownOwner(owner_id.clone()))?;
            let rows = snap.index.entry(owner_id.clone()).or_default();
            match command {
                UpdateCommand::Add(images) => {
                    let new_rows = new_rows.expect("computed above");
                    if let Some(dup) = new_rows.keys().find(|id| rec.images.contains_key(*id)) {
                        return Err(CloudError::DuplicateImage {
                            owner: owner_id.clone(),
                            image: dup.clone(),
                        });
                    }
                    insert_images(rec, images);
                    rows.extend(new_rows);
                }
                UpdateCommand::Delete(ids) => {
                    check_owned(owner_id, rec, ids.iter())?;
                    for id in &ids {
                        rec.images.remove(id);
                        rows.remove(id);
                    }
                }
                UpdateCommand::Update(images) => {
                    check_owned(owner_id, rec, images.iter().map(|i| &i.image_id))?;
                    let expected = self.params.params_id();
                    if let Some(bad) = images.iter().find(|i| i.feature.params_id != expected) {
                        return Err(CloudError::ParamsMismatch {
                            expected,
                            found: bad.feature.params_id.clone(),
                        });
                    }
                    insert_images(rec, images);
                }
            }
            Ok(())
        })
    }

    /// Writes the on-disk layout under `dir`, replacing any previous owners tree.
    pub fn save(&self, dir: &Path) -> Result<(), CloudError> {
        let snap = self.snapshot();
        fs::create_dir_all(dir)?;
        let owners_dir = dir.join("owners");
        if owners_dir.exists() {
            fs::remove_dir_all(&owners_dir)?;
        }
        fs::write(dir.join("params.txt"), self.params.to_record())?;
        for (oid, rec) in &snap.owners {
            let odir = owners_dir.join(oid.as_str());
            fs::create_dir_all(odir.join("img"))?;
            fs::create_dir_all(odir.join("feat"))?;
            let mut manifest = format!("{MANIFEST_HEADER}\nowner\t{oid}\n");
            for (uid, ak) in &rec.aul {
                manifest.push_str(&format!("aul\t{uid}\t{}\n", ak.to_hex()));
            }
            for (iid, stored) in &rec.images {
                manifest.push_str(&format!("image\t{iid}\n"));
                fs::write(odir.join("img").join(format!("{iid}.pgm")), write_pgm(&stored.image, true))?;
                fs::write(odir.join("feat").join(format!("{iid}.eft")), stored.feature.to_record())?;
            }
            fs::write(odir.join("manifest"), manifest)?;
        }
        fs::write(dir.join("index.tsv"), snap.index_tsv())?;
        Ok(())
    }

    /// Loads a layout written by [`save`](Self::save). Index rows are read
    /// from `index.tsv`, not recomputed.
    pub fn load(dir: &Path) -> Result<Self, CloudError> {
        let bad = |m: String| CloudError::Format(m);
        let params = GroupParams::from_record(&fs::read_to_string(dir.join("params.txt"))?)?;
        let mut snap = CloudSnapshot::default();

        let owners_dir = dir.join("owners");
        if owners_dir.exists() {
            let mut entries: Vec<_> = fs::read_dir(&owners_dir)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.file_name());
            for entry in entries {
                let odir = entry.path();
                let manifest = fs::read_to_string(odir.join("manifest"))?;
                let mut lines = manifest.lines();
                if lines.next() != Some(MANIFEST_HEADER) {
                    return Err(bad(format!("{}: missing manifest header", odir.display())));
                }
                let mut owner: Option<OwnerId> = None;
                let mut rec = OwnerRecord::default();
                for line in lines.filter(|l| !l.is_empty()) {
                    let fields: Vec<&str> = line.split('\t').collect();
                    match fields.as_slice() {
                        ["owner", oid] => owner = Some(OwnerId::new(*oid)?),
                        ["aul", uid, ak] => {
                            rec.aul.insert((UserId::new(*uid)?, AccessKey::from_hex(ak)?));
                        }
                        ["image", iid] => {
                            let iid = ImageId::new(*iid)?;
                            let image = read_pgm(&fs::read(odir.join("img").join(format!("{iid}.pgm")))?)?.image;
                            let feature = EncryptedFeature::from_record(&fs::read_to_string(
                                odir.join("feat").join(format!("{iid}.eft")),
                            )?)?;
                            rec.images.insert(iid, Arc::new(StoredImage { image, feature }));
                        }
                        _ => return Err(bad(format!("manifest line {line:?}"))),
                    }
                }
                let owner = owner.ok_or_else(|| bad(format!("{}: no owner line", odir.display())))?;
                snap.owners.insert(owner, rec);
            }
        }

        let index = fs::read_to_string(dir.join("index.tsv"))?;
        for line in index.lines().skip(1).filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [oid, iid, s1, s2] = fields.as_slice() else {
                return Err(bad(format!("index line {line:?}")));
            };
            let (oid, iid) = (OwnerId::new(*oid)?, ImageId::new(*iid)?);
            let parse = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("index value {v:?}")));
            let dim = snap
                .owners
                .get(&oid)
                .and_then(|r| r.images.get(&iid))
                .map(|s| s.feature.dim())
                .ok_or_else(|| bad(format!("index row for missing image {oid}/{iid}")))?;
            let sums = SumPair::new(parse(s1)?, parse(s2)?, dim)?;
            snap.index.entry(oid).or_default().insert(iid, sums);
        }
        if !snap.is_consistent() {
            return Err(bad("index rows do not match stored images".into()));
        }
        Ok(CloudNode {
            params,
            current: RwLock::new(Arc::new(snap)),
            writer: Mutex::new(()),
        })
    }
}

fn authorized_owners(snap: &CloudSnapshot, uid: &UserId, ak: &AccessKey) -> BTreeSet<OwnerId> {
    let key = (uid.clone(), *ak);
    snap.owners
        .iter()
        .filter(|(_, rec)| rec.aul.contains(&key))
        .map(|(oid, _)| oid.clone())
        .collect()
}

fn insert_images(rec: &mut OwnerRecord, images: Vec<NewImage>) {
    for img in images {
        rec.images.insert(
            img.image_id,
            Arc::new(StoredImage {
                image: img.image,
                feature: img.feature,
            }),
        );
    }
}

fn check_owned<'a>(
    owner: &OwnerId,
    rec: &OwnerRecord,
    mut ids: impl Iterator<Item = &'a ImageId>,
) -> Result<(), CloudError> {
    match ids.find(|id| !rec.images.contains_key(*id)) {
        Some(id) => Err(CloudError::ForeignImage {
            owner: owner.clone(),
            image: id.clone(),
        }),
        None => Ok(()),
    }
}
