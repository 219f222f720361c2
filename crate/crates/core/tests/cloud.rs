use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};
use std::thread;

use mipp_core::cloud_node::{CloudError, CloudNode, NewImage, QueryEnvelope, RetrievalPath, UpdateCommand};
use mipp_core::ehd_features::FeatureVector;
use mipp_core::feature_crypto::encrypt_feature_pair;
use mipp_core::group_crypto::GroupParams;
use mipp_core::ids::{AccessKey, ImageId, OwnerId, UserId};
use mipp_core::image::GrayImage;
use mipp_core::similarity::{sim_from_sums, SumPair};

fn params() -> &'static GroupParams {
    static P: OnceLock<GroupParams> = OnceLock::new();
    P.get_or_init(|| GroupParams::generate(64, b"cloud-tests").unwrap())
}

fn oid(s: &str) -> OwnerId {
    OwnerId::new(s).unwrap()
}

fn uid(s: &str) -> UserId {
    UserId::new(s).unwrap()
}

fn iid(s: &str) -> ImageId {
    ImageId::new(s).unwrap()
}

fn ak(b: u8) -> AccessKey {
    AccessKey::from_bytes([b; 32])
}

fn image(seed: u8) -> GrayImage {
    GrayImage::from_fn(8, 8, |x, y| (x as u8).wrapping_mul(seed) ^ y as u8).unwrap()
}

fn new_image(id: &str, bins: &[u32], seed: &[u8]) -> NewImage {
    let f = FeatureVector::new(bins.to_vec()).unwrap();
    NewImage {
        image_id: iid(id),
        image: image(bins[0] as u8),
        feature: encrypt_feature_pair(params(), &f, seed).unwrap(),
    }
}

fn aul(entries: &[(&str, u8)]) -> BTreeSet<(UserId, AccessKey)> {
    entries.iter().map(|(u, k)| (uid(u), ak(*k))).collect()
}

fn query(bins: &[u32], user: &str, key: u8, h: usize) -> QueryEnvelope {
    let f = FeatureVector::new(bins.to_vec()).unwrap();
    QueryEnvelope {
        eq: encrypt_feature_pair(params(), &f, b"query").unwrap(),
        uid: uid(user),
        ak: ak(key),
        h,
    }
}

/// Two owners with three images each; `u1` is authorized by both.
fn two_owner_cloud() -> CloudNode {
    let cloud = CloudNode::new(params().clone());
    let rows: [&[u32]; 6] = [&[2, 3, 4], &[5, 5, 5], &[0, 9, 1], &[7, 0, 7], &[1, 1, 1], &[9, 9, 0]];
    for (o, chunk) in ["o1", "o2"].iter().zip(rows.chunks(3)) {
        let imgs = chunk
            .iter()
            .enumerate()
            .map(|(i, b)| new_image(&format!("i{i}"), b, format!("{o}{i}").as_bytes()))
            .collect();
        cloud.register_owner(oid(o), aul(&[("u1", 1), ("u2", 2)]), imgs).unwrap();
    }
    cloud
}

#[test]
fn registration_builds_one_index_row_per_image() {
    let cloud = two_owner_cloud();
    let snap = cloud.snapshot();
    assert_eq!(snap.index_len(), 6);
    assert!(snap.is_consistent());
    // 2+3+4 and 4+9+16
    assert_eq!(
        snap.index_row(&oid("o1"), &iid("i0")),
        Some(SumPair::new(9, 29, 3).unwrap())
    );
    let tsv = snap.index_tsv();
    assert!(tsv.starts_with("owner_id\timage_id\ts1\ts2\n"));
    assert!(tsv.contains("o1\ti0\t9\t29\n"));
    assert_eq!(tsv.lines().count(), 7);
}

#[test]
fn duplicates_are_rejected_without_changes() {
    let cloud = two_owner_cloud();
    let before = cloud.snapshot().index_tsv();
    assert!(matches!(
        cloud.register_owner(oid("o1"), aul(&[]), vec![]),
        Err(CloudError::DuplicateOwner(_))
    ));
    let dup = vec![new_image("x", &[1, 2, 3], b"a"), new_image("x", &[3, 2, 1], b"b")];
    assert!(matches!(
        cloud.register_owner(oid("o3"), aul(&[]), dup),
        Err(CloudError::DuplicateImage { .. })
    ));
    assert!(matches!(
        cloud.apply_update(&oid("o1"), UpdateCommand::Add(vec![new_image("i0", &[1, 2, 3], b"c")])),
        Err(CloudError::DuplicateImage { .. })
    ));
    assert_eq!(cloud.snapshot().index_tsv(), before);
    assert_eq!(cloud.snapshot().owners().len(), 2);
}

#[test]
fn verify_user_returns_exactly_the_authorizing_owners() {
    let cloud = CloudNode::new(params().clone());
    for k in 0..5 {
        let list = if k % 2 == 0 { aul(&[("u", 7)]) } else { aul(&[("v", 7)]) };
        cloud
            .register_owner(oid(&format!("o{k}")), list, vec![new_image("a", &[1, 2, 3], b"s")])
            .unwrap();
    }
    let expected: BTreeSet<_> = [0, 2, 4].iter().map(|k| oid(&format!("o{k}"))).collect();
    assert_eq!(cloud.verify_user(&uid("u"), &ak(7)), expected);
    assert!(cloud.verify_user(&uid("u"), &ak(8)).is_empty());
    assert!(cloud.verify_user(&uid("nobody"), &ak(7)).is_empty());
}

#[test]
fn top_h_ranks_by_sum_distance() {
    let cloud = two_owner_cloud();
    let q = [2u32, 3, 4];
    let results = cloud.retrieve_top_h(&query(&q, "u1", 1, 100)).unwrap();
    assert_eq!(results.len(), 6);
    // Oracle: evaluate the distance on plaintext sums and sort.
    let qs = SumPair::of(&q).unwrap();
    let rows: [(&str, &str, &[u32]); 6] = [
        ("o1", "i0", &[2, 3, 4]),
        ("o1", "i1", &[5, 5, 5]),
        ("o1", "i2", &[0, 9, 1]),
        ("o2", "i0", &[7, 0, 7]),
        ("o2", "i1", &[1, 1, 1]),
        ("o2", "i2", &[9, 9, 0]),
    ];
    let mut oracle: Vec<(f64, &str, &str)> = rows
        .iter()
        .map(|(o, i, b)| (sim_from_sums(&SumPair::of(b).unwrap(), &qs).unwrap(), *o, *i))
        .collect();
    oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for (got, want) in results.iter().zip(&oracle) {
        assert_eq!((got.owner_id.as_str(), got.image_id.as_str()), (want.1, want.2));
        assert!((got.distance - want.0).abs() < 1e-12);
    }
    let top2 = cloud.retrieve_top_h(&query(&q, "u1", 1, 2)).unwrap();
    assert_eq!(top2, results[..2]);
}

#[test]
fn single_image_is_returned_regardless_of_distance() {
    let cloud = CloudNode::new(params().clone());
    cloud
        .register_owner(oid("o"), aul(&[("u", 1)]), vec![new_image("far", &[255, 255, 0], b"f")])
        .unwrap();
    let r = cloud.retrieve_top_h(&query(&[0, 0, 0], "u", 1, 100)).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].image_id, iid("far"));
}

#[test]
fn unauthorized_and_invalid_queries_fail() {
    let cloud = two_owner_cloud();
    assert!(matches!(
        cloud.retrieve_top_h(&query(&[1, 2, 3], "u1", 9, 10)),
        Err(CloudError::Unauthorized(_))
    ));
    assert!(matches!(
        cloud.retrieve_top_h(&query(&[1, 2, 3], "u1", 1, 0)),
        Err(CloudError::InvalidQuery(_))
    ));
    assert!(matches!(
        cloud.retrieve_top_h(&query(&[1, 2, 3, 4], "u1", 1, 10)),
        Err(CloudError::Similarity(_))
    ));
}

#[test]
fn results_stay_within_authorizing_owners() {
    let cloud = two_owner_cloud();
    cloud
        .register_owner(oid("o3"), aul(&[("u2", 2)]), vec![new_image("z", &[2, 3, 4], b"z")])
        .unwrap();
    let r = cloud.retrieve_top_h(&query(&[2, 3, 4], "u1", 1, 100)).unwrap();
    assert_eq!(r.len(), 6);
    assert!(r.iter().all(|x| x.owner_id != oid("o3")));
    let r = cloud.retrieve_top_h(&query(&[2, 3, 4], "u2", 2, 100)).unwrap();
    assert_eq!(r.len(), 7);
}

#[test]
fn updates_keep_index_and_storage_in_step() {
    let cloud = two_owner_cloud();
    let adds = (0..5).map(|k| new_image(&format!("n{k}"), &[k, k + 1, k + 2], b"n")).collect();
    cloud.apply_update(&oid("o1"), UpdateCommand::Add(adds)).unwrap();
    assert_eq!(cloud.snapshot().index_len(), 11);

    cloud
        .apply_update(&oid("o1"), UpdateCommand::Delete(vec![iid("i0"), iid("n3")]))
        .unwrap();
    let snap = cloud.snapshot();
    assert_eq!(snap.index_len(), 9);
    assert!(snap.is_consistent());
    let r = cloud.retrieve_top_h(&query(&[2, 3, 4], "u1", 1, 100)).unwrap();
    assert!(r.iter().all(|x| !(x.owner_id == oid("o1") && x.image_id == iid("i0"))));

    assert!(matches!(
        cloud.apply_update(&oid("o2"), UpdateCommand::Delete(vec![iid("n1")])),
        Err(CloudError::ForeignImage { .. })
    ));
    assert!(matches!(
        cloud.apply_update(&oid("ghost"), UpdateCommand::Delete(vec![])),
        Err(CloudError::UnknownOwner(_))
    ));
}

#[test]
fn reencrypted_update_leaves_index_rows_bit_identical() {
    let cloud = two_owner_cloud();
    let before = cloud.snapshot();
    let fresh = new_image("i1", &[5, 5, 5], b"brand-new-randomness");
    let old_feature = before.owners()[&oid("o1")].images[&iid("i1")].feature.clone();
    assert_ne!(fresh.feature, old_feature);
    cloud.apply_update(&oid("o1"), UpdateCommand::Update(vec![fresh.clone()])).unwrap();
    let after = cloud.snapshot();
    assert_eq!(after.index_tsv(), before.index_tsv());
    assert_eq!(after.owners()[&oid("o1")].images[&iid("i1")].feature, fresh.feature);
    assert!(matches!(
        cloud.apply_update(&oid("o1"), UpdateCommand::Update(vec![new_image("nope", &[1, 1, 1], b"x")])),
        Err(CloudError::ForeignImage { .. })
    ));
}

#[test]
fn index_and_no_index_paths_agree() {
    let cloud = CloudNode::new(params().clone());
    let imgs = (0..60u32)
        .map(|k| new_image(&format!("k{k:02}"), &[k % 7, (k * 5) % 11, k % 3, 4], &k.to_be_bytes()))
        .collect();
    cloud.register_owner(oid("o"), aul(&[("u", 1)]), imgs).unwrap();
    for h in [1, 10, 60, 100] {
        let q = query(&[3, 2, 1, 4], "u", 1, h);
        let a = cloud.retrieve_top_h_via(&q, RetrievalPath::Index).unwrap();
        let b = cloud.retrieve_top_h_via(&q, RetrievalPath::NoIndex).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), h.min(60));
    }
}

#[test]
fn readers_never_see_half_applied_updates() {
    let cloud = Arc::new(two_owner_cloud());
    let writer = {
        let cloud = Arc::clone(&cloud);
        thread::spawn(move || {
            for k in 0..30u32 {
                let id = format!("w{k}");
                let img = new_image(&id, &[k % 5, 1, 2], &k.to_be_bytes());
                cloud.apply_update(&oid("o2"), UpdateCommand::Add(vec![img])).unwrap();
                if k % 3 == 0 {
                    cloud.apply_update(&oid("o2"), UpdateCommand::Delete(vec![iid(&id)])).unwrap();
                }
            }
        })
    };
    for _ in 0..200 {
        assert!(cloud.snapshot().is_consistent());
    }
    writer.join().unwrap();
    assert_eq!(cloud.snapshot().index_len(), 6 + 20);
}

#[test]
fn save_and_load_roundtrip() {
    let cloud = two_owner_cloud();
    let dir = tempfile::tempdir().unwrap();
    cloud.save(dir.path()).unwrap();
    for p in ["params.txt", "index.tsv", "owners/o1/manifest", "owners/o1/img/i0.pgm", "owners/o2/feat/i2.eft"] {
        assert!(dir.path().join(p).exists(), "{p}");
    }
    let pgm = std::fs::read(dir.path().join("owners/o1/img/i0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n# MIPP-ENC\n"));

    let back = CloudNode::load(dir.path()).unwrap();
    assert_eq!(back.params(), cloud.params());
    assert_eq!(back.snapshot().index_tsv(), cloud.snapshot().index_tsv());
    let q = query(&[2, 3, 4], "u1", 1, 100);
    assert_eq!(back.retrieve_top_h(&q).unwrap(), cloud.retrieve_top_h(&q).unwrap());

    // Saving again after a delete must not leave stale files behind.
    back.apply_update(&oid("o1"), UpdateCommand::Delete(vec![iid("i0")])).unwrap();
    back.save(dir.path()).unwrap();
    assert!(!dir.path().join("owners/o1/img/i0.pgm").exists());
    assert_eq!(CloudNode::load(dir.path()).unwrap().snapshot().index_len(), 5);
}

#[test]
fn load_rejects_index_rows_without_images() {
    let cloud = two_owner_cloud();
    let dir = tempfile::tempdir().unwrap();
    cloud.save(dir.path()).unwrap();
    let index = dir.path().join("index.tsv");
    let mut text = std::fs::read_to_string(&index).unwrap();
    text.push_str("o1\tghost\t1\t1\n");
    std::fs::write(&index, text).unwrap();
    assert!(matches!(CloudNode::load(dir.path()), Err(CloudError::Format(_))));
}
