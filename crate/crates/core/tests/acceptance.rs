//! Acceptance gate. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::Rng;

use mipp_core::cloud_node::{NewImage, RetrievalPath, StorageReport, UpdateCommand};
use mipp_core::eval::bench::{encrypt_uploads, median, random_features, BenchCloud};
use mipp_core::eval::{
    compute_metrics, extract_all, leakage_histogram, plain_runs, EncryptedDeployment, GroundTruth, Method,
    SyntheticConfig,
};
use mipp_core::group_crypto::{aggregate_and_recover, encrypt_vector};
use mipp_core::protocol_sim::{QueryRequest, SessionOutcome, SimConfig, World};
use mipp_core::rng::seeded_rng;
use mipp_core::{
    encrypt_feature_pair, image_dec, image_enc, keygen, new_dis, recover_sums, sim_from_sums, CloudNode,
    EhdConfig, FeatureVector, GrayImage, GroupParams, ImageId, OwnerId, SumPair, UserId,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn params() -> &'static GroupParams {
    static P: OnceLock<GroupParams> = OnceLock::new();
    P.get_or_init(|| GroupParams::generate(64, b"acceptance").expect("64-bit parameters"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secure_sum_exactness() -> Outcome {
    let p = params();
    let mut rng = seeded_rng("acceptance/c1", b"");
    let start = Instant::now();
    for trial in 0..500u64 {
        let l = rng.gen_range(3..=128);
        let values: Vec<u64> = (0..l).map(|_| rng.gen_range(0..256)).collect();
        let ct = encrypt_vector(p, &values, &trial.to_be_bytes()).map_err(|e| e.to_string())?;
        let got = aggregate_and_recover(p, &ct).map_err(|e| e.to_string())?;
        let want = BigUint::from(values.iter().sum::<u64>());
        ensure(got == want, || format!("trial {trial}: recovered {got}, expected {want}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("500 vectors exact in {:.2}s", elapsed.as_secs_f64()))
}

fn cipher_roundtrip() -> Outcome {
    let mut rng = seeded_rng("acceptance/c2", b"");
    for trial in 0..100u64 {
        let (w, h) = (rng.gen_range(1..=256), rng.gen_range(1..=256));
        let pixels: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
        let img = GrayImage::new(w, h, pixels).map_err(|e| e.to_string())?;
        let sk = keygen(128, w * h, &trial.to_be_bytes()).map_err(|e| e.to_string())?;
        let enc = image_enc(&sk, &img).map_err(|e| e.to_string())?;
        let dec = image_dec(&sk, &enc).map_err(|e| e.to_string())?;
        ensure(dec == img, || format!("trial {trial}: {w}x{h} image did not roundtrip"))?;
    }
    Ok("100 images bit-exact".into())
}

/// Independent floating-point NewDis: `sqrt(Σx² + Σy² - 2 Σx Σy / l)`.
fn new_dis_oracle(x: &[u32], y: &[u32]) -> f64 {
    let l = x.len() as f64;
    let s = |v: &[u32]| v.iter().map(|&a| f64::from(a)).sum::<f64>();
    let s2 = |v: &[u32]| v.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>();
    (s2(x) + s2(y) - 2.0 * s(x) * s(y) / l).max(0.0).sqrt()
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn distance_equivalence() -> Outcome {
    let p = params();
    let mut rng = seeded_rng("acceptance/c3", b"");
    let mut worst = 0.0f64;
    for trial in 0..500u64 {
        let l = rng.gen_range(3..=128);
        let mut draw = || FeatureVector::new((0..l).map(|_| rng.gen_range(0..256)).collect()).unwrap();
        let (x, y) = (draw(), draw());
        let ex = encrypt_feature_pair(p, &x, &[b"x".as_slice(), &trial.to_be_bytes()].concat())
            .map_err(|e| e.to_string())?;
        let ey = encrypt_feature_pair(p, &y, &[b"y".as_slice(), &trial.to_be_bytes()].concat())
            .map_err(|e| e.to_string())?;
        let sx = recover_sums(p, &ex).map_err(|e| e.to_string())?;
        let sy = recover_sums(p, &ey).map_err(|e| e.to_string())?;
        let enc = sim_from_sums(&sx, &sy).map_err(|e| e.to_string())?;
        let plain = new_dis(&x, &y).map_err(|e| e.to_string())?;
        let oracle = new_dis_oracle(&x, &y);
        let err = relative_error(enc, plain).max(relative_error(enc, oracle));
        worst = worst.max(err);
        ensure(err <= 1e-9, || {
            format!("trial {trial}: encrypted {enc}, plaintext {plain}, oracle {oracle}")
        })?;
    }
    Ok(format!("500 pairs, worst relative error {worst:.2e}"))
}

fn update_invariance() -> Outcome {
    let p = params();
    let mut rng = seeded_rng("acceptance/c4", b"");
    let owner = OwnerId::new("owner").unwrap();
    let placeholder = GrayImage::new(4, 4, vec![7; 16]).unwrap();
    let feats: Vec<FeatureVector> = (0..20)
        .map(|_| FeatureVector::new((0..80).map(|_| rng.gen_range(0..256)).collect()).unwrap())
        .collect();
    let upload = |k: usize, seed: &[u8]| -> Result<NewImage, String> {
        Ok(NewImage {
            image_id: ImageId::new(format!("img{k}")).unwrap(),
            image: placeholder.clone(),
            feature: encrypt_feature_pair(p, &feats[k], seed).map_err(|e| e.to_string())?,
        })
    };
    let cloud = CloudNode::new(p.clone());
    let uploads = (0..feats.len()).map(|k| upload(k, b"initial")).collect::<Result<Vec<_>, _>>()?;
    cloud
        .register_owner(owner.clone(), Default::default(), uploads)
        .map_err(|e| e.to_string())?;
    for trial in 0..200u64 {
        let k = rng.gen_range(0..feats.len());
        let id = ImageId::new(format!("img{k}")).unwrap();
        let before = cloud.snapshot().index_row(&owner, &id).ok_or("missing row")?;
        let fresh = upload(k, &[b"re".as_slice(), &trial.to_be_bytes()].concat())?;
        cloud
            .apply_update(&owner, UpdateCommand::Update(vec![fresh]))
            .map_err(|e| e.to_string())?;
        let after = cloud.snapshot().index_row(&owner, &id).ok_or("missing row")?;
        let oracle = SumPair::of(feats[k].bins()).unwrap();
        ensure(before == after && after == oracle, || {
            format!("trial {trial}: row {before:?} became {after:?}, plaintext sums {oracle:?}")
        })?;
    }
    Ok("200 re-encryptions, index rows unchanged".into())
}

struct QualityRun {
    euclid_f1: f64,
    newdis_f1: f64,
    euclid_deciles: Vec<f64>,
    newdis_deciles: Vec<f64>,
    elapsed: Duration,
}

fn quality() -> &'static Result<QualityRun, String> {
    static Q: OnceLock<Result<QualityRun, String>> = OnceLock::new();
    Q.get_or_init(|| {
        let start = Instant::now();
        let (mut corpus, queries) = SyntheticConfig::standard(b"acceptance").generate();
        corpus.assign_owners(4);
        let cfg = EhdConfig::default();
        let feats = extract_all(&corpus.items, &cfg).map_err(|e| e.to_string())?;
        let qfeats = extract_all(&queries, &cfg).map_err(|e| e.to_string())?;
        let truth = GroundTruth::new(corpus.items.iter().map(|i| (&i.id, i.category.as_str())));

        let euclid = plain_runs(&corpus, &feats, &queries, &qfeats, Method::Euclidean, 100);
        let deployment =
            EncryptedDeployment::build(params(), &corpus, &feats, b"acceptance").map_err(|e| e.to_string())?;
        let newdis = deployment.runs(&queries, &qfeats, 100).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();

        let f1 = |runs| compute_metrics(runs, &truth, 100).map(|r| r.f1).map_err(|e| e.to_string());
        let deciles = |runs| {
            leakage_histogram(runs, &truth, 10)
                .map(|h| h.fractions)
                .map_err(|e| e.to_string())
        };
        Ok(QualityRun {
            euclid_f1: f1(&euclid)?,
            newdis_f1: f1(&newdis)?,
            euclid_deciles: deciles(&euclid)?,
            newdis_deciles: deciles(&newdis)?,
            elapsed,
        })
    })
}

fn retrieval_quality() -> Outcome {
    let q = quality().as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "F1 newdis {:.3}, euclidean {:.3}, {:.1}s",
        q.newdis_f1,
        q.euclid_f1,
        q.elapsed.as_secs_f64()
    );
    ensure(q.newdis_f1 >= q.euclid_f1 - 0.15, || detail.clone())?;
    ensure(q.elapsed < Duration::from_secs(300), || detail.clone())?;
    Ok(detail)
}

fn leakage_distribution() -> Outcome {
    let q = quality().as_ref().map_err(Clone::clone)?;
    let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "euclidean [{}], newdis [{}]",
        fmt(&q.euclid_deciles),
        fmt(&q.newdis_deciles)
    );
    let top = q.euclid_deciles[0];
    ensure(top > 0.20 && q.euclid_deciles.iter().all(|&f| f <= top), || detail.clone())?;
    ensure(q.newdis_deciles.iter().all(|&f| (0.03..=0.17).contains(&f)), || detail.clone())?;
    Ok(detail)
}

fn large_cloud() -> &'static Result<BenchCloud, String> {
    static C: OnceLock<Result<BenchCloud, String>> = OnceLock::new();
    C.get_or_init(|| {
        let feats = random_features(10_000, b"acceptance/large");
        let uploads = encrypt_uploads(params(), &feats, b"acceptance/large").map_err(|e| e.to_string())?;
        let q = random_features(1, b"acceptance/large-query").remove(0);
        let eq = encrypt_feature_pair(params(), &q, b"acceptance/large-query").map_err(|e| e.to_string())?;
        BenchCloud::new(params(), uploads, eq).map_err(|e| e.to_string())
    })
}

fn index_speedup() -> Outcome {
    let b = large_cloud().as_ref().map_err(Clone::clone)?;
    let time = |path| -> Result<(Duration, Vec<ImageId>), String> {
        let mut samples = Vec::new();
        let mut ids = Vec::new();
        for _ in 0..5 {
            let t = Instant::now();
            let res = b.cloud.retrieve_top_h_via(&b.query, path).map_err(|e| e.to_string())?;
            samples.push(t.elapsed());
            ids = res.into_iter().map(|r| r.image_id).collect();
        }
        Ok((median(samples), ids))
    };
    let (with_index, ranked_index) = time(RetrievalPath::Index)?;
    let (without, ranked_scan) = time(RetrievalPath::NoIndex)?;
    let speedup = without.as_secs_f64() / with_index.as_secs_f64().max(1e-9);
    let detail = format!(
        "10000 features: index {:.3} ms, no index {:.1} ms, speedup {speedup:.0}x",
        with_index.as_secs_f64() * 1e3,
        without.as_secs_f64() * 1e3
    );
    ensure(ranked_index == ranked_scan, || format!("{detail}; rankings differ"))?;
    ensure(speedup >= 10.0, || detail.clone())?;
    Ok(detail)
}

fn random_image(rng: &mut impl Rng, side: usize) -> GrayImage {
    let pixels = (0..side * side).map(|_| rng.gen()).collect();
    GrayImage::new(side, side, pixels).unwrap()
}

fn end_to_end_fidelity() -> Outcome {
    let mut rng = seeded_rng("acceptance/c8", b"");
    let mut cfg = SimConfig::new(b"acceptance");
    cfg.max_image_pixels = 48 * 48;
    let mut world = World::new(params().clone(), cfg);
    let users: Vec<UserId> = ["alice", "bob"].iter().map(|u| UserId::new(*u).unwrap()).collect();
    for o in 0..3 {
        let images = (0..8)
            .map(|k| {
                let side = rng.gen_range(16..=48);
                (ImageId::new(format!("o{o}-img{k}")).unwrap(), random_image(&mut rng, side))
            })
            .collect();
        world
            .add_owner(&OwnerId::new(format!("owner{o}")).unwrap(), images, &users)
            .map_err(|e| e.to_string())?;
    }
    let mut delivered = 0;
    for s in 0..50u64 {
        let req = QueryRequest {
            uid: users[s as usize % users.len()].clone(),
            image: random_image(&mut rng, 32),
            h: 6,
            nonce: s,
        };
        let t = world.run_session(&req).map_err(|e| format!("session {s}: {e}"))?;
        let SessionOutcome::Completed { received, .. } = &t.outcome else {
            return Err(format!("session {s} did not complete"));
        };
        ensure(received.len() == 6, || format!("session {s}: {} results", received.len()))?;
        for r in received {
            let original = world
                .owner_plaintext(&r.owner_id, &r.image_id)
                .ok_or_else(|| format!("session {s}: unknown result {}", r.image_id))?;
            ensure(&r.image == original, || {
                format!("session {s}: {} differs from the owner's image", r.image_id)
            })?;
            delivered += 1;
        }
    }
    let exposures = world.plaintext_exposures();
    ensure(exposures.is_empty(), || format!("plaintext found in cloud state: {exposures:?}"))?;
    Ok(format!("50 sessions, {delivered} images bit-exact, no plaintext at the cloud"))
}

fn storage_shape() -> Outcome {
    let b = large_cloud().as_ref().map_err(Clone::clone)?;
    let StorageReport {
        images,
        index_bytes,
        feature_bytes,
        ..
    } = b.cloud.snapshot().storage_report();
    let ratio = index_bytes as f64 / feature_bytes as f64;
    let detail = format!("{images} features: index {index_bytes} B, features {feature_bytes} B, ratio {ratio:.5}");
    ensure(images == 10_000 && ratio < 0.01, || detail.clone())?;
    Ok(detail)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("secure-sum exactness", secure_sum_exactness),
        ("cipher roundtrip", cipher_roundtrip),
        ("encrypted/plaintext distance equivalence", distance_equivalence),
        ("update invariance", update_invariance),
        ("retrieval quality", retrieval_quality),
        ("leakage distribution", leakage_distribution),
        ("index speedup", index_speedup),
        ("end-to-end fidelity", end_to_end_fidelity),
        ("storage shape", storage_shape),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {}. {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        println!("all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} of 9 criteria failed");
        ExitCode::FAILURE
    }
}
