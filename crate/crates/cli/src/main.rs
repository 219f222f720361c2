mod experiment;
mod state;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use mipp_core::cloud_node::NewImage;
use mipp_core::eval::bench::{run_bench, storage_tsv, BenchMode, BENCH_TSV_HEADER};
use mipp_core::eval::{compute_metrics, leakage_histogram, load_corpus, owner_id, Method, SyntheticConfig, CUTOFF_SWEEP};
use mipp_core::image::{read_pgm, write_pgm};
use mipp_core::protocol_sim::{format_log, QueryRequest, SessionOutcome, SessionTranscript, SimConfig, World};
use mipp_core::rng::child_seed;
use mipp_core::{
    encrypt_feature_pair, extract_ehd, image_dec, image_enc, EhdConfig, GrayImage, GroupParams, ImageId, OwnerId,
    UpdateCommand, UserId,
};

use experiment::Experiment;
use state::StateDir;

/// Bits of the throwaway parameters used when no --params file is given.
const FALLBACK_BITS: u32 = 64;

#[derive(Parser)]
#[command(name = "mipp", version, about = "Multi-owner encrypted image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate public group parameters.
    GenParams {
        #[arg(long, default_value_t = 1024)]
        bits: u32,
        #[arg(long, default_value = "mipp")]
        seed: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic labelled corpus and its queries as PGM files.
    GenCorpus {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, default_value = "mipp")]
        seed: String,
    },
    /// Encrypt a corpus for its owners and write a deployment directory.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        /// Deployment directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        owners: usize,
        /// Users every owner authorizes.
        #[arg(long, value_delimiter = ',', default_value = "user")]
        users: Vec<String>,
        #[command(flatten)]
        crypto: CryptoArgs,
    },
    /// Run one retrieval session per query image against a deployment.
    Query {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top_h: usize,
        /// Seed for session keys; random when omitted.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        parallel: bool,
        /// Write decrypted results here as PGM files.
        #[arg(long)]
        save_dir: Option<PathBuf>,
        /// Write the message transcript here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precision, recall and F1 of Euclidean and encrypted NewDis retrieval.
    Eval(ExperimentArgs),
    /// Where true matches fall within the returned lists.
    Leakage {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 10)]
        deciles: usize,
    },
    /// Time plaintext, indexed and index-free retrieval.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "100,1000")]
        sizes: Vec<usize>,
        /// Modes to time, or "all".
        #[arg(long, value_delimiter = ',', default_value = "all")]
        modes: Vec<String>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[command(flatten)]
        crypto: CryptoArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Change an owner's images in a deployment.
    Update {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        owner: String,
        /// Directory of PGM files to add; ids are the file stems.
        #[arg(long, group = "action")]
        add: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', group = "action")]
        delete: Vec<String>,
        /// Re-encrypt the features of these images under fresh randomness.
        #[arg(long, value_delimiter = ',', group = "action")]
        refresh: Vec<String>,
        #[arg(long, default_value = "mipp-update")]
        seed: String,
    },
}

#[derive(Args)]
struct CryptoArgs {
    /// Group parameters from gen-params; small test parameters otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value = "mipp")]
    seed: String,
}

impl CryptoArgs {
    fn params(&self) -> Result<GroupParams> {
        load_params(self.params.as_deref(), self.seed.as_bytes())
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// Labelled corpus; the synthetic corpus is used when omitted.
    #[arg(long, requires = "queries")]
    corpus: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    owners: usize,
    #[arg(long, default_value_t = 100)]
    top_h: usize,
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    crypto: CryptoArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenParams { bits, seed, out } => {
            let params = GroupParams::generate(bits, seed.as_bytes())?;
            emit(out.as_deref(), &params.to_record())
        }
        Command::GenCorpus { corpus, queries, seed } => gen_corpus(&corpus, queries.as_deref(), &seed),
        Command::Ingest {
            corpus,
            out,
            owners,
            users,
            crypto,
        } => ingest(&corpus, &out, owners, &users, &crypto),
        Command::Query {
            state,
            user,
            images,
            top_h,
            seed,
            parallel,
            save_dir,
            log,
            out,
        } => {
            let seed = seed.unwrap_or_else(|| format!("{:016x}", rand::random::<u64>()));
            query(&state, &user, &images, top_h, &seed, parallel, save_dir.as_deref(), log.as_deref(), out.as_deref())
        }
        Command::Eval(exp) => eval(&exp),
        Command::Leakage { exp, deciles } => leakage(&exp, deciles),
        Command::Bench {
            sizes,
            modes,
            reps,
            crypto,
            out,
        } => bench(&sizes, &modes, reps, &crypto, out.as_deref()),
        Command::Update {
            state,
            owner,
            add,
            delete,
            refresh,
            seed,
        } => update(&state, &owner, add.as_deref(), &delete, &refresh, &seed),
    }
}

fn load_params(path: Option<&Path>, seed: &[u8]) -> Result<GroupParams> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let params = GroupParams::from_record(&text)?;
            params.validate()?;
            Ok(params)
        }
        None => {
            eprintln!("warning: no --params given; using {FALLBACK_BITS}-bit test parameters");
            Ok(GroupParams::generate(FALLBACK_BITS, seed)?)
        }
    }
}

/// Writes `text` to `out`, or to stdout when no file is given.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn gen_corpus(corpus: &Path, queries: Option<&Path>, seed: &str) -> Result<()> {
    let (c, q) = SyntheticConfig::standard(seed.as_bytes()).generate();
    c.write_to(corpus)?;
    if let Some(dir) = queries {
        mipp_core::eval::corpus::write_images(dir, &q)?;
    }
    println!("wrote {} images in {} categories", c.len(), c.categories.len());
    Ok(())
}

fn ingest(corpus: &Path, out: &Path, owners: usize, users: &[String], crypto: &CryptoArgs) -> Result<()> {
    if owners == 0 {
        bail!("--owners must be at least 1");
    }
    let loaded = load_corpus(corpus, owners).with_context(|| format!("loading corpus {}", corpus.display()))?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let params = crypto.params()?;
    let mut cfg = SimConfig::new(crypto.seed.as_bytes());
    cfg.max_image_pixels = loaded.corpus.items.iter().map(|i| i.image.pixel_count()).max().unwrap_or(1);
    let mut world = World::new(params, cfg);
    let users = users.iter().map(UserId::new).collect::<Result<Vec<_>, _>>()?;
    for uid in &users {
        world.add_user(uid);
    }
    for o in 0..owners {
        let images: Vec<_> = loaded
            .corpus
            .owner_items(o)
            .map(|i| (i.id.clone(), i.image.clone()))
            .collect();
        if !images.is_empty() {
            world.add_owner(&owner_id(o), images, &users)?;
        }
    }
    StateDir::new(out).save_world(&world)?;
    let report = world.cloud().snapshot().storage_report();
    println!(
        "ingested {} images for {} owner(s) into {}",
        report.images,
        owners.min(loaded.corpus.len()),
        out.display()
    );
    print!("{}", storage_tsv(&report));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn query(
    state: &Path,
    user: &str,
    images: &[PathBuf],
    h: usize,
    seed: &str,
    parallel: bool,
    save_dir: Option<&Path>,
    log: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let dir = StateDir::new(state);
    let world = dir.load_world(seed.as_bytes())?;
    let uid = UserId::new(user)?;
    let requests = images
        .iter()
        .enumerate()
        .map(|(k, path)| {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let image = read_pgm(&bytes).with_context(|| format!("decoding {}", path.display()))?.image;
            Ok(QueryRequest {
                uid: uid.clone(),
                image,
                h,
                nonce: k as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let run = |r: &QueryRequest| world.run_session(r).map_err(anyhow::Error::from);
    let transcripts: Vec<SessionTranscript> = if parallel {
        requests.par_iter().map(run).collect::<Result<_>>()?
    } else {
        requests.iter().map(run).collect::<Result<_>>()?
    };
    dir.save_vault(&world.kmc_state())?;

    let mut report = String::from("query\tsession\trank\towner\timage\tdistance\n");
    let mut entries = Vec::new();
    for (path, t) in images.iter().zip(&transcripts) {
        entries.extend(t.entries.iter().cloned());
        match &t.outcome {
            SessionOutcome::Completed { received, ranked } => {
                for (rank, r) in ranked.iter().enumerate() {
                    report.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{}\t{:.4}\n",
                        path.display(),
                        t.session,
                        rank + 1,
                        r.owner_id,
                        r.image_id,
                        r.distance
                    ));
                }
                if let Some(save) = save_dir {
                    fs::create_dir_all(save)?;
                    for r in received {
                        fs::write(
                            save.join(format!("{}.{}.pgm", r.owner_id, r.image_id)),
                            write_pgm(&r.image, false),
                        )?;
                    }
                }
            }
            SessionOutcome::Unauthorized => bail!("user {uid} is not authorized by any owner"),
        }
    }
    if let Some(log) = log {
        fs::write(log, format_log(&entries)).with_context(|| format!("writing {}", log.display()))?;
    }
    emit(out, &report)
}

fn experiment_runs(exp: &ExperimentArgs) -> Result<(Experiment, Vec<(Method, mipp_core::eval::Runs)>)> {
    if exp.owners == 0 {
        bail!("--owners must be at least 1");
    }
    let seed = exp.crypto.seed.as_bytes();
    let e = Experiment::load(exp.corpus.as_deref(), exp.queries.as_deref(), exp.owners, seed)?;
    let params = exp.crypto.params()?;
    let euclid = e.euclidean_runs(exp.top_h)?;
    let newdis = e.session_runs(&params, seed, exp.top_h, exp.parallel)?;
    Ok((e, vec![(Method::Euclidean, euclid), (Method::NewDis, newdis)]))
}

fn eval(exp: &ExperimentArgs) -> Result<()> {
    let (e, runs) = experiment_runs(exp)?;
    let mut out = String::from("method\tcutoff\tprecision\trecall\tf1\n");
    for (method, runs) in &runs {
        let available = runs.iter().map(|(r, _)| r.len()).min().unwrap_or(0);
        for cutoff in CUTOFF_SWEEP.into_iter().filter(|&c| c <= available) {
            let m = compute_metrics(runs, &e.truth, cutoff)?;
            out.push_str(&format!(
                "{method}\t{cutoff}\t{:.4}\t{:.4}\t{:.4}\n",
                m.precision, m.recall, m.f1
            ));
        }
    }
    emit(exp.out.as_deref(), &out)
}

fn leakage(exp: &ExperimentArgs, deciles: usize) -> Result<()> {
    let (e, runs) = experiment_runs(exp)?;
    let mut out = String::from("method\tdecile\tmatches\tfraction\n");
    for (method, runs) in &runs {
        let h = leakage_histogram(runs, &e.truth, deciles)?;
        for w in &h.warnings {
            eprintln!("warning ({method}): {w}");
        }
        for (i, (c, f)) in h.counts.iter().zip(&h.fractions).enumerate() {
            out.push_str(&format!("{method}\t{}\t{c}\t{f:.4}\n", i + 1));
        }
    }
    emit(exp.out.as_deref(), &out)
}

fn bench(sizes: &[usize], modes: &[String], reps: usize, crypto: &CryptoArgs, out: Option<&Path>) -> Result<()> {
    let modes: Vec<BenchMode> = if modes.iter().any(|m| m == "all") {
        BenchMode::ALL.to_vec()
    } else {
        modes
            .iter()
            .map(|m| m.parse().map_err(anyhow::Error::msg))
            .collect::<Result<_>>()?
    };
    let params = crypto.params()?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout()),
    };
    writeln!(sink, "{BENCH_TSV_HEADER}")?;
    let mut failed = None;
    let report = run_bench(&params, sizes, &modes, reps, crypto.seed.as_bytes(), |row| {
        if failed.is_none() {
            failed = writeln!(sink, "{}", row.to_tsv()).and_then(|_| sink.flush()).err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e.into());
    }
    if let Some(storage) = report.storage {
        writeln!(sink)?;
        write!(sink, "{}", storage_tsv(&storage))?;
    }
    Ok(())
}

fn update(
    state: &Path,
    owner: &str,
    add: Option<&Path>,
    delete: &[String],
    refresh: &[String],
    seed: &str,
) -> Result<()> {
    let dir = StateDir::new(state);
    let oid = OwnerId::new(owner)?;
    let cloud = dir.load_cloud()?;
    let params = cloud.params().clone();
    let ehd = EhdConfig::default();
    let encrypt_feature = |id: &ImageId, image: &GrayImage| -> Result<_> {
        let f = extract_ehd(image, &ehd).with_context(|| format!("describing {id}"))?;
        Ok(encrypt_feature_pair(
            &params,
            &f,
            &child_seed(seed.as_bytes(), id.as_str(), 0),
        )?)
    };

    let (command, summary) = if let Some(add_dir) = add {
        let sk = dir.owner_key(&oid)?;
        let mut uploads = Vec::new();
        let mut paths: Vec<_> = fs::read_dir(add_dir)?.collect::<Result<Vec<_>, _>>()?;
        paths.sort_by_key(|e| e.file_name());
        for entry in paths {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
                continue;
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let id = ImageId::new(stem)?;
            let image = read_pgm(&fs::read(&path)?)
                .with_context(|| format!("decoding {}", path.display()))?
                .image;
            uploads.push(NewImage {
                feature: encrypt_feature(&id, &image)?,
                image: image_enc(&sk, &image).with_context(|| format!("encrypting {}", path.display()))?,
                image_id: id,
            });
        }
        let n = uploads.len();
        (UpdateCommand::Add(uploads), format!("added {n} image(s)"))
    } else if !delete.is_empty() {
        let ids = delete.iter().map(ImageId::new).collect::<Result<Vec<_>, _>>()?;
        let n = ids.len();
        (UpdateCommand::Delete(ids), format!("deleted {n} image(s)"))
    } else if !refresh.is_empty() {
        let sk = dir.owner_key(&oid)?;
        let snap = cloud.snapshot();
        let record = snap
            .owners()
            .get(&oid)
            .with_context(|| format!("owner {oid} is not registered"))?;
        let mut uploads = Vec::new();
        for raw in refresh {
            let id = ImageId::new(raw.as_str())?;
            let stored = record
                .images
                .get(&id)
                .with_context(|| format!("owner {oid} has no image {id}"))?;
            let plain = image_dec(&sk, &stored.image)?;
            uploads.push(NewImage {
                feature: encrypt_feature(&id, &plain)?,
                image: stored.image.clone(),
                image_id: id,
            });
        }
        let n = uploads.len();
        (UpdateCommand::Update(uploads), format!("refreshed {n} feature(s)"))
    } else {
        bail!("give one of --add, --delete or --refresh");
    };
    cloud.apply_update(&oid, command)?;
    dir.save_cloud(&cloud)?;
    println!("{summary} for {oid}");
    Ok(())
}
