//! Retrieval experiments run through full protocol sessions.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use mipp_core::eval::{
    extract_all, load_corpus, owner_id, plain_runs, GroundTruth, LabeledCorpus, LabeledImage, Method, Runs,
    SyntheticConfig,
};
use mipp_core::protocol_sim::{QueryRequest, SessionOutcome, SimConfig, World};
use mipp_core::{EhdConfig, GroupParams, UserId};

pub struct Experiment {
    pub corpus: LabeledCorpus,
    pub queries: Vec<LabeledImage>,
    pub truth: GroundTruth,
}

impl Experiment {
    /// Loads `corpus` and `queries` directories, or generates the standard
    /// synthetic corpus when no corpus is given.
    pub fn load(corpus: Option<&Path>, queries: Option<&Path>, owners: usize, seed: &[u8]) -> Result<Self> {
        let (mut corpus, queries) = match (corpus, queries) {
            (Some(c), Some(q)) => {
                let loaded = load_corpus(c, owners).with_context(|| format!("loading corpus {}", c.display()))?;
                for w in &loaded.warnings {
                    eprintln!("warning: {w}");
                }
                let queries = load_corpus(q, 1)
                    .with_context(|| format!("loading queries {}", q.display()))?
                    .corpus
                    .items;
                (loaded.corpus, queries)
            }
            (Some(_), None) => bail!("--corpus needs --queries"),
            (None, Some(_)) => bail!("--queries needs --corpus"),
            (None, None) => SyntheticConfig::standard(seed).generate(),
        };
        corpus.assign_owners(owners);
        if corpus.is_empty() || queries.is_empty() {
            bail!("corpus and query set must both be non-empty");
        }
        for q in &queries {
            if !corpus.categories.contains(&q.category) {
                bail!("query {} has category {:?}, which the corpus lacks", q.id, q.category);
            }
        }
        let truth = GroundTruth::new(corpus.items.iter().map(|i| (&i.id, i.category.as_str())));
        Ok(Experiment { corpus, queries, truth })
    }

    pub fn euclidean_runs(&self, h: usize) -> Result<Runs> {
        let cfg = EhdConfig::default();
        let features = extract_all(&self.corpus.items, &cfg)?;
        let query_features = extract_all(&self.queries, &cfg)?;
        Ok(plain_runs(&self.corpus, &features, &self.queries, &query_features, Method::Euclidean, h))
    }

    /// Deploys the corpus across its owners and runs one session per query.
    /// Results are taken in the order the cloud ranked them.
    pub fn session_runs(&self, params: &GroupParams, seed: &[u8], h: usize, parallel: bool) -> Result<Runs> {
        let mut cfg = SimConfig::new(seed);
        cfg.max_image_pixels = self.corpus.items.iter().map(|i| i.image.pixel_count()).max().unwrap_or(1);
        let mut world = World::new(params.clone(), cfg);
        let uid = UserId::new("evaluator")?;
        let owners: std::collections::BTreeSet<usize> = self.corpus.items.iter().map(|i| i.owner).collect();
        for o in owners {
            let images = self
                .corpus
                .owner_items(o)
                .map(|i| (i.id.clone(), i.image.clone()))
                .collect();
            world.add_owner(&owner_id(o), images, std::slice::from_ref(&uid))?;
        }
        let run = |(k, q): (usize, &LabeledImage)| -> Result<(Vec<_>, String)> {
            let t = world.run_session(&QueryRequest {
                uid: uid.clone(),
                image: q.image.clone(),
                h,
                nonce: k as u64,
            })?;
            match t.outcome {
                SessionOutcome::Completed { received, .. } => {
                    Ok((received.into_iter().map(|r| r.image_id).collect(), q.category.clone()))
                }
                SessionOutcome::Unauthorized => bail!("evaluation user was refused"),
            }
        };
        if parallel {
            self.queries.par_iter().enumerate().map(run).collect()
        } else {
            self.queries.iter().enumerate().map(run).collect()
        }
    }
}
