//! On-disk deployment: cloud store, KMC vault, owner keys and user
//! credentials side by side in one directory.
//!
//! ```text
//! <dir>/deployment     header, settings, user credentials
//! <dir>/cloud/         cloud store
//! <dir>/kmc.vault      KMC enrollment and owner keys
//! <dir>/owner-keys     each owner's own copy of its image key
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mipp_core::image_cipher::KeyStream;
use mipp_core::protocol_sim::{SimConfig, World};
use mipp_core::{AccessKey, CloudNode, KeyVault, OwnerId, UserId};

const HEADER: &str = "MIPP-DEPLOYMENT-1";

/// Settings and credentials stored next to the cloud and KMC state.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub max_image_pixels: usize,
    pub security_k: u32,
    pub users: BTreeMap<UserId, AccessKey>,
}

pub struct StateDir(PathBuf);

impl StateDir {
    pub fn new(path: &Path) -> Self {
        StateDir(path.to_path_buf())
    }

    fn cloud_dir(&self) -> PathBuf {
        self.0.join("cloud")
    }

    fn vault_path(&self) -> PathBuf {
        self.0.join("kmc.vault")
    }

    fn owner_keys_path(&self) -> PathBuf {
        self.0.join("owner-keys")
    }

    /// Writes a fresh deployment from a world that just ran setup.
    pub fn save_world(&self, world: &World) -> Result<()> {
        fs::create_dir_all(&self.0).with_context(|| format!("creating {}", self.0.display()))?;
        let cfg = world.config();
        self.save_deployment(&Deployment {
            max_image_pixels: cfg.max_image_pixels,
            security_k: cfg.security_k,
            users: world.users().clone(),
        })?;
        world.cloud().save(&self.cloud_dir())?;
        let vault = world.kmc_state();
        vault.save(&self.vault_path())?;
        let keys = world
            .cloud()
            .snapshot()
            .owners()
            .keys()
            .filter_map(|oid| vault.owner_key(oid).map(|k| (oid.clone(), k.clone())))
            .collect();
        self.save_owner_keys(&keys)
    }

    /// Resumes the deployment; `seed` drives session ids and user keys.
    pub fn load_world(&self, seed: &[u8]) -> Result<World> {
        let dep = self.load_deployment()?;
        let cloud = CloudNode::load(&self.cloud_dir())
            .with_context(|| format!("loading cloud store from {}", self.cloud_dir().display()))?;
        let vault = self.load_vault()?;
        let mut cfg = SimConfig::new(seed);
        cfg.max_image_pixels = dep.max_image_pixels;
        cfg.security_k = dep.security_k;
        Ok(World::restore(cloud, vault, dep.users, cfg))
    }

    pub fn load_cloud(&self) -> Result<CloudNode> {
        Ok(CloudNode::load(&self.cloud_dir())?)
    }

    pub fn save_cloud(&self, cloud: &CloudNode) -> Result<()> {
        Ok(cloud.save(&self.cloud_dir())?)
    }

    pub fn load_vault(&self) -> Result<KeyVault> {
        KeyVault::load(&self.vault_path()).with_context(|| format!("loading {}", self.vault_path().display()))
    }

    pub fn save_vault(&self, vault: &KeyVault) -> Result<()> {
        Ok(vault.save(&self.vault_path())?)
    }

    pub fn save_deployment(&self, dep: &Deployment) -> Result<()> {
        let mut out = format!(
            "{HEADER}\nmax_image_pixels\t{}\nsecurity_k\t{}\n",
            dep.max_image_pixels, dep.security_k
        );
        for (uid, ak) in &dep.users {
            out.push_str(&format!("user\t{uid}\t{}\n", ak.to_hex()));
        }
        write_private(&self.0.join("deployment"), &out)
    }

    pub fn load_deployment(&self) -> Result<Deployment> {
        let path = self.0.join("deployment");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            bail!("{} is not a deployment file", path.display());
        }
        let mut dep = Deployment {
            max_image_pixels: 0,
            security_k: 0,
            users: BTreeMap::new(),
        };
        for line in lines.filter(|l| !l.is_empty()) {
            match line.split('\t').collect::<Vec<_>>().as_slice() {
                ["max_image_pixels", v] => dep.max_image_pixels = v.parse()?,
                ["security_k", v] => dep.security_k = v.parse()?,
                ["user", uid, ak] => {
                    dep.users.insert(UserId::new(*uid)?, AccessKey::from_hex(ak)?);
                }
                _ => bail!("{}: unexpected line {line:?}", path.display()),
            }
        }
        if dep.max_image_pixels == 0 || dep.security_k == 0 {
            bail!("{}: missing settings", path.display());
        }
        Ok(dep)
    }

    pub fn owner_key(&self, oid: &OwnerId) -> Result<KeyStream> {
        let path = self.owner_keys_path();
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        for line in text.lines() {
            if let Some((id, hex)) = line.split_once('\t') {
                if id == oid.as_str() {
                    return Ok(KeyStream::from_hex(hex)?);
                }
            }
        }
        bail!("no key for owner {oid} in {}", path.display())
    }

    fn save_owner_keys(&self, keys: &BTreeMap<OwnerId, KeyStream>) -> Result<()> {
        let out: String = keys.iter().map(|(o, k)| format!("{o}\t{}\n", k.to_hex())).collect();
        write_private(&self.owner_keys_path(), &out)
    }
}

#[cfg(unix)]
fn write_private(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(path)
        .with_context(|| format!("writing {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(not(unix))]
fn write_private(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
