//! Versioned on-disk pool state.
//!
//! ```text
//! state_dir/
//!   .lock                 held while an engine is open
//!   CURRENT               name of the committed version, e.g. `v000003`
//!   versions/v000003/
//!     pool/               the pool in bundle format
//!     pool.json           index: per-sample metadata, config, checksums
//!     pool_assign.u32     cluster of each stored sample (when clustered)
//!     ...                 per-timestep artifacts (manifest, scores, clusters)
//! ```
//!
//! A new version is assembled in a scratch directory, renamed into
//! `versions/`, and only becomes visible when `CURRENT` is swapped. Anything
//! not named by `CURRENT` is uncommitted and gets discarded.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EngineConfig;
use crate::datamodel::bundle::{read_bundle, write_bundle, Bundle};
use crate::datamodel::DataPool;
use crate::error::{Error, Result};
use crate::projection::ProjectionSpec;

pub const INDEX_FILE: &str = "pool.json";
pub const POOL_DIR: &str = "pool";
pub const POOL_ASSIGN_FILE: &str = "pool_assign.u32";
pub const TOMBSTONES_FILE: &str = "tombstones.jsonl";
const CURRENT_FILE: &str = "CURRENT";
const LOCK_FILE: &str = ".lock";
const VERSIONS_DIR: &str = "versions";
const INDEX_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionKind {
    Advance,
    Compress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub sample_id: String,
    pub dataset_id: String,
    pub timestep_added: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolIndex {
    pub format: u32,
    pub version: u64,
    pub kind: VersionKind,
    pub timestep: u64,
    pub n_samples: usize,
    pub d_g: usize,
    pub d_s: usize,
    pub projection: Option<ProjectionSpec>,
    pub k: Option<usize>,
    pub config: Option<EngineConfig>,
    pub config_hash: Option<String>,
    pub samples: Vec<PoolEntry>,
    /// sha256 of every other file in the version, keyed by relative path.
    pub checksums: BTreeMap<String, String>,
}

/// A committed version loaded back into memory.
#[derive(Debug, Clone)]
pub struct StoredState {
    pub index: PoolIndex,
    pub pool: DataPool,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tombstone {
    pub sample_id: String,
    pub timestep: u64,
    pub version: u64,
}

pub fn version_name(v: u64) -> String {
    format!("v{v:06}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Exclusive handle on a state directory; the lock file goes away on drop.
#[derive(Debug)]
pub struct StateLock {
    path: PathBuf,
}

impl StateLock {
    pub fn acquire(state_dir: &Path) -> Result<Self> {
        fs::create_dir_all(state_dir).map_err(|e| Error::io(state_dir, e))?;
        let path = state_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::StateLocked(path)),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for StateLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Committed version number, or `None` for a fresh state.
pub fn current_version(state_dir: &Path) -> Result<Option<u64>> {
    let path = state_dir.join(CURRENT_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let name = text.trim();
    name.strip_prefix('v')
        .and_then(|n| n.parse().ok())
        .map(Some)
        .ok_or_else(|| Error::StateCorrupt(format!("CURRENT holds `{name}`")))
}

pub fn version_dir(state_dir: &Path, v: u64) -> PathBuf {
    state_dir.join(VERSIONS_DIR).join(version_name(v))
}

/// Versions `1..=current`, oldest first.
pub fn committed_versions(state_dir: &Path) -> Result<Vec<u64>> {
    Ok(current_version(state_dir)?.map_or_else(Vec::new, |c| (1..=c).collect()))
}

pub fn read_index(dir: &Path) -> Result<PoolIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: PoolIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if index.format != INDEX_FORMAT {
        return Err(Error::StateCorrupt(format!("unknown index format {}", index.format)));
    }
    Ok(index)
}

/// Recompute every recorded checksum of a version directory.
pub fn verify_checksums(dir: &Path, index: &PoolIndex) -> Result<()> {
    for (rel, want) in &index.checksums {
        let path = dir.join(rel);
        let bytes = fs::read(&path)
            .map_err(|_| Error::StateCorrupt(format!("{} is missing", path.display())))?;
        if &sha256_hex(&bytes) != want {
            return Err(Error::StateCorrupt(format!("checksum mismatch for {}", path.display())));
        }
    }
    let on_disk = list_files(dir)?;
    if let Some(extra) = on_disk.iter().find(|f| *f != INDEX_FILE && !index.checksums.contains_key(*f)) {
        return Err(Error::StateCorrupt(format!("untracked file {extra} in {}", dir.display())));
    }
    Ok(())
}

/// Load and verify the committed state.
pub fn load(state_dir: &Path) -> Result<Option<StoredState>> {
    let Some(v) = current_version(state_dir)? else {
        return Ok(None);
    };
    let dir = version_dir(state_dir, v);
    if !dir.is_dir() {
        return Err(Error::StateCorrupt(format!("{} is missing", dir.display())));
    }
    let index = read_index(&dir)?;
    if index.version != v {
        return Err(Error::StateCorrupt(format!(
            "{} claims version {}",
            dir.display(),
            index.version
        )));
    }
    verify_checksums(&dir, &index)?;
    let bundle = read_bundle(&dir.join(POOL_DIR)).map_err(|e| Error::StateCorrupt(e.to_string()))?;
    if bundle.records.len() != index.samples.len() {
        return Err(Error::StateCorrupt("index and pool disagree on sample count".into()));
    }
    let mut records = bundle.records;
    for (r, e) in records.iter_mut().zip(&index.samples) {
        if r.sample_id != e.sample_id {
            return Err(Error::StateCorrupt(format!("index lists `{}` where pool has `{}`", e.sample_id, r.sample_id)));
        }
        r.dataset_id.clone_from(&e.dataset_id);
        r.timestep_added = e.timestep_added;
    }
    let mut pool = DataPool::new(records, index.timestep, index.d_g, index.d_s)?;
    if let Some(k) = index.k {
        let path = dir.join(POOL_ASSIGN_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let assign: Vec<usize> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        pool.set_clusters(k, assign)
            .map_err(|e| Error::StateCorrupt(format!("pool assignments: {e}")))?;
    }
    Ok(Some(StoredState { index, pool, dir }))
}

pub fn read_tombstones(dir: &Path) -> Result<Vec<Tombstone>> {
    let path = dir.join(TOMBSTONES_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(&path, e)))
        .collect()
}

fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// A version being assembled in scratch space.
pub struct VersionWriter {
    state_dir: PathBuf,
    version: u64,
    scratch: PathBuf,
}

impl VersionWriter {
    /// Start version `current + 1`, discarding leftovers of earlier crashes.
    pub fn begin(state_dir: &Path) -> Result<Self> {
        let version = current_version(state_dir)?.unwrap_or(0) + 1;
        let scratch = state_dir.join(format!(".tmp-{}", version_name(version)));
        for stale in [&scratch, &version_dir(state_dir, version)] {
            if stale.exists() {
                log::warn!("discarding uncommitted {}", stale.display());
                fs::remove_dir_all(stale).map_err(|e| Error::io(stale, e))?;
            }
        }
        fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        Ok(Self {
            state_dir: state_dir.to_path_buf(),
            version,
            scratch,
        })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dir(&self) -> &Path {
        &self.scratch
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.scratch.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("state json serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Store the pool in bundle format plus its cluster assignments.
    pub fn write_pool(&self, pool: &DataPool) -> Result<Vec<PoolEntry>> {
        let bundle = Bundle {
            dataset_id: "pool".into(),
            d_g: pool.d_g(),
            d_s: pool.d_s(),
            records: pool.samples().to_vec(),
        };
        write_bundle(&self.scratch.join(POOL_DIR), &bundle)?;
        if let Some(c) = pool.clusters() {
            let bytes: Vec<u8> = c.cluster_of.iter().flat_map(|&a| (a as u32).to_le_bytes()).collect();
            self.write(POOL_ASSIGN_FILE, &bytes)?;
        }
        Ok(pool
            .samples()
            .iter()
            .map(|s| PoolEntry {
                sample_id: s.sample_id.clone(),
                dataset_id: s.dataset_id.clone(),
                timestep_added: s.timestep_added,
            })
            .collect())
    }

    /// Previous tombstones plus `removed`.
    pub fn write_tombstones(&self, previous: &[Tombstone], removed: &[String], timestep: u64) -> Result<()> {
        let mut text = String::new();
        let fresh = removed.iter().map(|id| Tombstone {
            sample_id: id.clone(),
            timestep,
            version: self.version,
        });
        for t in previous.iter().cloned().chain(fresh) {
            text.push_str(&serde_json::to_string(&t).expect("tombstone serializes"));
            text.push('\n');
        }
        self.write(TOMBSTONES_FILE, text.as_bytes())
    }

    /// Checksum, write the index, and swap `CURRENT`.
    pub fn commit(self, mut index: PoolIndex) -> Result<PathBuf> {
        index.format = INDEX_FORMAT;
        index.version = self.version;
        index.checksums.clear();
        for rel in list_files(&self.scratch)? {
            let path = self.scratch.join(&rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            index.checksums.insert(rel, sha256_hex(&bytes));
        }
        self.write_json(INDEX_FILE, &index)?;

        let target = version_dir(&self.state_dir, self.version);
        let parent = target.parent().expect("version dir has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        fs::rename(&self.scratch, &target).map_err(|e| Error::io(&target, e))?;

        let tmp = self.state_dir.join(".CURRENT.tmp");
        fs::write(&tmp, format!("{}\n", version_name(self.version))).map_err(|e| Error::io(&tmp, e))?;
        let current = self.state_dir.join(CURRENT_FILE);
        fs::rename(&tmp, &current).map_err(|e| Error::io(current, e))?;
        Ok(target)
    }
}

impl PoolIndex {
    pub fn new(kind: VersionKind, pool: &DataPool, samples: Vec<PoolEntry>) -> Self {
        Self {
            format: INDEX_FORMAT,
            version: 0,
            kind,
            timestep: pool.timestep(),
            n_samples: pool.len(),
            d_g: pool.d_g(),
            d_s: pool.d_s(),
            projection: None,
            k: pool.k(),
            config: None,
            config_hash: None,
            samples,
            checksums: BTreeMap::new(),
        }
    }
}
