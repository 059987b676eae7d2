//! Per-timestep curation loop over a persisted pool.
//!
//! One [`Engine`] owns a state directory at a time. Each
//! [`Engine::advance`] merges a new bundle into the pool, re-clusters
//! from scratch, scores, selects, writes the manifest and, when a pool
//! budget is set, compresses the pool before committing a new version.

pub mod report;
pub mod state;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::clustering::{default_grid, select_k_with, write_cluster_dump, GridPoint, KMeansOptions};
use crate::datamodel::bundle::read_bundle;
use crate::datamodel::{merge_pool, DataPool, ManifestEntry, SampleRecord, SelectionManifest, SelectorRegistry};
use crate::dedup::{compress_pool, CompressionPlan};
use crate::error::{Error, Result};
use crate::projection::{project, ProjectionSpec, DEFAULT_OUTPUT_DIM};
use crate::rng::derive;
use crate::scoring::build_score_table;
use crate::selection::{select_subset, BudgetMode, HistogramSpec, SelectionConfig, SelectionSummary, TrimScope};
use state::{PoolIndex, StateLock, StoredState, VersionKind, VersionWriter};

pub use report::{report, ReportFiles};

/// Per-timestep selection budgets used in the reference experiments.
pub const BUDGET_PRESETS: [usize; 3] = [25_000, 50_000, 100_000];
/// Pool budgets used in the reference Lite-mode sweep.
pub const POOL_BUDGET_PRESETS: [usize; 3] = [100_000, 200_000, 500_000];

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "manifest_summary.json";
pub const COMPRESSION_FILE: &str = "compression.json";

const STAGE_STEP: u64 = 0x73746570;
const STAGE_PROJECTION: u64 = 0x70726f6a;
const STAGE_CLUSTER: u64 = 0x636c75;
const STAGE_SELECT: u64 = 0x73656c;

/// Hex sha256 of a value's compact JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    state::sha256_hex(serde_json::to_string(value).expect("value serializes").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Samples selected per timestep.
    pub budget: usize,
    /// Pool size cap; `None` keeps every sample (Lite mode off).
    pub pool_budget: Option<usize>,
    pub k_grid: Vec<usize>,
    pub histogram: HistogramSpec,
    pub trim_scope: TrimScope,
    /// Gradients wider than this are randomly projected down to it.
    pub projection_dim: usize,
    pub budget_mode: BudgetMode,
    pub seed: u64,
    pub registry: SelectorRegistry,
    pub kmeans: KMeansOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            budget: BUDGET_PRESETS[0],
            pool_budget: None,
            k_grid: default_grid(),
            histogram: HistogramSpec::default(),
            trim_scope: TrimScope::PerCluster,
            projection_dim: DEFAULT_OUTPUT_DIM,
            budget_mode: BudgetMode::Uniform,
            seed: 0,
            registry: SelectorRegistry::default(),
            kmeans: KMeansOptions::default(),
        }
    }
}

impl EngineConfig {
    pub fn check(&self) -> Result<()> {
        self.histogram.check()?;
        if self.k_grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if self.k_grid.contains(&0) {
            return Err(Error::InvalidConfig("k grid values must be positive".into()));
        }
        if self.projection_dim == 0 {
            return Err(Error::InvalidConfig("projection_dim must be positive".into()));
        }
        if self.kmeans.restarts == 0 || self.kmeans.max_iterations == 0 {
            return Err(Error::InvalidConfig("k-means needs at least one restart and iteration".into()));
        }
        Ok(())
    }

    fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            registry: self.registry.clone(),
            histogram: self.histogram,
            trim_scope: self.trim_scope,
            budget_mode: self.budget_mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdvanceOutcome {
    pub version: u64,
    pub timestep: u64,
    pub manifest: SelectionManifest,
    pub summary: SelectionSummary,
    pub grid: Vec<GridPoint>,
    /// Pool size the selection ran on.
    pub pool_size_selected_from: usize,
    /// Pool size after the optional compression.
    pub pool_size: usize,
    pub compression: Option<CompressionPlan>,
    pub version_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CompressOutcome {
    pub version: u64,
    pub plan: CompressionPlan,
    pub pool_size: usize,
}

/// Exclusive handle on a state directory.
#[derive(Debug)]
pub struct Engine {
    state_dir: PathBuf,
    _lock: StateLock,
}

impl Engine {
    /// Lock `state_dir`, creating it if needed. Fails with
    /// [`Error::StateLocked`] while another engine holds it.
    pub fn open(state_dir: &Path) -> Result<Self> {
        let lock = StateLock::acquire(state_dir)?;
        Ok(Self {
            state_dir: state_dir.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn state_dir(&self) -> &Path {
        &self.state_dir
    }

    /// The committed state, checksums verified.
    pub fn load(&self) -> Result<Option<StoredState>> {
        state::load(&self.state_dir)
    }

    /// Run one timestep. `refresh` optionally names a bundle with
    /// recomputed gradients for samples already in the pool.
    pub fn advance(&self, bundle_dir: &Path, config: &EngineConfig, refresh: Option<&Path>) -> Result<AdvanceOutcome> {
        config.check()?;
        let previous = self.load()?;
        let bundle = read_bundle(bundle_dir)?;
        let t = previous.as_ref().map_or(0, |p| p.index.timestep + 1);
        let step_seed = derive(config.seed, STAGE_STEP, t);

        let (prior_pool, mut projection, tombstones) = match &previous {
            Some(p) => (
                p.pool.clone(),
                p.index.projection.clone(),
                state::read_tombstones(&p.dir)?,
            ),
            None => {
                let projection = (bundle.d_g > config.projection_dim)
                    .then(|| ProjectionSpec::new(bundle.d_g, config.projection_dim, derive(config.seed, STAGE_PROJECTION, 0)))
                    .transpose()?;
                let d_g = projection.as_ref().map_or(bundle.d_g, |s| s.output_dim);
                (DataPool::empty(d_g, bundle.d_s), projection, Vec::new())
            }
        };
        let mut prior_pool = prior_pool;

        if let Some(fresh_dir) = refresh {
            let fresh = read_bundle(fresh_dir)?;
            let mut map = BTreeMap::new();
            for r in fresh.records {
                let g = fit_gradient(r.gradient_vec, &r.sample_id, prior_pool.d_g(), projection.as_ref())?;
                map.insert(r.sample_id, g);
            }
            let n = prior_pool.refresh_gradients(&map)?;
            if n < prior_pool.len() {
                warn!("reusing stale gradients for {} of {} pooled samples", prior_pool.len() - n, prior_pool.len());
            }
        } else if !prior_pool.is_empty() {
            warn!("no refresh bundle; reusing stored gradients for {} pooled samples", prior_pool.len());
        }

        if bundle.d_s != prior_pool.d_s() {
            return Err(Error::DimensionMismatch {
                what: "bundle semantic dimension".into(),
                expected: prior_pool.d_s(),
                got: bundle.d_s,
            });
        }
        let d_g = prior_pool.d_g();
        let new_records: Vec<SampleRecord> = bundle
            .into_records(t)
            .into_iter()
            .map(|mut r| {
                r.gradient_vec = fit_gradient(std::mem::take(&mut r.gradient_vec), &r.sample_id, d_g, projection.as_ref())?;
                Ok(r)
            })
            .collect::<Result<_>>()?;
        let mut pool = merge_pool(prior_pool, new_records, t)?;
        if pool.is_empty() {
            return Err(Error::InvalidConfig("pool is empty after merge".into()));
        }

        let mut grid: Vec<usize> = config.k_grid.iter().copied().filter(|&k| k <= pool.len()).collect();
        if grid.is_empty() {
            warn!("pool of {} is smaller than every grid value; using k = {}", pool.len(), pool.len());
            grid.push(pool.len());
        }
        let ksel = select_k_with(&pool.gradient_matrix(), &grid, derive(step_seed, STAGE_CLUSTER, 0), &config.kmeans)?;
        info!("t={t}: pool {} samples, k = {}", pool.len(), ksel.k_best);
        pool.set_clusters(ksel.k_best, ksel.model.assignments.clone())?;

        let scores = build_score_table(&pool, &config.registry, &config.histogram, config.trim_scope)?;
        let mut selection = select_subset(&pool, &scores, config.budget, &config.selection(), derive(step_seed, STAGE_SELECT, 0))?;
        if config.budget >= pool.len() {
            saturate(&pool, &scores, &mut selection.manifest, &mut selection.summary)?;
        }
        let config_hash = hash_json(config);
        selection.manifest.seed = config.seed;
        selection.manifest.config_hash = config_hash.clone();
        selection.summary.seed = config.seed;

        let writer = VersionWriter::begin(&self.state_dir)?;
        write_cluster_dump(writer.dir(), &ksel)?;
        scores.write(writer.dir())?;
        writer.write(MANIFEST_FILE, selection.manifest.to_jsonl().as_bytes())?;
        writer.write_json(SUMMARY_FILE, &selection.summary)?;

        let selected_from = pool.len();
        let (pool, compression) = match config.pool_budget {
            Some(d) => {
                let (compressed, plan) = compress_pool(&pool, d)?;
                writer.write_json(COMPRESSION_FILE, &plan)?;
                (compressed, Some(plan))
            }
            None => (pool, None),
        };
        let removed = compression.as_ref().map_or(&[][..], |p| p.removals.as_slice());
        writer.write_tombstones(&tombstones, removed, t)?;
        let entries = writer.write_pool(&pool)?;
        let mut index = PoolIndex::new(VersionKind::Advance, &pool, entries);
        index.projection = projection.take();
        index.config = Some(config.clone());
        index.config_hash = Some(config_hash);
        let version = writer.version();
        let version_dir = writer.commit(index)?;

        Ok(AdvanceOutcome {
            version,
            timestep: t,
            manifest: selection.manifest,
            summary: selection.summary,
            grid: ksel.grid,
            pool_size_selected_from: selected_from,
            pool_size: pool.len(),
            compression,
            version_dir,
        })
    }

    /// Compress the committed pool to `pool_budget` as a new version.
    pub fn compress(&self, pool_budget: usize) -> Result<CompressOutcome> {
        let current = self
            .load()?
            .ok_or_else(|| Error::StateConflict("state has no pool to compress".into()))?;
        let tombstones = state::read_tombstones(&current.dir)?;
        let (pool, plan) = compress_pool(&current.pool, pool_budget)?;
        let writer = VersionWriter::begin(&self.state_dir)?;
        writer.write_json(COMPRESSION_FILE, &plan)?;
        writer.write_tombstones(&tombstones, &plan.removals, pool.timestep())?;
        let entries = writer.write_pool(&pool)?;
        let mut index = PoolIndex::new(VersionKind::Compress, &pool, entries);
        index.projection = current.index.projection.clone();
        index.config = current.index.config.clone();
        index.config_hash = current.index.config_hash.clone();
        let version = writer.version();
        writer.commit(index)?;
        Ok(CompressOutcome {
            version,
            pool_size: pool.len(),
            plan,
        })
    }
}

/// Open `state_dir`, run one timestep and release the lock.
pub fn advance_timestep(state_dir: &Path, bundle_dir: &Path, config: &EngineConfig) -> Result<SelectionManifest> {
    Ok(Engine::open(state_dir)?.advance(bundle_dir, config, None)?.manifest)
}

/// Bring an incoming gradient to the pool's width.
fn fit_gradient(g: Vec<f32>, id: &str, d_g: usize, projection: Option<&ProjectionSpec>) -> Result<Vec<f32>> {
    match projection {
        Some(spec) if g.len() == spec.input_dim => project(&g, spec),
        _ if g.len() == d_g => Ok(g),
        _ => Err(Error::DimensionMismatch {
            what: format!("gradient of `{id}`"),
            expected: projection.map_or(d_g, |s| s.input_dim),
            got: g.len(),
        }),
    }
}

/// With a budget covering the whole pool every sample is selected,
/// trimmed ones included, each under its cluster's selector.
fn saturate(
    pool: &DataPool,
    scores: &crate::scoring::ScoreTable,
    manifest: &mut SelectionManifest,
    summary: &mut SelectionSummary,
) -> Result<()> {
    let members = pool.members_by_cluster()?;
    let mut entries = Vec::with_capacity(pool.len());
    for (c, m) in members.iter().enumerate() {
        let selector = summary.clusters[c].selector;
        let mut m = m.clone();
        m.sort_by(|&a, &b| pool.samples()[a].sample_id.cmp(&pool.samples()[b].sample_id));
        for i in m {
            entries.push(ManifestEntry {
                sample_id: pool.samples()[i].sample_id.clone(),
                cluster_id: c,
                selector,
                score: scores.normalized(i, selector),
            });
        }
        summary.clusters[c].selected = summary.clusters[c].size;
    }
    manifest.entries = entries;
    Ok(())
}
