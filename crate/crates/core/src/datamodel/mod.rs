//! Shared domain types: samples, pools, selector registry, manifests and
//! performance tables.

pub mod bundle;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix buffer".into(),
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "matrix row".into(),
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// One training sample's identity plus the statistics the engine consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub timestep_added: u64,
    pub gradient_vec: Vec<f32>,
    pub semantic_vec: Vec<f32>,
    /// Per answer-token NLL (nats) with the image in context.
    pub nll_with_image: Vec<f32>,
    /// Per answer-token NLL (nats) with the image removed.
    pub nll_text_only: Vec<f32>,
    pub el2n_raw: f32,
    pub entropy_raw: f32,
}

impl SampleRecord {
    /// Check record-level invariants against the declared pool dimensions.
    pub fn validate(&self, d_g: usize, d_s: usize) -> Result<()> {
        if self.gradient_vec.len() != d_g {
            return Err(Error::DimensionMismatch {
                what: format!("gradient_vec of `{}`", self.sample_id),
                expected: d_g,
                got: self.gradient_vec.len(),
            });
        }
        if self.semantic_vec.len() != d_s {
            return Err(Error::DimensionMismatch {
                what: format!("semantic_vec of `{}`", self.sample_id),
                expected: d_s,
                got: self.semantic_vec.len(),
            });
        }
        if self.nll_with_image.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.nll_with_image.len() != self.nll_text_only.len() {
            return Err(Error::LengthMismatch {
                left: self.nll_with_image.len(),
                right: self.nll_text_only.len(),
            });
        }
        let checks: [(&str, &[f32]); 4] = [
            ("gradient_vec", &self.gradient_vec),
            ("semantic_vec", &self.semantic_vec),
            ("nll_with_image", &self.nll_with_image),
            ("nll_text_only", &self.nll_text_only),
        ];
        for (what, values) in checks {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("{what} of `{}`", self.sample_id),
                    index,
                });
            }
        }
        for (what, values) in [
            ("nll_with_image", &self.nll_with_image),
            ("nll_text_only", &self.nll_text_only),
        ] {
            if let Some(index) = values.iter().position(|v| *v < 0.0) {
                return Err(Error::NonFinite {
                    what: format!("{what} of `{}` (negative NLL)", self.sample_id),
                    index,
                });
            }
        }
        for (index, v) in [self.el2n_raw, self.entropy_raw].into_iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite {
                    what: format!("scalars of `{}`", self.sample_id),
                    index,
                });
            }
        }
        Ok(())
    }
}

/// The full multi-dataset sample collection at a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPool {
    samples: Vec<SampleRecord>,
    timestep: u64,
    d_g: usize,
    d_s: usize,
    clusters: Option<ClusterAssignment>,
}

/// Cluster index per sample, aligned with the pool's sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub cluster_of: Vec<usize>,
}

impl DataPool {
    pub fn empty(d_g: usize, d_s: usize) -> Self {
        Self {
            samples: Vec::new(),
            timestep: 0,
            d_g,
            d_s,
            clusters: None,
        }
    }

    pub fn new(samples: Vec<SampleRecord>, timestep: u64, d_g: usize, d_s: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            s.validate(d_g, d_s)?;
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::DuplicateSampleId(s.sample_id.clone()));
            }
        }
        Ok(Self {
            samples,
            timestep,
            d_g,
            d_s,
            clusters: None,
        })
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }

    pub fn d_g(&self) -> usize {
        self.d_g
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn clusters(&self) -> Option<&ClusterAssignment> {
        self.clusters.as_ref()
    }

    pub fn k(&self) -> Option<usize> {
        self.clusters.as_ref().map(|c| c.k)
    }

    pub fn cluster_of(&self, sample_id: &str) -> Option<usize> {
        let c = self.clusters.as_ref()?;
        let idx = self.samples.iter().position(|s| s.sample_id == sample_id)?;
        Some(c.cluster_of[idx])
    }

    /// Attach cluster assignments (one per sample, each in `[0, k)`).
    pub fn set_clusters(&mut self, k: usize, cluster_of: Vec<usize>) -> Result<()> {
        if cluster_of.len() != self.samples.len() {
            return Err(Error::DimensionMismatch {
                what: "cluster assignments".into(),
                expected: self.samples.len(),
                got: cluster_of.len(),
            });
        }
        if k == 0 || cluster_of.iter().any(|&c| c >= k) {
            return Err(Error::InvalidConfig(format!(
                "cluster index out of range for k = {k}"
            )));
        }
        self.clusters = Some(ClusterAssignment { k, cluster_of });
        Ok(())
    }

    /// Member indices of each cluster, in pool order.
    pub fn members_by_cluster(&self) -> Result<Vec<Vec<usize>>> {
        let c = self.clusters.as_ref().ok_or(Error::NotClustered)?;
        let mut members = vec![Vec::new(); c.k];
        for (i, &cl) in c.cluster_of.iter().enumerate() {
            members[cl].push(i);
        }
        Ok(members)
    }

    pub fn gradient_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.d_g);
        for s in &self.samples {
            data.extend_from_slice(&s.gradient_vec);
        }
        Matrix {
            rows: self.len(),
            cols: self.d_g,
            data,
        }
    }

    /// Keep only samples whose index satisfies `keep`, preserving order and
    /// any cluster assignments.
    pub fn retain_indices(&self, keep: impl Fn(usize) -> bool) -> DataPool {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        DataPool {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            timestep: self.timestep,
            d_g: self.d_g,
            d_s: self.d_s,
            clusters: self.clusters.as_ref().map(|c| ClusterAssignment {
                k: c.k,
                cluster_of: idx.iter().map(|&i| c.cluster_of[i]).collect(),
            }),
        }
    }

    /// Replace gradient vectors for samples present in `fresh`; returns how
    /// many were refreshed.
    pub fn refresh_gradients(&mut self, fresh: &BTreeMap<String, Vec<f32>>) -> Result<usize> {
        let mut n = 0;
        for s in &mut self.samples {
            if let Some(v) = fresh.get(&s.sample_id) {
                if v.len() != self.d_g {
                    return Err(Error::DimensionMismatch {
                        what: format!("refreshed gradient of `{}`", s.sample_id),
                        expected: self.d_g,
                        got: v.len(),
                    });
                }
                s.gradient_vec.clone_from(v);
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Add `new_samples` to `pool` at `timestep`.
///
/// Prior cluster assignments are cleared; clusters are always recomputed
/// against the current pool.
pub fn merge_pool(pool: DataPool, new_samples: Vec<SampleRecord>, timestep: u64) -> Result<DataPool> {
    let mut ids: HashSet<String> = pool.samples.iter().map(|s| s.sample_id.clone()).collect();
    for s in &new_samples {
        s.validate(pool.d_g, pool.d_s)?;
        if !ids.insert(s.sample_id.clone()) {
            return Err(Error::DuplicateSampleId(s.sample_id.clone()));
        }
    }
    let mut samples = pool.samples;
    samples.extend(new_samples);
    Ok(DataPool {
        samples,
        timestep,
        d_g: pool.d_g,
        d_s: pool.d_s,
        clusters: None,
    })
}

/// A registered importance score function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    Perplexity,
    ImageGrounding,
    El2n,
    Entropy,
}

impl ScoreFunction {
    pub const ALL: [ScoreFunction; 4] = [
        ScoreFunction::Perplexity,
        ScoreFunction::ImageGrounding,
        ScoreFunction::El2n,
        ScoreFunction::Entropy,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ScoreFunction::Perplexity => "perplexity",
            ScoreFunction::ImageGrounding => "image_grounding",
            ScoreFunction::El2n => "el2n",
            ScoreFunction::Entropy => "entropy",
        }
    }
}

impl fmt::Display for ScoreFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ScoreFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreFunction::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown score function `{s}`")))
    }
}

/// Ordered, duplicate-free list of score functions. Order is the tie-break
/// order for selector choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScoreFunction>", into = "Vec<ScoreFunction>")]
pub struct SelectorRegistry(Vec<ScoreFunction>);

impl SelectorRegistry {
    pub fn new(functions: Vec<ScoreFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::InvalidConfig("selector registry is empty".into()));
        }
        let unique: HashSet<_> = functions.iter().collect();
        if unique.len() != functions.len() {
            return Err(Error::InvalidConfig(
                "selector registry has duplicate entries".into(),
            ));
        }
        Ok(Self(functions))
    }

    pub fn functions(&self) -> &[ScoreFunction] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for SelectorRegistry {
    fn default() -> Self {
        Self(ScoreFunction::ALL.to_vec())
    }
}

impl TryFrom<Vec<ScoreFunction>> for SelectorRegistry {
    type Error = Error;

    fn try_from(v: Vec<ScoreFunction>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SelectorRegistry> for Vec<ScoreFunction> {
    fn from(r: SelectorRegistry) -> Self {
        r.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub cluster_id: usize,
    pub selector: ScoreFunction,
    pub score: f64,
}

/// The subset chosen for training at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub timestep: u64,
    pub budget: usize,
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl SelectionManifest {
    /// One JSON object per line, in entry order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.sample_id.as_str())
    }
}

/// Skills × timesteps accuracy matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceTable {
    skills: Vec<String>,
    /// `values[s][t]`, each in `[0, 100]`.
    values: Vec<Vec<f64>>,
    upper_bounds: Option<Vec<f64>>,
}

impl PerformanceTable {
    pub fn new(skills: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if skills.is_empty() || skills.len() != values.len() {
            return Err(Error::Table(format!(
                "{} skills but {} value rows",
                skills.len(),
                values.len()
            )));
        }
        let columns = values[0].len();
        if columns == 0 {
            return Err(Error::Table("no timestep columns".into()));
        }
        for (skill, row) in skills.iter().zip(&values) {
            if row.len() != columns {
                return Err(Error::Table(format!(
                    "skill `{skill}` has {} cells, expected {columns}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 100.0) {
                return Err(Error::Table(format!(
                    "skill `{skill}` has value {v} outside [0, 100]"
                )));
            }
        }
        Ok(Self {
            skills,
            values,
            upper_bounds: None,
        })
    }

    pub fn with_upper_bounds(mut self, bounds: Vec<f64>) -> Result<Self> {
        if bounds.len() != self.skills.len() {
            return Err(Error::Table(format!(
                "{} upper bounds for {} skills",
                bounds.len(),
                self.skills.len()
            )));
        }
        if let Some(i) = bounds.iter().position(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::BadUpperBound(self.skills[i].clone()));
        }
        self.upper_bounds = Some(bounds);
        Ok(self)
    }

    pub fn skills(&self) -> &[String] {
        &self.skills
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn upper_bounds(&self) -> Option<&[f64]> {
        self.upper_bounds.as_deref()
    }

    /// Number of timestep columns (T + 1).
    pub fn columns(&self) -> usize {
        self.values[0].len()
    }

    /// Parse `skill,t0,t1,...` CSV with one row per skill.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Table(e.to_string()))?.clone();
        if headers.get(0) != Some("skill") || headers.len() < 2 {
            return Err(Error::Table("header must be `skill,t0,t1,...`".into()));
        }
        let mut skills = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Table(e.to_string()))?;
            if rec.len() != headers.len() {
                return Err(Error::Table(format!("row {} has {} cells", line + 1, rec.len())));
            }
            skills.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::Table(format!("row {}: bad number `{c}`", line + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Self::new(skills, values)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f)
    }
}

/// Read a `skill,upper_bound` CSV into bounds aligned with `skills`.
pub fn read_upper_bounds(path: &Path, skills: &[String]) -> Result<Vec<f64>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f);
    let mut map = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Table(e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::Table("upper bounds must be `skill,upper_bound`".into()));
        }
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| Error::Table(format!("bad upper bound `{}`", &rec[1])))?;
        map.insert(rec[0].to_string(), v);
    }
    skills
        .iter()
        .map(|s| map.get(s).copied().ok_or_else(|| Error::BadUpperBound(s.clone())))
        .collect()
}
