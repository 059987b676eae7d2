//! Deterministic synthetic skill streams with planted clusters and
//! duplicates.
//!
//! Skill `s` has its gradient center at `(separation/√2)·e_s`, so any two
//! centers sit `separation` standard deviations apart. Semantic centers
//! are independent random directions. Per-sample NLL levels grow with the
//! skill index, which makes a single pool-wide score favor the last skill.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::bundle::{write_bundle, Bundle};
use crate::datamodel::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::{chacha, derive};

const STAGE_TIMESTEP: u64 = 0x7374;
const STAGE_SEMANTIC: u64 = 0x73656d;
pub const LABELS_FILE: &str = "labels.jsonl";

/// How a skill's score distributions look.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreProfile {
    /// Every scorer varies across the skill's samples.
    Spread,
    /// Every scorer is constant within the skill.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    /// `mixtures[t][s]` samples of skill `s` arrive at timestep `t`.
    pub mixtures: Vec<Vec<usize>>,
    /// Exact copies planted per timestep, as a fraction of its originals.
    pub duplicate_fraction: f64,
    /// Distance between gradient centers in units of the noise std.
    pub separation: f64,
    pub seed: u64,
    pub d_g: usize,
    pub d_s: usize,
    /// Copies get cosine ≈ 0.99 semantic vectors instead of exact ones.
    pub near_duplicates: bool,
    /// One per skill; missing entries default to `Spread`.
    pub profiles: Vec<ScoreProfile>,
}

impl StreamSpec {
    /// `n_timesteps` timesteps, each with `per_skill` samples of every skill.
    pub fn uniform(n_timesteps: usize, n_skills: usize, per_skill: usize, seed: u64) -> Self {
        Self {
            mixtures: vec![vec![per_skill; n_skills]; n_timesteps],
            duplicate_fraction: 0.0,
            separation: 10.0,
            seed,
            d_g: 64,
            d_s: 32,
            near_duplicates: false,
            profiles: Vec::new(),
        }
    }

    pub fn n_skills(&self) -> usize {
        self.mixtures.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn profile(&self, skill: usize) -> ScoreProfile {
        self.profiles.get(skill).copied().unwrap_or(ScoreProfile::Spread)
    }

    pub fn check(&self) -> Result<()> {
        if self.mixtures.is_empty() {
            return Err(Error::InvalidConfig("stream needs at least one timestep".into()));
        }
        if self.mixtures.iter().any(|m| m.iter().sum::<usize>() == 0) {
            return Err(Error::InvalidConfig("every timestep needs a positive sample count".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidConfig("separation must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.duplicate_fraction) {
            return Err(Error::InvalidConfig("duplicate_fraction must lie in [0, 1]".into()));
        }
        if self.n_skills() > self.d_g {
            return Err(Error::InvalidConfig(format!(
                "{} skills need d_g >= {}",
                self.n_skills(),
                self.n_skills()
            )));
        }
        if self.d_s == 0 {
            return Err(Error::InvalidConfig("d_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub skill: usize,
    /// Id of the original for planted copies.
    pub dup_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTimestep {
    pub bundle: Bundle,
    pub labels: Vec<GroundTruth>,
}

impl SyntheticTimestep {
    pub fn labels_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.labels {
            out.push_str(&serde_json::to_string(l).expect("label serializes"));
            out.push('\n');
        }
        out
    }
}

/// Number of copies planted at a timestep with `originals` samples.
pub fn planted_copies(originals: usize, fraction: f64) -> usize {
    (fraction * originals as f64 + 1e-9).floor() as usize
}

/// Generate the whole stream; timesteps are independent given the seed.
pub fn generate(spec: &StreamSpec) -> Result<Vec<SyntheticTimestep>> {
    spec.check()?;
    let sem_centers = semantic_centers(spec);
    Ok((0..spec.mixtures.len())
        .into_par_iter()
        .map(|t| generate_timestep(spec, &sem_centers, t))
        .collect())
}

/// Write timestep `t` to `dir/tNN/` (bundle files plus `labels.jsonl`).
pub fn write_stream(dir: &Path, stream: &[SyntheticTimestep]) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::with_capacity(stream.len());
    for (t, step) in stream.iter().enumerate() {
        let sub = dir.join(format!("t{t:02}"));
        write_bundle(&sub, &step.bundle)?;
        let path = sub.join(LABELS_FILE);
        fs::write(&path, step.labels_jsonl()).map_err(|e| Error::io(&path, e))?;
        paths.push(sub);
    }
    Ok(paths)
}

pub fn read_labels(path: &Path) -> Result<Vec<GroundTruth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

fn semantic_centers(spec: &StreamSpec) -> Vec<Vec<f32>> {
    let mut rng = chacha(derive(spec.seed, STAGE_SEMANTIC, 0));
    (0..spec.n_skills())
        .map(|_| {
            let v: Vec<f64> = (0..spec.d_s).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            // Same-skill cosine lands well above cross-skill cosine.
            let scale = 2.0 * (spec.d_s as f64).sqrt() / norm;
            v.iter().map(|x| (x * scale) as f32).collect()
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, center: &[f32]) -> Vec<f32> {
    center
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            (c as f64 + z) as f32
        })
        .collect()
}

fn generate_timestep(spec: &StreamSpec, sem_centers: &[Vec<f32>], t: usize) -> SyntheticTimestep {
    let mut rng = chacha(derive(spec.seed, STAGE_TIMESTEP, t as u64));
    let offset = (spec.separation / std::f64::consts::SQRT_2) as f32;
    let counts = &spec.mixtures[t];
    let mut records = Vec::new();
    let mut labels = Vec::new();
    let mut first_of_skill = Vec::with_capacity(counts.len());
    for (skill, &count) in counts.iter().enumerate() {
        first_of_skill.push(records.len());
        let mut g_center = vec![0.0f32; spec.d_g];
        g_center[skill] = offset;
        for i in 0..count {
            let id = format!("t{t:02}-k{skill:02}-{i:05}");
            let (nll_img, nll_txt, el2n, entropy) = synth_scores(&mut rng, skill, spec.profile(skill));
            records.push(SampleRecord {
                sample_id: id.clone(),
                dataset_id: format!("synth-t{t:02}"),
                timestep_added: t as u64,
                gradient_vec: gaussian(&mut rng, &g_center),
                semantic_vec: gaussian(&mut rng, &sem_centers[skill]),
                nll_with_image: nll_img,
                nll_text_only: nll_txt,
                el2n_raw: el2n,
                entropy_raw: entropy,
            });
            labels.push(GroundTruth {
                id,
                skill,
                dup_of: None,
            });
        }
    }

    let originals: usize = counts.iter().sum();
    let skills: Vec<usize> = (0..counts.len()).filter(|&s| counts[s] > 0).collect();
    for j in 0..planted_copies(originals, spec.duplicate_fraction) {
        let skill = skills[j % skills.len()];
        let src = first_of_skill[skill] + (j / skills.len()) % counts[skill];
        let mut copy = records[src].clone();
        let source_id = copy.sample_id.clone();
        copy.sample_id = format!("t{t:02}-k{skill:02}-d{j:05}");
        if spec.near_duplicates {
            copy.semantic_vec = perturb(&mut rng, &copy.semantic_vec, 0.99);
        }
        labels.push(GroundTruth {
            id: copy.sample_id.clone(),
            skill,
            dup_of: Some(source_id),
        });
        records.push(copy);
    }

    SyntheticTimestep {
        bundle: Bundle {
            dataset_id: format!("synth-t{t:02}"),
            d_g: spec.d_g,
            d_s: spec.d_s,
            records,
        },
        labels,
    }
}

/// A vector at cosine `target` from `v`.
fn perturb(rng: &mut ChaCha8Rng, v: &[f32], target: f64) -> Vec<f32> {
    let v64: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let vn = v64.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut noise: Vec<f64> = (0..v.len()).map(|_| StandardNormal.sample(rng)).collect();
    let proj = noise.iter().zip(&v64).map(|(a, b)| a * b).sum::<f64>() / (vn * vn);
    for (n, x) in noise.iter_mut().zip(&v64) {
        *n -= proj * x;
    }
    let nn = noise.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let scale = vn * target.acos().tan() / nn;
    v64.iter().zip(&noise).map(|(x, n)| (x + n * scale) as f32).collect()
}

fn synth_scores(rng: &mut ChaCha8Rng, skill: usize, profile: ScoreProfile) -> (Vec<f32>, Vec<f32>, f32, f32) {
    let len = rng.gen_range(4..=16);
    let base = 0.5 + 0.4 * skill as f64;
    match profile {
        ScoreProfile::Constant => {
            let img = vec![base as f32; len];
            let txt = vec![(base + 0.5) as f32; len];
            (img, txt, 0.7, 1.5)
        }
        ScoreProfile::Spread => {
            let level = base + rng.gen_range(0.0..1.5);
            let gap = rng.gen_range(0.0..1.5);
            let img: Vec<f32> = (0..len)
                .map(|_| (level + rng.gen_range(-0.1..0.1)).max(0.0) as f32)
                .collect();
            let txt: Vec<f32> = img.iter().map(|&x| x + gap as f32).collect();
            let el2n = rng.gen_range(0.0..std::f64::consts::SQRT_2) as f32;
            let entropy = rng.gen_range(0.0..3.0) as f32;
            (img, txt, el2n, entropy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{adjusted_rand_index, kmeans};
    use crate::datamodel::bundle::validate_bundle;
    use crate::datamodel::DataPool;

    fn small() -> StreamSpec {
        let mut spec = StreamSpec::uniform(2, 3, 100, 11);
        spec.duplicate_fraction = 0.1;
        spec
    }

    #[test]
    fn bundles_validate_and_recover_skills() {
        let spec = small();
        let stream = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_stream(dir.path(), &stream).unwrap();
        for p in &paths {
            assert!(validate_bundle(p).is_ok());
        }
        let originals: Vec<_> = stream[0].bundle.records[..300].to_vec();
        let labels: Vec<usize> = stream[0].labels[..300].iter().map(|l| l.skill).collect();
        let pool = DataPool::new(originals, 0, spec.d_g, spec.d_s).unwrap();
        let model = kmeans(&pool.gradient_matrix(), 3, 5).unwrap();
        assert!(adjusted_rand_index(&model.assignments, &labels) >= 0.99);
    }

    #[test]
    fn copies_are_exact_and_counted() {
        let stream = generate(&small()).unwrap();
        let step = &stream[0];
        let copies: Vec<_> = step.labels.iter().filter(|l| l.dup_of.is_some()).collect();
        assert_eq!(copies.len(), 30);
        for c in copies {
            let a = step.bundle.records.iter().find(|r| r.sample_id == c.id).unwrap();
            let b = step
                .bundle
                .records
                .iter()
                .find(|r| Some(&r.sample_id) == c.dup_of.as_ref())
                .unwrap();
            assert_eq!(a.gradient_vec, b.gradient_vec);
            assert_eq!(a.semantic_vec, b.semantic_vec);
        }
    }

    #[test]
    fn same_spec_same_bytes() {
        let spec = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_stream(a.path(), &generate(&spec).unwrap()).unwrap();
        write_stream(b.path(), &generate(&spec).unwrap()).unwrap();
        for t in ["t00", "t01"] {
            for f in crate::datamodel::bundle::canonical_files().iter().map(String::as_str).chain([LABELS_FILE]) {
                assert_eq!(
                    fs::read(a.path().join(t).join(f)).unwrap(),
                    fs::read(b.path().join(t).join(f)).unwrap(),
                    "{t}/{f}"
                );
            }
        }
    }

    #[test]
    fn near_duplicates_hit_target_cosine() {
        let mut spec = small();
        spec.near_duplicates = true;
        let step = generate(&spec).unwrap().remove(0);
        let copy = step.labels.iter().find(|l| l.dup_of.is_some()).unwrap();
        let find = |id: &str| step.bundle.records.iter().find(|r| r.sample_id == id).unwrap();
        let a = &find(&copy.id).semantic_vec;
        let b = &find(copy.dup_of.as_ref().unwrap()).semantic_vec;
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 0.99).abs() < 1e-4);
    }

    #[test]
    fn labels_are_exhaustive() {
        let step = generate(&small()).unwrap().remove(1);
        assert_eq!(step.labels.len(), step.bundle.records.len());
        for (l, r) in step.labels.iter().zip(&step.bundle.records) {
            assert_eq!(l.id, r.sample_id);
        }
    }

    #[test]
    fn constant_profile_gives_constant_scores() {
        let mut spec = StreamSpec::uniform(1, 2, 20, 3);
        spec.profiles = vec![ScoreProfile::Constant, ScoreProfile::Spread];
        let step = generate(&spec).unwrap().remove(0);
        let first: Vec<_> = step.bundle.records[..20].iter().map(|r| r.nll_with_image[0]).collect();
        assert!(first.iter().all(|&v| v == first[0]));
    }

    #[test]
    fn rejects_bad_spec() {
        let mut spec = small();
        spec.separation = 0.0;
        assert!(generate(&spec).is_err());
        let mut spec = small();
        spec.mixtures = vec![vec![0, 0]];
        assert!(generate(&spec).is_err());
    }
}
