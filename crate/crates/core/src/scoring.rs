//! Per-sample importance scores and their per-cluster normalization.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DataPool, SampleRecord, ScoreFunction, SelectorRegistry};
use crate::error::{Error, Result};
use crate::selection::{trim_outliers, HistogramSpec, TrimScope};

const PROB_TOLERANCE: f64 = 1e-6;

/// Compensated (Neumaier) sum.
fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn mean_nll<T: Copy + Into<f64>>(nll: &[T]) -> Result<f64> {
    if nll.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(index) = nll.iter().position(|v| !(*v).into().is_finite()) {
        return Err(Error::NonFinite {
            what: "NLL sequence".into(),
            index,
        });
    }
    Ok(neumaier_sum(nll.iter().map(|v| (*v).into())) / nll.len() as f64)
}

/// `exp(mean(nll))`.
pub fn perplexity<T: Copy + Into<f64>>(nll: &[T]) -> Result<f64> {
    Ok(mean_nll(nll)?.exp())
}

/// Ratio of text-only to image-conditioned perplexity over the same tokens.
pub fn image_grounding<T: Copy + Into<f64>>(nll_text_only: &[T], nll_with_image: &[T]) -> Result<f64> {
    if nll_text_only.len() != nll_with_image.len() {
        return Err(Error::LengthMismatch {
            left: nll_text_only.len(),
            right: nll_with_image.len(),
        });
    }
    // exp(a) / exp(b) without overflowing for long, high-loss answers
    Ok((mean_nll(nll_text_only)? - mean_nll(nll_with_image)?).exp())
}

fn check_distribution(prob: &[f64]) -> Result<()> {
    if prob.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(index) = prob.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            what: "probability vector".into(),
            index,
        });
    }
    if let Some(index) = prob.iter().position(|&p| p < 0.0) {
        return Err(Error::NegativeProbability {
            index,
            value: prob[index],
        });
    }
    let sum = neumaier_sum(prob.iter().copied());
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// L2 norm of `prob - one_hot(target)`.
pub fn el2n(prob: &[f64], target: usize) -> Result<f64> {
    check_distribution(prob)?;
    if target >= prob.len() {
        return Err(Error::TargetOutOfRange {
            target,
            len: prob.len(),
        });
    }
    let sq = neumaier_sum(prob.iter().enumerate().map(|(i, &p)| {
        let d = if i == target { p - 1.0 } else { p };
        d * d
    }));
    Ok(sq.sqrt())
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn output_entropy(prob: &[f64]) -> Result<f64> {
    check_distribution(prob)?;
    let h = -neumaier_sum(prob.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()));
    // -0.0 for one-hot inputs
    Ok(h.max(0.0))
}

/// Raw value of one score function for a sample.
pub fn score_sample(record: &SampleRecord, function: ScoreFunction) -> Result<f64> {
    match function {
        ScoreFunction::Perplexity => perplexity(&record.nll_with_image),
        ScoreFunction::ImageGrounding => image_grounding(&record.nll_text_only, &record.nll_with_image),
        ScoreFunction::El2n => Ok(record.el2n_raw as f64),
        ScoreFunction::Entropy => Ok(record.entropy_raw as f64),
    }
}

/// Raw and per-cluster normalized scores, `n_samples × n_functions`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    function_ids: Vec<ScoreFunction>,
    n_samples: usize,
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

impl ScoreTable {
    pub fn function_ids(&self) -> &[ScoreFunction] {
        &self.function_ids
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_functions(&self) -> usize {
        self.function_ids.len()
    }

    fn col(&self, function: ScoreFunction) -> usize {
        self.function_ids
            .iter()
            .position(|&f| f == function)
            .unwrap_or_else(|| panic!("{function} is not in the score table"))
    }

    pub fn raw(&self, sample: usize, function: ScoreFunction) -> f64 {
        self.raw[sample * self.n_functions() + self.col(function)]
    }

    pub fn normalized(&self, sample: usize, function: ScoreFunction) -> f64 {
        self.normalized[sample * self.n_functions() + self.col(function)]
    }

    pub fn raw_column(&self, function: ScoreFunction) -> Vec<f64> {
        let c = self.col(function);
        self.raw.chunks_exact(self.n_functions()).map(|r| r[c]).collect()
    }

    pub fn normalized_column(&self, function: ScoreFunction) -> Vec<f64> {
        let c = self.col(function);
        self.normalized.chunks_exact(self.n_functions()).map(|r| r[c]).collect()
    }

    /// Write `scores.f32` (raw), `scores_norm.f32` and `scores_manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let to_bytes = |v: &[f64]| -> Vec<u8> { v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect() };
        let raw_path = dir.join("scores.f32");
        std::fs::write(&raw_path, to_bytes(&self.raw)).map_err(|e| Error::io(raw_path, e))?;
        let norm_path = dir.join("scores_norm.f32");
        std::fs::write(&norm_path, to_bytes(&self.normalized)).map_err(|e| Error::io(norm_path, e))?;
        let manifest = ScoreDumpManifest {
            n_samples: self.n_samples,
            columns: self.function_ids.clone(),
            raw: "scores.f32".into(),
            normalized: "scores_norm.f32".into(),
        };
        let path = dir.join("scores_manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("score manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreDumpManifest {
    n_samples: usize,
    columns: Vec<ScoreFunction>,
    raw: String,
    normalized: String,
}

/// Compute every registered score for every sample, then min-max normalize
/// each `(cluster, function)` over its non-trimmed members.
///
/// Trimmed members are clamped into `[0, 1]`; a constant column maps to
/// 0.5. An unclustered pool is treated as a single cluster.
pub fn build_score_table(
    pool: &DataPool,
    registry: &SelectorRegistry,
    histogram: &HistogramSpec,
    scope: TrimScope,
) -> Result<ScoreTable> {
    let functions = registry.functions().to_vec();
    let nf = functions.len();
    let n = pool.len();
    let rows: Vec<Vec<f64>> = pool
        .samples()
        .par_iter()
        .map(|s| functions.iter().map(|&f| score_sample(s, f)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = rows.into_iter().flatten().collect();
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("raw score of sample {}", index / nf),
            index: index % nf,
        });
    }

    let members = match pool.clusters() {
        Some(_) => pool.members_by_cluster()?,
        None => vec![(0..n).collect()],
    };
    let members: Vec<Vec<usize>> = members
        .into_iter()
        .map(|m| sorted_by_id(pool, m))
        .collect();

    // global keep flags per function, when trimming over the whole pool
    let global_keep: Option<Vec<Vec<bool>>> = match scope {
        TrimScope::PerCluster => None,
        TrimScope::Global => {
            let all = sorted_by_id(pool, (0..n).collect());
            Some(
                (0..nf)
                    .map(|c| {
                        let vals: Vec<f64> = all.iter().map(|&i| raw[i * nf + c]).collect();
                        let mut flags = vec![false; n];
                        for k in trim_outliers(&vals, histogram.trim_fraction) {
                            flags[all[k]] = true;
                        }
                        flags
                    })
                    .collect(),
            )
        }
    };

    let mut normalized = vec![0.5; n * nf];
    for cluster in &members {
        for c in 0..nf {
            let vals: Vec<f64> = cluster.iter().map(|&i| raw[i * nf + c]).collect();
            let kept: Vec<usize> = match &global_keep {
                None => trim_outliers(&vals, histogram.trim_fraction),
                Some(flags) => (0..cluster.len()).filter(|&k| flags[c][cluster[k]]).collect(),
            };
            let (lo, hi) = kept.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| {
                (lo.min(vals[k]), hi.max(vals[k]))
            });
            for (k, &i) in cluster.iter().enumerate() {
                normalized[i * nf + c] = if kept.is_empty() || hi <= lo {
                    0.5
                } else {
                    ((vals[k] - lo) / (hi - lo)).clamp(0.0, 1.0)
                };
            }
        }
    }
    Ok(ScoreTable {
        function_ids: functions,
        n_samples: n,
        raw,
        normalized,
    })
}

/// Reorder pool indices by ascending sample id (the trimming tie order).
pub(crate) fn sorted_by_id(pool: &DataPool, mut idx: Vec<usize>) -> Vec<usize> {
    let s = pool.samples();
    idx.sort_by(|&a, &b| s[a].sample_id.cmp(&s[b].sample_id));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::tests::record;
    use crate::datamodel::merge_pool;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&[0.0f64, 0.0, 0.0]).unwrap(), 1.0);
        assert!((perplexity(&[LN2, LN2]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(perplexity::<f64>(&[]), Err(Error::EmptySequence)));
        assert!(perplexity(&[f64::NAN]).is_err());
    }

    #[test]
    fn image_grounding_examples() {
        let x = [0.3f64, 1.2, 0.7];
        assert_eq!(image_grounding(&x, &x).unwrap(), 1.0);
        let four = [4f64.ln(); 5];
        let two = [LN2; 5];
        assert!((image_grounding(&four, &two).unwrap() - 2.0).abs() < 1e-14);
        assert!(matches!(
            image_grounding(&[1.0f64], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(image_grounding::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn el2n_examples() {
        assert_eq!(el2n(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((el2n(&[0.5, 0.5], 0).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(matches!(el2n(&[0.5, 0.6], 0), Err(Error::NotNormalized { .. })));
        assert!(matches!(el2n(&[0.5, 0.5], 2), Err(Error::TargetOutOfRange { .. })));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(output_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((output_entropy(&[0.25; 4]).unwrap() - 1.386_294_4).abs() < 1e-7);
        assert!(matches!(
            output_entropy(&[1.5, -0.5]),
            Err(Error::NegativeProbability { index: 1, .. })
        ));
    }

    fn pool_with_scores(values: &[f32]) -> DataPool {
        let samples = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut r = record(&format!("s{i}"), 2, 2);
                r.el2n_raw = v;
                r
            })
            .collect();
        merge_pool(DataPool::empty(2, 2), samples, 0).unwrap()
    }

    fn untrimmed() -> HistogramSpec {
        HistogramSpec {
            n_bins: 50,
            trim_fraction: 0.0,
        }
    }

    #[test]
    fn min_max_within_cluster() {
        let pool = pool_with_scores(&[1.0, 2.0, 3.0]);
        let t = build_score_table(&pool, &SelectorRegistry::default(), &untrimmed(), TrimScope::PerCluster).unwrap();
        assert_eq!(t.normalized_column(ScoreFunction::El2n), vec![0.0, 0.5, 1.0]);
        // every sample shares the same NLL stream
        assert_eq!(t.normalized_column(ScoreFunction::Perplexity), vec![0.5; 3]);
    }

    #[test]
    fn normalizes_each_cluster_separately() {
        let mut pool = pool_with_scores(&[1.0, 5.0, 10.0, 20.0]);
        pool.set_clusters(2, vec![0, 0, 1, 1]).unwrap();
        let t = build_score_table(&pool, &SelectorRegistry::default(), &untrimmed(), TrimScope::PerCluster).unwrap();
        assert_eq!(t.normalized_column(ScoreFunction::El2n), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn trimmed_members_are_clamped() {
        let values: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let pool = pool_with_scores(&values);
        let spec = HistogramSpec {
            n_bins: 50,
            trim_fraction: 0.05,
        };
        let t = build_score_table(&pool, &SelectorRegistry::default(), &spec, TrimScope::PerCluster).unwrap();
        let col = t.normalized_column(ScoreFunction::El2n);
        // ids sort as s0, s1, s10.. but values follow sample index
        assert_eq!(col[0], 0.0);
        assert_eq!(col[1], 0.0);
        assert_eq!(col[18], 1.0);
        assert_eq!(col[19], 1.0);
        assert!((col[10] - 9.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn columns_match_per_sample_scorers() {
        let mut rng = crate::rng::chacha(3);
        use rand::Rng;
        let samples: Vec<_> = (0..50)
            .map(|i| {
                let mut r = record(&format!("r{i:02}"), 2, 2);
                let len = rng.gen_range(1..20);
                r.nll_with_image = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
                r.nll_text_only = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
                r.el2n_raw = rng.gen_range(0.0..1.4);
                r.entropy_raw = rng.gen_range(0.0..3.0);
                r
            })
            .collect();
        let pool = merge_pool(DataPool::empty(2, 2), samples, 0).unwrap();
        let t = build_score_table(&pool, &SelectorRegistry::default(), &HistogramSpec::default(), TrimScope::PerCluster)
            .unwrap();
        for (i, s) in pool.samples().iter().enumerate() {
            let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
            let ppl = mean(&s.nll_with_image).exp();
            let ig = mean(&s.nll_text_only).exp() / ppl;
            assert!((t.raw(i, ScoreFunction::Perplexity) - ppl).abs() <= 1e-12 * ppl);
            assert!((t.raw(i, ScoreFunction::ImageGrounding) - ig).abs() <= 1e-12 * ig);
            assert_eq!(t.raw(i, ScoreFunction::El2n), s.el2n_raw as f64);
            assert_eq!(t.raw(i, ScoreFunction::Entropy), s.entropy_raw as f64);
        }
    }

    proptest! {
        #[test]
        fn perplexity_monotone(
            base in prop::collection::vec(0.0f64..5.0, 1..40),
            bump in prop::collection::vec(0.0f64..1.0, 40),
        ) {
            let larger: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| a + b).collect();
            prop_assert!(perplexity(&larger).unwrap() >= perplexity(&base).unwrap());
        }

        #[test]
        fn grounding_identity(x in prop::collection::vec(0.0f64..20.0, 1..64)) {
            prop_assert!((image_grounding(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        }

        #[test]
        fn normalization_preserves_order(values in prop::collection::vec(0.0f32..100.0, 2..60)) {
            let pool = pool_with_scores(&values);
            let t = build_score_table(&pool, &SelectorRegistry::default(), &HistogramSpec::default(), TrimScope::PerCluster).unwrap();
            let norm = t.normalized_column(ScoreFunction::El2n);
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(norm[i] <= norm[j]);
                    }
                }
            }
        }

        #[test]
        fn scorers_permutation_covariant(values in prop::collection::vec(0.0f32..10.0, 1..30), rot in 0usize..30) {
            let pool = pool_with_scores(&values);
            let t = build_score_table(&pool, &SelectorRegistry::default(), &untrimmed(), TrimScope::PerCluster).unwrap();
            let r = rot % values.len();
            let mut rotated: Vec<SampleRecord> = pool.samples().to_vec();
            rotated.rotate_left(r);
            let pool2 = merge_pool(DataPool::empty(2, 2), rotated, 0).unwrap();
            let t2 = build_score_table(&pool2, &SelectorRegistry::default(), &untrimmed(), TrimScope::PerCluster).unwrap();
            let mut raw = t.raw_column(ScoreFunction::El2n);
            raw.rotate_left(r);
            prop_assert_eq!(raw, t2.raw_column(ScoreFunction::El2n));
            let mut norm = t.normalized_column(ScoreFunction::El2n);
            norm.rotate_left(r);
            prop_assert_eq!(norm, t2.normalized_column(ScoreFunction::El2n));
        }
    }
}
