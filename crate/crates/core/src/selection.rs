//! Per-cluster selector choice, coverage-based stratified sampling and
//! cluster budget allocation.
//!
//! For every pseudo-task cluster the selector whose trimmed, min-max
//! normalized score histogram has the highest entropy wins. Its scores are
//! then sampled with CCS: equal-width bins, sparse bins served first, each
//! bin given an equal share of what is left. Cluster budgets come from a
//! waterfill so that clusters smaller than their share hand the slack to
//! the others.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DataPool, ManifestEntry, ScoreFunction, SelectionManifest, SelectorRegistry};
use crate::error::{Error, Result};
use crate::rng;
use crate::scoring::{sorted_by_id, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub n_bins: usize,
    pub trim_fraction: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            n_bins: 50,
            trim_fraction: 0.05,
        }
    }
}

impl HistogramSpec {
    pub fn check(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
        }
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(Error::InvalidConfig(format!(
                "trim fraction {} outside [0, 0.5)",
                self.trim_fraction
            )));
        }
        Ok(())
    }
}

/// Whether outlier tails are trimmed per cluster or over the whole pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimScope {
    #[default]
    PerCluster,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    #[default]
    Uniform,
    Density,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total: usize,
    pub per_cluster: Vec<usize>,
    pub mode: BudgetMode,
}

fn trim_count(n: usize, frac: f64) -> usize {
    // guard against 0.29 * 100 = 28.999...
    ((frac * n as f64) + 1e-9).floor() as usize
}

/// Indices kept after dropping `⌊frac·n⌋` lowest and highest scores.
///
/// Index order doubles as sample-id order: on ties the lower index is kept.
/// The bottom tail is removed first, the top tail from what remains.
pub fn trim_outliers(scores: &[f64], frac: f64) -> Vec<usize> {
    let n = scores.len();
    let m = trim_count(n, frac).min(n / 2);
    if m == 0 {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    // lowest first; among equal scores the highest index goes first
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut rest: Vec<usize> = order[m..].to_vec();
    // highest first; among equal scores the highest index goes first
    rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    let mut kept: Vec<usize> = rest[m..].to_vec();
    kept.sort_unstable();
    kept
}

/// Bin of a value already normalized to `[0, 1]`.
#[inline]
pub fn bin_index(normalized: f64, n_bins: usize) -> usize {
    ((normalized * n_bins as f64).floor() as usize).min(n_bins - 1)
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Per-bin member lists (positions into `kept`) over min-max normalized
/// kept scores. Constant scores all land in the middle bin.
fn bin_members(scores: &[f64], kept: &[usize], n_bins: usize) -> Vec<Vec<usize>> {
    let (lo, hi) = min_max(kept.iter().map(|&i| scores[i]));
    let mut bins = vec![Vec::new(); n_bins];
    for &i in kept {
        let norm = if hi > lo { (scores[i] - lo) / (hi - lo) } else { 0.5 };
        bins[bin_index(norm, n_bins)].push(i);
    }
    bins
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntropy {
    pub entropy: f64,
    pub n_kept: usize,
    /// Fewer than two samples survived trimming.
    pub degenerate: bool,
}

fn entropy_of_kept(scores: &[f64], kept: &[usize], n_bins: usize) -> HistogramEntropy {
    if kept.len() < 2 {
        return HistogramEntropy {
            entropy: 0.0,
            n_kept: kept.len(),
            degenerate: true,
        };
    }
    let total = kept.len() as f64;
    let h: f64 = bin_members(scores, kept, n_bins)
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            let p = b.len() as f64 / total;
            -p * p.ln()
        })
        .sum();
    HistogramEntropy {
        entropy: h.max(0.0),
        n_kept: kept.len(),
        degenerate: false,
    }
}

/// Entropy (nats) of the trimmed, normalized score histogram.
pub fn distribution_entropy(scores: &[f64], spec: &HistogramSpec) -> HistogramEntropy {
    let kept = trim_outliers(scores, spec.trim_fraction);
    entropy_of_kept(scores, &kept, spec.n_bins)
}

/// The registry entry whose column has the highest histogram entropy.
///
/// `columns[j]` holds the cluster's raw scores for `registry.functions()[j]`.
/// Ties keep the earliest registry entry.
pub fn choose_selector(
    columns: &[Vec<f64>],
    registry: &SelectorRegistry,
    spec: &HistogramSpec,
) -> (ScoreFunction, Vec<f64>) {
    let entropies: Vec<f64> = columns.iter().map(|c| distribution_entropy(c, spec).entropy).collect();
    (registry.functions()[argmax_first(&entropies)], entropies)
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Uniform waterfill of `total` over clusters of the given eligible sizes.
///
/// Each round splits the remaining budget evenly over the remaining
/// clusters (remainder to the lowest indices); clusters smaller than their
/// quota are capped at their size and drop out.
pub fn allocate_budgets(sizes: &[usize], total: usize) -> BudgetPlan {
    let mut per_cluster = vec![0; sizes.len()];
    let mut active: Vec<usize> = (0..sizes.len()).collect();
    let mut remaining = total;
    while !active.is_empty() {
        let m = active.len();
        let (base, rem) = (remaining / m, remaining % m);
        let quota = |pos: usize| base + usize::from(pos < rem);
        let capped: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|&(pos, &c)| sizes[c] < quota(pos))
            .map(|(_, &c)| c)
            .collect();
        if capped.is_empty() {
            for (pos, &c) in active.iter().enumerate() {
                per_cluster[c] = quota(pos);
            }
            break;
        }
        for &c in &capped {
            per_cluster[c] = sizes[c];
            remaining -= sizes[c];
        }
        active.retain(|c| !capped.contains(c));
    }
    BudgetPlan {
        total,
        per_cluster,
        mode: BudgetMode::Uniform,
    }
}

/// Waterfill with budgets proportional to `weights` instead of equal.
///
/// Fractional shares are floored and the leftover units go one each to the
/// lowest-index uncapped clusters.
pub fn allocate_weighted(sizes: &[usize], total: usize, weights: &[f64]) -> BudgetPlan {
    assert_eq!(sizes.len(), weights.len(), "one weight per cluster");
    let mut per_cluster = vec![0; sizes.len()];
    let mut active: Vec<usize> = (0..sizes.len()).filter(|&c| sizes[c] > 0).collect();
    let mut remaining = total.min(sizes.iter().sum());
    while !active.is_empty() {
        let wsum: f64 = active.iter().map(|&c| weights[c]).sum();
        let share = |c: usize| remaining as f64 * weights[c] / wsum;
        let capped: Vec<usize> = active.iter().copied().filter(|&c| sizes[c] as f64 <= share(c)).collect();
        if capped.is_empty() {
            let mut assigned = 0;
            for &c in &active {
                per_cluster[c] = (share(c).floor() as usize).min(sizes[c]);
                assigned += per_cluster[c];
            }
            let mut leftover = remaining - assigned;
            while leftover > 0 {
                let before = leftover;
                for &c in &active {
                    if leftover > 0 && per_cluster[c] < sizes[c] {
                        per_cluster[c] += 1;
                        leftover -= 1;
                    }
                }
                if leftover == before {
                    break;
                }
            }
            break;
        }
        for &c in &capped {
            per_cluster[c] = sizes[c];
            remaining -= sizes[c];
        }
        active.retain(|c| !capped.contains(c));
    }
    BudgetPlan {
        total,
        per_cluster,
        mode: BudgetMode::Density,
    }
}

/// Coverage-based stratified sample of `budget` indices from `kept`.
///
/// Bins are visited in ascending occupancy (ties by bin index); each takes
/// `min(occupancy, ⌈remaining / bins_left⌉)` members chosen uniformly at
/// random. Returns sorted indices into `scores`.
pub fn ccs_sample(scores: &[f64], kept: &[usize], budget: usize, spec: &HistogramSpec, seed: u64) -> Result<Vec<usize>> {
    if budget > kept.len() {
        return Err(Error::BudgetExceedsKept {
            budget,
            kept: kept.len(),
        });
    }
    let mut out: Vec<usize>;
    if budget == kept.len() {
        out = kept.to_vec();
    } else {
        let bins = bin_members(scores, kept, spec.n_bins);
        let quotas = ccs_quotas(&bins.iter().map(Vec::len).collect::<Vec<_>>(), budget);
        let mut rng = rng::chacha(seed);
        out = Vec::with_capacity(budget);
        for (b, take) in quotas {
            let members = &bins[b];
            out.extend(index::sample(&mut rng, members.len(), take).into_iter().map(|k| members[k]));
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// `(bin, count)` in processing order for the CCS waterfill.
pub fn ccs_quotas(occupancy: &[usize], budget: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..occupancy.len()).collect();
    order.sort_by_key(|&b| (occupancy[b], b));
    let mut remaining = budget;
    let mut bins_left = order.len();
    let mut quotas = Vec::with_capacity(order.len());
    for b in order {
        let take = occupancy[b].min(remaining.div_ceil(bins_left.max(1)));
        quotas.push((b, take));
        remaining -= take;
        bins_left -= 1;
    }
    quotas
}

/// Inverse mean pairwise cosine of each cluster's semantic vectors, over a
/// seeded subsample of at most `cap` members.
pub fn density_weights(pool: &DataPool, members: &[Vec<usize>], cap: usize, seed: u64) -> Vec<f64> {
    members
        .par_iter()
        .enumerate()
        .map(|(c, m)| {
            let sub: Vec<usize> = if m.len() > cap {
                let mut rng = rng::chacha(seed ^ c as u64);
                let mut s: Vec<usize> = index::sample(&mut rng, m.len(), cap).into_iter().map(|k| m[k]).collect();
                s.sort_unstable();
                s
            } else {
                m.clone()
            };
            if sub.len() < 2 {
                return 1.0;
            }
            let unit: Vec<Vec<f64>> = sub
                .iter()
                .map(|&i| {
                    let v = &pool.samples()[i].semantic_vec;
                    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    v.iter().map(|&x| if norm > 0.0 { x as f64 / norm } else { 0.0 }).collect()
                })
                .collect();
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for a in 0..unit.len() {
                for b in a + 1..unit.len() {
                    sum += unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>();
                    pairs += 1;
                }
            }
            1.0 / (sum / pairs as f64).clamp(1e-3, 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub registry: SelectorRegistry,
    pub histogram: HistogramSpec,
    pub trim_scope: TrimScope,
    pub budget_mode: BudgetMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            registry: SelectorRegistry::default(),
            histogram: HistogramSpec::default(),
            trim_scope: TrimScope::PerCluster,
            budget_mode: BudgetMode::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub cluster_id: usize,
    pub size: usize,
    pub eligible: usize,
    pub selector: ScoreFunction,
    pub entropies: BTreeMap<ScoreFunction, f64>,
    pub budget: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub timestep: u64,
    pub budget: usize,
    pub seed: u64,
    pub k: usize,
    pub budget_mode: BudgetMode,
    pub clusters: Vec<ClusterSelection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub manifest: SelectionManifest,
    pub summary: SelectionSummary,
}

/// Choose a skill-balanced subset of at most `budget` samples.
///
/// Per cluster: trim, pick the max-entropy selector, then CCS-sample the
/// cluster's share of the budget. Cluster `c` samples with seed `seed ^ c`.
pub fn select_subset(
    pool: &DataPool,
    scores: &ScoreTable,
    budget: usize,
    config: &SelectionConfig,
    seed: u64,
) -> Result<Selection> {
    config.histogram.check()?;
    if scores.n_samples() != pool.len() {
        return Err(Error::DimensionMismatch {
            what: "score table rows".into(),
            expected: pool.len(),
            got: scores.n_samples(),
        });
    }
    let members: Vec<Vec<usize>> = pool
        .members_by_cluster()?
        .into_iter()
        .map(|m| sorted_by_id(pool, m))
        .collect();
    let functions = config.registry.functions();
    let spec = &config.histogram;

    let global_keep: Option<Vec<Vec<bool>>> = match config.trim_scope {
        TrimScope::PerCluster => None,
        TrimScope::Global => {
            let all = sorted_by_id(pool, (0..pool.len()).collect());
            Some(
                functions
                    .iter()
                    .map(|&f| {
                        let vals: Vec<f64> = all.iter().map(|&i| scores.raw(i, f)).collect();
                        let mut flags = vec![false; pool.len()];
                        for k in trim_outliers(&vals, spec.trim_fraction) {
                            flags[all[k]] = true;
                        }
                        flags
                    })
                    .collect(),
            )
        }
    };

    // selector and eligible members per cluster; positions index `m`
    let choices: Vec<(ScoreFunction, Vec<f64>, Vec<usize>)> = members
        .par_iter()
        .map(|m| {
            let columns: Vec<Vec<f64>> = functions
                .iter()
                .map(|&f| m.iter().map(|&i| scores.raw(i, f)).collect())
                .collect();
            match &global_keep {
                None => {
                    let (sel, ent) = choose_selector(&columns, &config.registry, spec);
                    let j = functions.iter().position(|&f| f == sel).expect("selector registered");
                    let kept = trim_outliers(&columns[j], spec.trim_fraction);
                    (sel, ent, kept)
                }
                Some(flags) => {
                    let kept_per_fn: Vec<Vec<usize>> = (0..functions.len())
                        .map(|j| (0..m.len()).filter(|&k| flags[j][m[k]]).collect())
                        .collect();
                    let ent: Vec<f64> = columns
                        .iter()
                        .zip(&kept_per_fn)
                        .map(|(c, kept)| entropy_of_kept(c, kept, spec.n_bins).entropy)
                        .collect();
                    let j = argmax_first(&ent);
                    (functions[j], ent, kept_per_fn[j].clone())
                }
            }
        })
        .collect();

    let eligible: Vec<usize> = choices.iter().map(|c| c.2.len()).collect();
    let plan = match config.budget_mode {
        BudgetMode::Uniform => allocate_budgets(&eligible, budget),
        BudgetMode::Density => {
            let weights = density_weights(pool, &members, 256, seed);
            allocate_weighted(&eligible, budget, &weights)
        }
    };

    let picked: Vec<Vec<usize>> = members
        .par_iter()
        .zip(&choices)
        .enumerate()
        .map(|(c, (m, (sel, _, kept)))| {
            let column: Vec<f64> = m.iter().map(|&i| scores.raw(i, *sel)).collect();
            let positions = ccs_sample(&column, kept, plan.per_cluster[c], spec, seed ^ c as u64)?;
            Ok(positions.into_iter().map(|p| m[p]).collect())
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut clusters = Vec::with_capacity(members.len());
    for (c, ((m, (sel, ent, kept)), chosen)) in members.iter().zip(&choices).zip(&picked).enumerate() {
        for &i in chosen {
            entries.push(ManifestEntry {
                sample_id: pool.samples()[i].sample_id.clone(),
                cluster_id: c,
                selector: *sel,
                score: scores.normalized(i, *sel),
            });
        }
        clusters.push(ClusterSelection {
            cluster_id: c,
            size: m.len(),
            eligible: kept.len(),
            selector: *sel,
            entropies: functions.iter().copied().zip(ent.iter().copied()).collect(),
            budget: plan.per_cluster[c],
            selected: chosen.len(),
        });
    }
    let config_hash = crate::lifecycle::hash_json(config);
    Ok(Selection {
        manifest: SelectionManifest {
            timestep: pool.timestep(),
            budget,
            seed,
            config_hash,
            entries,
        },
        summary: SelectionSummary {
            timestep: pool.timestep(),
            budget,
            seed,
            k: members.len(),
            budget_mode: config.budget_mode,
            clusters,
        },
    })
}

/// Single-score baseline: the `budget` highest-scoring samples pool-wide.
pub fn top_score_baseline(scores: &ScoreTable, function: ScoreFunction, budget: usize) -> Vec<usize> {
    let col = scores.raw_column(function);
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    order.truncate(budget);
    order.sort_unstable();
    order
}

/// Uniformly random subset of `budget` indices, sorted.
pub fn random_subset<R: Rng>(n: usize, budget: usize, rng: &mut R) -> Vec<usize> {
    let mut v = index::sample(rng, n, budget.min(n)).into_vec();
    v.sort_unstable();
    v
}
