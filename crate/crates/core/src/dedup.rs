//! Permanent pool compression by semantic redundancy.
//!
//! Within each cluster, samples whose semantic embedding is most similar to
//! another member are removed first. Cluster targets come from the same
//! waterfill used for training budgets, so small clusters keep everything
//! and their slack raises the targets of the large ones.

use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::DataPool;
use crate::error::{Error, Result};
use crate::selection::allocate_budgets;

/// Clusters larger than this compare each member against an evenly strided
/// reference subset of this size instead of every other member.
pub const EXACT_CAP: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Redundancy {
    pub sample_id: String,
    pub max_cosine: f64,
    /// Most similar other member (lowest id on ties).
    pub partner: String,
}

fn unit_rows(ids: &[String], embeddings: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .zip(embeddings)
        .map(|(id, v)| {
            let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm(id.clone()));
            }
            Ok(v.iter().map(|&x| x as f64 / norm).collect())
        })
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Each member's cosine to its most similar other member, sorted by
/// descending similarity then ascending id.
pub fn redundancy_rank(ids: &[String], embeddings: &[Vec<f32>]) -> Result<Vec<Redundancy>> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::TooFewPoints { n, k: 2 });
    }
    let unit = unit_rows(ids, embeddings)?;
    // position order sorted by id, so "lowest id" is "lowest position"
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let reference: Vec<usize> = if n > EXACT_CAP {
        (0..EXACT_CAP).map(|r| by_id[r * n / EXACT_CAP]).collect()
    } else {
        by_id.clone()
    };
    let mut ranked: Vec<Redundancy> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for &j in &reference {
                if j == i {
                    continue;
                }
                let c = dot(&unit[i], &unit[j]);
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((j, c));
                }
            }
            let (j, c) = best.expect("at least one other member");
            Redundancy {
                sample_id: ids[i].clone(),
                max_cosine: c.clamp(-1.0, 1.0),
                partner: ids[j].clone(),
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.max_cosine
            .total_cmp(&a.max_cosine)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(ranked)
}

/// Remove exactly `m` members, most redundant first.
///
/// Each pass walks the ranking (equal similarities visited highest id
/// first) and removes a candidate unless its partner was already removed
/// in the same pass, so one copy of every exact-duplicate group survives.
/// Short passes re-rank the survivors and continue.
pub fn prune_cluster(ids: &[String], embeddings: &[Vec<f32>], m: usize) -> Result<Vec<String>> {
    let n = ids.len();
    if m >= n {
        return Err(Error::TooManyRemovals { m, n });
    }
    unit_rows(ids, embeddings)?;
    let mut removed: Vec<String> = Vec::with_capacity(m);
    let mut alive: Vec<usize> = (0..n).collect();
    while removed.len() < m {
        let live_ids: Vec<String> = alive.iter().map(|&i| ids[i].clone()).collect();
        let live_emb: Vec<Vec<f32>> = alive.iter().map(|&i| embeddings[i].clone()).collect();
        let mut ranked = redundancy_rank(&live_ids, &live_emb)?;
        ranked.sort_by(|a, b| match b.max_cosine.total_cmp(&a.max_cosine) {
            Ordering::Equal => b.sample_id.cmp(&a.sample_id),
            o => o,
        });
        let mut this_pass: HashSet<String> = HashSet::new();
        for r in ranked {
            if removed.len() + this_pass.len() == m {
                break;
            }
            if this_pass.contains(&r.partner) {
                continue;
            }
            this_pass.insert(r.sample_id);
        }
        alive.retain(|&i| !this_pass.contains(&ids[i]));
        let mut batch: Vec<String> = this_pass.into_iter().collect();
        batch.sort();
        removed.extend(batch);
    }
    removed.sort();
    Ok(removed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub pool_budget: usize,
    pub per_cluster_target: Vec<usize>,
    pub per_cluster_before: Vec<usize>,
    /// Cluster processing order: largest first, ties by cluster id.
    pub order: Vec<usize>,
    pub removals: Vec<String>,
}

/// Compress a clustered pool to at most `pool_budget` samples.
pub fn compress_pool(pool: &DataPool, pool_budget: usize) -> Result<(DataPool, CompressionPlan)> {
    let k = pool.k().ok_or(Error::NotClustered)?;
    if pool_budget < k {
        return Err(Error::PoolBudgetBelowClusters {
            budget: pool_budget,
            k,
        });
    }
    let members = pool.members_by_cluster()?;
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let targets = allocate_budgets(&sizes, pool_budget).per_cluster;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));

    let samples = pool.samples();
    let removed_per_cluster: Vec<Vec<String>> = order
        .par_iter()
        .map(|&c| {
            let m = sizes[c] - targets[c];
            if m == 0 {
                return Ok(Vec::new());
            }
            let ids: Vec<String> = members[c].iter().map(|&i| samples[i].sample_id.clone()).collect();
            let emb: Vec<Vec<f32>> = members[c].iter().map(|&i| samples[i].semantic_vec.clone()).collect();
            prune_cluster(&ids, &emb, m)
        })
        .collect::<Result<_>>()?;
    let removals: Vec<String> = removed_per_cluster.into_iter().flatten().collect();
    let gone: HashSet<&str> = removals.iter().map(String::as_str).collect();
    let compressed = pool.retain_indices(|i| !gone.contains(samples[i].sample_id.as_str()));
    Ok((
        compressed,
        CompressionPlan {
            pool_budget,
            per_cluster_target: targets,
            per_cluster_before: sizes,
            order,
            removals,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::tests::record;
    use crate::datamodel::merge_pool;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i:03}")).collect()
    }

    fn basis(n: usize, d: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|i| {
                let mut v = vec![0.0; d];
                v[i] = 1.0;
                v
            })
            .collect()
    }

    #[test]
    fn orthogonal_set_has_zero_similarity() {
        let ranked = redundancy_rank(&ids(5), &basis(5, 5)).unwrap();
        assert!(ranked.iter().all(|r| r.max_cosine == 0.0));
        let order: Vec<_> = ranked.iter().map(|r| r.sample_id.clone()).collect();
        assert_eq!(order, ids(5));
    }

    #[test]
    fn planted_duplicate_ranks_first() {
        let mut emb = basis(6, 6);
        emb[4] = emb[1].clone();
        let ranked = redundancy_rank(&ids(6), &emb).unwrap();
        assert_eq!(ranked[0].sample_id, "e001");
        assert_eq!(ranked[1].sample_id, "e004");
        assert!((ranked[0].max_cosine - 1.0).abs() < 1e-12);
        assert_eq!(ranked[0].partner, "e004");
    }

    #[test]
    fn zero_norm_is_named() {
        let mut emb = basis(3, 3);
        emb[2] = vec![0.0; 3];
        assert!(matches!(redundancy_rank(&ids(3), &emb), Err(Error::ZeroNorm(id)) if id == "e002"));
    }

    #[test]
    fn prune_keeps_one_copy_removing_higher_id() {
        let mut emb = basis(6, 6);
        emb[4] = emb[1].clone();
        assert_eq!(prune_cluster(&ids(6), &emb, 1).unwrap(), vec!["e004".to_string()]);
    }

    #[test]
    fn prune_to_single_survivor() {
        let mut rng = crate::rng::chacha(4);
        let emb: Vec<Vec<f32>> = (0..9).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let removed = prune_cluster(&ids(9), &emb, 8).unwrap();
        assert_eq!(removed.len(), 8);
        assert!(matches!(prune_cluster(&ids(9), &emb, 9), Err(Error::TooManyRemovals { .. })));
    }

    #[test]
    fn random_ranking_matches_brute_force() {
        let mut rng = crate::rng::chacha(8);
        let emb: Vec<Vec<f32>> = (0..40).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ranked = redundancy_rank(&ids(40), &emb).unwrap();
        for r in &ranked {
            let i: usize = r.sample_id[1..].parse().unwrap();
            let mut best = f64::NEG_INFINITY;
            for j in 0..40 {
                if j == i {
                    continue;
                }
                let (a, b) = (&emb[i], &emb[j]);
                let d: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
                let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                best = best.max(d / (na * nb));
            }
            assert!((r.max_cosine - best).abs() < 1e-6);
        }
    }

    fn clustered_pool(sizes: &[usize]) -> DataPool {
        let mut rng = crate::rng::chacha(1);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            for i in 0..s {
                let mut r = record(&format!("c{c}-{i:03}"), 2, 8);
                r.semantic_vec = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                samples.push(r);
                labels.push(c);
            }
        }
        let mut pool = merge_pool(DataPool::empty(2, 8), samples, 0).unwrap();
        pool.set_clusters(sizes.len(), labels).unwrap();
        pool
    }

    fn cluster_sizes(pool: &DataPool) -> Vec<usize> {
        pool.members_by_cluster().unwrap().iter().map(Vec::len).collect()
    }

    #[test]
    fn compress_examples() {
        let pool = clustered_pool(&[10, 10, 10]);
        let (out, plan) = compress_pool(&pool, 30).unwrap();
        assert_eq!(out, pool);
        assert!(plan.removals.is_empty());

        let pool = clustered_pool(&[50, 10, 10]);
        let (out, plan) = compress_pool(&pool, 40).unwrap();
        assert_eq!(cluster_sizes(&out), vec![20, 10, 10]);
        assert_eq!(plan.per_cluster_target, vec![20, 10, 10]);
        assert_eq!(plan.removals.len(), 30);

        let (out, _) = compress_pool(&pool, 500).unwrap();
        assert_eq!(out.len(), 70);

        assert!(matches!(
            compress_pool(&pool, 2),
            Err(Error::PoolBudgetBelowClusters { budget: 2, k: 3 })
        ));
    }

    #[test]
    fn compress_is_idempotent() {
        let pool = clustered_pool(&[30, 17, 8, 25]);
        let (once, _) = compress_pool(&pool, 40).unwrap();
        let (twice, plan) = compress_pool(&once, 40).unwrap();
        assert_eq!(once, twice);
        assert!(plan.removals.is_empty());
        assert_eq!(once.len(), 40);
    }
}
