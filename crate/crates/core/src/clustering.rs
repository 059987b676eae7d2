//! Pseudo-task clustering: seeded k-means over projected gradient vectors
//! and WSS-based choice of k.
//!
//! Initialization is greedy k-means++ (each new center is the best of
//! `2 + ⌊ln k⌋` D²-weighted candidates). Several initializations run per
//! call and the lowest-WSS result is kept; restart `r` uses seed
//! `derive(seed, KMEANS_STAGE, r)`.

use std::path::Path;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Matrix;
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 4;
const KMEANS_STAGE: u64 = 0x6b6d;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// `k × d` row-major.
    pub centroids: Matrix,
    /// Cluster of each input row.
    pub assignments: Vec<usize>,
    pub wss: f64,
    pub seed: u64,
    pub iterations_run: usize,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iterations: usize,
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iterations: MAX_ITERATIONS,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    // eight independent lanes so the loop vectorizes; the lane order is
    // fixed, so results do not depend on the target
    let mut acc = [0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn sq_dist_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(x: &[f32], centroids: &Matrix) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Within-cluster sum of squares, accumulated in f64 in row order.
pub fn wss(vectors: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    vectors
        .iter_rows()
        .zip(assignments)
        .map(|(x, &a)| sq_dist_f64(x, centroids.row(a)))
        .sum()
}

fn check_input(vectors: &Matrix, k: usize) -> Result<()> {
    if k == 0 || vectors.rows() < k {
        return Err(Error::TooFewPoints {
            n: vectors.rows(),
            k,
        });
    }
    if let Some(i) = vectors.first_non_finite() {
        return Err(Error::NonFinite {
            what: format!("clustering input row {}", i / vectors.cols().max(1)),
            index: i % vectors.cols().max(1),
        });
    }
    Ok(())
}

fn kmeans_pp<R: Rng>(vectors: &Matrix, k: usize, rng: &mut R) -> Vec<usize> {
    let n = vectors.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![rng.gen_range(0..n)];
    let mut closest: Vec<f64> = vectors
        .iter_rows()
        .map(|x| sq_dist_f64(x, vectors.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let target = rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (i, &d) in closest.iter().enumerate() {
                    acc += d;
                    if acc > target {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                rng.gen_range(0..n)
            };
            let updated: Vec<f64> = vectors
                .iter_rows()
                .zip(&closest)
                .map(|(x, &d)| d.min(sq_dist_f64(x, vectors.row(cand))))
                .collect();
            let pot: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.1) {
                best = Some((cand, pot, updated));
            }
        }
        let (cand, _, updated) = best.expect("at least one trial");
        centers.push(cand);
        closest = updated;
    }
    centers
}

fn assign(vectors: &Matrix, centroids: &Matrix, assignments: &mut [usize]) -> bool {
    let fresh: Vec<usize> = (0..vectors.rows())
        .into_par_iter()
        .map(|i| nearest(vectors.row(i), centroids).0)
        .collect();
    let changed = fresh.iter().zip(assignments.iter()).any(|(a, b)| a != b);
    assignments.copy_from_slice(&fresh);
    changed
}

fn update_centroids(vectors: &Matrix, assignments: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let d = vectors.cols();
    let mut sums = vec![0f64; k * d];
    let mut counts = vec![0usize; k];
    for (x, &a) in vectors.iter_rows().zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(x) {
            *s += v as f64;
        }
    }
    (sums, counts)
}

/// Recompute means; an empty cluster takes the point farthest from its own
/// centroid (among clusters with more than one member).
fn recenter(vectors: &Matrix, assignments: &mut [usize], centroids: &mut Matrix, k: usize) {
    let d = vectors.cols();
    let (sums, mut counts) = update_centroids(vectors, assignments, k);
    let mut data: Vec<f32> = centroids.as_slice().to_vec();
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..d {
                data[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
            }
        }
    }
    let mut current = Matrix::new(k, d, data).expect("centroid shape");
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, x) in vectors.iter_rows().enumerate() {
            if counts[assignments[i]] < 2 {
                continue;
            }
            let dist = sq_dist_f64(x, current.row(assignments[i]));
            if far.is_none_or(|(_, fd)| dist > fd) {
                far = Some((i, dist));
            }
        }
        let Some((i, _)) = far else { break };
        counts[assignments[i]] -= 1;
        counts[c] = 1;
        assignments[i] = c;
        let mut data = current.as_slice().to_vec();
        data[c * d..(c + 1) * d].copy_from_slice(vectors.row(i));
        current = Matrix::new(k, d, data).expect("centroid shape");
    }
    *centroids = current;
}

fn lloyd(vectors: &Matrix, k: usize, seed: u64, max_iterations: usize) -> ClusterModel {
    let mut rng = rng::chacha(seed);
    let init = kmeans_pp(vectors, k, &mut rng);
    let mut centroids = Matrix::from_rows(&init.iter().map(|&i| vectors.row(i)).collect::<Vec<_>>())
        .expect("uniform rows");
    let mut assignments = vec![usize::MAX; vectors.rows()];
    assign(vectors, &centroids, &mut assignments);
    let mut iterations = 0;
    let mut last_wss = f64::INFINITY;
    while iterations < max_iterations {
        iterations += 1;
        recenter(vectors, &mut assignments, &mut centroids, k);
        let changed = assign(vectors, &centroids, &mut assignments);
        let w = wss(vectors, &centroids, &assignments);
        if w > last_wss * (1.0 + 1e-9) + 1e-9 {
            warn!("k-means WSS rose from {last_wss} to {w} at iteration {iterations}");
        }
        last_wss = w;
        if !changed {
            break;
        }
    }
    // a final assignment can still leave a cluster empty (exact duplicate
    // points); repair without reassigning so every cluster is populated
    let sizes = update_centroids(vectors, &assignments, k).1;
    if sizes.contains(&0) {
        recenter(vectors, &mut assignments, &mut centroids, k);
    }
    ClusterModel {
        k,
        wss: wss(vectors, &centroids, &assignments),
        centroids,
        assignments,
        seed,
        iterations_run: iterations,
    }
}

/// k-means with default options.
pub fn kmeans(vectors: &Matrix, k: usize, seed: u64) -> Result<ClusterModel> {
    kmeans_with(vectors, k, seed, &KMeansOptions::default())
}

/// Best-of-`restarts` k-means; deterministic given `(vectors, k, seed)`.
pub fn kmeans_with(vectors: &Matrix, k: usize, seed: u64, options: &KMeansOptions) -> Result<ClusterModel> {
    check_input(vectors, k)?;
    let mut best: Option<ClusterModel> = None;
    for r in 0..options.restarts.max(1) {
        let m = lloyd(vectors, k, rng::derive(seed, KMEANS_STAGE, r as u64), options.max_iterations);
        if best.as_ref().is_none_or(|b| m.wss < b.wss) {
            best = Some(m);
        }
    }
    let mut best = best.expect("at least one restart");
    best.seed = seed;
    Ok(best)
}

/// The elbow rule: the first grid value whose relative WSS improvement to
/// the next value is below `threshold`; otherwise the argmin of WSS.
pub fn elbow(grid: &[usize], wss: &[f64], threshold: f64) -> usize {
    for i in 0..grid.len().saturating_sub(1) {
        let gain = if wss[i] > 0.0 {
            (wss[i] - wss[i + 1]) / wss[i]
        } else {
            0.0
        };
        if gain < threshold {
            return i;
        }
    }
    let mut best = 0;
    for i in 1..wss.len() {
        if wss[i] < wss[best] {
            best = i;
        }
    }
    best
}

pub const ELBOW_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub k: usize,
    pub wss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k_best: usize,
    pub model: ClusterModel,
    pub grid: Vec<GridPoint>,
    /// WSS rose somewhere along the grid.
    pub non_monotone: bool,
}

/// Default k grid: 5, 10, …, 50.
pub fn default_grid() -> Vec<usize> {
    (1..=10).map(|i| i * 5).collect()
}

/// Run k-means for every grid value (seed `seed ^ k`) and keep the elbow.
pub fn select_k(vectors: &Matrix, grid: &[usize], seed: u64) -> Result<KSelection> {
    select_k_with(vectors, grid, seed, &KMeansOptions::default())
}

pub fn select_k_with(vectors: &Matrix, grid: &[usize], seed: u64, options: &KMeansOptions) -> Result<KSelection> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let max = *grid.iter().max().expect("non-empty");
    check_input(vectors, max)?;
    let mut models: Vec<ClusterModel> = grid
        .par_iter()
        .map(|&k| kmeans_with(vectors, k, seed ^ k as u64, options))
        .collect::<Result<_>>()?;
    let wss: Vec<f64> = models.iter().map(|m| m.wss).collect();
    let non_monotone = wss.windows(2).any(|w| w[1] > w[0]);
    if non_monotone {
        warn!("WSS is not monotone over the k grid: {wss:?}");
    }
    let best = elbow(grid, &wss, ELBOW_THRESHOLD);
    let grid_points = grid.iter().zip(&wss).map(|(&k, &w)| GridPoint { k, wss: w }).collect();
    let model = models.swap_remove(best);
    Ok(KSelection {
        k_best: grid[best],
        model,
        grid: grid_points,
        non_monotone,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterDump {
    pub k: usize,
    pub wss: f64,
    pub grid: Vec<GridPoint>,
    pub non_monotone: bool,
    pub iterations_run: usize,
    pub sizes: Vec<usize>,
}

/// Write `clusters.json` and `assign.u32` (little-endian, row order).
pub fn write_cluster_dump(dir: &Path, selection: &KSelection) -> Result<()> {
    let dump = ClusterDump {
        k: selection.k_best,
        wss: selection.model.wss,
        grid: selection.grid.clone(),
        non_monotone: selection.non_monotone,
        iterations_run: selection.model.iterations_run,
        sizes: selection.model.sizes(),
    };
    let path = dir.join("clusters.json");
    let mut text = serde_json::to_string_pretty(&dump).expect("cluster dump serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = selection
        .model
        .assignments
        .iter()
        .flat_map(|&a| (a as u32).to_le_bytes())
        .collect();
    let path = dir.join("assign.u32");
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn planted(k: usize, per: usize, d: usize, sep: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = rng::chacha(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            for _ in 0..per {
                let row: Vec<f32> = (0..d)
                    .map(|j| {
                        let center = if j == c { sep / 2f64.sqrt() } else { 0.0 };
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (center + z) as f32
                    })
                    .collect();
                rows.push(row);
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn n_equals_k_gives_zero_wss() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 2.0], vec![9.0, 9.0]]).unwrap();
        let model = kmeans(&m, 4, 1).unwrap();
        assert_eq!(model.wss, 0.0);
        let mut a = model.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn recovers_planted_gaussians() {
        let (m, labels) = planted(3, 200, 64, 10.0, 5);
        let model = kmeans(&m, 3, 17).unwrap();
        assert!(adjusted_rand_index(&labels, &model.assignments) >= 0.99);
    }

    #[test]
    fn reported_wss_matches_recomputation() {
        let (m, _) = planted(4, 50, 16, 4.0, 2);
        let model = kmeans(&m, 6, 3).unwrap();
        let mut brute = 0.0f64;
        for (i, x) in m.iter_rows().enumerate() {
            let c = model.centroids.row(model.assignments[i]);
            brute += x.iter().zip(c).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
        }
        assert!((model.wss - brute).abs() <= 1e-6 * brute);
    }

    #[test]
    fn assignments_are_nearest_and_clusters_nonempty() {
        let (m, _) = planted(3, 40, 8, 3.0, 9);
        let model = kmeans(&m, 7, 4).unwrap();
        assert!(model.sizes().iter().all(|&s| s > 0));
        for (i, x) in m.iter_rows().enumerate() {
            assert_eq!(nearest(x, &model.centroids).0, model.assignments[i]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (m, _) = planted(3, 60, 12, 5.0, 1);
        let a = select_k(&m, &[2, 3, 4], 8).unwrap();
        let b = select_k(&m, &[2, 3, 4], 8).unwrap();
        assert_eq!(a.k_best, b.k_best);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn errors() {
        let m = Matrix::from_rows(&[vec![0.0f32], vec![1.0]]).unwrap();
        assert!(matches!(kmeans(&m, 3, 0), Err(Error::TooFewPoints { .. })));
        assert!(matches!(select_k(&m, &[], 0), Err(Error::EmptyGrid)));
        let bad = Matrix::from_rows(&[vec![0.0f32], vec![f32::NAN]]).unwrap();
        assert!(matches!(kmeans(&bad, 1, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let m = Matrix::from_rows(&vec![vec![1.0f32, 1.0]; 5]).unwrap();
        let model = kmeans(&m, 3, 0).unwrap();
        assert!(model.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn single_grid_value() {
        let (m, _) = planted(2, 20, 4, 5.0, 0);
        assert_eq!(select_k(&m, &[8], 1).unwrap().k_best, 8);
    }

    #[test]
    fn elbow_rule_on_injected_curve() {
        // 100 → 50 is a 50% drop, 50 → 48 only 4%
        assert_eq!(elbow(&[5, 10, 15], &[100.0, 50.0, 48.0], 0.05), 1);
        // never flattens: argmin
        assert_eq!(elbow(&[5, 10, 15], &[100.0, 50.0, 20.0], 0.05), 2);
        assert_eq!(elbow(&[5], &[10.0], 0.05), 0);
    }

    #[test]
    fn wss_non_increasing_over_grid() {
        let (m, _) = planted(8, 40, 16, 10.0, 4);
        let sel = select_k(&m, &[5, 10, 15, 20], 2).unwrap();
        assert!(!sel.non_monotone, "{:?}", sel.grid);
        for w in sel.grid.windows(2) {
            assert!(w[1].wss <= w[0].wss);
        }
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]) - 0.571_428_571_4).abs() < 1e-9);
    }
}
