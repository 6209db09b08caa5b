//! k-means with k-means++ seeding, silhouettes and k selection.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MiningError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once an iteration improves inertia by less than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 10,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub silhouette: f64,
    pub best_restart: usize,
    /// Inertia after every assignment step, per restart.
    pub traces: Vec<Vec<f64>>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn inertia(vectors: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    vectors.iter().zip(assignments).map(|(v, &a)| sq_dist(v, &centroids[a])).sum()
}

fn check(vectors: &[Vec<f64>], k: usize) -> Result<(), MiningError> {
    if k == 0 || k > vectors.len() {
        return Err(MiningError::InvalidK { k, n: vectors.len() });
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
        return Err(MiningError::InvalidInput("vectors must share one dimension and be finite".into()));
    }
    Ok(())
}

fn plus_plus(vectors: &[Vec<f64>], k: usize, r: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![vectors[r.random_range(0..vectors.len())].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = vectors.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            r.random_range(0..vectors.len())
        };
        centroids.push(vectors[idx].clone());
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

pub(crate) struct LloydRun {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub trace: Vec<f64>,
}

/// Lloyd iterations from the given centroids. An emptied cluster is moved
/// onto the point farthest from its current centroid.
pub(crate) fn lloyd(vectors: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> LloydRun {
    let k = centroids.len();
    let dim = vectors[0].len();
    let mut assignments: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids).0).collect();
    let mut j = inertia(vectors, &centroids, &assignments);
    let mut trace = vec![j];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let mut taken = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..vectors.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| {
                        let da = sq_dist(&vectors[a], &centroids[assignments[a]]);
                        let db = sq_dist(&vectors[b], &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("k <= n");
                taken.push(far);
                centroids[c] = vectors[far].clone();
            }
        }
        let next: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids).0).collect();
        let nj = inertia(vectors, &centroids, &next);
        debug_assert!(nj <= j + 1e-9 * j.max(1.0), "inertia rose from {j} to {nj}");
        trace.push(nj);
        let changed = next != assignments;
        assignments = next;
        let improvement = j - nj;
        j = nj;
        if !changed || improvement < tol {
            break;
        }
    }
    LloydRun {
        centroids,
        assignments,
        inertia: j,
        trace,
    }
}

/// Mean silhouette with Euclidean distances. Singletons score 0; `k = 1` gives 0.
pub fn silhouette(vectors: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let n = vectors.len();
    if k < 2 || n < 2 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for (j, v) in vectors.iter().enumerate() {
                if j != i {
                    sums[assignments[j]] += sq_dist(&vectors[i], v).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / n as f64
}

fn finish(vectors: &[Vec<f64>], run: LloydRun, best_restart: usize, traces: Vec<Vec<f64>>) -> ClusterModel {
    let k = run.centroids.len();
    ClusterModel {
        k,
        silhouette: silhouette(vectors, &run.assignments, k),
        centroids: run.centroids,
        assignments: run.assignments,
        inertia: run.inertia,
        best_restart,
        traces,
    }
}

/// Best of `restarts` k-means++ runs by final inertia; ties go to the lower
/// restart index. Restarts run in parallel.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64, config: &KMeansConfig) -> Result<ClusterModel, MiningError> {
    check(vectors, k)?;
    let runs: Vec<LloydRun> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, &format!("kmeans/{k}/restart/{r}"));
            lloyd(vectors, plus_plus(vectors, k, &mut g), config.max_iters, config.tol)
        })
        .collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| runs[a].inertia.total_cmp(&runs[b].inertia).then(a.cmp(&b)))
        .expect("at least one restart");
    let traces = runs.iter().map(|r| r.trace.clone()).collect();
    let run = runs.into_iter().nth(best).expect("index in range");
    Ok(finish(vectors, run, best, traces))
}

/// Per-k diagnostics of [`select_k`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectKDiagnostics {
    pub ks: Vec<usize>,
    pub inertia: Vec<f64>,
    pub silhouette: Vec<f64>,
    pub elbow: usize,
    pub chosen: usize,
    pub degenerate: bool,
}

/// Sweeps `k_range` (inclusive, clamped to `[2, n − 1]`).
///
/// Each k starts from the (k−1) solution plus a centroid on the worst-fit
/// point and keeps the better of that and a fresh [`kmeans`], so inertia is
/// non-increasing in k. The elbow is the k with the largest second
/// difference of inertia, with k−1 = lower bound − 1 included so the first
/// swept k can be an elbow. The choice is the smallest k ≥ elbow whose
/// silhouette is within 0.01 of the best; if none qualifies, the best
/// silhouette wins.
pub fn select_k(
    vectors: &[Vec<f64>],
    k_range: (usize, usize),
    seed: u64,
    config: &KMeansConfig,
) -> Result<(ClusterModel, SelectKDiagnostics), MiningError> {
    check(vectors, 1)?;
    let n = vectors.len();
    let first = &vectors[0];
    if n < 3 || vectors.iter().all(|v| v == first) {
        log::warn!("select_k: {n} points with no spread; using k = 1");
        let model = kmeans(vectors, 1, seed, config)?;
        let diag = SelectKDiagnostics {
            ks: vec![1],
            inertia: vec![model.inertia],
            silhouette: vec![0.0],
            elbow: 1,
            chosen: 1,
            degenerate: true,
        };
        return Ok((model, diag));
    }
    let lo = k_range.0.max(2);
    let hi = k_range.1.min(n - 1);
    if lo > hi {
        return Err(MiningError::InvalidK { k: k_range.0, n });
    }
    let mut models: Vec<ClusterModel> = vec![kmeans(vectors, lo - 1, seed, config)?];
    for k in lo..=hi {
        let prev = models.last().expect("non-empty");
        let far = (0..n)
            .max_by(|&a, &b| {
                sq_dist(&vectors[a], &prev.centroids[prev.assignments[a]])
                    .total_cmp(&sq_dist(&vectors[b], &prev.centroids[prev.assignments[b]]))
                    .then(b.cmp(&a))
            })
            .expect("n > 0");
        let mut init = prev.centroids.clone();
        init.push(vectors[far].clone());
        let warm = lloyd(vectors, init, config.max_iters, config.tol);
        let fresh = kmeans(vectors, k, seed, config)?;
        let model = if fresh.inertia < warm.inertia {
            fresh
        } else {
            let trace = vec![warm.trace.clone()];
            finish(vectors, warm, 0, trace)
        };
        models.push(model);
    }
    let ks: Vec<usize> = (lo - 1..=hi).collect();
    let js: Vec<f64> = models.iter().map(|m| m.inertia).collect();
    let mut elbow = lo;
    let mut best_d2 = f64::NEG_INFINITY;
    for i in 1..ks.len().saturating_sub(1) {
        let d2 = js[i - 1] - 2.0 * js[i] + js[i + 1];
        if d2 > best_d2 {
            best_d2 = d2;
            elbow = ks[i];
        }
    }
    let sil: Vec<f64> = models.iter().map(|m| m.silhouette).collect();
    let swept = 1..ks.len();
    let max_sil = swept.clone().map(|i| sil[i]).fold(f64::NEG_INFINITY, f64::max);
    let pick = swept
        .clone()
        .find(|&i| ks[i] >= elbow && sil[i] >= max_sil - 0.01)
        .unwrap_or_else(|| swept.clone().find(|&i| sil[i] == max_sil).expect("non-empty sweep"));
    let diag = SelectKDiagnostics {
        ks: ks[1..].to_vec(),
        inertia: js[1..].to_vec(),
        silhouette: sil[1..].to_vec(),
        elbow,
        chosen: ks[pick],
        degenerate: false,
    };
    Ok((models.swap_remove(pick), diag))
}

/// Folds clusters holding less than `min_frac` of the points into their
/// nearest remaining centroids, then recomputes centroids as means.
pub fn merge_small_clusters(vectors: &[Vec<f64>], model: &ClusterModel, min_frac: f64) -> ClusterModel {
    let n = vectors.len();
    let mut sizes = vec![0usize; model.k];
    for &a in &model.assignments {
        sizes[a] += 1;
    }
    let keep: Vec<usize> = (0..model.k).filter(|&c| sizes[c] as f64 >= min_frac * n as f64).collect();
    if keep.len() == model.k || keep.is_empty() {
        return model.clone();
    }
    let kept: Vec<Vec<f64>> = keep.iter().map(|&c| model.centroids[c].clone()).collect();
    let assignments: Vec<usize> = vectors.iter().map(|v| nearest(v, &kept).0).collect();
    let dim = vectors[0].len();
    let mut sums = vec![vec![0.0; dim]; kept.len()];
    let mut counts = vec![0usize; kept.len()];
    for (v, &a) in vectors.iter().zip(&assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let centroids: Vec<Vec<f64>> = (0..kept.len())
        .map(|c| {
            if counts[c] == 0 {
                kept[c].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            }
        })
        .collect();
    let k = centroids.len();
    ClusterModel {
        k,
        inertia: inertia(vectors, &centroids, &assignments),
        silhouette: silhouette(vectors, &assignments, k),
        centroids,
        assignments,
        best_restart: model.best_restart,
        traces: model.traces.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pad(points: &[(f64, f64)]) -> Vec<Vec<f64>> {
        points
            .iter()
            .map(|&(x, y)| {
                let mut v = vec![0.0; 256];
                v[0] = x;
                v[1] = y;
                v
            })
            .collect()
    }

    #[test]
    fn four_point_example() {
        let v = pad(&[(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]);
        let m = kmeans(&v, 2, 1, &KMeansConfig::default()).unwrap();
        assert!((m.inertia - 1.0).abs() < 1e-12);
        assert_eq!(m.assignments[0], m.assignments[1]);
        assert_eq!(m.assignments[2], m.assignments[3]);
        assert_ne!(m.assignments[0], m.assignments[2]);
    }

    #[test]
    fn k_equals_n_and_k_one() {
        let v = pad(&[(0.0, 0.0), (3.0, 1.0), (5.0, 2.0)]);
        assert_eq!(kmeans(&v, 3, 0, &KMeansConfig::default()).unwrap().inertia, 0.0);
        let m = kmeans(&v, 1, 0, &KMeansConfig::default()).unwrap();
        assert!((m.centroids[0][0] - 8.0 / 3.0).abs() < 1e-12);
        assert!((m.centroids[0][1] - 1.0).abs() < 1e-12);
        assert!(kmeans(&v, 4, 0, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn identical_points_select_one() {
        let v = pad(&[(1.0, 1.0); 6]);
        let (m, d) = select_k(&v, (2, 4), 0, &KMeansConfig::default()).unwrap();
        assert_eq!(m.k, 1);
        assert!(d.degenerate);
    }

    #[test]
    fn merge_folds_singletons() {
        let mut pts = vec![(0.0, 0.0); 60];
        pts.extend(vec![(10.0, 0.0); 60]);
        pts.push((5.0, 9.0));
        let v = pad(&pts);
        let m = kmeans(&v, 3, 0, &KMeansConfig::default()).unwrap();
        let merged = merge_small_clusters(&v, &m, 0.02);
        assert_eq!(merged.k, 2);
        assert_eq!(merged.assignments.len(), v.len());
    }
}
