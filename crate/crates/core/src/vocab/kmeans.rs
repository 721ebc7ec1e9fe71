use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::VocabError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the summed squared centroid movement falls below this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each completed iteration.
    pub history: Vec<f64>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: the first centre uniformly, each later one with
/// probability proportional to squared distance from the nearest chosen centre.
fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every remaining point duplicates a chosen one.
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
        d2[next] = 0.0;
    }
    chosen
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed.
pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansResult, VocabError> {
    let n = points.len();
    let k = config.k;
    if k == 0 {
        return Err(VocabError::InvalidK { k, points: n });
    }
    if k > n {
        return Err(VocabError::InvalidK { k, points: n });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(VocabError::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids: Vec<Vec<f64>> = seed_plus_plus(points, k, &mut rng)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();
    let mut objective = f64::INFINITY;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        let nearest_all: Vec<(usize, f64)> =
            points.par_iter().map(|p| nearest(p, &centroids)).collect();
        for (a, (c, _)) in assignments.iter_mut().zip(&nearest_all) {
            *a = *c;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut updated: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &cnt), old)| {
                if cnt == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|x| x / cnt as f64).collect()
                }
            })
            .collect();

        // Empty clusters take the point farthest from its centroid, drawn from
        // clusters that can spare one.
        let mut dists: Vec<f64> = points
            .iter()
            .zip(&assignments)
            .map(|(p, &c)| sq_dist(p, &updated[c]))
            .collect();
        for empty in (0..k).filter(|&c| counts[c] == 0).collect::<Vec<_>>() {
            let donor = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = donor {
                counts[assignments[i]] -= 1;
                counts[empty] = 1;
                assignments[i] = empty;
                updated[empty] = points[i].clone();
                dists[i] = 0.0;
            }
        }

        let movement: f64 = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b))
            .sum();
        centroids = updated;
        objective = dists.iter().sum();
        history.push(objective);
        if movement < config.tol {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        objective,
        iterations,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&pts, &KMeansConfig::new(6, 3)).unwrap();
        assert_eq!(r.objective, 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn k_one_is_mean() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 6.0]];
        let r = kmeans(&pts, &KMeansConfig::new(1, 0)).unwrap();
        assert!((r.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((r.centroids[0][1] - 2.0).abs() < 1e-12);
        // (4 + 4) + (0 + 4) + (4 + 16)
        assert!((r.objective - 32.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_k() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&pts, &KMeansConfig::new(3, 0)).is_err());
        assert!(kmeans(&pts, &KMeansConfig::new(0, 0)).is_err());
    }

    #[test]
    fn duplicate_points_do_not_panic() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let r = kmeans(&pts, &KMeansConfig::new(3, 9)).unwrap();
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn same_seed_same_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let a = kmeans(&pts, &KMeansConfig::new(7, 42)).unwrap();
        let b = kmeans(&pts, &KMeansConfig::new(7, 42)).unwrap();
        assert_eq!(a, b);
    }
}
