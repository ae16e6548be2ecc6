//! Bottom-up hierarchical clustering with Ward linkage.
//!
//! Merge costs are kept as Lance-Williams updated squared Euclidean
//! distances. Each active cluster caches its nearest neighbour, so a full
//! run is roughly quadratic. Ties go to the lexicographically smallest
//! `(i, j)` slot pair.

use super::Point;
use crate::error::{Error, Result};

fn sq_dist(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Labels in `0..k`, numbered by each cluster's smallest member index.
pub fn fit_agglomerative(points: &[Point], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(i));
    }

    // full symmetric matrix, slot i holds the cluster whose smallest member is i
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(&points[i], &points[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![f64::INFINITY; n];

    let refresh = |i: usize, active: &[bool], dist: &[f64], nn: &mut [usize], nn_dist: &mut [f64]| {
        nn[i] = usize::MAX;
        nn_dist[i] = f64::INFINITY;
        for j in 0..n {
            if j != i && active[j] && dist[i * n + j] < nn_dist[i] {
                nn[i] = j;
                nn_dist[i] = dist[i * n + j];
            }
        }
    };
    for i in 0..n {
        refresh(i, &active, &dist, &mut nn, &mut nn_dist);
    }

    for _ in 0..(n - k) {
        let mut a = usize::MAX;
        for i in 0..n {
            if active[i] && (a == usize::MAX || nn_dist[i] < nn_dist[a]) {
                a = i;
            }
        }
        let b = nn[a];
        let (a, b) = (a.min(b), a.max(b));
        let d_ab = dist[a * n + b];
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for j in 0..n {
            if !active[j] || j == a || j == b {
                continue;
            }
            let sj = size[j] as f64;
            let d = ((sa + sj) * dist[a * n + j] + (sb + sj) * dist[b * n + j] - sj * d_ab)
                / (sa + sb + sj);
            dist[a * n + j] = d;
            dist[j * n + a] = d;
        }
        active[b] = false;
        size[a] += size[b];
        parent[b] = a;

        for j in 0..n {
            if !active[j] {
                continue;
            }
            if j == a || nn[j] == a || nn[j] == b {
                refresh(j, &active, &dist, &mut nn, &mut nn_dist);
            } else {
                let d = dist[j * n + a];
                if d < nn_dist[j] || (d == nn_dist[j] && a < nn[j]) {
                    nn[j] = a;
                    nn_dist[j] = d;
                }
            }
        }
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    Ok((0..n)
        .map(|i| {
            let r = root(i);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use rand::Rng;

    /// Naive Ward: recompute every pairwise merge cost from centroids.
    fn ward_oracle(points: &[Point], k: usize) -> Vec<usize> {
        let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
        let centroid = |c: &Vec<usize>| -> Point {
            std::array::from_fn(|j| c.iter().map(|&i| points[i][j]).sum::<f64>() / c.len() as f64)
        };
        while clusters.len() > k {
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..clusters.len() {
                for j in (i + 1)..clusters.len() {
                    let (ni, nj) = (clusters[i].len() as f64, clusters[j].len() as f64);
                    let cost = ni * nj / (ni + nj) * sq_dist(&centroid(&clusters[i]), &centroid(&clusters[j]));
                    if cost < best.0 {
                        best = (cost, i, j);
                    }
                }
            }
            let merged = clusters.remove(best.2);
            clusters[best.1].extend(merged);
        }
        let mut labels = vec![0; points.len()];
        let mut order: Vec<_> = clusters.iter().map(|c| *c.iter().min().unwrap()).collect();
        order.sort();
        for c in &clusters {
            let l = order.binary_search(c.iter().min().unwrap()).unwrap();
            for &i in c {
                labels[i] = l;
            }
        }
        labels
    }

    #[test]
    fn extremes() {
        let pts: Vec<Point> = (0..6).map(|i| [i as f64 * 3.0, 0.0, 1.0, i as f64]).collect();
        assert_eq!(fit_agglomerative(&pts, 6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(fit_agglomerative(&pts, 1).unwrap(), vec![0; 6]);
        assert!(fit_agglomerative(&pts, 7).is_err());
        assert!(fit_agglomerative(&pts, 0).is_err());
    }

    #[test]
    fn matches_naive_ward() {
        let mut rng = rng_for(17, 0);
        for _ in 0..30 {
            let n = rng.random_range(2..30);
            let pts: Vec<Point> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(0.0..100.0)))
                .collect();
            let k = rng.random_range(1..=n);
            assert_eq!(fit_agglomerative(&pts, k).unwrap(), ward_oracle(&pts, k));
        }
    }
}
