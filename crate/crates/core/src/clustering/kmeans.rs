//! k-means++ seeding plus Lloyd refinement, used to initialize the mixture.

use rand::Rng;

use super::Point;

fn sq_dist(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &Point, centers: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Hard labels in `0..k` from k-means++ seeding followed by Lloyd iterations.
pub(crate) fn kmeans_labels(points: &[Point], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len();
    let k = k.clamp(1, n);
    let mut centers = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // all points coincide with a center already
            0
        };
        centers.push(points[idx]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[idx]));
        }
    }

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..50 {
        let mut sums = vec![[0.0; 4]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for j in 0..4 {
                sums[l][j] += p[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..4 {
                    centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn separates_two_groups() {
        let mut pts = vec![[0.0; 4]; 10];
        pts.extend(vec![[100.0; 4]; 10]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let l = kmeans_labels(&pts, 2, &mut rng);
        assert!(l[..10].iter().all(|&x| x == l[0]));
        assert!(l[10..].iter().all(|&x| x == l[10]));
        assert_ne!(l[0], l[10]);
    }

    #[test]
    fn identical_points_single_label() {
        let pts = vec![[3.0; 4]; 7];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let l = kmeans_labels(&pts, 3, &mut rng);
        assert!(l.iter().all(|&x| x == 0));
    }
}
