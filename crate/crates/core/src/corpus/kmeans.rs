//! k-means with k-means++ seeding, used to group the frozen image pool
//! for hard-negative mining.

use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = dist2(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Fits `k` clusters to `points` (all of equal dimension).
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut Rng) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k-means: k={k} must be in 1..={n}")));
    }
    let dim = points[0].len();

    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // Every point coincides with a centroid; fall back to an unused index.
            (0..n).find(|i| !centroids.iter().any(|c| c == &points[*i])).unwrap_or(0)
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, centroids.last().unwrap()));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            total += d;
        }
        inertia.push(total);
        if !changed && iterations > 1 {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Reseed empty clusters at the point farthest from its own centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &centroids[assignment[a]]);
                        let db = dist2(&points[b], &centroids[assignment[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n > 0");
                counts[assignment[far]] -= 1;
                assignment[far] = c;
                counts[c] = 1;
                centroids[c] = points[far].clone();
            }
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        inertia,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let km = kmeans_fit(&pts, 1, 50, &mut SeedStreams::new(1).stream("k", &[])).unwrap();
        assert!((km.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((km.centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_per_point_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let km = kmeans_fit(&pts, 6, 50, &mut SeedStreams::new(2).stream("k", &[])).unwrap();
        assert_eq!(*km.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let pts = vec![vec![0.0]];
        assert!(kmeans_fit(&pts, 2, 50, &mut SeedStreams::new(0).stream("k", &[])).is_err());
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = SeedStreams::new(3).stream("blobs", &[]);
        let sigma = 0.1;
        let noise = Normal::new(0.0, sigma).unwrap();
        let n = 100;
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (label, center) in [[-5.0, 0.0], [5.0, 0.0]].iter().enumerate() {
            for _ in 0..n {
                pts.push(center.iter().map(|c| c + noise.sample(&mut rng)).collect::<Vec<f64>>());
                labels.push(label);
            }
        }
        let km = kmeans_fit(&pts, 2, 50, &mut rng).unwrap();
        let flip = km.assignment[0] != 0;
        for (a, l) in km.assignment.iter().zip(&labels) {
            assert_eq!(*a, if flip { 1 - l } else { *l });
        }
        for (label, center) in [[-5.0, 0.0], [5.0, 0.0]].iter().enumerate() {
            let c = if flip { 1 - label } else { label };
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
            for d in 0..2 {
                let mean = idx.iter().map(|&i| pts[i][d]).sum::<f64>() / n as f64;
                assert!((km.centroids[c][d] - mean).abs() < 1e-12);
                assert!((km.centroids[c][d] - center[d]).abs() < 3.0 * sigma / (n as f64).sqrt());
            }
        }
        assert!(km.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}
