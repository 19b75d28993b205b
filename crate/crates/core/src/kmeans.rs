//! Lloyd's k-means over flat row-major point sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Result of a k-means run.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub dim: usize,
    pub k: usize,
    /// `k × dim` row-major centroids.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment step, first entry for the initial
    /// centroids.
    pub inertia: Vec<f64>,
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn final_inertia(&self) -> f64 {
        *self.inertia.last().expect("at least one assignment step")
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the
/// lowest index.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: each further seed is a point drawn with probability
/// proportional to its squared distance from the seeds so far. Once every
/// point coincides with a seed, further seeds are drawn uniformly.
fn plus_plus_seeds(points: &[f64], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.gen_range(0..n)));
    let mut closest: Vec<f64> = (0..n).map(|i| squared_distance(point(i), &centroids)).collect();
    while centroids.len() < k * dim {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            closest
                .iter()
                .position(|&d| {
                    target -= d;
                    target < 0.0
                })
                .unwrap_or_else(|| closest.iter().rposition(|&d| d > 0.0).expect("positive mass"))
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(point(next));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(squared_distance(point(i), &centroids[start..]));
        }
    }
    centroids
}

/// Cluster `points` (`n × dim`, row-major) into `k` clusters.
///
/// Seeds come from k-means++ driven by `seed`.
/// Iteration stops after `max_iters` updates or when no assignment changes.
/// A cluster that ends up empty takes over the point farthest from its
/// current centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || points.is_empty() {
        return Err(Error::Empty("k-means point set"));
    }
    if k == 0 {
        return Err(Error::config("k-means needs k >= 1"));
    }
    if !points.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: points.len() % dim,
        });
    }
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = plus_plus_seeds(points, dim, k, seed);

    let mut assignments = vec![usize::MAX; n];
    let mut distances = vec![0.0; n];
    let mut inertia = Vec::new();
    let mut sizes = vec![0usize; k];

    for iter in 0..=max_iters {
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(point(i), &centroids, dim);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            distances[i] = d;
        }

        sizes.iter_mut().for_each(|s| *s = 0);
        assignments.iter().for_each(|&c| sizes[c] += 1);
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            // Farthest point whose cluster can spare it.
            let candidate = distances
                .iter()
                .enumerate()
                .filter(|&(i, &d)| d > 0.0 && sizes[assignments[i]] > 1)
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)));
            let Some((far, _)) = candidate else {
                // Every point sits on a centroid: duplicates are unavoidable.
                continue;
            };
            sizes[assignments[far]] -= 1;
            assignments[far] = c;
            sizes[c] = 1;
            distances[far] = 0.0;
            centroids[c * dim..(c + 1) * dim].copy_from_slice(point(far));
            changed = true;
        }

        inertia.push(distances.iter().sum());
        if !changed || iter == max_iters {
            break;
        }

        // Update in point order so the result depends only on the seed.
        let mut sums = vec![0.0; k * dim];
        for i in 0..n {
            let c = assignments[i];
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if sizes[c] == 0 {
                continue;
            }
            let inv = sizes[c] as f64;
            for (dst, s) in centroids[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = s / inv;
            }
        }
    }

    Ok(KMeans {
        dim,
        k,
        centroids,
        assignments,
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let km = kmeans(&[0.0, 0.0, 0.0, 2.0], 2, 1, 25, 1).unwrap();
        assert_eq!(km.centroid(0), &[0.0, 1.0]);
    }

    #[test]
    fn k_equal_to_points_has_zero_inertia() {
        let km = kmeans(&[0.0, 0.0, 10.0, 10.0], 2, 2, 25, 3).unwrap();
        let mut cs = vec![km.centroid(0).to_vec(), km.centroid(1).to_vec()];
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        assert_eq!(km.final_inertia(), 0.0);
    }

    #[test]
    fn more_centroids_than_points_duplicates() {
        let km = kmeans(&[1.0, 2.0], 1, 4, 25, 0).unwrap();
        assert_eq!(km.centroids.len(), 4);
        assert_eq!(km.final_inertia(), 0.0);
    }

    #[test]
    fn rejects_empty_and_zero_k() {
        assert!(matches!(kmeans(&[], 2, 1, 10, 0), Err(Error::Empty(_))));
        assert!(kmeans(&[1.0, 2.0], 2, 0, 10, 0).is_err());
    }

    fn blobs(seed: u64) -> (Vec<f64>, Vec<[f64; 2]>) {
        let means = vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for i in 0..300 {
            let m = means[i % 3];
            pts.push(m[0] + gaussian(&mut rng, 0.5));
            pts.push(m[1] + gaussian(&mut rng, 0.5));
        }
        (pts, means)
    }

    #[test]
    fn recovers_gaussian_means() {
        for seed in 0..10 {
            recovers_gaussian_means_with(seed);
        }
    }

    fn recovers_gaussian_means_with(seed: u64) {
        let (pts, means) = blobs(seed + 100);
        let km = kmeans(&pts, 2, 3, 25, seed).unwrap();
        let mut matched = [false; 3];
        for c in 0..3 {
            let cent = km.centroid(c);
            let (j, d) = means
                .iter()
                .enumerate()
                .map(|(j, m)| (j, squared_distance(cent, m).sqrt()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(d < 0.3, "centroid {:?} is {} from nearest mean; all {:?} inertia {:?}", cent, d, km.centroids, km.inertia);
            assert!(!matched[j]);
            matched[j] = true;
        }
        // exhaustive assignment oracle
        for i in 0..300 {
            let p = &pts[2 * i..2 * i + 2];
            let best = (0..3)
                .min_by(|&a, &b| {
                    squared_distance(p, km.centroid(a)).total_cmp(&squared_distance(p, km.centroid(b)))
                })
                .unwrap();
            assert_eq!(km.assignments[i], best);
        }
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..20 {
            let (pts, _) = blobs(seed);
            let km = kmeans(&pts, 2, 7, 25, seed).unwrap();
            for w in km.inertia.windows(2) {
                assert!(w[1] <= w[0], "seed {}: {:?}", seed, km.inertia);
            }
        }
    }

    #[test]
    fn same_seed_same_result() {
        let (pts, _) = blobs(2);
        let a = kmeans(&pts, 2, 5, 25, 9).unwrap();
        let b = kmeans(&pts, 2, 5, 25, 9).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.assignments, b.assignments);
    }
}
