//! Seeded k-means++ clustering of patch vectors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_LLOYD_ITERS: usize = 50;

// Keeps the clustering stream distinct from the noise streams in `forward`.
const STREAM_KMEANS: u64 = 8;

/// Clusters the rows of `patches` into `clusters` centroids with k-means++
/// seeding and at most 50 Lloyd iterations. Fully deterministic per seed:
/// ties in assignment go to the lowest centroid index and empty clusters
/// keep their previous centroid.
pub fn cluster_patches(
    patches: &DMatrix<f64>,
    clusters: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let n = patches.nrows();
    let dim = patches.ncols();
    if clusters == 0 || clusters > n {
        return Err(Error::Parameter(format!(
            "cluster count must be in 1..={n}, got {clusters}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_KMEANS);

    let row_dist2 = |i: usize, centroid: &[f64]| -> f64 {
        let row = patches.row(i);
        row.iter()
            .zip(centroid)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };

    // k-means++ seeding: first centroid uniform, the rest proportional to
    // squared distance from the nearest chosen centroid.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(clusters);
    let first = rng.random_range(0..n);
    centroids.push(patches.row(first).iter().cloned().collect());
    let mut dist2: Vec<f64> = (0..n).map(|i| row_dist2(i, &centroids[0])).collect();
    while centroids.len() < clusters {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist2.iter().enumerate() {
                u -= d;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with a centroid; any choice works.
            rng.random_range(0..n)
        };
        let new_centroid: Vec<f64> = patches.row(pick).iter().cloned().collect();
        for i in 0..n {
            dist2[i] = dist2[i].min(row_dist2(i, &new_centroid));
        }
        centroids.push(new_centroid);
    }

    // Lloyd refinement. The sentinel start forces a centroid update on the
    // first pass even when every point lands in cluster zero.
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = row_dist2(i, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; clusters];
        let mut counts = vec![0usize; clusters];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(patches.row(i).iter()) {
                *s += v;
            }
        }
        for c in 0..clusters {
            if counts[c] > 0 {
                for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
            // Empty clusters keep their previous centroid.
        }
    }

    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(clusters, dim, &flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_cluster_is_the_mean() {
        let patches = DMatrix::from_row_slice(4, 2, &[
            0.0, 0.0,
            1.0, 0.0,
            0.0, 1.0,
            1.0, 1.0,
        ]);
        let c = cluster_patches(&patches, 1, 0).unwrap();
        assert_relative_eq!(c[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(c[(0, 1)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn two_separated_clouds_are_recovered() {
        let mut rows = Vec::new();
        // Cloud around (0, 0) and cloud around (10, 10), tiny jitter.
        for i in 0..20 {
            let j = (i as f64) * 1e-3;
            rows.extend_from_slice(&[j, -j]);
        }
        for i in 0..20 {
            let j = (i as f64) * 1e-3;
            rows.extend_from_slice(&[10.0 + j, 10.0 - j]);
        }
        let patches = DMatrix::from_row_slice(40, 2, &rows);
        let c = cluster_patches(&patches, 2, 7).unwrap();
        let mut firsts: Vec<f64> = c.column(0).iter().cloned().collect();
        firsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(firsts[0], 0.0095, epsilon = 1e-6);
        assert_relative_eq!(firsts[1], 10.0095, epsilon = 1e-6);
    }

    #[test]
    fn clustering_is_deterministic_per_seed() {
        let patches = DMatrix::from_fn(30, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.1);
        let a = cluster_patches(&patches, 4, 42).unwrap();
        let b = cluster_patches(&patches, 4, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_points_yield_a_valid_clustering() {
        let patches = DMatrix::from_element(10, 3, 0.5);
        let c = cluster_patches(&patches, 3, 1).unwrap();
        for v in c.iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        let patches = DMatrix::zeros(5, 2);
        assert!(cluster_patches(&patches, 0, 0).is_err());
        assert!(cluster_patches(&patches, 6, 0).is_err());
    }
}
