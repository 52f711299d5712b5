//! Seeded k-means++ on unit vectors.
//!
//! Centroids are re-normalized after every Lloyd update so that squared
//! Euclidean distance and cosine distance order points identically, which is
//! what the dictionary keys assume.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Error;
use crate::math::{self, Mat};
use crate::Result;

pub const MAX_ITER: usize = 100;
pub const TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    'outer: for p in points {
        for q in &distinct {
            if sq_dist(p, q) < 1e-20 {
                continue 'outer;
            }
        }
        distinct.push(p);
    }
    distinct.len()
}

/// k-means++ seeding followed by Lloyd iterations to an assignment fixpoint.
/// Input features must be unit vectors; output centroids are unit vectors.
pub fn init_kmeanspp(features: &[Vec<f64>], n_clusters: usize, seed: u64) -> Result<Mat> {
    if n_clusters == 0 {
        return Err(Error::sizing("cluster count must be positive"));
    }
    if features.len() < n_clusters {
        return Err(Error::sizing(format!(
            "need at least {} features for {} clusters, got {}",
            n_clusters,
            n_clusters,
            features.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // D^2 seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    let first = (rng.random::<u64>() as usize) % features.len();
    centers.push(features[first].clone());
    let mut min_sq: Vec<f64> = features.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < n_clusters {
        match math::weighted_choice(&mut rng, &min_sq) {
            Some(idx) => {
                centers.push(features[idx].clone());
                for (m, f) in min_sq.iter_mut().zip(features) {
                    let d = sq_dist(f, centers.last().unwrap());
                    if d < *m {
                        *m = d;
                    }
                }
            }
            None => {
                let distinct = count_distinct(features);
                return Err(Error::DegenerateInput(format!(
                    "only {} distinct features for {} clusters (short by {})",
                    distinct,
                    n_clusters,
                    n_clusters - distinct
                )));
            }
        }
    }

    lloyd(features, centers, MAX_ITER)
}

/// Lloyd iterations from explicit starting centroids (used for the
/// moving-average key update, which seeds from the current keys).
pub fn lloyd(features: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> Result<Mat> {
    let n_clusters = centers.len();
    let dim = centers[0].len();
    let mut assignments = vec![usize::MAX; features.len()];

    for _ in 0..max_iter {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(f, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; dim]; n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for (f, &a) in features.iter().zip(&assignments) {
            math::axpy(&mut sums[a], 1.0, f);
            counts[a] += 1;
        }
        let mut moved = 0.0f64;
        for c in 0..n_clusters {
            if counts[c] == 0 {
                continue; // empty cluster keeps its previous centroid
            }
            let mut mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            if math::normalize_mut(&mut mean) == 0.0 {
                continue;
            }
            moved += sq_dist(&mean, &centers[c]);
            centers[c] = mean;
        }

        if !changed || moved < TOL * TOL {
            break;
        }
    }

    let mut out = Mat::zeros(n_clusters, dim);
    for (c, center) in centers.iter().enumerate() {
        out.row_mut(c).copy_from_slice(center);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::normalized;
    use approx::assert_relative_eq;

    fn unit(v: &[f64]) -> Vec<f64> {
        normalized(v)
    }

    #[test]
    fn n_equals_k_distinct_points_become_the_centroids() {
        let pts = vec![
            unit(&[1.0, 0.0, 0.0]),
            unit(&[0.0, 1.0, 0.0]),
            unit(&[0.0, 0.0, 1.0]),
        ];
        let centers = init_kmeanspp(&pts, 3, 42).unwrap();
        // Each point must be one of the centroids (inertia zero).
        for p in &pts {
            let hit = (0..3).any(|c| sq_dist(centers.row(c), p) < 1e-18);
            assert!(hit);
        }
    }

    #[test]
    fn two_separated_blobs_yield_normalized_blob_means() {
        // Brute force over both possible assignments confirms the minimum
        // inertia solution is blob-mean centroids; the clustering must find it.
        let blob_a: Vec<Vec<f64>> = (0..5)
            .map(|i| unit(&[1.0, 0.01 * i as f64, 0.0]))
            .collect();
        let blob_b: Vec<Vec<f64>> = (0..5)
            .map(|i| unit(&[-1.0, 0.0, 0.01 * i as f64]))
            .collect();
        let mut pts = blob_a.clone();
        pts.extend(blob_b.clone());

        let expect_a = {
            let mut m = vec![0.0; 3];
            for p in &blob_a {
                math::axpy(&mut m, 0.2, p);
            }
            normalized(&m)
        };
        let expect_b = {
            let mut m = vec![0.0; 3];
            for p in &blob_b {
                math::axpy(&mut m, 0.2, p);
            }
            normalized(&m)
        };

        let centers = init_kmeanspp(&pts, 2, 9).unwrap();
        let d0 = sq_dist(centers.row(0), &expect_a).min(sq_dist(centers.row(0), &expect_b));
        let d1 = sq_dist(centers.row(1), &expect_a).min(sq_dist(centers.row(1), &expect_b));
        assert!(d0 < 1e-10 && d1 < 1e-10, "centroids not at blob means");
        assert_relative_eq!(math::norm(centers.row(0)), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn same_seed_gives_identical_centroids() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| normalized(&math::gaussian_vec(&mut rng, 6, 1.0)))
            .collect();
        let a = init_kmeanspp(&pts, 4, 123).unwrap();
        let b = init_kmeanspp(&pts, 4, 123).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn too_few_points_is_a_sizing_error() {
        let pts = vec![unit(&[1.0, 0.0])];
        assert!(matches!(
            init_kmeanspp(&pts, 2, 0),
            Err(Error::Sizing(_))
        ));
    }

    #[test]
    fn duplicate_points_report_the_deficit() {
        let p = unit(&[1.0, 0.0]);
        let pts = vec![p.clone(), p.clone(), p.clone()];
        let err = init_kmeanspp(&pts, 2, 0).unwrap_err();
        match err {
            Error::DegenerateInput(msg) => {
                assert!(msg.contains("1 distinct"), "got: {msg}");
                assert!(msg.contains("short by 1"), "got: {msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
