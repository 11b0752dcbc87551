//! Lloyd's k-means with k-means++ seeding.
//!
//! Ties in assignment go to the lowest center index. A cluster that ends
//! up empty is reseeded onto the point currently farthest from its own
//! center, which strictly lowers that point's contribution, so the inertia
//! trace stays non-increasing. Duplicate rows that leave fewer than `K`
//! distinct points are handled the same way; the surplus centers then
//! coincide with existing points at zero cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Clustered noise prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePromptBank {
    /// `(K, C)` cluster centers.
    pub centers: Matrix,
    /// Center index of each input row.
    pub assignment: Vec<usize>,
    /// Sum of squared distances of rows to their centers.
    pub inertia: f64,
    /// Inertia after every assignment step, ending with the final value.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seed(features: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = features.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = features
        .iter_rows()
        .map(|r| sq_dist(r, features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // guard against round-off landing on an already chosen point
            if d2[pick] <= 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point coincides with a chosen center
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, r) in features.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, features.row(next)));
        }
    }
    features.select_rows(&chosen)
}

/// Clusters the rows of `features` into `k` centers.
pub fn kmeans_cluster(features: &Matrix, k: usize, seed: u64, params: &KMeansParams) -> Result<NoisePromptBank> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::Instance("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Instance(format!(
            "{n} rows cannot form {k} clusters"
        )));
    }
    if !features.all_finite() {
        return Err(Error::Numeric("non-finite feature values".into()));
    }
    let c = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seed(features, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..params.max_iter.max(1) {
        iterations += 1;
        for (i, row) in features.iter_rows().enumerate() {
            let (j, d) = nearest(row, &centers);
            assignment[i] = j;
            dists[i] = d;
        }
        trace.push(dists.iter().sum());

        let mut sums = Matrix::zeros(k, c);
        let mut counts = vec![0usize; k];
        for (i, row) in features.iter_rows().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &x) in sums.row_mut(assignment[i]).iter_mut().zip(row) {
                *s += x;
            }
        }
        let mut new_centers = sums;
        for j in 0..k {
            if counts[j] > 0 {
                let cnt = counts[j] as f64;
                new_centers.row_mut(j).iter_mut().for_each(|x| *x /= cnt);
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // reseed onto the farthest point from its own center, but never
            // take the last member of a cluster
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                let old = assignment[i];
                counts[old] -= 1;
                counts[j] = 1;
                assignment[i] = j;
                dists[i] = 0.0;
                new_centers.row_mut(j).copy_from_slice(features.row(i));
                // the donor cluster's mean changes with the loss of `i`
                let cnt = counts[old] as f64;
                let mut mean = vec![0.0; c];
                for (p, row) in features.iter_rows().enumerate() {
                    if assignment[p] == old {
                        for (m, &x) in mean.iter_mut().zip(row) {
                            *m += x;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= cnt);
                new_centers.row_mut(old).copy_from_slice(&mean);
            } else {
                new_centers.row_mut(j).copy_from_slice(centers.row(j));
            }
        }
        let shift = centers
            .iter_rows()
            .zip(new_centers.iter_rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        if shift < params.tol {
            break;
        }
    }

    let inertia: f64 = features
        .iter_rows()
        .zip(&assignment)
        .map(|(r, &j)| sq_dist(r, centers.row(j)))
        .sum();
    trace.push(inertia);
    Ok(NoisePromptBank {
        centers,
        assignment,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}
