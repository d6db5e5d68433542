//! k-means with k-means++ seeding, used to localize calibration by cluster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{squared_distance, Points};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    centroids: Points,
    assignments: Vec<usize>,
    inertia: f64,
    /// Inertia after every assignment step, in order.
    inertia_trace: Vec<f64>,
    iterations: usize,
}

impl KMeansModel {
    pub fn centroids(&self) -> &Points {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn inertia_trace(&self) -> &[f64] {
        &self.inertia_trace
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Nearest centroid by squared Euclidean distance; ties go to the lower index.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        self.centroids.check_dim(x)?;
        Ok(nearest(&self.centroids, x).0)
    }
}

pub fn assign_cluster(model: &KMeansModel, x: &[f64]) -> Result<usize> {
    model.assign(x)
}

/// `ceil(sqrt(n / 50))` clamped to `[2, 64]` and to `n`.
pub fn default_k(n: usize) -> usize {
    let k = ((n as f64 / 50.0).sqrt().ceil() as usize).clamp(2, 64);
    k.min(n.max(1))
}

fn nearest(centroids: &Points, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().enumerate() {
        let d = squared_distance(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.rows().map(|p| squared_distance(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // every point coincides with a chosen centre; take an unused index
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.gen_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, p) in points.rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, points.row(next)));
        }
    }
    chosen
}

/// Lloyd iterations from a k-means++ start. Deterministic for a given seed.
pub fn kmeans_fit(points: &Points, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansModel> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    if max_iters == 0 {
        return Err(Error::Config("k-means max_iters must be at least 1".into()));
    }
    let d = points.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = plus_plus_init(points, k, &mut rng);
    let mut centroids: Vec<f64> = seeds.iter().flat_map(|&i| points.row(i).to_vec()).collect();

    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    loop {
        let cpts = Points::from_flat(d, centroids.clone())?;
        let mut changed = false;
        for (i, p) in points.rows().enumerate() {
            let (j, dist) = nearest(&cpts, p);
            changed |= assignments[i] != j;
            assignments[i] = j;
            dists[i] = dist;
        }
        trace.push(dists.iter().sum::<f64>());
        if !changed || iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().enumerate() {
            let a = assignments[i];
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let new: Vec<f64> = if counts[j] > 0 {
                sums[j * d..(j + 1) * d].iter().map(|s| s / counts[j] as f64).collect()
            } else {
                // empty cluster: reseed at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= 1");
                dists[far] = 0.0;
                points.row(far).to_vec()
            };
            shift = shift.max(squared_distance(&centroids[j * d..(j + 1) * d], &new).sqrt());
            centroids[j * d..(j + 1) * d].copy_from_slice(&new);
        }
        if shift < tol {
            // final assignment against the settled centroids
            let cpts = Points::from_flat(d, centroids.clone())?;
            for (i, p) in points.rows().enumerate() {
                let (j, dist) = nearest(&cpts, p);
                assignments[i] = j;
                dists[i] = dist;
            }
            trace.push(dists.iter().sum::<f64>());
            break;
        }
    }

    Ok(KMeansModel {
        centroids: Points::from_flat(d, centroids)?,
        assignments,
        inertia: *trace.last().expect("at least one assignment step"),
        inertia_trace: trace,
        iterations,
    })
}
