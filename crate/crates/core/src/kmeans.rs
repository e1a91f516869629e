//! Spherical Lloyd's k-means over unit vectors with k-means++ seeding.
//!
//! Points and centroids are unit-norm, so nearest-by-Euclidean and
//! largest-dot-product assignment agree. Centroids are re-normalized after
//! every mean update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::types::{dot, normalize, Matrix, MatrixView};

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<u32>,
    pub weights: Vec<u32>,
    pub iterations: usize,
}

/// Deterministic RNG for one k-means run.
pub fn rng_for(seed: u64, salt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(salt.as_bytes())))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sq_dist_unit(a: &[f32], b: &[f32]) -> f64 {
    (2.0 - 2.0 * dot(a, b) as f64).max(0.0)
}

/// k-means++ seeding: returns `k` distinct point indices.
pub fn kmeans_pp_seeds<R: Rng>(points: MatrixView<'_>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.rows();
    assert!(k >= 1 && k <= n, "k-means++ needs 1 ≤ k ≤ n");
    let mut seeds = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    seeds.push(first);
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist_unit(p, points.row(first)))
        .collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // Remaining points coincide with seeds; take the first unused index.
            (0..n).find(|i| !seeds.contains(i)).expect("k ≤ n")
        } else {
            let threshold = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > threshold && *w > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the threshold unreached; fall back to the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).expect("positive total"))
        };
        seeds.push(next);
        let c = points.row(next);
        for (i, p) in points.iter_rows().enumerate() {
            let d = sq_dist_unit(p, c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    seeds
}

/// Index of the centroid with the largest dot product (lowest index on ties).
pub fn nearest(centroids: &Matrix, p: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::NEG_INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let s = dot(p, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn assign(points: MatrixView<'_>, centroids: &Matrix, out: &mut [u32], sims: &mut [f32]) {
    for (i, p) in points.iter_rows().enumerate() {
        let (j, s) = nearest(centroids, p);
        out[i] = j as u32;
        sims[i] = s;
    }
}

/// Lloyd iterations from the given initial centroids until assignments are stable
/// or `max_iter` updates have run. Empty clusters are reseeded from the point
/// farthest from its current centroid.
pub fn lloyd(points: MatrixView<'_>, init: Matrix, max_iter: usize) -> KMeansResult {
    let n = points.rows();
    let k = init.rows();
    let dim = points.dim();
    let mut centroids = init;
    let mut assignments = vec![u32::MAX; n];
    let mut next = vec![0u32; n];
    let mut sims = vec![0f32; n];
    let mut iterations = 0;

    loop {
        assign(points, &centroids, &mut next, &mut sims);
        if next == assignments || iterations >= max_iter {
            assignments.copy_from_slice(&next);
            break;
        }
        assignments.copy_from_slice(&next);
        iterations += 1;

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0u32; k];
        for (i, p) in points.iter_rows().enumerate() {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += *x as f64;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|i| !taken[*i])
                    .min_by(|a, b| sims[*a].total_cmp(&sims[*b]).then(a.cmp(b)));
                if let Some(far) = far {
                    taken[far] = true;
                    sims[far] = 1.0;
                    centroids.row_mut(c).copy_from_slice(points.row(far));
                }
                continue;
            }
            let mut mean: Vec<f32> = sums[c * dim..(c + 1) * dim]
                .iter()
                .map(|s| (*s / counts[c] as f64) as f32)
                .collect();
            // A mean that cancels to zero keeps its previous direction.
            if normalize(&mut mean) > 0.0 {
                centroids.row_mut(c).copy_from_slice(&mean);
            }
        }
    }

    let mut weights = vec![0u32; k];
    for a in &assignments {
        weights[*a as usize] += 1;
    }
    KMeansResult {
        centroids,
        assignments,
        weights,
        iterations,
    }
}

/// Seeds with k-means++ and runs Lloyd's.
pub fn spherical_kmeans<R: Rng>(
    points: MatrixView<'_>,
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> KMeansResult {
    let seeds = kmeans_pp_seeds(points, k, rng);
    let mut init = Matrix::zeros(k, points.dim());
    for (c, s) in seeds.iter().enumerate() {
        init.row_mut(c).copy_from_slice(points.row(*s));
    }
    lloyd(points, init, max_iter)
}

/// Σ ‖x − c(x)‖² under the given assignment.
pub fn inertia(points: MatrixView<'_>, centroids: &Matrix, assignments: &[u32]) -> f64 {
    points
        .iter_rows()
        .zip(assignments)
        .map(|(p, a)| {
            p.iter()
                .zip(centroids.row(*a as usize))
                .map(|(x, c)| ((x - c) as f64).powi(2))
                .sum::<f64>()
        })
        .sum()
}
