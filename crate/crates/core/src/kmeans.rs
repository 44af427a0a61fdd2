//! Lloyd's algorithm with k-means++ seeding (squared Euclidean distance).

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PpouError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k × d`.
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index wins ties).
pub fn nearest(centroids: ArrayView2<'_, f64>, point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = dist2(row.as_slice().expect("contiguous"), point);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn rows(x: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn seed_plus_plus(pts: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = pts[0].len();
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..pts.len());
    centroids.row_mut(0).iter_mut().zip(&pts[first]).for_each(|(a, b)| *a = *b);
    let mut closest: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[first])).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = pts.len() - 1;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..pts.len())
        };
        centroids.row_mut(c).iter_mut().zip(&pts[pick]).for_each(|(a, b)| *a = *b);
        for (i, p) in pts.iter().enumerate() {
            closest[i] = closest[i].min(dist2(p, &pts[pick]));
        }
    }
    centroids
}

/// Assigns points to the nearest centroid and moves centroids to the mean of
/// their members; empty clusters keep their position. Returns whether any
/// label changed.
pub fn lloyd_step(x: ArrayView2<'_, f64>, centroids: &mut Array2<f64>, labels: &mut [usize]) -> bool {
    let pts = rows(x);
    let (k, d) = centroids.dim();
    let mut changed = false;
    for (i, p) in pts.iter().enumerate() {
        let (c, _) = nearest(centroids.view(), p);
        if labels[i] != c {
            labels[i] = c;
            changed = true;
        }
    }
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, p) in pts.iter().enumerate() {
        counts[labels[i]] += 1;
        sums.row_mut(labels[i]).iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..d {
                centroids[(c, j)] = sums[(c, j)] / counts[c] as f64;
            }
        }
    }
    changed
}

pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(PpouError::invalid(format!("k-means needs 1 <= k <= N (k={k}, N={n})")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PpouError::invalid("k-means input contains non-finite values"));
    }
    let pts = rows(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&pts, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        if !lloyd_step(x, &mut centroids, &mut labels) {
            break;
        }
    }
    // Final labels against the final centroids.
    for (i, p) in pts.iter().enumerate() {
        labels[i] = nearest(centroids.view(), p).0;
    }
    let inertia = pts.iter().zip(&labels).map(|(p, &c)| dist2(p, centroids.row(c).as_slice().unwrap())).sum();
    Ok(KMeans {
        centroids,
        labels,
        iterations,
        inertia,
    })
}
