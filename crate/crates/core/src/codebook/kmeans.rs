use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sq_dist;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn nearest<T: Scalar>(p: &[T], centers: &[T], d: usize) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centers.chunks(d).enumerate() {
        let dist = sq_dist(p, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding over row-major `points`.
///
/// Returns `k * d` centre coordinates. Empty clusters keep their previous
/// centre. Deterministic given `seed`.
pub fn kmeans<T: Scalar>(points: &[T], d: usize, k: usize, max_iter: usize, seed: u64) -> Result<Vec<T>> {
    if d == 0 || !points.len().is_multiple_of(d) {
        return Err(Error::invalid("points", "length is not a multiple of the dimension"));
    }
    let n = points.len() / d;
    if n < k || k == 0 {
        return Err(Error::invalid("k", format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<T> = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut d2: Vec<T> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    while centers.len() < k * d {
        let total: T = d2.iter().copied().sum();
        let pick = if total > T::zero() {
            let mut u = T::lit(rng.random::<f64>()) * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > T::zero() && u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            if d2[chosen] == T::zero() {
                chosen = d2.iter().rposition(|&w| w > T::zero()).unwrap_or(chosen);
            }
            chosen
        } else {
            // fewer distinct points than centres; the caller deduplicates
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(row(pick));
        for (i, w) in d2.iter_mut().enumerate() {
            let nd = sq_dist(row(i), &centers[start..start + d]);
            if nd < *w {
                *w = nd;
            }
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let (j, _) = nearest(row(i), &centers, d);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![T::zero(); k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = T::from_count(counts[j]);
                for (dst, &s) in centers[j * d..(j + 1) * d].iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *dst = s / c;
                }
            }
        }
    }
    Ok(centers)
}
