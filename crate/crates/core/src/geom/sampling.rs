use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Greedy furthest point sampling. The first index is drawn uniformly from
/// `seed`; ties in later picks go to the smallest index.
pub fn furthest_point_sampling(points: &[[f64; 2]], k: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from an empty point set".into()));
    }
    let first = ChaCha8Rng::seed_from_u64(seed).gen_range(0..points.len());
    furthest_point_sampling_from(points, k, first)
}

/// Furthest point sampling starting from a fixed first index.
pub fn furthest_point_sampling_from(points: &[[f64; 2]], k: usize, first: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot pick {k} of {n} points")));
    }
    if first >= n {
        return Err(Error::InvalidArgument(format!("first index {first} out of range")));
    }
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut picked = Vec::with_capacity(k);
    picked.push(first);
    let mut min_d: Vec<f64> = points.iter().map(|&p| d2(p, points[first])).collect();
    while picked.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        picked.push(best);
        let q = points[best];
        for (m, &p) in min_d.iter_mut().zip(points) {
            *m = m.min(d2(p, q));
        }
        // chosen points sit at distance zero; duplicates of them too
        min_d[best] = f64::NEG_INFINITY;
    }
    Ok(picked)
}
