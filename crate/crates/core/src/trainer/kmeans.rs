use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_KMEANS_ITERS: usize = 30;

fn sq(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols())
        .map(|k| (a[(i, k)] - b[(j, k)]).powi(2))
        .sum()
}

/// Random subset of `m` rows, in increasing row order.
pub fn random_subset(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if m > n {
        return Err(Error::MTooLarge {
            requested: m,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(DMatrix::from_fn(m, x.ncols(), |i, k| x[(idx[i], k)]))
}

/// Lloyd's algorithm started from a random subset of the rows. Empty clusters
/// are reseeded with the point farthest from its current center.
pub fn kmeans_init(
    x: &DMatrix<f64>,
    m: usize,
    max_iters: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one center".into()));
    }
    let mut centers = random_subset(x, m, seed)?;
    let n = x.nrows();
    let d = x.ncols();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (best, bd) = (0..m)
                .map(|c| (c, sq(x, i, &centers, c)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            dist[i] = bd;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums: DMatrix<f64> = DMatrix::zeros(m, d);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[assign[i]] += 1;
            for k in 0..d {
                sums[(assign[i], k)] += x[(i, k)];
            }
        }
        for c in 0..m {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= m >= 1");
                for k in 0..d {
                    centers[(c, k)] = x[(far, k)];
                }
                dist[far] = 0.0;
                assign[far] = c;
            } else {
                for k in 0..d {
                    centers[(c, k)] = sums[(c, k)] / counts[c] as f64;
                }
            }
        }
    }
    Ok(centers)
}
