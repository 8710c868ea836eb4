//! Reductions whose result does not depend on the rayon worker count.

use rayon::prelude::*;

const CHUNK: usize = 2048;

/// Sums the contributions `add(i, acc)` for `i in 0..n` into a vector of
/// length `width`. Work is split into fixed chunks and the partial sums are
/// combined in chunk order.
pub(crate) fn chunked_sum<F>(n: usize, width: usize, add: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                add(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

pub(crate) fn mean_of<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    chunked_sum(n, 1, |i, acc| acc[0] += f(i))[0] / n as f64
}

/// Sample mean and standard error of the mean.
pub(crate) fn mean_stderr<F>(n: usize, f: F) -> (f64, f64)
where
    F: Fn(usize) -> f64 + Sync,
{
    let s = chunked_sum(n, 2, |i, acc| {
        let v = f(i);
        acc[0] += v;
        acc[1] += v * v;
    });
    let m = n as f64;
    let mean = s[0] / m;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = ((s[1] - m * mean * mean) / (m - 1.0)).max(0.0);
    (mean, (var / m).sqrt())
}
