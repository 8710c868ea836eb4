//! Uniform time grids and reproducible Brownian increments.
//!
//! Every path draws from its own ChaCha stream selected by the path index, so
//! an ensemble can be generated in any order (or in parallel) and any single
//! path can be regenerated on its own bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{domain, Result};

/// Uniform discretization of `[t0, t_end]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) || t0 >= t_end {
            return domain(format!("time grid needs t0 < T, got t0 = {t0}, T = {t_end}"));
        }
        if n_steps == 0 {
            return domain("time grid needs at least one step");
        }
        Ok(Self { t0, t_end, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    /// Grid point `t_i`; the last point is `T` exactly.
    pub fn time(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.t_end
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }

    /// Index of the grid point nearest to `t`, clamped to the grid.
    pub fn nearest_index(&self, t: f64) -> usize {
        let pos = ((t - self.t0) / self.dt()).round();
        if pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.n_steps)
        }
    }
}

pub fn make_grid(t0: f64, t_end: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(t0, t_end, n_steps)
}

/// Counter-based generator of Gaussian increments: path `j` is a pure
/// function of `(seed, j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrownianSource {
    grid: TimeGrid,
    dim: usize,
    seed: u64,
    antithetic: bool,
}

impl BrownianSource {
    pub fn new(grid: TimeGrid, dim: usize, seed: u64, antithetic: bool) -> Result<Self> {
        if dim == 0 {
            return domain("Brownian dimension must be at least 1");
        }
        Ok(Self { grid, dim, seed, antithetic })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_antithetic(&self) -> bool {
        self.antithetic
    }

    /// Number of values per path (`n_steps * dim`).
    pub fn path_len(&self) -> usize {
        self.grid.n_steps() * self.dim
    }

    /// Writes the increments of path `j`, laid out step-major.
    pub fn fill_path(&self, j: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.path_len());
        let (stream, negate) = if self.antithetic { ((j / 2) as u64, j % 2 == 1) } else { (j as u64, false) };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let scale = self.grid.dt().sqrt();
        let sign = if negate { -scale } else { scale };
        for v in out.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = sign * n;
        }
    }

    pub fn path(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.path_len()];
        self.fill_path(j, &mut out);
        out
    }
}

/// `n_paths` independent `dim`-dimensional Brownian increment paths on a grid.
/// Immutable once built.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    source: BrownianSource,
    n_paths: usize,
    increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn sample(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::build(BrownianSource::new(grid, dim, seed, false)?, n_paths)
    }

    /// Ensemble where path `2j+1` is the negation of path `2j`.
    pub fn sample_antithetic(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::build(BrownianSource::new(grid, dim, seed, true)?, n_paths)
    }

    pub fn build(source: BrownianSource, n_paths: usize) -> Result<Self> {
        if n_paths == 0 {
            return domain("ensemble needs at least one path");
        }
        let len = source.path_len();
        let mut increments = vec![0.0; n_paths * len];
        increments.par_chunks_mut(len).enumerate().for_each(|(j, chunk)| source.fill_path(j, chunk));
        Ok(Self { source, n_paths, increments })
    }

    pub fn source(&self) -> &BrownianSource {
        &self.source
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.source.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.source.dim
    }

    pub fn seed(&self) -> u64 {
        self.source.seed
    }

    /// `ΔW` of `path` over `[t_step, t_{step+1}]`.
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let d = self.source.dim;
        let base = path * self.source.path_len() + step * d;
        &self.increments[base..base + d]
    }

    pub fn path_increments(&self, path: usize) -> &[f64] {
        let len = self.source.path_len();
        &self.increments[path * len..(path + 1) * len]
    }

    pub fn regenerate_path(&self, path: usize) -> Vec<f64> {
        self.source.path(path)
    }

    /// Cumulative sums `W_{t_i}` for one path, `(n_steps + 1) * dim` values
    /// starting from zero.
    pub fn brownian_path(&self, path: usize) -> Vec<f64> {
        let d = self.source.dim;
        let n = self.source.grid.n_steps();
        let mut w = vec![0.0; (n + 1) * d];
        let inc = self.path_increments(path);
        for i in 0..n {
            for q in 0..d {
                w[(i + 1) * d + q] = w[i * d + q] + inc[i * d + q];
            }
        }
        w
    }
}

pub fn sample_ensemble(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64) -> Result<PathEnsemble> {
    PathEnsemble::sample(grid, n_paths, dim, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = make_grid(0.0, 1.0, 1).unwrap();
        assert_eq!(g.times(), vec![0.0, 1.0]);
        assert_eq!(g.dt(), 1.0);
        let g = make_grid(0.5, 1.5, 2).unwrap();
        assert_eq!(g.times(), vec![0.5, 1.0, 1.5]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_grid(1.0, 1.0, 3).is_err());
        assert!(make_grid(2.0, 1.0, 3).is_err());
        assert!(make_grid(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn last_grid_point_is_exact() {
        let g = make_grid(0.1, 0.7, 3).unwrap();
        assert_eq!(g.time(3), 0.7);
        let ts = g.times();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let g = make_grid(0.0, 1.0, 20).unwrap();
        let a = sample_ensemble(g, 64, 2, 99).unwrap();
        let b = sample_ensemble(g, 64, 2, 99).unwrap();
        assert_eq!(a.increments, b.increments);
        let c = sample_ensemble(g, 64, 2, 100).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn single_path_regeneration_matches_slice() {
        let g = make_grid(0.0, 1.0, 10).unwrap();
        let e = sample_ensemble(g, 50, 3, 5).unwrap();
        for j in [0, 17, 49] {
            assert_eq!(e.regenerate_path(j).as_slice(), e.path_increments(j));
        }
    }

    #[test]
    fn antithetic_pairs_are_negated() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let e = PathEnsemble::sample_antithetic(g, 10, 2, 3).unwrap();
        for j in 0..5 {
            let a = e.path_increments(2 * j);
            let b = e.path_increments(2 * j + 1);
            assert!(a.iter().zip(b).all(|(x, y)| *x == -*y));
        }
    }

    #[test]
    fn brownian_path_starts_at_zero() {
        let g = make_grid(0.0, 1.0, 5).unwrap();
        let e = sample_ensemble(g, 4, 2, 1).unwrap();
        for j in 0..4 {
            let w = e.brownian_path(j);
            assert_eq!(&w[..2], &[0.0, 0.0]);
        }
    }

    #[test]
    fn per_step_variance_matches_dt() {
        // Sample variance of 1e5 N(0, 0.01) draws: relative sd is sqrt(2/1e5) ≈ 0.0045,
        // so [0.009, 0.011] is a ±2.2 sd band around 0.01.
        let g = make_grid(0.0, 1.0, 100).unwrap();
        let e = sample_ensemble(g, 100_000, 1, 2024).unwrap();
        for step in [0, 37, 99] {
            let m = e.n_paths() as f64;
            let mean: f64 = (0..e.n_paths()).map(|j| e.increment(j, step)[0]).sum::<f64>() / m;
            let var: f64 = (0..e.n_paths()).map(|j| (e.increment(j, step)[0] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            assert!((0.009..=0.011).contains(&var), "step {step}: var {var}");
            assert!(mean.abs() <= 4.0 * (g.dt() / m).sqrt(), "step {step}: mean {mean}");
        }
    }

    #[test]
    fn terminal_covariance_is_close_to_identity() {
        let g = make_grid(0.0, 2.0, 10).unwrap();
        let e = sample_ensemble(g, 20_000, 2, 77).unwrap();
        let m = e.n_paths() as f64;
        let mut cov = [[0.0; 2]; 2];
        for j in 0..e.n_paths() {
            let w = e.brownian_path(j);
            let wt = &w[w.len() - 2..];
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += wt[a] * wt[b] / m;
                }
            }
        }
        let t = g.horizon();
        for (a, row) in cov.iter().enumerate() {
            assert!((row[a] - t).abs() <= 0.05 * t, "diag {a}: {}", row[a]);
        }
        assert!(cov[0][1].abs() <= 0.05 * t);
    }
}
