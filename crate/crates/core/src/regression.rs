//! Least-squares projection onto a finite basis: the conditional-expectation
//! operator of the backward scheme.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::par::chunked_sum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisFamily {
    /// Hermite polynomials of total degree ≤ `degree` in standardized coordinates.
    Polynomial { degree: usize },
    /// Indicators of equal-count bins, `bins` per coordinate.
    Partition { bins: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub family: BasisFamily,
    pub dim: usize,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize, dim: usize) -> Self {
        Self { family: BasisFamily::Polynomial { degree }, dim }
    }

    pub fn partition(bins: usize, dim: usize) -> Self {
        Self { family: BasisFamily::Partition { bins: bins.max(1) }, dim }
    }

    /// Degree-4 polynomials up to two dimensions, 4 bins per axis beyond.
    pub fn default_for(dim: usize) -> Self {
        if dim <= 2 {
            Self::polynomial(4, dim)
        } else {
            Self::partition(4, dim)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Features {
    Poly { exps: Vec<Vec<u32>>, max_degree: usize },
    Bins { edges: Vec<Vec<f64>> },
}

/// Feature map fitted to one cloud: centering, scaling and the retained
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    mean: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<usize>,
    features: Features,
}

fn multi_indices(k: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; k]];
    if k == 0 {
        return out;
    }
    for total in 1..=degree {
        let mut cur = vec![0u32; k];
        fill(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos == cur.len() - 1 {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        fill(out, cur, pos + 1, left - e);
    }
}

impl FeatureMap {
    fn fit(basis: &RegressionBasis, cloud: &[f64]) -> Self {
        let m = basis.dim;
        let n = cloud.len() / m;
        let sums = chunked_sum(n, 2 * m, |i, acc| {
            for c in 0..m {
                let v = cloud[i * m + c];
                acc[c] += v;
                acc[m + c] += v * v;
            }
        });
        let mut mean = vec![0.0; m];
        let mut scale = vec![1.0; m];
        let mut active = Vec::new();
        for c in 0..m {
            mean[c] = sums[c] / n as f64;
            let var = (sums[m + c] / n as f64 - mean[c] * mean[c]).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-10 * (1.0 + mean[c].abs()) {
                scale[c] = sd;
                active.push(c);
            }
        }
        let features = match basis.family {
            BasisFamily::Polynomial { degree } => Features::Poly { exps: multi_indices(active.len(), degree), max_degree: degree },
            BasisFamily::Partition { bins } => {
                let edges = active
                    .iter()
                    .map(|&c| {
                        let mut v: Vec<f64> = (0..n).map(|i| cloud[i * m + c]).collect();
                        v.par_sort_unstable_by(|a, b| a.total_cmp(b));
                        let mut e: Vec<f64> = (1..bins).map(|k| v[(k * n / bins).min(n - 1)]).collect();
                        e.dedup();
                        e
                    })
                    .collect();
                Features::Bins { edges }
            }
        };
        Self { mean, scale, active, features }
    }

    pub fn n_features(&self) -> usize {
        match &self.features {
            Features::Poly { exps, .. } => exps.len(),
            Features::Bins { edges } => edges.iter().map(|e| e.len() + 1).product(),
        }
    }

    /// Writes the feature vector of `x` into `out` (length `n_features`).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.features {
            Features::Poly { exps, max_degree } => {
                let k = self.active.len();
                let width = max_degree + 1;
                let mut he = [0.0f64; 64];
                let mut heap;
                let table: &mut [f64] = if k * width <= 64 {
                    &mut he[..k * width]
                } else {
                    heap = vec![0.0; k * width];
                    &mut heap
                };
                for (a, &c) in self.active.iter().enumerate() {
                    let s = (x[c] - self.mean[c]) / self.scale[c];
                    let row = &mut table[a * width..(a + 1) * width];
                    row[0] = 1.0;
                    if width > 1 {
                        row[1] = s;
                    }
                    for d in 1..width.saturating_sub(1) {
                        row[d + 1] = s * row[d] - d as f64 * row[d - 1];
                    }
                }
                for (o, e) in out.iter_mut().zip(exps) {
                    let mut v = 1.0;
                    for (a, &p) in e.iter().enumerate() {
                        if p > 0 {
                            v *= table[a * width + p as usize];
                        }
                    }
                    *o = v;
                }
            }
            Features::Bins { edges } => {
                out.fill(0.0);
                let mut idx = 0usize;
                for (a, &c) in self.active.iter().enumerate() {
                    let e = &edges[a];
                    idx = idx * (e.len() + 1) + e.partition_point(|&v| v <= x[c]);
                }
                out[idx] = 1.0;
            }
        }
    }
}

/// Fitted linear combination of features; represents `x ↦ E[target | X = x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    map: FeatureMap,
    coefs: Vec<f64>,
}

impl Projection {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut f = vec![0.0; self.coefs.len()];
        self.map.eval_into(x, &mut f);
        f.iter().zip(&self.coefs).map(|(a, b)| a * b).sum()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefs
    }
}

/// Feature rows of one cloud, reusable for several targets.
pub struct Design {
    map: FeatureMap,
    rows: Vec<f64>,
    n: usize,
    p: usize,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    pinv: Option<DMatrix<f64>>,
}

impl Design {
    /// `cloud` is path-major, `n × basis.dim`.
    pub fn new(basis: &RegressionBasis, cloud: &[f64]) -> Result<Self> {
        let m = basis.dim;
        if m == 0 || cloud.is_empty() || !cloud.len().is_multiple_of(m) {
            return domain(format!("cloud of length {} does not match basis dimension {m}", cloud.len()));
        }
        if let BasisFamily::Polynomial { degree } = basis.family {
            if degree > 30 {
                return domain(format!("polynomial degree {degree} is too large"));
            }
        }
        let n = cloud.len() / m;
        let map = FeatureMap::fit(basis, cloud);
        let p = map.n_features();
        let mut rows = vec![0.0; n * p];
        rows.par_chunks_mut(p).enumerate().for_each(|(i, r)| map.eval_into(&cloud[i * m..(i + 1) * m], r));
        let gram_flat = chunked_sum(n, p * p, |i, acc| {
            let r = &rows[i * p..(i + 1) * p];
            for a in 0..p {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..p {
                    acc[a * p + b] += ra * r[b];
                }
            }
        });
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let v = gram_flat[a * p + b] / n as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::LabError::Regression { step: usize::MAX, reason: "non-finite design matrix".into() });
        }
        let (chol, pinv) = if let Features::Bins { .. } = map.features {
            // indicator columns are orthogonal: the minimum-norm solution is diagonal
            let inv = DMatrix::from_fn(p, p, |a, b| if a == b && gram[(a, a)] > 0.0 { 1.0 / gram[(a, a)] } else { 0.0 });
            (None, Some(inv))
        } else {
            // intercept (first feature) unpenalized
            let ridge = (1e-8 * gram.trace() / p as f64).max(f64::MIN_POSITIVE);
            for a in 1..p {
                gram[(a, a)] += ridge;
            }
            match gram.clone().cholesky() {
                Some(c) => (Some(c), None),
                None => {
                    let svd = gram.svd(true, true);
                    match svd.pseudo_inverse(1e-14) {
                        Ok(pi) => (None, Some(pi)),
                        Err(e) => return Err(crate::error::LabError::Regression { step: usize::MAX, reason: e.to_string() }),
                    }
                }
            }
        };
        Ok(Self { map, rows, n, p, chol, pinv })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.p..(i + 1) * self.p]
    }

    /// Coefficients of the projection of `target(i)`.
    pub fn solve<F>(&self, target: F) -> Result<Vec<f64>>
    where
        F: Fn(usize) -> f64 + Sync,
    {
        let p = self.p;
        let rhs = chunked_sum(self.n, p, |i, acc| {
            let t = target(i);
            for (a, r) in acc.iter_mut().zip(self.row(i)) {
                *a += r * t;
            }
        });
        let b = DVector::from_iterator(p, rhs.into_iter().map(|v| v / self.n as f64));
        let c = match (&self.chol, &self.pinv) {
            (Some(ch), _) => ch.solve(&b),
            (None, Some(pi)) => pi * b,
            _ => unreachable!("design always carries a factorization"),
        };
        if c.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::LabError::Regression { step: usize::MAX, reason: "non-finite coefficients".into() });
        }
        Ok(c.iter().copied().collect())
    }

    pub fn fitted(&self, coefs: &[f64], i: usize) -> f64 {
        self.row(i).iter().zip(coefs).map(|(a, b)| a * b).sum()
    }

    pub fn projection(&self, coefs: Vec<f64>) -> Projection {
        Projection { map: self.map.clone(), coefs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multi_index_counts() {
        assert_eq!(multi_indices(1, 4).len(), 5);
        assert_eq!(multi_indices(2, 3).len(), 10);
        assert_eq!(multi_indices(3, 2).len(), 10);
        assert_eq!(multi_indices(0, 5).len(), 1);
    }

    #[test]
    fn polynomial_target_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud: Vec<f64> = (0..4000).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
        let d = Design::new(&RegressionBasis::polynomial(3, 2), &cloud).unwrap();
        let target = |i: usize| {
            let (x, y) = (cloud[2 * i], cloud[2 * i + 1]);
            1.0 - 2.0 * x + x * y + 0.5 * y * y * y
        };
        let c = d.solve(target).unwrap();
        let proj = d.projection(c.clone());
        for i in (0..2000).step_by(97) {
            assert!((d.fitted(&c, i) - target(i)).abs() < 1e-6);
            assert!((proj.eval(&cloud[2 * i..2 * i + 2]) - target(i)).abs() < 1e-6);
        }
    }

    #[test]
    fn point_cloud_reduces_to_mean() {
        let cloud = vec![0.5; 100];
        let d = Design::new(&RegressionBasis::polynomial(4, 1), &cloud).unwrap();
        assert_eq!(d.n_features(), 1);
        let c = d.solve(|i| i as f64).unwrap();
        assert!((c[0] - 49.5).abs() < 1e-6);
    }

    #[test]
    fn partition_gives_bin_means() {
        let cloud: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let d = Design::new(&RegressionBasis::partition(4, 1), &cloud).unwrap();
        assert_eq!(d.n_features(), 4);
        let c = d.solve(|i| cloud[i]).unwrap();
        for (k, v) in c.iter().enumerate() {
            assert!((v - (250.0 * k as f64 + 124.5)).abs() < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn projection_round_trips_through_json() {
        let cloud: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let d = Design::new(&RegressionBasis::polynomial(2, 1), &cloud).unwrap();
        let p = d.projection(d.solve(|i| cloud[i] * cloud[i]).unwrap());
        let back: Projection = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn collinear_columns_still_solve() {
        let cloud: Vec<f64> = (0..200).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let d = Design::new(&RegressionBasis::polynomial(1, 2), &cloud).unwrap();
        let c = d.solve(|i| 3.0 * i as f64).unwrap();
        assert!((d.fitted(&c, 10) - 30.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_mismatched_cloud() {
        assert!(Design::new(&RegressionBasis::polynomial(2, 2), &[1.0, 2.0, 3.0]).is_err());
    }
}
