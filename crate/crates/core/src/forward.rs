//! Forward diffusions `dX = b(t,X)dt + √ε σ(t,X)dW` by Euler–Maruyama, and the
//! deterministic `ε = 0` flow by RK4.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, LabError, Result};
use crate::grid::{PathEnsemble, TimeGrid};
use crate::stats;

/// Coefficient callback `(t, x, out)`. Must be pure.
pub type CoefFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Outcome of the statistical H0-type probe run when a model is built.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// `max_t |b(t,0)| + |σ(t,0)|` over the probe times.
    pub origin_bound: f64,
    /// Largest observed `|Δb| / |Δx|` or `|Δσ| / |Δx|` over random pairs.
    pub lipschitz_ratio: f64,
    pub declared_k: f64,
    pub passed: bool,
}

#[derive(Clone)]
pub struct ForwardModel {
    dim_state: usize,
    dim_noise: usize,
    drift: CoefFn,
    diffusion: CoefFn,
    drift_jacobian: Option<CoefFn>,
    diffusion_jacobian: Option<CoefFn>,
    lipschitz_k: f64,
    bounded: bool,
    probe: ProbeReport,
}

impl fmt::Debug for ForwardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardModel")
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("lipschitz_k", &self.lipschitz_k)
            .field("bounded", &self.bounded)
            .field("probe", &self.probe)
            .finish()
    }
}

const PROBE_PAIRS: usize = 512;
const PROBE_SEED: u64 = 0x5eed_f0a7;
const PROBE_SLACK: f64 = 1.05;

impl ForwardModel {
    /// `drift(t, x, out)` writes `b(t,x)` (length m); `diffusion(t, x, out)`
    /// writes `σ(t,x)` row-major (`out[a*d + q]`).
    pub fn new<B, S>(dim_state: usize, dim_noise: usize, lipschitz_k: f64, drift: B, diffusion: S) -> Self
    where
        B: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dim_state >= 1 && dim_noise >= 1, "model dimensions must be positive");
        let mut model = Self {
            dim_state,
            dim_noise,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            drift_jacobian: None,
            diffusion_jacobian: None,
            lipschitz_k,
            bounded: false,
            probe: ProbeReport { origin_bound: 0.0, lipschitz_ratio: 0.0, declared_k: lipschitz_k, passed: true },
        };
        model.probe = model.probe(PROBE_PAIRS, PROBE_SEED);
        model
    }

    /// Analytic `∂b_a/∂x_c`, written to `out[a*m + c]`.
    pub fn with_drift_jacobian<F>(mut self, jac: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.drift_jacobian = Some(Arc::new(jac));
        self
    }

    /// Analytic `∂σ_{aq}/∂x_c`, written to `out[(a*d + q)*m + c]`.
    pub fn with_diffusion_jacobian<F>(mut self, jac: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.diffusion_jacobian = Some(Arc::new(jac));
        self
    }

    /// Declares `b` and `σ` uniformly bounded (needed for large deviations).
    pub fn bounded(mut self, flag: bool) -> Self {
        self.bounded = flag;
        self
    }

    /// `b = 0`, `σ = scale·I`.
    pub fn brownian(dim: usize, scale: f64) -> Self {
        let k = scale.abs() * (dim as f64).sqrt();
        Self::new(
            dim,
            dim,
            k,
            |_, _, out| out.fill(0.0),
            move |_, _, out: &mut [f64]| {
                out.fill(0.0);
                for a in 0..dim {
                    out[a * dim + a] = scale;
                }
            },
        )
        .with_drift_jacobian(|_, _, out| out.fill(0.0))
        .with_diffusion_jacobian(|_, _, out| out.fill(0.0))
        .bounded(true)
    }

    /// One-dimensional `b(x) = -θx`, `σ = sigma`.
    pub fn mean_reverting(theta: f64, sigma: f64) -> Self {
        Self::new(1, 1, theta.abs().max(sigma.abs()), move |_, x, out| out[0] = -theta * x[0], move |_, _, out| out[0] = sigma)
            .with_drift_jacobian(move |_, _, out| out[0] = -theta)
            .with_diffusion_jacobian(|_, _, out| out[0] = 0.0)
    }

    /// Constant drift and diffusion (`sigma` row-major `m × d`).
    pub fn constant(drift: Vec<f64>, sigma: Vec<f64>, dim_noise: usize) -> Self {
        let m = drift.len();
        assert_eq!(sigma.len(), m * dim_noise, "sigma must be m × d");
        let k = drift.iter().map(|v| v * v).sum::<f64>().sqrt() + sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::new(
            m,
            dim_noise,
            k,
            move |_, _, out: &mut [f64]| out.copy_from_slice(&drift),
            move |_, _, out: &mut [f64]| out.copy_from_slice(&sigma),
        )
        .with_drift_jacobian(|_, _, out| out.fill(0.0))
        .with_diffusion_jacobian(|_, _, out| out.fill(0.0))
        .bounded(true)
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn lipschitz_k(&self) -> f64 {
        self.lipschitz_k
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    pub fn probe_report(&self) -> &ProbeReport {
        &self.probe
    }

    pub fn drift_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    /// `∂b/∂x` (`m × m`), analytic if supplied, else central differences.
    pub fn drift_jacobian_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift_jacobian {
            Some(j) => j(t, x, out),
            None => central_jacobian(&*self.drift, t, x, self.dim_state, out),
        }
    }

    /// `∂σ/∂x` (`m·d × m`), analytic if supplied, else central differences.
    pub fn diffusion_jacobian_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.diffusion_jacobian {
            Some(j) => j(t, x, out),
            None => central_jacobian(&*self.diffusion, t, x, self.dim_state * self.dim_noise, out),
        }
    }

    /// Random-pair probe of the origin bound and Lipschitz constant.
    pub fn probe(&self, n_pairs: usize, seed: u64) -> ProbeReport {
        let (m, d) = (self.dim_state, self.dim_noise);
        let mut b = vec![0.0; m];
        let mut s = vec![0.0; m * d];
        let mut b2 = vec![0.0; m];
        let mut s2 = vec![0.0; m * d];
        let zero = vec![0.0; m];
        let mut origin_bound: f64 = 0.0;
        for k in 0..=8 {
            let t = k as f64 / 8.0;
            self.drift_at(t, &zero, &mut b);
            self.diffusion_at(t, &zero, &mut s);
            origin_bound = origin_bound.max(norm(&b) + norm(&s));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ratio: f64 = 0.0;
        let mut x = vec![0.0; m];
        let mut y = vec![0.0; m];
        for _ in 0..n_pairs {
            let t: f64 = rng.random();
            let scale = if rng.random::<f64>() < 0.8 { 3.0 } else { 50.0 };
            for a in 0..m {
                x[a] = scale * (2.0 * rng.random::<f64>() - 1.0);
                y[a] = x[a] + (if rng.random::<bool>() { 1.0 } else { 1e-3 }) * (2.0 * rng.random::<f64>() - 1.0);
            }
            let dx = dist(&x, &y);
            if dx == 0.0 {
                continue;
            }
            self.drift_at(t, &x, &mut b);
            self.drift_at(t, &y, &mut b2);
            self.diffusion_at(t, &x, &mut s);
            self.diffusion_at(t, &y, &mut s2);
            ratio = ratio.max(dist(&b, &b2) / dx).max(dist(&s, &s2) / dx);
        }
        let k = self.lipschitz_k;
        ProbeReport {
            origin_bound,
            lipschitz_ratio: ratio,
            declared_k: k,
            passed: origin_bound <= k * PROBE_SLACK && ratio <= k * PROBE_SLACK,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

type VecField = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

fn central_jacobian(f: &VecField, t: f64, x: &[f64], rows: usize, out: &mut [f64]) {
    let m = x.len();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; rows];
    let mut fm = vec![0.0; rows];
    for c in 0..m {
        let h = 1e-6 * (1.0 + x[c].abs());
        xp[c] = x[c] + h;
        f(t, &xp, &mut fp);
        xp[c] = x[c] - h;
        f(t, &xp, &mut fm);
        xp[c] = x[c];
        for r in 0..rows {
            out[r * m + c] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
}

/// Simulated states `X^ε` for every path of an ensemble.
#[derive(Clone, Debug)]
pub struct ForwardPaths {
    model: ForwardModel,
    ensemble: Arc<PathEnsemble>,
    epsilon: f64,
    point_start: bool,
    states: Vec<f64>,
}

impl ForwardPaths {
    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn ensemble(&self) -> &Arc<PathEnsemble> {
        &self.ensemble
    }

    pub fn grid(&self) -> &TimeGrid {
        self.ensemble.grid()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_paths(&self) -> usize {
        self.ensemble.n_paths()
    }

    pub fn dim_state(&self) -> usize {
        self.model.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.model.dim_noise
    }

    /// True when every path starts from the same point.
    pub fn has_point_start(&self) -> bool {
        self.point_start
    }

    fn stride(&self) -> usize {
        (self.grid().n_steps() + 1) * self.model.dim_state
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let m = self.model.dim_state;
        let base = path * self.stride() + step * m;
        &self.states[base..base + m]
    }

    pub fn path_states(&self, path: usize) -> &[f64] {
        let s = self.stride();
        &self.states[path * s..(path + 1) * s]
    }

    /// All states at one grid index, path-major (`M × m`).
    pub fn step_cloud(&self, step: usize) -> Vec<f64> {
        let m = self.model.dim_state;
        let mut out = vec![0.0; self.n_paths() * m];
        out.par_chunks_mut(m).enumerate().for_each(|(j, o)| o.copy_from_slice(self.state(j, step)));
        out
    }
}

/// Euler–Maruyama from a common start `x0`.
pub fn simulate_forward(model: &ForwardModel, ens: &Arc<PathEnsemble>, x0: &[f64], epsilon: f64) -> Result<ForwardPaths> {
    if x0.len() != model.dim_state {
        return domain(format!("start point has dimension {}, model expects {}", x0.len(), model.dim_state));
    }
    let m = model.dim_state;
    simulate_inner(model, ens, epsilon, true, |_, out| out.copy_from_slice(&x0[..m]))
}

/// Euler–Maruyama where path `j` starts at `starts[j*m..(j+1)*m]`.
pub fn simulate_forward_from(model: &ForwardModel, ens: &Arc<PathEnsemble>, starts: &[f64], epsilon: f64) -> Result<ForwardPaths> {
    let m = model.dim_state;
    if starts.len() != ens.n_paths() * m {
        return domain(format!("expected {} start coordinates, got {}", ens.n_paths() * m, starts.len()));
    }
    simulate_inner(model, ens, epsilon, false, |j, out| out.copy_from_slice(&starts[j * m..(j + 1) * m]))
}

fn simulate_inner<S>(model: &ForwardModel, ens: &Arc<PathEnsemble>, epsilon: f64, point_start: bool, start: S) -> Result<ForwardPaths>
where
    S: Fn(usize, &mut [f64]) + Sync,
{
    if ens.dim() != model.dim_noise {
        return domain(format!("ensemble dimension {} does not match model noise dimension {}", ens.dim(), model.dim_noise));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return domain(format!("epsilon must be a finite nonnegative number, got {epsilon}"));
    }
    let grid = *ens.grid();
    let (m, d, n) = (model.dim_state, model.dim_noise, grid.n_steps());
    let stride = (n + 1) * m;
    let mut states = vec![0.0; ens.n_paths() * stride];
    let scale = epsilon.sqrt();
    let dt = grid.dt();
    let failure = states
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(j, xs)| {
            start(j, &mut xs[..m]);
            let mut b = vec![0.0; m];
            let mut s = vec![0.0; m * d];
            for i in 0..n {
                let t = grid.time(i);
                let (cur, next) = xs[i * m..(i + 2) * m].split_at_mut(m);
                model.drift_at(t, cur, &mut b);
                if scale > 0.0 {
                    model.diffusion_at(t, cur, &mut s);
                }
                let dw = ens.increment(j, i);
                for a in 0..m {
                    let mut v = cur[a] + b[a] * dt;
                    if scale > 0.0 {
                        v += scale * (0..d).map(|q| s[a * d + q] * dw[q]).sum::<f64>();
                    }
                    next[a] = v;
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Some((j, i + 1));
                }
            }
            None
        })
        .filter_map(|r| r)
        .min();
    if let Some((path, step)) = failure {
        return Err(LabError::NonFinite { step, path });
    }
    Ok(ForwardPaths { model: model.clone(), ensemble: Arc::clone(ens), epsilon, point_start, states })
}

/// RK4 solution of `dX/dt = b(t, X)` on the grid.
pub fn solve_deterministic_flow(model: &ForwardModel, grid: &TimeGrid, x0: &[f64]) -> Result<Vec<Vec<f64>>> {
    let m = model.dim_state;
    if x0.len() != m {
        return domain(format!("start point has dimension {}, model expects {m}", x0.len()));
    }
    let h = grid.dt();
    let mut path = Vec::with_capacity(grid.n_steps() + 1);
    path.push(x0.to_vec());
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut tmp = vec![0.0; m];
    for i in 0..grid.n_steps() {
        let t = grid.time(i);
        let x = &path[i];
        model.drift_at(t, x, &mut k1);
        for a in 0..m {
            tmp[a] = x[a] + 0.5 * h * k1[a];
        }
        model.drift_at(t + 0.5 * h, &tmp, &mut k2);
        for a in 0..m {
            tmp[a] = x[a] + 0.5 * h * k2[a];
        }
        model.drift_at(t + 0.5 * h, &tmp, &mut k3);
        for a in 0..m {
            tmp[a] = x[a] + h * k3[a];
        }
        model.drift_at(t + h, &tmp, &mut k4);
        let next: Vec<f64> = (0..m).map(|a| x[a] + h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a])).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { step: i + 1, path: 0 });
        }
        path.push(next);
    }
    Ok(path)
}

/// Monte Carlo estimate of `E[sup_s |X^ε_s − X^0_s|^p]^{1/p}`, where both
/// processes are driven by the same ensemble.
pub fn measure_perturbation_gap(model: &ForwardModel, ens: &Arc<PathEnsemble>, x0: &[f64], epsilon: f64, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return domain(format!("gap exponent must be at least 1, got {p}"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return domain(format!("epsilon must lie in [0, 1], got {epsilon}"));
    }
    let noisy = simulate_forward(model, ens, x0, epsilon)?;
    let flat = simulate_forward(model, ens, x0, 0.0)?;
    Ok(sup_gap_moment(&noisy, &flat, p))
}

fn sup_gap_moment(a: &ForwardPaths, b: &ForwardPaths, p: f64) -> f64 {
    let m = a.dim_state();
    let n = a.grid().n_steps();
    let moment = crate::par::mean_of(a.n_paths(), |j| {
        let (pa, pb) = (a.path_states(j), b.path_states(j));
        let mut sup: f64 = 0.0;
        for i in 0..=n {
            sup = sup.max(dist(&pa[i * m..(i + 1) * m], &pb[i * m..(i + 1) * m]));
        }
        sup.powf(p)
    });
    moment.powf(1.0 / p)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapRow {
    pub epsilon: f64,
    pub gap_p2: f64,
    pub gap_p4: f64,
}

/// ε-gap table with the fitted log–log exponent of the `p = 2` column
/// (`None` when fewer than two positive gaps are available).
pub fn perturbation_gap_table(
    model: &ForwardModel,
    ens: &Arc<PathEnsemble>,
    x0: &[f64],
    epsilons: &[f64],
) -> Result<(Vec<GapRow>, Option<f64>)> {
    let flat = simulate_forward(model, ens, x0, 0.0)?;
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if !(eps > 0.0 && eps <= 1.0) {
            return domain(format!("epsilon must lie in (0, 1], got {eps}"));
        }
        let noisy = simulate_forward(model, ens, x0, eps)?;
        rows.push(GapRow { epsilon: eps, gap_p2: sup_gap_moment(&noisy, &flat, 2.0), gap_p4: sup_gap_moment(&noisy, &flat, 4.0) });
    }
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.gap_p2 > 0.0).map(|r| (r.epsilon.ln(), r.gap_p2.ln())).collect();
    let slope = stats::ols_slope(&pts);
    Ok((rows, slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn ens(n_steps: usize, paths: usize, dim: usize, seed: u64) -> Arc<PathEnsemble> {
        Arc::new(PathEnsemble::sample(make_grid(0.0, 1.0, n_steps).unwrap(), paths, dim, seed).unwrap())
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let model = ForwardModel::constant(vec![0.0], vec![0.0], 1);
        let e = ens(10, 20, 1, 1);
        let fp = simulate_forward(&model, &e, &[3.0], 1.0).unwrap();
        assert!(fp.states.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn brownian_states_are_cumulative_sums() {
        let model = ForwardModel::brownian(1, 1.0);
        let e = ens(10, 5, 1, 2);
        let fp = simulate_forward(&model, &e, &[0.0], 1.0).unwrap();
        for j in 0..5 {
            let w = e.brownian_path(j);
            for (a, b) in fp.path_states(j).iter().zip(&w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn brownian_terminal_variance() {
        let model = ForwardModel::brownian(1, 1.0);
        let e = ens(10, 100_000, 1, 3);
        let fp = simulate_forward(&model, &e, &[0.0], 1.0).unwrap();
        let n = fp.grid().n_steps();
        let (mean, _) = crate::par::mean_stderr(fp.n_paths(), |j| fp.state(j, n)[0]);
        let var = crate::par::mean_of(fp.n_paths(), |j| (fp.state(j, n)[0] - mean).powi(2));
        assert!((0.95..=1.05).contains(&var), "{var}");
    }

    #[test]
    fn zero_epsilon_paths_agree_and_follow_exponential() {
        let model = ForwardModel::mean_reverting(1.0, 1.0);
        let e = ens(100, 8, 1, 4);
        let fp = simulate_forward(&model, &e, &[1.0], 0.0).unwrap();
        let n = fp.grid().n_steps();
        let x_t = fp.state(0, n)[0];
        for j in 1..8 {
            assert_eq!(fp.state(j, n)[0], x_t);
        }
        assert!((x_t - (-1.0f64).exp()).abs() < 0.01, "{x_t}");
    }

    #[test]
    fn rk4_flow_examples() {
        let g = make_grid(0.0, 1.0, 100).unwrap();
        let decay = ForwardModel::mean_reverting(1.0, 0.0);
        let p = solve_deterministic_flow(&decay, &g, &[1.0]).unwrap();
        assert!((p[100][0] - 0.367879).abs() < 1e-6);
        let still = ForwardModel::constant(vec![0.0], vec![0.0], 1);
        let p = solve_deterministic_flow(&still, &g, &[0.7]).unwrap();
        assert!(p.iter().all(|x| x[0] == 0.7));
        let g2 = make_grid(0.0, 2.0, 10).unwrap();
        let transport = ForwardModel::constant(vec![1.0], vec![0.0], 1);
        let p = solve_deterministic_flow(&transport, &g2, &[0.0]).unwrap();
        assert!((p[10][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn euler_at_zero_noise_tracks_rk4_at_order_dt() {
        let model = ForwardModel::mean_reverting(1.0, 1.0);
        let mut devs = Vec::new();
        for n in [50, 100, 200] {
            let e = ens(n, 1, 1, 0);
            let fp = simulate_forward(&model, &e, &[1.0], 0.0).unwrap();
            let flow = solve_deterministic_flow(&model, e.grid(), &[1.0]).unwrap();
            let dev = (0..=n).map(|i| (fp.state(0, i)[0] - flow[i][0]).abs()).fold(0.0, f64::max);
            devs.push(dev * n as f64);
        }
        // max deviation ≤ C·dt with the same C across refinements
        assert!(devs.iter().all(|&c| c < 0.2), "{devs:?}");
    }

    #[test]
    fn gap_examples() {
        let e = ens(50, 20_000, 1, 5);
        let bm = ForwardModel::brownian(1, 1.0);
        assert_eq!(measure_perturbation_gap(&bm, &e, &[0.0], 0.0, 2.0).unwrap(), 0.0);
        let silent = ForwardModel::constant(vec![0.3], vec![0.0], 1);
        assert_eq!(measure_perturbation_gap(&silent, &e, &[0.0], 0.7, 2.0).unwrap(), 0.0);
        let g1 = measure_perturbation_gap(&bm, &e, &[0.0], 0.1, 2.0).unwrap();
        let g4 = measure_perturbation_gap(&bm, &e, &[0.0], 0.4, 2.0).unwrap();
        assert!((g4 / g1 - 2.0).abs() <= 0.1, "{}", g4 / g1);
    }

    #[test]
    fn gap_table_exponent_is_one_half_for_constant_sigma() {
        let e = ens(50, 5_000, 1, 6);
        let model = ForwardModel::brownian(1, 1.0);
        let (rows, slope) = perturbation_gap_table(&model, &e, &[0.0], &[0.8, 0.4, 0.2, 0.1]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!((slope.unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_state_names_step_and_path() {
        let model = ForwardModel::new(1, 1, 1.0, |_, x, out| out[0] = x[0] * x[0] * 1e200, |_, _, out| out[0] = 0.0);
        let e = ens(10, 3, 1, 7);
        match simulate_forward(&model, &e, &[1.0], 1.0) {
            Err(LabError::NonFinite { step, path }) => {
                assert_eq!(path, 0);
                assert!(step >= 1);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn probe_flags_understated_lipschitz_constant() {
        let ok = ForwardModel::mean_reverting(2.0, 1.0);
        assert!(ok.probe_report().passed);
        let bad = ForwardModel::new(1, 1, 0.5, |_, x, out| out[0] = 3.0 * x[0], |_, _, out| out[0] = 0.1);
        assert!(!bad.probe_report().passed);
        assert!(bad.probe_report().lipschitz_ratio > 2.9);
    }

    #[test]
    fn finite_difference_jacobian_matches_analytic() {
        let m = ForwardModel::new(
            2,
            1,
            2.0,
            |_, x, out| {
                out[0] = x[0].sin() + x[1];
                out[1] = x[0] * x[1];
            },
            |_, x, out| {
                out[0] = x[1].cos();
                out[1] = 1.0;
            },
        );
        let mut j = vec![0.0; 4];
        m.drift_jacobian_at(0.0, &[0.3, -0.7], &mut j);
        let want = [0.3f64.cos(), 1.0, -0.7, 0.3];
        for (a, b) in j.iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
        let mut js = vec![0.0; 4];
        m.diffusion_jacobian_at(0.0, &[0.3, -0.7], &mut js);
        assert!((js[1] + (-0.7f64).sin()).abs() < 1e-7);
    }
}
