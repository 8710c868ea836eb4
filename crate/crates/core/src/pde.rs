//! One-dimensional finite-difference reference for
//! `∂ₜu + b∂ₓu + (ε/2)σ²∂ₓₓu + f(t, x, u, √ε σ∂ₓu) = 0`, `u(T, ·) = g`, and
//! the backward ODE of the `ε = 0` limit along the deterministic flow.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::drivers::{Driver, TerminalCondition};
use crate::error::{domain, LabError, Result};
use crate::forward::ForwardModel;
use crate::grid::TimeGrid;

pub type ScalarCoef = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct PdeProblem {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_x: usize,
    pub n_t: usize,
    pub t0: f64,
    pub t_end: f64,
    pub drift: ScalarCoef,
    pub sigma: ScalarCoef,
    pub driver: Driver,
    pub terminal: TerminalCondition,
    pub epsilon: f64,
}

impl fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PdeProblem")
            .field("domain", &(self.x_lo, self.x_hi))
            .field("n_x", &self.n_x)
            .field("n_t", &self.n_t)
            .field("time", &(self.t0, self.t_end))
            .field("driver", &self.driver)
            .field("terminal", &self.terminal)
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

/// `[lo, hi]` widened by `6√(ε σ_max² T)` (at least 0.5) on both sides.
pub fn padded_domain(probe_lo: f64, probe_hi: f64, epsilon: f64, sigma_max: f64, horizon: f64) -> (f64, f64) {
    let pad = (6.0 * (epsilon * sigma_max * sigma_max * horizon).sqrt()).max(0.5);
    (probe_lo - pad, probe_hi + pad)
}

impl PdeProblem {
    /// Coefficients taken from a scalar forward model; the domain is the
    /// padded probe interval.
    #[allow(clippy::too_many_arguments)]
    pub fn from_model(
        model: &ForwardModel,
        driver: &Driver,
        terminal: &TerminalCondition,
        epsilon: f64,
        grid: &TimeGrid,
        probes: (f64, f64),
        n_x: usize,
        sigma_max: f64,
    ) -> Result<Self> {
        if model.dim_state() != 1 || model.dim_noise() != 1 {
            return domain("the finite-difference oracle is one-dimensional");
        }
        let (lo, hi) = padded_domain(probes.0, probes.1, epsilon, sigma_max, grid.horizon());
        let (m1, m2) = (model.clone(), model.clone());
        let p = Self {
            x_lo: lo,
            x_hi: hi,
            n_x,
            n_t: grid.n_steps(),
            t0: grid.t0(),
            t_end: grid.t_end(),
            drift: Arc::new(move |t, x| {
                let mut o = [0.0];
                m1.drift_at(t, &[x], &mut o);
                o[0]
            }),
            sigma: Arc::new(move |t, x| {
                let mut o = [0.0];
                m2.diffusion_at(t, &[x], &mut o);
                o[0]
            }),
            driver: driver.clone(),
            terminal: terminal.clone(),
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 8 || self.n_t < 1 {
            return domain(format!("need n_x ≥ 8 and n_t ≥ 1, got n_x = {}, n_t = {}", self.n_x, self.n_t));
        }
        if !(self.x_lo < self.x_hi) || !(self.t0 < self.t_end) {
            return domain("empty space or time interval");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return domain(format!("epsilon must be finite and nonnegative, got {}", self.epsilon));
        }
        if self.terminal.dim() != 1 {
            return domain("terminal condition must be scalar");
        }
        Ok(())
    }

    /// Same problem on the interval doubled about its centre, same `dx`.
    pub fn doubled(&self) -> Self {
        let c = 0.5 * (self.x_lo + self.x_hi);
        let h = self.x_hi - self.x_lo;
        let mut p = self.clone();
        p.x_lo = c - h;
        p.x_hi = c + h;
        p.n_x = 2 * self.n_x;
        p
    }

    fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.n_x as f64
    }

    fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_t as f64
    }
}

/// `u` on `(n_t + 1) × (n_x + 1)` nodes; row `n` is time `t0 + n·dt`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldGrid {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl FieldGrid {
    pub fn row(&self, n: usize) -> &[f64] {
        let w = self.x.len();
        &self.u[n * w..(n + 1) * w]
    }

    /// Linear interpolation in `x` on time row `n`; `None` outside the domain.
    pub fn value_at(&self, n: usize, x: f64) -> Option<f64> {
        let (lo, hi) = (self.x[0], *self.x.last().unwrap());
        if !(x >= lo && x <= hi) {
            return None;
        }
        let dx = self.x[1] - self.x[0];
        let k = (((x - lo) / dx).floor() as usize).min(self.x.len() - 2);
        let w = (x - self.x[k]) / dx;
        let r = self.row(n);
        Some((1.0 - w) * r[k] + w * r[k + 1])
    }

    pub fn initial_value(&self, x: f64) -> Option<f64> {
        self.value_at(0, x)
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    c[0] = upper[0] / beta;
    rhs[0] /= beta;
    for k in 1..n {
        beta = diag[k] - lower[k] * c[k - 1];
        if k < n - 1 {
            c[k] = upper[k] / beta;
        }
        rhs[k] = (rhs[k] - lower[k] * rhs[k - 1]) / beta;
    }
    for k in (0..n - 1).rev() {
        rhs[k] -= c[k] * rhs[k + 1];
    }
}

/// Backward semi-implicit stepping: diffusion implicit, drift and driver
/// explicit with central differences, Neumann ghost nodes.
pub fn solve_pde(problem: &PdeProblem) -> Result<FieldGrid> {
    problem.validate()?;
    let (nx, nt) = (problem.n_x, problem.n_t);
    let (dx, dt) = (problem.dx(), problem.dt());
    let xs: Vec<f64> = (0..=nx).map(|k| problem.x_lo + k as f64 * dx).collect();
    let ts: Vec<f64> = (0..=nt).map(|n| if n == nt { problem.t_end } else { problem.t0 + n as f64 * dt }).collect();
    let se = problem.epsilon.sqrt();

    let mut b_max: f64 = 0.0;
    let mut s_max: f64 = 0.0;
    for &t in ts.iter().step_by((nt / 16).max(1)) {
        for &x in &xs {
            b_max = b_max.max((problem.drift)(t, x).abs());
            s_max = s_max.max((problem.sigma)(t, x).abs());
        }
    }
    if dt * b_max / dx > 1.0 {
        return Err(LabError::Stability(format!("transport CFL violated: dt·max|b|/dx = {:.3}", dt * b_max / dx)));
    }
    let kf = problem.driver.k_const();
    if dt * kf * (1.0 + se * s_max / dx) > 1.0 {
        return Err(LabError::Stability(format!("driver step too large: dt·K·(1 + √ε σ/dx) = {:.3}", dt * kf * (1.0 + se * s_max / dx))));
    }

    let w = nx + 1;
    let mut u = vec![0.0; (nt + 1) * w];
    for (k, &x) in xs.iter().enumerate() {
        u[nt * w + k] = problem.terminal.eval(&[x]);
    }
    let (mut lower, mut diag, mut upper) = (vec![0.0; w], vec![0.0; w], vec![0.0; w]);
    let mut rhs = vec![0.0; w];
    for n in (0..nt).rev() {
        let t_next = ts[n + 1];
        let t_now = ts[n];
        let next = &u[(n + 1) * w..(n + 2) * w];
        for k in 0..w {
            let left = if k == 0 { next[1] } else { next[k - 1] };
            let right = if k == nx { next[nx - 1] } else { next[k + 1] };
            let ux = (right - left) / (2.0 * dx);
            let x = xs[k];
            let sig = (problem.sigma)(t_next, x);
            let f = problem.driver.eval(t_next, &[x], next[k], &[se * sig * ux]);
            rhs[k] = next[k] + dt * ((problem.drift)(t_next, x) * ux + f);
            let sn = (problem.sigma)(t_now, x);
            let a = dt * 0.5 * problem.epsilon * sn * sn / (dx * dx);
            diag[k] = 1.0 + 2.0 * a;
            lower[k] = -a;
            upper[k] = -a;
        }
        // ghost nodes u_{-1} = u_1 and u_{nx+1} = u_{nx-1}
        upper[0] *= 2.0;
        lower[nx] *= 2.0;
        thomas(&lower, &diag, &upper, &mut rhs);
        if let Some(k) = rhs.iter().position(|v| !v.is_finite()) {
            let _ = k;
            return Err(LabError::PdeNonFinite { step: n });
        }
        u[n * w..(n + 1) * w].copy_from_slice(&rhs);
    }
    Ok(FieldGrid { t: ts, x: xs, u })
}

/// `Y⁰` on the grid: RK4 for the flow `X⁰` on the half-step grid, then RK4
/// backward for `dY⁰/dt = −f(t, X⁰, Y⁰, 0)` from `Y⁰_T = g(X⁰_T)`.
pub fn solve_limit_ode(model: &ForwardModel, drv: &Driver, tc: &TerminalCondition, grid: &TimeGrid, x0: &[f64]) -> Result<Vec<f64>> {
    if tc.dim() != model.dim_state() {
        return domain("terminal condition dimension does not match the model");
    }
    let fine = TimeGrid::new(grid.t0(), grid.t_end(), 2 * grid.n_steps())?;
    let flow = crate::forward::solve_deterministic_flow(model, &fine, x0)?;
    let n = grid.n_steps();
    let h = grid.dt();
    let zero = vec![0.0; model.dim_noise()];
    let rhs = |t: f64, x: &[f64], y: f64| -drv.eval(t, x, y, &zero);
    let mut y = vec![0.0; n + 1];
    y[n] = tc.eval(&flow[2 * n]);
    for i in (0..n).rev() {
        let (t1, tm, t0) = (grid.time(i + 1), grid.time(i) + 0.5 * h, grid.time(i));
        let (x1, xm, x0) = (&flow[2 * i + 2], &flow[2 * i + 1], &flow[2 * i]);
        let yv = y[i + 1];
        let k1 = rhs(t1, x1, yv);
        let k2 = rhs(tm, xm, yv - 0.5 * h * k1);
        let k3 = rhs(tm, xm, yv - 0.5 * h * k2);
        let k4 = rhs(t0, x0, yv - h * k3);
        y[i] = yv - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !y[i].is_finite() {
            return Err(LabError::NonFinite { step: i, path: 0 });
        }
    }
    Ok(y)
}

/// `u⁰(tᵢ, x)`: the limit backward ODE started from `x` at grid index `i`.
#[derive(Clone, Debug)]
pub struct LimitField {
    pub model: ForwardModel,
    pub driver: Driver,
    pub terminal: TerminalCondition,
    pub grid: TimeGrid,
}

impl LimitField {
    pub fn u(&self, i: usize, x: &[f64]) -> Result<f64> {
        let n = self.grid.n_steps();
        if i >= n {
            return Ok(self.terminal.eval(x));
        }
        let sub = TimeGrid::new(self.grid.time(i), self.grid.t_end(), n - i)?;
        Ok(solve_limit_ode(&self.model, &self.driver, &self.terminal, &sub, x)?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub x: f64,
    pub mc: f64,
    pub fd: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldComparison {
    /// Infinite when a probe lies outside the finite-difference domain.
    pub max_deviation: f64,
    pub rows: Vec<ProbeRow>,
}

/// `max |u_MC(t0, x) − u_FD(t0, x)|` over the probes.
pub fn compare_field<F: Fn(f64) -> f64>(mc: F, fd: &FieldGrid, probes: &[f64]) -> FieldComparison {
    let rows: Vec<ProbeRow> = probes
        .iter()
        .map(|&x| {
            let m = mc(x);
            let f = fd.initial_value(x).unwrap_or(f64::NAN);
            ProbeRow { x, mc: m, fd: f, deviation: (m - f).abs() }
        })
        .collect();
    let max_deviation = rows.iter().map(|r| if r.deviation.is_nan() { f64::INFINITY } else { r.deviation }).fold(0.0, f64::max);
    FieldComparison { max_deviation, rows }
}

/// Largest change at the probes when the domain is doubled.
pub fn domain_doubling_change(problem: &PdeProblem, probes: &[f64]) -> Result<f64> {
    let a = solve_pde(problem)?;
    let b = solve_pde(&problem.doubled())?;
    let mut worst: f64 = 0.0;
    for &x in probes {
        match (a.initial_value(x), b.initial_value(x)) {
            (Some(p), Some(q)) => worst = worst.max((p - q).abs()),
            _ => return domain(format!("probe {x} lies outside the domain")),
        }
    }
    Ok(worst)
}
