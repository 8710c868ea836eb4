//! Freidlin–Wentzell action functionals, rate minimization over discrete
//! paths, the contracted rate for `Y`, and empirical `ε·log p` estimates.

mod empirical;
mod optim;

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::forward::{solve_deterministic_flow, ForwardModel};
use crate::grid::TimeGrid;
use optim::{augmented_lagrangian, Constraints};

pub use empirical::{empirical_ldp, extrapolate_to_zero, EmpiricalEvent, LdpRow};

/// Default number of path intervals.
pub const DEFAULT_NODES: usize = 64;
/// Minimum eigenvalue of `σσᵀ` for the metric form of the action.
pub const INVERTIBILITY_FLOOR: f64 = 1e-8;
/// Constraint violation accepted as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    /// `|φ_T − target| ≤ radius`; radius 0 pins the endpoint.
    Endpoint { target: Vec<f64>, radius: f64 },
    /// `⟨normal, φ_T⟩ ≥ level`.
    TerminalHalfspace { normal: Vec<f64>, level: f64 },
    /// `sup_s |φ_s − ψ_s| ≥ radius` with `ψ` the deterministic flow, or
    /// `sup_s ⟨direction, φ_s − ψ_s⟩ ≥ radius` when a direction is given.
    TubeExit { radius: f64, direction: Option<Vec<f64>> },
}

impl Event {
    /// Whether a discrete path (`n+1` states of dimension `m`, flattened)
    /// belongs to the event, with `flow` the deterministic flow on the same grid.
    pub fn contains(&self, states: &[f64], flow: &[Vec<f64>], m: usize) -> bool {
        let n = states.len() / m - 1;
        let last = &states[n * m..];
        match self {
            Event::Endpoint { target, radius } => dist2(last, target) <= radius * radius,
            Event::TerminalHalfspace { normal, level } => dot(normal, last) >= *level,
            Event::TubeExit { radius, direction } => (0..=n).any(|k| {
                let s = &states[k * m..(k + 1) * m];
                match direction {
                    Some(u) => s.iter().zip(&flow[k]).zip(u).map(|((a, b), c)| (a - b) * c).sum::<f64>() >= *radius,
                    None => dist2(s, &flow[k]) >= radius * radius,
                }
            }),
        }
    }

    /// Checks dimensions against the state dimension `m` and normalizes the
    /// tube direction.
    pub fn validate(&self, m: usize) -> Result<Event> {
        match self {
            Event::Endpoint { target, radius } => {
                if target.len() != m || !(*radius >= 0.0) || !radius.is_finite() {
                    return domain("endpoint event needs a target of the state dimension and a finite radius ≥ 0");
                }
                Ok(self.clone())
            }
            Event::TerminalHalfspace { normal, level } => {
                let n = dot(normal, normal).sqrt();
                if normal.len() != m || !(n > 0.0) || !level.is_finite() {
                    return domain("halfspace event needs a nonzero normal of the state dimension");
                }
                Ok(self.clone())
            }
            Event::TubeExit { radius, direction } => {
                if !(*radius > 0.0) || !radius.is_finite() {
                    return domain("tube radius must be positive and finite");
                }
                let direction = match direction {
                    Some(u) => {
                        let n = dot(u, u).sqrt();
                        if u.len() != m || !(n > 0.0) {
                            return domain("tube direction needs a nonzero vector of the state dimension");
                        }
                        Some(u.iter().map(|v| v / n).collect())
                    }
                    None => None,
                };
                Ok(Event::TubeExit { radius: *radius, direction })
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A rate-function minimization instance on a uniform path grid.
#[derive(Clone)]
pub struct ActionProblem {
    model: ForwardModel,
    x: Vec<f64>,
    grid: TimeGrid,
    event: Event,
    flow: Vec<Vec<f64>>,
    control_form: bool,
}

impl ActionProblem {
    /// Problem on `[t0, t_end]` with the default node count.
    pub fn new(model: ForwardModel, x: Vec<f64>, t0: f64, t_end: f64, event: Event) -> Result<Self> {
        Self::with_grid(model, x, TimeGrid::new(t0, t_end, DEFAULT_NODES)?, event)
    }

    pub fn with_grid(model: ForwardModel, x: Vec<f64>, grid: TimeGrid, event: Event) -> Result<Self> {
        let m = model.dim_state();
        if !model.is_bounded() {
            return domain("large deviations require a model declared with bounded coefficients");
        }
        if x.len() != m || x.iter().any(|v| !v.is_finite()) {
            return domain(format!("start point must be finite with dimension {m}"));
        }
        if grid.n_steps() < 2 {
            return domain("a path needs at least two intervals");
        }
        let event = event.validate(m)?;
        let flow = solve_deterministic_flow(&model, &grid, &x)?;
        let control_form = !metric_certified(&model, &grid, &flow);
        Ok(Self { model, x, grid, event, flow, control_form })
    }

    /// Same problem with twice as many intervals.
    pub fn refined(&self) -> Result<Self> {
        let grid = TimeGrid::new(self.grid.t0(), self.grid.t_end(), 2 * self.grid.n_steps())?;
        Self::with_grid(self.model.clone(), self.x.clone(), grid, self.event.clone())
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn start(&self) -> &[f64] {
        &self.x
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn event(&self) -> &Event {
        &self.event
    }

    /// Deterministic flow from the start point on the grid.
    pub fn flow(&self) -> &[Vec<f64>] {
        &self.flow
    }

    /// True when `σσᵀ` could not be certified invertible and the control
    /// formulation is used.
    pub fn uses_control_form(&self) -> bool {
        self.control_form
    }
}

fn metric_certified(model: &ForwardModel, grid: &TimeGrid, flow: &[Vec<f64>]) -> bool {
    let (m, d) = (model.dim_state(), model.dim_noise());
    if d < m {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x51_6d_a7);
    let mut probes: Vec<Vec<f64>> = flow.to_vec();
    for _ in 0..256 {
        let base = &flow[rng.random_range(0..flow.len())];
        probes.push(base.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect());
    }
    let mut sigma = vec![0.0; m * d];
    probes.iter().all(|p| {
        model.diffusion_at(grid.t0(), p, &mut sigma);
        metric_inverse(&sigma, m, d).is_some()
    })
}

/// `(σσᵀ)⁻¹` when its smallest eigenvalue clears the floor.
fn metric_inverse(sigma: &[f64], m: usize, d: usize) -> Option<DMatrix<f64>> {
    let s = DMatrix::from_row_slice(m, d, sigma);
    let gram = &s * s.transpose();
    if m == 1 {
        let v = gram[(0, 0)];
        return (v >= INVERTIBILITY_FLOOR).then(|| DMatrix::from_element(1, 1, 1.0 / v));
    }
    let eig = SymmetricEigen::new(gram);
    if eig.eigenvalues.iter().any(|&l| !(l >= INVERTIBILITY_FLOOR)) {
        return None;
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionValue {
    pub value: f64,
    /// Set when `σσᵀ` is singular somewhere along the path (value is `+∞`).
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateValue {
    pub value: f64,
    /// Minimizing path, one state per grid node.
    pub path: Vec<Vec<f64>>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub constraint_violation: f64,
    pub feasible: bool,
    /// Node where the binding constraint sits.
    pub hitting_node: usize,
}

/// Midpoint-rule action of a discrete path and its gradient with respect to
/// every node; `None` when the metric is singular on some interval.
fn metric_action(model: &ForwardModel, grid: &TimeGrid, nodes: &[f64], mut grad: Option<&mut [f64]>) -> Option<f64> {
    let (m, d) = (model.dim_state(), model.dim_noise());
    let dt = grid.dt();
    let intervals = nodes.len() / m - 1;
    let mut mid = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut jb = vec![0.0; m * m];
    let mut sigma = vec![0.0; m * d];
    let mut jsigma = vec![0.0; m * d * m];
    let mut v = vec![0.0; m];
    let mut a = vec![0.0; m];
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let mut total = 0.0;
    for k in 0..intervals {
        let (p, q) = (&nodes[k * m..(k + 1) * m], &nodes[(k + 1) * m..(k + 2) * m]);
        for c in 0..m {
            mid[c] = 0.5 * (p[c] + q[c]);
        }
        let t = grid.t0() + (k as f64 + 0.5) * dt;
        model.drift_at(t, &mid, &mut b);
        model.diffusion_at(t, &mid, &mut sigma);
        let inv = metric_inverse(&sigma, m, d)?;
        for c in 0..m {
            v[c] = (q[c] - p[c]) / dt - b[c];
        }
        for r in 0..m {
            a[r] = (0..m).map(|c| inv[(r, c)] * v[c]).sum();
        }
        total += 0.5 * dot(&v, &a) * dt;
        if let Some(g) = grad.as_deref_mut() {
            model.drift_jacobian_at(t, &mid, &mut jb);
            model.diffusion_jacobian_at(t, &mid, &mut jsigma);
            let sa: Vec<f64> = (0..d).map(|qn| (0..m).map(|r| sigma[r * d + qn] * a[r]).sum()).collect();
            for c in 0..m {
                let jba: f64 = (0..m).map(|r| a[r] * jb[r * m + c]).sum();
                let mut dsig = 0.0;
                for r in 0..m {
                    for qn in 0..d {
                        dsig += jsigma[(r * d + qn) * m + c] * a[r] * sa[qn];
                    }
                }
                let shared = -0.5 * dt * jba - 0.5 * dt * dsig;
                g[(k + 1) * m + c] += a[c] + shared;
                g[k * m + c] += -a[c] + shared;
            }
        }
    }
    Some(total)
}

fn check_path(problem: &ActionProblem, path: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = problem.model.dim_state();
    if path.len() != problem.grid.n_steps() + 1 || path.iter().any(|p| p.len() != m) {
        return domain(format!("path must have {} states of dimension {m}", problem.grid.n_steps() + 1));
    }
    if dist2(&path[0], &problem.x).sqrt() > 1e-12 {
        return domain("path must start at the problem's start point");
    }
    Ok(path.concat())
}

/// Discrete action `½ Σ ⟨v, (σσᵀ)⁻¹ v⟩ dt` with `v = Δφ/dt − b(midpoint)`.
pub fn action(problem: &ActionProblem, path: &[Vec<f64>]) -> Result<ActionValue> {
    let nodes = check_path(problem, path)?;
    Ok(match metric_action(&problem.model, &problem.grid, &nodes, None) {
        Some(value) => ActionValue { value, degenerate: false },
        None => ActionValue { value: f64::INFINITY, degenerate: true },
    })
}

/// Action together with its analytic gradient with respect to every node
/// (flattened, the start node included).
pub fn action_gradient(problem: &ActionProblem, path: &[Vec<f64>]) -> Result<(ActionValue, Vec<f64>)> {
    let nodes = check_path(problem, path)?;
    let mut g = vec![0.0; nodes.len()];
    Ok(match metric_action(&problem.model, &problem.grid, &nodes, Some(&mut g)) {
        Some(value) => (ActionValue { value, degenerate: false }, g),
        None => (ActionValue { value: f64::INFINITY, degenerate: true }, vec![f64::NAN; nodes.len()]),
    })
}

type NodeFn<'a> = Box<dyn Fn(&[f64]) -> f64 + Send + Sync + 'a>;

/// Constraint imposed on the state at a single node.
enum NodeCon<'a> {
    Pin(Vec<f64>),
    /// `level − ⟨normal, φ⟩ ≤ 0`
    Halfspace(Vec<f64>, f64),
    /// `|φ − c|² − r² ≤ 0`
    Ball(Vec<f64>, f64),
    /// `r − |φ − c| ≤ 0`
    Outside(Vec<f64>, f64),
    /// `f(φ) ≤ 0`, gradient by central differences.
    Custom(NodeFn<'a>),
}

impl NodeCon<'_> {
    fn eval(&self, s: &[f64]) -> (f64, Vec<f64>) {
        match self {
            NodeCon::Pin(_) => unreachable!("pins are handled as equalities"),
            NodeCon::Halfspace(n, level) => (level - dot(n, s), n.iter().map(|v| -v).collect()),
            NodeCon::Ball(c, r) => (dist2(s, c) - r * r, s.iter().zip(c).map(|(a, b)| 2.0 * (a - b)).collect()),
            NodeCon::Outside(c, r) => {
                let dist = dist2(s, c).sqrt();
                let g = if dist > 0.0 {
                    s.iter().zip(c).map(|(a, b)| -(a - b) / dist).collect()
                } else {
                    let mut g = vec![0.0; s.len()];
                    g[0] = -1.0;
                    g
                };
                (r - dist, g)
            }
            NodeCon::Custom(f) => {
                let mut p = s.to_vec();
                let g = (0..s.len())
                    .map(|c| {
                        let h = 1e-6 * (1.0 + s[c].abs());
                        p[c] = s[c] + h;
                        let up = f(&p);
                        p[c] = s[c] - h;
                        let dn = f(&p);
                        p[c] = s[c];
                        (up - dn) / (2.0 * h)
                    })
                    .collect();
                (f(s), g)
            }
        }
    }

    fn seed_endpoint(&self, flow_end: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            NodeCon::Pin(t) | NodeCon::Ball(t, _) => t.clone(),
            NodeCon::Halfspace(n, level) => {
                let gap = (level - dot(n, flow_end)).max(0.0) / dot(n, n);
                flow_end.iter().zip(n).map(|(f, v)| f + 1.05 * gap * v).collect()
            }
            NodeCon::Outside(c, r) => {
                let mut u: Vec<f64> = (0..c.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = dot(&u, &u).sqrt().max(1e-12);
                u.iter_mut().for_each(|v| *v *= 1.05 * r / norm);
                c.iter().zip(&u).map(|(a, b)| a + b).collect()
            }
            NodeCon::Custom(_) => flow_end.to_vec(),
        }
    }
}

struct SubProblem<'a> {
    end: usize,
    con: NodeCon<'a>,
}

struct Attempt {
    value: f64,
    nodes: Vec<f64>,
    iterations: usize,
    grad_norm: f64,
    violation: f64,
}

impl ActionProblem {
    fn event_subproblems(&self) -> Vec<SubProblem<'static>> {
        let n = self.grid.n_steps();
        let m = self.model.dim_state();
        match &self.event {
            Event::Endpoint { target, radius } if *radius == 0.0 => vec![SubProblem { end: n, con: NodeCon::Pin(target.clone()) }],
            Event::Endpoint { target, radius } => vec![SubProblem { end: n, con: NodeCon::Ball(target.clone(), *radius) }],
            Event::TerminalHalfspace { normal, level } => vec![SubProblem { end: n, con: NodeCon::Halfspace(normal.clone(), *level) }],
            Event::TubeExit { radius, direction } => {
                let mut subs = Vec::new();
                for k in 1..=n {
                    let f = &self.flow[k];
                    match direction {
                        Some(u) => subs.push(SubProblem { end: k, con: NodeCon::Halfspace(u.clone(), radius + dot(u, f)) }),
                        None if m == 1 => {
                            subs.push(SubProblem { end: k, con: NodeCon::Halfspace(vec![1.0], f[0] + radius) });
                            subs.push(SubProblem { end: k, con: NodeCon::Halfspace(vec![-1.0], radius - f[0]) });
                        }
                        None => subs.push(SubProblem { end: k, con: NodeCon::Outside(f.clone(), *radius) }),
                    }
                }
                subs
            }
        }
    }

    /// Nodes `0..=end` from a decision vector.
    fn nodes_of(&self, sub: &SubProblem, z: &[f64]) -> Vec<f64> {
        let (m, d) = (self.model.dim_state(), self.model.dim_noise());
        let mut nodes = Vec::with_capacity((sub.end + 1) * m);
        nodes.extend_from_slice(&self.x);
        if self.control_form {
            let dt = self.grid.dt();
            let mut b = vec![0.0; m];
            let mut s = vec![0.0; m * d];
            for i in 0..sub.end {
                let t = self.grid.time(i);
                let cur = nodes[i * m..(i + 1) * m].to_vec();
                self.model.drift_at(t, &cur, &mut b);
                self.model.diffusion_at(t, &cur, &mut s);
                for a in 0..m {
                    let push: f64 = (0..d).map(|q| s[a * d + q] * z[i * d + q]).sum();
                    nodes.push(cur[a] + (b[a] + push) * dt);
                }
            }
        } else {
            let free = z.len() / m;
            for i in 0..free {
                for a in 0..m {
                    let prev = nodes[i * m + a];
                    nodes.push(prev + z[i * m + a]);
                }
            }
            if let NodeCon::Pin(t) = &sub.con {
                nodes.extend_from_slice(t);
            }
        }
        nodes
    }

    fn decision_len(&self, sub: &SubProblem) -> usize {
        let (m, d) = (self.model.dim_state(), self.model.dim_noise());
        match (self.control_form, &sub.con) {
            (true, _) => sub.end * d,
            (false, NodeCon::Pin(_)) => (sub.end - 1) * m,
            (false, _) => sub.end * m,
        }
    }

    fn objective(&self, sub: &SubProblem, z: &[f64], g: &mut [f64]) -> f64 {
        let m = self.model.dim_state();
        if self.control_form {
            let dt = self.grid.dt();
            g.iter_mut().zip(z).for_each(|(gi, zi)| *gi = zi * dt);
            return 0.5 * dot(z, z) * dt;
        }
        let nodes = self.nodes_of(sub, z);
        let mut gn = vec![0.0; nodes.len()];
        match metric_action(&self.model, &self.grid, &nodes, Some(&mut gn)) {
            Some(v) => {
                let free = z.len() / m;
                let mut acc = vec![0.0; m];
                for j in (0..free).rev() {
                    for a in 0..m {
                        acc[a] += gn[(j + 1) * m + a];
                        g[j * m + a] = acc[a];
                    }
                }
                v
            }
            None => {
                g.fill(0.0);
                f64::INFINITY
            }
        }
    }

    /// Gradient of a function of `φ_end` with respect to the decision vector.
    fn pullback(&self, sub: &SubProblem, z: &[f64], nodes: &[f64], g_end: &[f64]) -> Vec<f64> {
        let (m, d) = (self.model.dim_state(), self.model.dim_noise());
        if !self.control_form {
            let mut g = vec![0.0; z.len()];
            for j in 0..z.len() / m {
                g[j * m..(j + 1) * m].copy_from_slice(g_end);
            }
            return g;
        }
        let dt = self.grid.dt();
        let mut g = vec![0.0; z.len()];
        let mut lam = g_end.to_vec();
        let mut jb = vec![0.0; m * m];
        let mut s = vec![0.0; m * d];
        let mut js = vec![0.0; m * d * m];
        for i in (0..sub.end).rev() {
            let t = self.grid.time(i);
            let cur = &nodes[i * m..(i + 1) * m];
            self.model.diffusion_at(t, cur, &mut s);
            self.model.drift_jacobian_at(t, cur, &mut jb);
            self.model.diffusion_jacobian_at(t, cur, &mut js);
            for q in 0..d {
                g[i * d + q] = dt * (0..m).map(|a| s[a * d + q] * lam[a]).sum::<f64>();
            }
            let next: Vec<f64> = (0..m)
                .map(|c| {
                    let mut acc = lam[c];
                    for a in 0..m {
                        let mut coef = jb[a * m + c];
                        for q in 0..d {
                            coef += z[i * d + q] * js[(a * d + q) * m + c];
                        }
                        acc += dt * coef * lam[a];
                    }
                    acc
                })
                .collect();
            lam = next;
        }
        g
    }

    fn initial_decision(&self, sub: &SubProblem, restart: usize, seed: u64) -> Vec<f64> {
        let (m, d) = (self.model.dim_state(), self.model.dim_noise());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let jitter = if restart == 0 { 0.0 } else { 0.3 };
        if self.control_form {
            return (0..sub.end * d).map(|_| jitter * rng.random_range(-1.0..1.0)).collect();
        }
        let flow_end = &self.flow[sub.end];
        let goal = sub.con.seed_endpoint(flow_end, &mut rng);
        let dt = self.grid.dt();
        let mut nodes: Vec<Vec<f64>> = (0..=sub.end)
            .map(|i| {
                let w = i as f64 / sub.end as f64;
                (0..m).map(|a| self.flow[i][a] + w * (goal[a] - flow_end[a])).collect()
            })
            .collect();
        let mut walk = vec![0.0; m];
        let mut bridge: Vec<Vec<f64>> = vec![walk.clone()];
        for _ in 0..sub.end {
            for v in walk.iter_mut() {
                *v += jitter * dt.sqrt() * rng.random_range(-1.7..1.7);
            }
            bridge.push(walk.clone());
        }
        for i in 1..sub.end {
            let w = i as f64 / sub.end as f64;
            for a in 0..m {
                nodes[i][a] += bridge[i][a] - w * bridge[sub.end][a];
            }
        }
        let free = self.decision_len(sub) / m;
        let mut z = Vec::with_capacity(free * m);
        for w in nodes.windows(2).take(free) {
            z.extend(w[1].iter().zip(&w[0]).take(m).map(|(b, a)| b - a));
        }
        z
    }

    fn run(&self, sub: &SubProblem, restart: usize, seed: u64) -> Attempt {
        let m = self.model.dim_state();
        let z0 = self.initial_decision(sub, restart, seed);
        let objective = |z: &[f64], g: &mut [f64]| self.objective(sub, z, g);
        let constraints = |z: &[f64]| {
            let nodes = self.nodes_of(sub, z);
            let end = &nodes[sub.end * m..(sub.end + 1) * m];
            match &sub.con {
                NodeCon::Pin(t) if self.control_form => Constraints {
                    ineq: vec![],
                    eq: (0..m)
                        .map(|a| {
                            let mut unit = vec![0.0; m];
                            unit[a] = 1.0;
                            (end[a] - t[a], self.pullback(sub, z, &nodes, &unit))
                        })
                        .collect(),
                },
                NodeCon::Pin(_) => Constraints { ineq: vec![], eq: vec![] },
                con => {
                    let (c, gc) = con.eval(end);
                    Constraints { ineq: vec![(c, self.pullback(sub, z, &nodes, &gc))], eq: vec![] }
                }
            }
        };
        let (n_ineq, n_eq) = match (&sub.con, self.control_form) {
            (NodeCon::Pin(_), true) => (0, m),
            (NodeCon::Pin(_), false) => (0, 0),
            _ => (1, 0),
        };
        let r = augmented_lagrangian(objective, constraints, z0, n_ineq, n_eq, 1e-10);
        let nodes = self.nodes_of(sub, &r.x);
        Attempt { value: r.objective, nodes, iterations: r.iterations, grad_norm: r.grad_norm, violation: r.violation }
    }

    fn solve_subproblems(&self, subs: &[SubProblem], restarts: usize, seed: u64) -> Result<RateValue> {
        if restarts == 0 {
            return domain("at least one restart is required");
        }
        let jobs: Vec<(usize, usize)> = (0..subs.len()).flat_map(|s| (0..restarts).map(move |r| (s, r))).collect();
        let attempts: Vec<Attempt> = jobs.par_iter().map(|&(s, r)| self.run(&subs[s], r, seed.wrapping_add(s as u64))).collect();
        let feasible = |a: &Attempt| a.violation <= FEASIBILITY_TOL && a.value.is_finite();
        let pick = attempts
            .iter()
            .enumerate()
            .filter(|(_, a)| feasible(a))
            .min_by(|x, y| x.1.value.total_cmp(&y.1.value).then(x.0.cmp(&y.0)))
            .map(|(i, _)| i);
        let (idx, ok) = match pick {
            Some(i) => (i, true),
            None => {
                let i = attempts.iter().enumerate().min_by(|x, y| x.1.violation.total_cmp(&y.1.violation)).map(|(i, _)| i).unwrap_or(0);
                (i, false)
            }
        };
        let best = &attempts[idx];
        let sub = &subs[jobs[idx].0];
        let m = self.model.dim_state();
        let mut path: Vec<Vec<f64>> = best.nodes.chunks(m).map(<[f64]>::to_vec).collect();
        let n = self.grid.n_steps();
        if sub.end < n {
            let rest = TimeGrid::new(self.grid.time(sub.end), self.grid.t_end(), n - sub.end)?;
            let tail = solve_deterministic_flow(&self.model, &rest, &path[sub.end])?;
            path.extend(tail.into_iter().skip(1));
        }
        Ok(RateValue {
            value: if ok { best.value.max(0.0) } else { f64::INFINITY },
            path,
            iterations: best.iterations,
            grad_norm: best.grad_norm,
            constraint_violation: best.violation,
            feasible: ok,
            hitting_node: sub.end,
        })
    }
}

/// Minimal action over paths in the problem's event, best of `restarts`
/// initializations around the deterministic flow. Infeasible events give
/// `+∞` with `feasible = false`.
pub fn minimize_rate(problem: &ActionProblem, restarts: usize, seed: u64) -> Result<RateValue> {
    let subs = problem.event_subproblems();
    problem.solve_subproblems(&subs, restarts, seed)
}

/// Event on the image path `ψ_s = u0(s, φ_s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum YEvent {
    TerminalAtLeast(f64),
    TerminalAtMost(f64),
    SupAtLeast(f64),
}

/// Contracted rate for `Y`: minimal action over `φ` whose image under the
/// decoupling field lies in the event. The problem's own event is ignored.
pub fn rate_for_y<U>(problem: &ActionProblem, u0: U, event: YEvent, restarts: usize, seed: u64) -> Result<RateValue>
where
    U: Fn(f64, &[f64]) -> f64 + Send + Sync,
{
    let n = problem.grid.n_steps();
    let u0 = Arc::new(u0);
    let at = |k: usize, sign: f64, c: f64| {
        let u = Arc::clone(&u0);
        let t = problem.grid.time(k);
        SubProblem { end: k, con: NodeCon::Custom(Box::new(move |s: &[f64]| sign * (c - u(t, s)))) }
    };
    let subs: Vec<SubProblem> = match event {
        YEvent::TerminalAtLeast(c) => vec![at(n, 1.0, c)],
        YEvent::TerminalAtMost(c) => vec![at(n, -1.0, c)],
        YEvent::SupAtLeast(c) => {
            if u0(problem.grid.t0(), &problem.x) >= c {
                return Ok(RateValue {
                    value: 0.0,
                    path: problem.flow.clone(),
                    iterations: 0,
                    grad_norm: 0.0,
                    constraint_violation: 0.0,
                    feasible: true,
                    hitting_node: 0,
                });
            }
            (1..=n).map(|k| at(k, 1.0, c)).collect()
        }
    };
    problem.solve_subproblems(&subs, restarts, seed)
}
