//! Monte Carlo hit frequencies of small-noise diffusions.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::Event;
use crate::error::{domain, Result};
use crate::forward::{solve_deterministic_flow, ForwardModel};
use crate::grid::{BrownianSource, TimeGrid};
use crate::stats::ols_fit;

pub type PathPredicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Event whose probability is estimated on simulated paths.
#[derive(Clone)]
pub enum EmpiricalEvent {
    Everything,
    Shape(Event),
    /// Arbitrary predicate on the flattened discrete path (`n+1` states).
    Custom(PathPredicate),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LdpRow {
    pub epsilon: f64,
    pub hits: usize,
    pub n_paths: usize,
    pub p_hat: f64,
    /// `ε·log p̂`, absent when there were no hits.
    pub eps_log_p: Option<f64>,
    /// Delta-method standard error of `ε·log p̂`.
    pub stderr: Option<f64>,
    pub flagged: bool,
}

const CHUNK: usize = 2048;

/// Hit frequencies of the event under `dX = b dt + √ε σ dW` for every `ε`,
/// using the same Brownian paths across `ε`.
pub fn empirical_ldp(
    model: &ForwardModel,
    x: &[f64],
    grid: &TimeGrid,
    epsilons: &[f64],
    event: &EmpiricalEvent,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<LdpRow>> {
    let (m, d) = (model.dim_state(), model.dim_noise());
    if x.len() != m {
        return domain(format!("start point must have dimension {m}"));
    }
    if n_paths == 0 {
        return domain("at least one path is required");
    }
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return domain("epsilon list must be non-empty with positive finite entries");
    }
    if let EmpiricalEvent::Shape(e) = event {
        e.validate(m)?;
    }
    let flow = solve_deterministic_flow(model, grid, x)?;
    let source = BrownianSource::new(*grid, d, seed, false)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let n_chunks = n_paths.div_ceil(CHUNK);
    let counts = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut hits = vec![0usize; epsilons.len()];
            let mut dw = vec![0.0; source.path_len()];
            let mut states = vec![0.0; (n + 1) * m];
            let mut b = vec![0.0; m];
            let mut s = vec![0.0; m * d];
            for j in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                source.fill_path(j, &mut dw);
                for (e, &eps) in epsilons.iter().enumerate() {
                    let scale = eps.sqrt();
                    states[..m].copy_from_slice(x);
                    for i in 0..n {
                        let t = grid.time(i);
                        let (head, tail) = states.split_at_mut((i + 1) * m);
                        let cur = &head[i * m..];
                        model.drift_at(t, cur, &mut b);
                        model.diffusion_at(t, cur, &mut s);
                        let inc = &dw[i * d..(i + 1) * d];
                        for a in 0..m {
                            let noise: f64 = (0..d).map(|q| s[a * d + q] * inc[q]).sum();
                            tail[a] = cur[a] + b[a] * dt + scale * noise;
                        }
                    }
                    let hit = match event {
                        EmpiricalEvent::Everything => true,
                        EmpiricalEvent::Shape(ev) => ev.contains(&states, &flow, m),
                        EmpiricalEvent::Custom(f) => f(&states),
                    };
                    hits[e] += hit as usize;
                }
            }
            hits
        })
        .reduce(|| vec![0usize; epsilons.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    Ok(epsilons
        .iter()
        .zip(&counts)
        .map(|(&eps, &hits)| {
            let p = hits as f64 / n_paths as f64;
            let (eps_log_p, stderr) =
                if hits == 0 { (None, None) } else { (Some(eps * p.ln()), Some(eps * ((1.0 - p) / (n_paths as f64 * p)).sqrt())) };
            LdpRow { epsilon: eps, hits, n_paths, p_hat: p, eps_log_p, stderr, flagged: hits == 0 }
        })
        .collect())
}

/// Intercept at `ε = 0` of a least-squares line through the unflagged rows.
pub fn extrapolate_to_zero(rows: &[LdpRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.eps_log_p.map(|v| (r.epsilon, v))).collect();
    if pts.len() < 2 {
        return None;
    }
    ols_fit(&pts).map(|(_, intercept)| intercept)
}
