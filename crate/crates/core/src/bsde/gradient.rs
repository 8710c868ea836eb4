//! Differentiated system: `∇ₓX` by Euler and the linear backward equation
//! for `(∇ₓY, ∇ₓZ)` with coefficients frozen at a base solution.

use rayon::prelude::*;

use super::{at_step, finite_or_error, FbsdeSolution, SolverConfig};
use crate::drivers::{Driver, TerminalCondition};
use crate::error::{domain, Result};
use crate::par::{chunked_sum, mean_stderr};
use crate::regression::{Design, RegressionBasis};

#[derive(Clone, Debug)]
pub struct GradientSolution {
    n_paths: usize,
    n_steps: usize,
    m: usize,
    d: usize,
    nabla_x: Vec<f64>,
    nabla_y: Vec<f64>,
    nabla_z: Vec<f64>,
    nabla_y0: Vec<f64>,
    nabla_y0_stderr: Vec<f64>,
}

impl GradientSolution {
    /// `∇ₓXᵢ` on one path, row-major `m × m`.
    pub fn nabla_x(&self, i: usize, path: usize) -> &[f64] {
        let w = self.m * self.m;
        let base = (i * self.n_paths + path) * w;
        &self.nabla_x[base..base + w]
    }

    /// `∇ₓYᵢ` on one path (length `m`).
    pub fn nabla_y(&self, i: usize, path: usize) -> &[f64] {
        let base = (i * self.n_paths + path) * self.m;
        &self.nabla_y[base..base + self.m]
    }

    /// `∇ₓZᵢ` on one path, row-major `d × m`.
    pub fn nabla_z(&self, i: usize, path: usize) -> &[f64] {
        let w = self.d * self.m;
        let base = (i * self.n_paths + path) * w;
        &self.nabla_z[base..base + w]
    }

    /// Path average of `∇ₓY` at the initial time.
    pub fn nabla_y0(&self) -> &[f64] {
        &self.nabla_y0
    }

    pub fn nabla_y0_stderr(&self) -> &[f64] {
        &self.nabla_y0_stderr
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

/// Solves the differentiated FBSDE around `base`. Regressions condition on
/// `(Xᵢ, ∇ₓXᵢ)`; coordinates of `∇ₓX` that do not vary drop out of the basis.
pub fn solve_gradient(
    base: &FbsdeSolution,
    drv: &Driver,
    tc: &TerminalCondition,
    basis: &RegressionBasis,
    cfg: &SolverConfig,
) -> Result<GradientSolution> {
    let fwd = base.forward();
    let model = fwd.model();
    let (mp, n, m, d) = (fwd.n_paths(), fwd.grid().n_steps(), fwd.dim_state(), fwd.dim_noise());
    if basis.dim != m {
        return domain(format!("regression basis has dimension {}, state has {m}", basis.dim));
    }
    let grid = *fwd.grid();
    let dt = grid.dt();
    let ens = fwd.ensemble();
    let scale = fwd.epsilon().sqrt();
    let mm = m * m;

    let mut nabla_x = vec![0.0; (n + 1) * mp * mm];
    {
        let mut per_path = vec![0.0; mp * (n + 1) * mm];
        per_path.par_chunks_mut((n + 1) * mm).enumerate().for_each(|(j, g)| {
            for a in 0..m {
                g[a * m + a] = 1.0;
            }
            let mut jb = vec![0.0; mm];
            let mut js = vec![0.0; m * d * m];
            for i in 0..n {
                let t = grid.time(i);
                let x = fwd.state(j, i);
                model.drift_jacobian_at(t, x, &mut jb);
                if scale > 0.0 {
                    model.diffusion_jacobian_at(t, x, &mut js);
                }
                let dw = ens.increment(j, i);
                let (cur, next) = g[i * mm..(i + 2) * mm].split_at_mut(mm);
                for a in 0..m {
                    for c in 0..m {
                        let mut v = cur[a * m + c];
                        for e in 0..m {
                            let mut coef = jb[a * m + e] * dt;
                            if scale > 0.0 {
                                for q in 0..d {
                                    coef += scale * js[(a * d + q) * m + e] * dw[q];
                                }
                            }
                            v += coef * cur[e * m + c];
                        }
                        next[a * m + c] = v;
                    }
                }
            }
        });
        for i in 0..=n {
            for j in 0..mp {
                let src = &per_path[(j * (n + 1) + i) * mm..(j * (n + 1) + i + 1) * mm];
                nabla_x[(i * mp + j) * mm..(i * mp + j + 1) * mm].copy_from_slice(src);
            }
        }
    }
    finite_or_error(&nabla_x, (n + 1) * mm, n)?;

    let aug = RegressionBasis { family: basis.family, dim: m + mm };
    let aug_cloud = |i: usize| -> Vec<f64> {
        let mut out = vec![0.0; mp * (m + mm)];
        out.par_chunks_mut(m + mm).enumerate().for_each(|(j, o)| {
            o[..m].copy_from_slice(fwd.state(j, i));
            o[m..].copy_from_slice(&nabla_x[(i * mp + j) * mm..(i * mp + j + 1) * mm]);
        });
        out
    };

    let mut nabla_y = vec![0.0; (n + 1) * mp * m];
    let mut nabla_z = vec![0.0; n * mp * d * m];
    nabla_y[n * mp * m..].par_chunks_mut(m).enumerate().for_each(|(j, out)| {
        let mut gg = vec![0.0; m];
        tc.grad(fwd.state(j, n), &mut gg);
        let gx = &nabla_x[(n * mp + j) * mm..(n * mp + j + 1) * mm];
        for c in 0..m {
            out[c] = (0..m).map(|a| gg[a] * gx[a * m + c]).sum();
        }
    });
    finite_or_error(&nabla_y[n * mp * m..], m, n)?;
    let mut fsum = vec![0.0; mp * m];

    for i in (0..n).rev() {
        let t = grid.time(i);
        let partials: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..mp)
            .into_par_iter()
            .map(|j| {
                let (mut fx, mut fz) = (vec![0.0; m], vec![0.0; d]);
                let fy = drv.partials(t, fwd.state(j, i), base.y_at(i, j), base.z_at(i, j), &mut fx, &mut fz);
                (fy, fx, fz)
            })
            .collect();
        let design = Design::new(&aug, &aug_cloud(i)).map_err(|e| at_step(e, i))?;
        let (head, tail) = nabla_y.split_at_mut((i + 1) * mp * m);
        let y_next = &tail[..mp * m];
        let y_cur = &mut head[i * mp * m..];
        let z_i = &mut nabla_z[i * mp * d * m..(i + 1) * mp * d * m];
        let gx_i = &nabla_x[i * mp * mm..(i + 1) * mp * mm];
        for c in 0..m {
            let c_hat = design.solve(|j| y_next[j * m + c]).map_err(|e| at_step(e, i))?;
            let y_hat: Vec<f64> = (0..mp).into_par_iter().map(|j| design.fitted(&c_hat, j)).collect();
            for q in 0..d {
                let cz = design.solve(|j| (y_next[j * m + c] - y_hat[j]) * ens.increment(j, i)[q] / dt).map_err(|e| at_step(e, i))?;
                z_i.par_chunks_mut(d * m).enumerate().for_each(|(j, zz)| zz[q * m + c] = design.fitted(&cz, j));
            }
            let z_fixed: &[f64] = z_i;
            let lin_f = |j: usize, yv: f64| -> f64 {
                let (fy, fx, fz) = &partials[j];
                let gx = &gx_i[j * mm..(j + 1) * mm];
                let x_part: f64 = (0..m).map(|a| fx[a] * gx[a * m + c]).sum();
                let z_part: f64 = (0..d).map(|q| fz[q] * z_fixed[(j * d + q) * m + c]).sum();
                x_part + fy * yv + z_part
            };
            let mut cur = y_hat;
            for _ in 0..cfg.picard_iters.max(1) {
                let cc = design.solve(|j| y_next[j * m + c] + dt * lin_f(j, cur[j])).map_err(|e| at_step(e, i))?;
                cur = (0..mp).into_par_iter().map(|j| design.fitted(&cc, j)).collect();
            }
            for j in 0..mp {
                y_cur[j * m + c] = cur[j];
                fsum[j * m + c] += dt * lin_f(j, cur[j]);
            }
        }
        finite_or_error(y_cur, m, i)?;
        finite_or_error(z_i, d * m, i)?;
    }

    let mut nabla_y0 = vec![0.0; m];
    let mut nabla_y0_stderr = vec![0.0; m];
    for c in 0..m {
        nabla_y0[c] = chunked_sum(mp, 1, |j, acc| acc[0] += nabla_y[j * m + c])[0] / mp as f64;
        nabla_y0_stderr[c] = mean_stderr(mp, |j| nabla_y[(n * mp + j) * m + c] + fsum[j * m + c]).1;
    }
    Ok(GradientSolution { n_paths: mp, n_steps: n, m, d, nabla_x, nabla_y, nabla_z, nabla_y0, nabla_y0_stderr })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bsde::solve_bsde;
    use crate::forward::{simulate_forward, ForwardModel};
    use crate::grid::{make_grid, PathEnsemble};

    fn setup(model: &ForwardModel, x0: f64, paths: usize, seed: u64) -> Arc<crate::forward::ForwardPaths> {
        let ens = Arc::new(PathEnsemble::sample(make_grid(0.0, 1.0, 25).unwrap(), paths, 1, seed).unwrap());
        Arc::new(simulate_forward(model, &ens, &[x0], 1.0).unwrap())
    }

    #[test]
    fn constant_coefficients_keep_identity_jacobian() {
        let model = ForwardModel::constant(vec![0.3], vec![1.0], 1);
        let fwd = setup(&model, 0.0, 500, 1);
        let basis = RegressionBasis::polynomial(3, 1);
        let tc = TerminalCondition::cosine(1);
        let base = solve_bsde(&fwd, &Driver::zero(), &tc, &basis, &SolverConfig::default()).unwrap();
        let g = solve_gradient(&base, &Driver::zero(), &tc, &basis, &SolverConfig::default()).unwrap();
        for i in 0..=25 {
            for j in (0..500).step_by(50) {
                assert_eq!(g.nabla_x(i, j), &[1.0]);
            }
        }
    }

    #[test]
    fn heat_gradient_matches_closed_form() {
        let model = ForwardModel::brownian(1, 1.0);
        let basis = RegressionBasis::polynomial(4, 1);
        let tc = TerminalCondition::cosine(1);
        for (x0, want) in [(0.0, 0.0), (1.0, -(-0.5f64).exp() * 1f64.sin())] {
            let fwd = setup(&model, x0, 50_000, 2);
            let base = solve_bsde(&fwd, &Driver::zero(), &tc, &basis, &SolverConfig::default()).unwrap();
            let g = solve_gradient(&base, &Driver::zero(), &tc, &basis, &SolverConfig::default()).unwrap();
            assert!((g.nabla_y0()[0] - want).abs() < 0.02, "x0 = {x0}: {} vs {want}", g.nabla_y0()[0]);
        }
    }

    #[test]
    fn state_dependent_jacobian_follows_linear_equation() {
        // b = -x: ∇X_t = e^{-t} on every path
        let model = ForwardModel::mean_reverting(1.0, 1.0);
        let fwd = setup(&model, 0.5, 200, 3);
        let basis = RegressionBasis::polynomial(3, 1);
        let tc = TerminalCondition::cosine(1);
        let base = solve_bsde(&fwd, &Driver::zero(), &tc, &basis, &SolverConfig::default()).unwrap();
        let g = solve_gradient(&base, &Driver::zero(), &tc, &basis, &SolverConfig::default()).unwrap();
        let want = (1.0f64 - 1.0 / 25.0).powi(25);
        assert!((g.nabla_x(25, 7)[0] - want).abs() < 1e-12);
    }
}
