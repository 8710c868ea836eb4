//! Limited-memory BFGS with Armijo backtracking, and a PHR augmented
//! Lagrangian wrapper for a few smooth constraints.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which returns the value and writes the gradient.
pub(crate) fn lbfgs<F>(mut f: F, x0: Vec<f64>, max_iter: usize, gtol: f64) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const MEMORY: usize = 10;
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;
    let mut stalls = 0;
    while iterations < max_iter && fx.is_finite() && inf_norm(&g) > gtol {
        iterations += 1;
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        let gamma = match hist.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / inf_norm(&g).max(1.0),
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                    if hist.len() == MEMORY {
                        hist.pop_front();
                    }
                    hist.push_back((s, y, 1.0 / sy));
                }
                let decrease = fx - f_new;
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                stalls = if decrease <= 1e-16 * fx.abs().max(1e-300) { stalls + 1 } else { 0 };
                fx = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || stalls >= 5 {
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    Minimum { x, iterations, grad_norm }
}

/// Constraint values and gradients at `x`: inequalities `c(x) ≤ 0` and
/// equalities `h(x) = 0`, all returned as `(value, gradient)`.
pub(crate) struct Constraints {
    pub ineq: Vec<(f64, Vec<f64>)>,
    pub eq: Vec<(f64, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub(crate) struct ConstrainedMinimum {
    pub x: Vec<f64>,
    pub objective: f64,
    pub violation: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// PHR augmented Lagrangian. `objective` returns `f` and writes its gradient;
/// `constraints` evaluates every constraint at a point.
pub(crate) fn augmented_lagrangian<F, C>(
    objective: F,
    constraints: C,
    x0: Vec<f64>,
    n_ineq: usize,
    n_eq: usize,
    tol: f64,
) -> ConstrainedMinimum
where
    F: Fn(&[f64], &mut [f64]) -> f64,
    C: Fn(&[f64]) -> Constraints,
{
    let n = x0.len();
    let mut mu = vec![0.0; n_ineq];
    let mut lam = vec![0.0; n_eq];
    let mut rho = 10.0;
    let mut x = x0;
    let mut iterations = 0;
    let mut grad_norm = 0.0;
    let mut last_violation = f64::INFINITY;
    let violation_of =
        |c: &Constraints| c.ineq.iter().map(|(v, _)| v.max(0.0)).chain(c.eq.iter().map(|(v, _)| v.abs())).fold(0.0, f64::max);
    for _ in 0..40 {
        let (mu_s, lam_s, rho_s) = (mu.clone(), lam.clone(), rho);
        let merit = |z: &[f64], g: &mut [f64]| -> f64 {
            let mut val = objective(z, g);
            let cs = constraints(z);
            for (k, (c, gc)) in cs.ineq.iter().enumerate() {
                let t = mu_s[k] + rho_s * c;
                if t > 0.0 {
                    val += (t * t - mu_s[k] * mu_s[k]) / (2.0 * rho_s);
                    g.iter_mut().zip(gc).for_each(|(gi, ci)| *gi += t * ci);
                } else {
                    val -= mu_s[k] * mu_s[k] / (2.0 * rho_s);
                }
            }
            for (k, (h, gh)) in cs.eq.iter().enumerate() {
                val += lam_s[k] * h + 0.5 * rho_s * h * h;
                let w = lam_s[k] + rho_s * h;
                g.iter_mut().zip(gh).for_each(|(gi, hi)| *gi += w * hi);
            }
            val
        };
        let m = lbfgs(merit, x, 2000, 1e-11);
        iterations += m.iterations;
        grad_norm = m.grad_norm;
        x = m.x;
        let cs = constraints(&x);
        let violation = violation_of(&cs);
        for (k, (c, _)) in cs.ineq.iter().enumerate() {
            mu[k] = (mu[k] + rho * c).max(0.0);
        }
        for (k, (h, _)) in cs.eq.iter().enumerate() {
            lam[k] += rho * h;
        }
        if violation <= tol {
            let mut g = vec![0.0; n];
            let objective_value = objective(&x, &mut g);
            return ConstrainedMinimum { x, objective: objective_value, violation, iterations, grad_norm };
        }
        if violation > 0.25 * last_violation {
            rho = (rho * 10.0).min(1e12);
        }
        last_violation = violation;
    }
    let mut g = vec![0.0; n];
    let objective_value = objective(&x, &mut g);
    let violation = violation_of(&constraints(&x));
    ConstrainedMinimum { x, objective: objective_value, violation, iterations, grad_norm }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let m = lbfgs(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            vec![-1.2, 1.0],
            5000,
            1e-10,
        );
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let n = 50;
        let m = lbfgs(
            |x, g| {
                let mut f = 0.0;
                for i in 0..n {
                    let w = 1.0 + 1000.0 * i as f64 / n as f64;
                    f += 0.5 * w * (x[i] - 1.0).powi(2);
                    g[i] = w * (x[i] - 1.0);
                }
                f
            },
            vec![0.0; n],
            5000,
            1e-10,
        );
        assert!(m.x.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn halfspace_projection() {
        // min |x|²/2 s.t. x0 + x1 ≥ 2 → (1, 1), value 1
        let r = augmented_lagrangian(
            |x, g| {
                g.copy_from_slice(x);
                0.5 * (x[0] * x[0] + x[1] * x[1])
            },
            |x| Constraints { ineq: vec![(2.0 - x[0] - x[1], vec![-1.0, -1.0])], eq: vec![] },
            vec![0.0, 0.0],
            1,
            0,
            1e-10,
        );
        assert!((r.objective - 1.0).abs() < 1e-8, "{r:?}");
        assert!(r.violation <= 1e-10);
    }

    #[test]
    fn equality_and_inactive_inequality() {
        let r = augmented_lagrangian(
            |x, g| {
                g[0] = 2.0 * (x[0] - 3.0);
                g[1] = 2.0 * x[1];
                (x[0] - 3.0).powi(2) + x[1] * x[1]
            },
            |x| Constraints { ineq: vec![(x[0] - 10.0, vec![1.0, 0.0])], eq: vec![(x[1] - 1.0, vec![0.0, 1.0])] },
            vec![0.0, 0.0],
            1,
            1,
            1e-10,
        );
        assert!((r.x[0] - 3.0).abs() < 1e-7 && (r.x[1] - 1.0).abs() < 1e-9);
    }
}
