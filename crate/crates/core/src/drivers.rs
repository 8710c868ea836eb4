//! BSDE drivers `f(t, x, y, z)` with declared growth constants, statistical
//! checks of the growth and local-Lipschitz conditions, the truncation
//! family `h_n`, and the linearizing transform `Φ` for `g(y)|z|²` drivers.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, LabError, Result};
use crate::quad;

/// `f(t, x, y, z)`.
pub type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;

/// Partial derivatives of a driver. Fills `∂ₓf` and `∂_z f`, returns `∂_y f`.
pub type DriverPartialsFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], &mut [f64], &mut [f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct Driver {
    f: DriverFn,
    partials: Option<DriverPartialsFn>,
    k_const: f64,
    k_pow: u32,
    gamma: f64,
    kind: String,
    dim_state: usize,
    dim_noise: usize,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("kind", &self.kind)
            .field("K", &self.k_const)
            .field("k", &self.k_pow)
            .field("gamma", &self.gamma)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .finish()
    }
}

impl Driver {
    /// Custom driver with declared constants `K`, `k ≥ 1` and `γ`.
    pub fn new<F>(kind: impl Into<String>, k_const: f64, k_pow: u32, gamma: f64, f: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), partials: None, k_const, k_pow: k_pow.max(1), gamma, kind: kind.into(), dim_state: 1, dim_noise: 1 }
    }

    pub fn with_partials<P>(mut self, p: P) -> Self
    where
        P: Fn(f64, &[f64], f64, &[f64], &mut [f64], &mut [f64]) -> f64 + Send + Sync + 'static,
    {
        self.partials = Some(Arc::new(p));
        self
    }

    /// State and noise dimensions used when the driver is probed.
    pub fn with_dims(mut self, dim_state: usize, dim_noise: usize) -> Self {
        self.dim_state = dim_state.max(1);
        self.dim_noise = dim_noise.max(1);
        self
    }

    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.f)(t, x, y, z)
    }

    /// `∂_y f`, with `∂ₓf` and `∂_z f` written into `dx` and `dz`. Central
    /// differences when no analytic partials were supplied.
    pub fn partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], dx: &mut [f64], dz: &mut [f64]) -> f64 {
        if let Some(p) = &self.partials {
            return p(t, x, y, z, dx, dz);
        }
        let mut xs = x.to_vec();
        for c in 0..x.len() {
            let h = 1e-6 * (1.0 + x[c].abs());
            xs[c] = x[c] + h;
            let fp = self.eval(t, &xs, y, z);
            xs[c] = x[c] - h;
            let fm = self.eval(t, &xs, y, z);
            xs[c] = x[c];
            dx[c] = (fp - fm) / (2.0 * h);
        }
        let mut zs = z.to_vec();
        for q in 0..z.len() {
            let h = 1e-6 * (1.0 + z[q].abs());
            zs[q] = z[q] + h;
            let fp = self.eval(t, x, y, &zs);
            zs[q] = z[q] - h;
            let fm = self.eval(t, x, y, &zs);
            zs[q] = z[q];
            dz[q] = (fp - fm) / (2.0 * h);
        }
        let h = 1e-6 * (1.0 + y.abs());
        (self.eval(t, x, y + h, z) - self.eval(t, x, y - h, z)) / (2.0 * h)
    }

    pub fn has_analytic_partials(&self) -> bool {
        self.partials.is_some()
    }

    pub fn k_const(&self) -> f64 {
        self.k_const
    }

    pub fn k_pow(&self) -> u32 {
        self.k_pow
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn zero() -> Self {
        Self::new("zero", 0.0, 1, 0.0, |_, _, _, _| 0.0).with_partials(|_, _, _, _, dx, dz| {
            dx.fill(0.0);
            dz.fill(0.0);
            0.0
        })
    }

    /// `ν·y·⟨1, z⟩`.
    pub fn burgers_cross(nu: f64, dim_noise: usize) -> Self {
        let k = nu.abs() * (dim_noise as f64).sqrt();
        Self::new("burgers", k, 1, 0.0, move |_, _, y, z| nu * y * z.iter().sum::<f64>())
            .with_partials(move |_, _, y, z, dx, dz| {
                dx.fill(0.0);
                dz.fill(nu * y);
                nu * z.iter().sum::<f64>()
            })
            .with_dims(1, dim_noise)
    }

    /// `c·y·|z|²`.
    pub fn cross_quadratic(coef: f64) -> Self {
        Self::new("cross_quadratic", coef.abs(), 1, 1.0, move |_, _, y, z| coef * y * sq(z)).with_partials(move |_, _, y, z, dx, dz| {
            dx.fill(0.0);
            for (d, zq) in dz.iter_mut().zip(z) {
                *d = 2.0 * coef * y * zq;
            }
            coef * sq(z)
        })
    }

    /// `⟨θ, z⟩ + γ|z|²`.
    pub fn drifted_quadratic(theta: Vec<f64>, gamma: f64) -> Self {
        let d = theta.len();
        let k = norm(&theta).max(gamma.abs());
        let th = theta.clone();
        Self::new("drifted_quadratic", k, 1, 0.0, move |_, _, _, z| dot(&theta, z) + gamma * sq(z))
            .with_partials(move |_, _, _, z, dx, dz| {
                dx.fill(0.0);
                for q in 0..dz.len() {
                    dz[q] = th[q] + 2.0 * gamma * z[q];
                }
                0.0
            })
            .with_dims(1, d)
    }

    /// `−(a·y⁺ − b·y⁻)|z|²`, `0 < a < b`.
    pub fn subadditive(a: f64, b: f64) -> Self {
        let phi = move |y: f64| a * y.max(0.0) - b * (-y).max(0.0);
        Self::new("subadditive", a.abs().max(b.abs()), 1, 1.0, move |_, _, y, z| -phi(y) * sq(z)).with_partials(
            move |_, _, y, z, dx, dz| {
                dx.fill(0.0);
                for (d, zq) in dz.iter_mut().zip(z) {
                    *d = -2.0 * phi(y) * zq;
                }
                let slope = if y >= 0.0 { a } else { b };
                -slope * sq(z)
            },
        )
    }

    /// `(γ/2)|z|²`.
    pub fn entropic(gamma: f64) -> Self {
        Self::new("entropic", 0.5 * gamma.abs(), 1, 0.0, move |_, _, _, z| 0.5 * gamma * sq(z)).with_partials(move |_, _, _, z, dx, dz| {
            dx.fill(0.0);
            for (d, zq) in dz.iter_mut().zip(z) {
                *d = gamma * zq;
            }
            0.0
        })
    }

    /// `g(y)·|z|²` for a bounded-on-compacts coefficient `g` with declared
    /// constants.
    pub fn quadratic_coef<G>(g: G, k_const: f64, k_pow: u32, gamma: f64) -> Self
    where
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new("quadratic_coef", k_const, k_pow, gamma, move |_, _, y, z| g(y) * sq(z))
    }

    /// `−λy`.
    pub fn linear_damping(lambda: f64) -> Self {
        Self::new("linear_damping", lambda.abs(), 1, 0.0, move |_, _, y, _| -lambda * y).with_partials(move |_, _, _, _, dx, dz| {
            dx.fill(0.0);
            dz.fill(0.0);
            -lambda
        })
    }

    /// `−(a/√(2ε))·y·⟨1, z⟩ − λy`, the viscous Burgers driver with damping.
    pub fn burgers_damping(a: f64, lambda: f64, epsilon: f64) -> Self {
        let c = a / (2.0 * epsilon).sqrt();
        Self::new("burgers_damping", c.abs().max(lambda.abs()), 1, 0.0, move |_, _, y, z| -c * y * z.iter().sum::<f64>() - lambda * y)
            .with_partials(move |_, _, y, z, dx, dz| {
                dx.fill(0.0);
                dz.fill(-c * y);
                -c * z.iter().sum::<f64>() - lambda
            })
    }

    /// `−λy + sin z₁`, globally Lipschitz.
    pub fn lipschitz_example(lambda: f64) -> Self {
        Self::new("lipschitz_example", lambda.abs().max(1.0), 1, 0.0, move |_, _, y, z| -lambda * y + z[0].sin()).with_partials(
            move |_, _, _, z, dx, dz| {
                dx.fill(0.0);
                dz.fill(0.0);
                dz[0] = z[0].cos();
                -lambda
            },
        )
    }

    /// `f + c`.
    pub fn shifted(&self, c: f64) -> Self {
        let inner = self.clone();
        let mut out = Self::new(format!("{}+{c}", self.kind), self.k_const + c.abs(), self.k_pow, self.gamma, move |t, x, y, z| {
            inner.eval(t, x, y, z) + c
        });
        if self.partials.is_some() {
            let inner = self.clone();
            out = out.with_partials(move |t, x, y, z, dx, dz| inner.partials(t, x, y, z, dx, dz));
        }
        out.with_dims(self.dim_state, self.dim_noise)
    }

    /// Built-in driver by kind tag. Unknown kinds or parameter keys are
    /// rejected.
    pub fn from_kind(kind: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let allowed: &[&str] = match kind {
            "zero" => &[],
            "burgers" => &["nu"],
            "cross_quadratic" => &["coef"],
            "drifted_quadratic" => &["theta", "gamma"],
            "subadditive" => &["a", "b"],
            "entropic" => &["gamma"],
            "linear_damping" => &["lambda"],
            "burgers_damping" => &["a", "lambda", "epsilon"],
            "lipschitz_example" => &["lambda"],
            other => return domain(format!("unknown driver kind `{other}`")),
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return domain(format!("driver `{kind}` has no parameter `{bad}`"));
        }
        let get = |key: &str, default: f64| -> Result<f64> {
            let v = params.get(key).copied().unwrap_or(default);
            if v.is_finite() {
                Ok(v)
            } else {
                domain(format!("driver parameter `{key}` must be finite"))
            }
        };
        Ok(match kind {
            "zero" => Self::zero(),
            "burgers" => Self::burgers_cross(get("nu", 1.0)?, 1),
            "cross_quadratic" => Self::cross_quadratic(get("coef", 1.0)?),
            "drifted_quadratic" => Self::drifted_quadratic(vec![get("theta", 0.0)?], get("gamma", 0.5)?),
            "subadditive" => {
                let (a, b) = (get("a", 0.5)?, get("b", 1.0)?);
                if !(0.0 < a && a < b) {
                    return domain(format!("subadditive driver needs 0 < a < b, got a = {a}, b = {b}"));
                }
                Self::subadditive(a, b)
            }
            "entropic" => Self::entropic(get("gamma", 1.0)?),
            "linear_damping" => Self::linear_damping(get("lambda", 1.0)?),
            "burgers_damping" => {
                let eps = get("epsilon", 0.5)?;
                if !(eps > 0.0) {
                    return domain(format!("burgers_damping needs epsilon > 0, got {eps}"));
                }
                Self::burgers_damping(get("a", 1.0)?, get("lambda", 1.0)?, eps)
            }
            _ => Self::lipschitz_example(get("lambda", 1.0)?),
        })
    }
}

fn sq(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum()
}

fn norm(z: &[f64]) -> f64 {
    sq(z).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A probe location `(t, x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriverValidation {
    /// `max |f| / growth bound` over the cloud.
    pub growth_ratio: f64,
    pub growth_witness: ProbePoint,
    /// `max |Δf| / local-Lipschitz bound` over random pairs.
    pub lipschitz_ratio: f64,
    pub lipschitz_witness: (ProbePoint, ProbePoint),
    pub passed: bool,
}

const VALIDATION_SLACK: f64 = 1.05;

fn growth_bound(drv: &Driver, y: f64, z: &[f64]) -> f64 {
    let yk = y.abs().powi(drv.k_pow as i32);
    let nz = norm(z);
    drv.k_const * (1.0 + y.abs() + (1.0 + yk) * nz + (1.0 + drv.gamma * yk) * nz * nz)
}

fn lipschitz_bound(drv: &Driver, y: f64, z: &[f64], y2: f64, z2: &[f64]) -> f64 {
    let k = drv.k_pow as i32;
    let g = drv.gamma;
    let (nz, nz2) = (norm(z), norm(z2));
    let dz = z.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let dy = (y - y2).abs();
    let ykm = y.abs().powi(k - 1) + y2.abs().powi(k - 1);
    let yk = y.abs().powi(k) + y2.abs().powi(k);
    drv.k_const * ((1.0 + (1.0 + g * nz + g * nz2) * ykm * (nz + nz2)) * dy + (1.0 + yk + (1.0 + g * yk) * (nz + nz2)) * dz)
}

fn sample_scalar(rng: &mut ChaCha8Rng) -> f64 {
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    if rng.random::<f64>() < 0.7 {
        sign * 5.0 * rng.random::<f64>()
    } else {
        sign * (rng.random::<f64>() * 1e3f64.ln()).exp()
    }
}

fn sample_point(drv: &Driver, rng: &mut ChaCha8Rng) -> ProbePoint {
    ProbePoint {
        t: rng.random(),
        x: (0..drv.dim_state).map(|_| 6.0 * rng.random::<f64>() - 3.0).collect(),
        y: sample_scalar(rng),
        z: (0..drv.dim_noise).map(|_| sample_scalar(rng)).collect(),
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if !num.is_finite() {
        f64::INFINITY
    } else if num == 0.0 {
        0.0
    } else if den <= 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Probes the growth and local-Lipschitz bounds over a randomized cloud.
/// Never errors; a violation yields a failing report with the witness.
pub fn validate_driver(drv: &Driver, cloud_size: usize, seed: u64) -> DriverValidation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cloud_size.max(1);
    let mut best_g = (f64::NEG_INFINITY, None);
    let mut best_l = (f64::NEG_INFINITY, None);
    for _ in 0..n {
        let p = sample_point(drv, &mut rng);
        let fp = drv.eval(p.t, &p.x, p.y, &p.z);
        let rg = ratio(fp.abs(), growth_bound(drv, p.y, &p.z));
        let scale = if rng.random::<bool>() { 1.0 } else { 1e-3 };
        let mut q = p.clone();
        q.y += scale * (2.0 * rng.random::<f64>() - 1.0);
        for zq in q.z.iter_mut() {
            *zq += scale * (2.0 * rng.random::<f64>() - 1.0);
        }
        let fq = drv.eval(q.t, &q.x, q.y, &q.z);
        let rl = ratio((fp - fq).abs(), lipschitz_bound(drv, p.y, &p.z, q.y, &q.z));
        if rg > best_g.0 {
            best_g = (rg, Some(p.clone()));
        }
        if rl > best_l.0 {
            best_l = (rl, Some((p, q)));
        }
    }
    let growth_ratio = best_g.0;
    let lipschitz_ratio = best_l.0;
    DriverValidation {
        growth_ratio,
        growth_witness: best_g.1.expect("cloud is nonempty"),
        lipschitz_ratio,
        lipschitz_witness: best_l.1.expect("cloud is nonempty"),
        passed: growth_ratio <= VALIDATION_SLACK && lipschitz_ratio <= VALIDATION_SLACK,
    }
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Terminal data `ξ = g(X_T)` with sup bound `M` and Lipschitz constant.
#[derive(Clone)]
pub struct TerminalCondition {
    g: ScalarFn,
    grad: Option<GradFn>,
    bound: f64,
    lipschitz: f64,
    dim: usize,
    label: String,
}

impl fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalCondition")
            .field("label", &self.label)
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .field("dim", &self.dim)
            .finish()
    }
}

impl TerminalCondition {
    pub fn new<G>(label: impl Into<String>, dim: usize, bound: f64, lipschitz: f64, g: G) -> Self
    where
        G: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { g: Arc::new(g), grad: None, bound, lipschitz, dim, label: label.into() }
    }

    pub fn with_grad<D>(mut self, grad: D) -> Self
    where
        D: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn constant(c: f64, dim: usize) -> Self {
        Self::new("constant", dim, c.abs(), 0.0, move |_| c).with_grad(|_, out| out.fill(0.0))
    }

    /// `cos x₁`.
    pub fn cosine(dim: usize) -> Self {
        Self::new("cos", dim, 1.0, 1.0, |x| x[0].cos()).with_grad(|x, out| {
            out.fill(0.0);
            out[0] = -x[0].sin();
        })
    }

    /// `sin x₁`.
    pub fn sine(dim: usize) -> Self {
        Self::new("sin", dim, 1.0, 1.0, |x| x[0].sin()).with_grad(|x, out| {
            out.fill(0.0);
            out[0] = x[0].cos();
        })
    }

    /// `tanh x₁`.
    pub fn tanh(dim: usize) -> Self {
        Self::new("tanh", dim, 1.0, 1.0, |x| x[0].tanh()).with_grad(|x, out| {
            out.fill(0.0);
            out[0] = 1.0 / x[0].cosh().powi(2);
        })
    }

    /// `g + δ`.
    pub fn shifted(&self, delta: f64) -> Self {
        let g = Arc::clone(&self.g);
        Self {
            g: Arc::new(move |x: &[f64]| g(x) + delta),
            grad: self.grad.clone(),
            bound: self.bound + delta.abs(),
            lipschitz: self.lipschitz,
            dim: self.dim,
            label: format!("{}{delta:+}", self.label),
        }
    }

    pub fn from_kind(kind: &str, params: &BTreeMap<String, f64>, dim: usize) -> Result<Self> {
        let allowed: &[&str] = match kind {
            "constant" => &["c"],
            "cos" | "sin" | "tanh" => &["shift"],
            other => return domain(format!("unknown terminal kind `{other}`")),
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return domain(format!("terminal `{kind}` has no parameter `{bad}`"));
        }
        let tc = match kind {
            "constant" => Self::constant(params.get("c").copied().unwrap_or(1.0), dim),
            "cos" => Self::cosine(dim),
            "sin" => Self::sine(dim),
            _ => Self::tanh(dim),
        };
        Ok(match params.get("shift") {
            Some(&s) if s != 0.0 => tc.shifted(s),
            _ => tc,
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.g)(x)
    }

    /// `∇g`, analytic if supplied, else central differences.
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        if let Some(gr) = &self.grad {
            return gr(x, out);
        }
        let mut xs = x.to_vec();
        for c in 0..x.len() {
            let h = 1e-6 * (1.0 + x[c].abs());
            xs[c] = x[c] + h;
            let fp = self.eval(&xs);
            xs[c] = x[c] - h;
            let fm = self.eval(&xs);
            xs[c] = x[c];
            out[c] = (fp - fm) / (2.0 * h);
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Checks `|g| ≤ M` and the Lipschitz constant on a random cloud.
    pub fn probe(&self, cloud_size: usize, seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slack = VALIDATION_SLACK;
        for _ in 0..cloud_size.max(1) {
            let x: Vec<f64> = (0..self.dim).map(|_| sample_scalar(&mut rng)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + 2.0 * rng.random::<f64>() - 1.0).collect();
            let (gx, gy) = (self.eval(&x), self.eval(&y));
            if !(gx.abs() <= self.bound * slack) {
                return false;
            }
            let d = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if d > 0.0 && (gx - gy).abs() > self.lipschitz * slack * d {
                return false;
            }
        }
        true
    }
}

/// A priori bound `e^{KT}(M + KT)` on `|Y|`.
pub fn a_priori_bound(k_const: f64, horizon: f64, bound: f64) -> f64 {
    (k_const * horizon).exp() * (bound + k_const * horizon)
}

/// Odd, C¹ truncation of the identity at level `n`: identity on
/// `[-(n-1), n-1]`, saturated at `±n` for `|x| ≥ n+1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationFamily {
    level: u32,
}

/// `p(s) = s - 2(2.5u⁴ - 3u⁵ + u⁶)` with `u = s/2`; `p' = 1 - S(u)` for the
/// quintic smoothstep `S`.
fn blend(s: f64) -> (f64, f64) {
    let u = s / 2.0;
    let u3 = u * u * u;
    let value = s - 2.0 * (2.5 * u3 * u - 3.0 * u3 * u * u + u3 * u3);
    let step = u3 * (10.0 - 15.0 * u + 6.0 * u * u);
    (value, 1.0 - step)
}

impl TruncationFamily {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn h(&self, x: f64) -> f64 {
        let n = self.level as f64;
        let a = x.abs();
        if a <= n - 1.0 {
            x
        } else if a >= n + 1.0 {
            n.copysign(x)
        } else {
            (n - 1.0 + blend(a - (n - 1.0)).0).copysign(x)
        }
    }

    pub fn dh(&self, x: f64) -> f64 {
        let n = self.level as f64;
        let a = x.abs();
        if a <= n - 1.0 {
            1.0
        } else if a >= n + 1.0 {
            0.0
        } else {
            blend(a - (n - 1.0)).1
        }
    }
}

pub fn make_truncation(n: u32) -> Result<TruncationFamily> {
    if n < 2 {
        return domain(format!("truncation level must be at least 2, got {n}"));
    }
    Ok(TruncationFamily { level: n })
}

/// `f_n(t, x, y, z) = f(t, x, h_n(y), z)` with the constants of `f`.
pub fn truncate_driver(drv: &Driver, fam: &TruncationFamily) -> Driver {
    let fam = *fam;
    let inner = drv.clone();
    let mut out = Driver::new(format!("{}|h{}", drv.kind, fam.level), drv.k_const, drv.k_pow, drv.gamma, move |t, x, y, z| {
        inner.eval(t, x, fam.h(y), z)
    });
    if drv.partials.is_some() {
        let inner = drv.clone();
        out = out.with_partials(move |t, x, y, z, dx, dz| inner.partials(t, x, fam.h(y), z, dx, dz) * fam.dh(y));
    }
    out.with_dims(drv.dim_state, drv.dim_noise)
}

/// Tabulated `Φ`, `Φ'` and `Φ⁻¹` with `Φ' = exp(∫₀^y 2g)` on
/// `[-y_max, y_max]`.
#[derive(Clone)]
pub struct LinearizingTransform {
    g_coef: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    ys: Vec<f64>,
    phi: Vec<f64>,
    dphi: Vec<f64>,
}

impl fmt::Debug for LinearizingTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearizingTransform")
            .field("y_max", &self.y_max())
            .field("nodes", &self.ys.len())
            .field("phi_range", &self.phi_range())
            .finish()
    }
}

const QUAD_TOL: f64 = 1e-13;

/// Builds the transform table with `table_size` cells (rounded up to even so
/// that 0 is a node).
pub fn build_linearizer<G>(g_coef: G, y_max: f64, table_size: usize) -> Result<LinearizingTransform>
where
    G: Fn(f64) -> f64 + Send + Sync + 'static,
{
    if !(y_max > 0.0 && y_max.is_finite()) {
        return domain(format!("working interval half-width must be positive, got {y_max}"));
    }
    if table_size < 2 {
        return domain("transform table needs at least 2 cells");
    }
    let half = table_size.div_ceil(2);
    let n = 2 * half;
    let h = y_max / half as f64;
    let ys: Vec<f64> = (0..=n).map(|j| (j as f64 - half as f64) * h).collect();
    let g = &g_coef;
    // log Φ' at the nodes, accumulated outward from 0
    let mut log_dphi = vec![0.0; n + 1];
    for j in half..n {
        log_dphi[j + 1] = log_dphi[j] + quad::integrate(|s| 2.0 * g(s), ys[j], ys[j + 1], QUAD_TOL)?;
    }
    for j in (1..=half).rev() {
        log_dphi[j - 1] = log_dphi[j] - quad::integrate(|s| 2.0 * g(s), ys[j - 1], ys[j], QUAD_TOL)?;
    }
    let dphi: Vec<f64> = log_dphi.iter().map(|v| v.exp()).collect();
    if dphi.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(LabError::Quadrature(format!("Φ' overflows on [-{y_max}, {y_max}]; shrink the working interval")));
    }
    let cell = |j: usize| -> Result<f64> {
        let (a, base) = (ys[j], log_dphi[j]);
        quad::integrate(
            |s| {
                let inner = quad::integrate(|r| 2.0 * g(r), a, s, QUAD_TOL).unwrap_or(f64::NAN);
                (base + inner).exp()
            },
            a,
            ys[j + 1],
            QUAD_TOL * dphi[j].max(1.0),
        )
    };
    let mut phi = vec![0.0; n + 1];
    for j in half..n {
        phi[j + 1] = phi[j] + cell(j)?;
    }
    for j in (1..=half).rev() {
        phi[j - 1] = phi[j] - cell(j - 1)?;
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Quadrature(format!("Φ is not finite on [-{y_max}, {y_max}]")));
    }
    for j in 0..n {
        let delta = (phi[j + 1] - phi[j]) / h;
        if !(delta > 0.0) {
            return Err(LabError::Quadrature("Φ table is not strictly increasing".into()));
        }
        let (alpha, beta) = (dphi[j] / delta, dphi[j + 1] / delta);
        if alpha * alpha + beta * beta > 9.0 {
            return Err(LabError::Quadrature(format!("transform table too coarse near y = {}", ys[j])));
        }
    }
    Ok(LinearizingTransform { g_coef: Arc::new(g_coef), ys, phi, dphi })
}

impl LinearizingTransform {
    pub fn y_max(&self) -> f64 {
        *self.ys.last().unwrap()
    }

    /// `(Φ(-y_max), Φ(y_max))`.
    pub fn phi_range(&self) -> (f64, f64) {
        (self.phi[0], *self.phi.last().unwrap())
    }

    pub fn g_coef(&self, y: f64) -> f64 {
        (self.g_coef)(y)
    }

    fn cell_of(&self, y: f64) -> Option<(usize, f64)> {
        let ymax = self.y_max();
        if !(y.abs() <= ymax) {
            return None;
        }
        let n = self.ys.len() - 1;
        let h = self.ys[1] - self.ys[0];
        let j = (((y + ymax) / h).floor() as usize).min(n - 1);
        Some((j, h))
    }

    /// Hermite value and slope on cell `j` at local coordinate `u ∈ [0,1]`.
    fn hermite(v0: f64, v1: f64, d0: f64, d1: f64, h: f64, u: f64) -> (f64, f64) {
        let u2 = u * u;
        let u3 = u2 * u;
        let value = (2.0 * u3 - 3.0 * u2 + 1.0) * v0 + (u3 - 2.0 * u2 + u) * h * d0 + (-2.0 * u3 + 3.0 * u2) * v1 + (u3 - u2) * h * d1;
        let slope =
            ((6.0 * u2 - 6.0 * u) * v0 + (3.0 * u2 - 4.0 * u + 1.0) * h * d0 + (-6.0 * u2 + 6.0 * u) * v1 + (3.0 * u2 - 2.0 * u) * h * d1)
                / h;
        (value, slope)
    }

    /// `Φ(y)`; `None` outside the working interval.
    pub fn phi(&self, y: f64) -> Option<f64> {
        let (j, h) = self.cell_of(y)?;
        let u = (y - self.ys[j]) / h;
        Some(Self::hermite(self.phi[j], self.phi[j + 1], self.dphi[j], self.dphi[j + 1], h, u).0)
    }

    /// `Φ'(y)` interpolated with the exact nodal `Φ'' = 2gΦ'`.
    pub fn dphi(&self, y: f64) -> Option<f64> {
        let (j, h) = self.cell_of(y)?;
        let u = (y - self.ys[j]) / h;
        let d2 = |k: usize| 2.0 * self.g_coef(self.ys[k]) * self.dphi[k];
        Some(Self::hermite(self.dphi[j], self.dphi[j + 1], d2(j), d2(j + 1), h, u).0)
    }

    /// `Φ⁻¹(w)`; `None` outside `phi_range`.
    pub fn phi_inv(&self, w: f64) -> Option<f64> {
        let (lo, hi) = self.phi_range();
        if !(w >= lo && w <= hi) {
            return None;
        }
        let j = self.phi.partition_point(|&p| p <= w).saturating_sub(1).min(self.phi.len() - 2);
        let h = self.ys[1] - self.ys[0];
        let (v0, v1, d0, d1) = (self.phi[j], self.phi[j + 1], self.dphi[j], self.dphi[j + 1]);
        let (mut a, mut b) = (0.0f64, 1.0f64);
        let mut u = if v1 > v0 { ((w - v0) / (v1 - v0)).clamp(0.0, 1.0) } else { 0.5 };
        for _ in 0..100 {
            let (val, slope) = Self::hermite(v0, v1, d0, d1, h, u);
            let r = val - w;
            if r > 0.0 {
                b = u;
            } else {
                a = u;
            }
            let scale = v1.abs().max(v0.abs()).max(1e-300);
            if r.abs() <= 1e-15 * scale || b - a < 1e-15 {
                break;
            }
            let step = r / (slope * h);
            let next = u - step;
            u = if slope > 0.0 && next > a && next < b { next } else { 0.5 * (a + b) };
        }
        Some(self.ys[j] + u * h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_drivers_pass_validation() {
        for drv in [
            Driver::burgers_cross(1.3, 1),
            Driver::burgers_cross(-0.7, 2),
            Driver::cross_quadratic(1.0),
            Driver::drifted_quadratic(vec![0.4, -1.1], 0.3).with_dims(1, 2),
            Driver::subadditive(0.5, 1.5),
            Driver::entropic(1.0),
            Driver::linear_damping(2.0),
            Driver::burgers_damping(1.0, 1.0, 0.1),
            Driver::lipschitz_example(1.0),
            Driver::zero(),
        ] {
            let r = validate_driver(&drv, 20_000, 11);
            assert!(r.passed, "{drv:?}: {r:?}");
        }
    }

    #[test]
    fn exponential_driver_fails_with_large_witness() {
        let drv = Driver::new("exp", 10.0, 3, 1.0, |_, _, y, _| y.exp());
        let r = validate_driver(&drv, 5_000, 3);
        assert!(!r.passed);
        assert!(r.growth_witness.y > 5.0, "{:?}", r.growth_witness);
    }

    #[test]
    fn understated_constant_fails() {
        let drv = Driver::new("loud", 0.5, 1, 0.0, |_, _, y, z| 2.0 * y * z[0]);
        assert!(!validate_driver(&drv, 2_000, 1).passed);
    }

    #[test]
    fn truncation_examples() {
        let h3 = make_truncation(3).unwrap();
        assert_eq!(h3.h(2.0), 2.0);
        assert_eq!(h3.h(5.0), 3.0);
        assert_eq!(h3.h(-5.0), -3.0);
        for n in 2..8 {
            assert_eq!(make_truncation(n).unwrap().dh(0.0), 1.0);
        }
        assert!(make_truncation(1).is_err());
        assert!(make_truncation(0).is_err());
    }

    #[test]
    fn truncation_is_c1_at_the_seams() {
        let fam = make_truncation(4).unwrap();
        for seam in [3.0, 5.0, -3.0, -5.0] {
            let e = 1e-9;
            assert!((fam.h(seam + e) - fam.h(seam - e)).abs() < 1e-8);
            assert!((fam.dh(seam + e) - fam.dh(seam - e)).abs() < 1e-6);
        }
        let h = 1e-6;
        for k in 0..200 {
            let x = -6.0 + 0.06 * k as f64 + 0.001;
            let fd = (fam.h(x + h) - fam.h(x - h)) / (2.0 * h);
            assert!((fd - fam.dh(x)).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn truncated_driver_examples() {
        let f = Driver::cross_quadratic(1.0);
        let fam = make_truncation(3).unwrap();
        let fnd = truncate_driver(&f, &fam);
        assert_eq!(fnd.eval(0.0, &[0.0], 10.0, &[1.0]), 3.0);
        assert_eq!(fnd.eval(0.0, &[0.0], 1.5, &[2.0]), f.eval(0.0, &[0.0], 1.5, &[2.0]));
        // C_n = n bound: |f_n| ≤ K(1 + n(1 + |z|²))
        for y in [-50.0, -3.3, 0.2, 7.0] {
            for z in [0.0, 0.5, 4.0] {
                assert!(fnd.eval(0.0, &[0.0], y, &[z]).abs() <= 1.0 + 3.0 * (1.0 + z * z));
            }
        }
        assert!(validate_driver(&fnd, 10_000, 5).passed);
    }

    #[test]
    fn from_kind_rejects_bad_input() {
        let mut p = BTreeMap::new();
        p.insert("nu".to_string(), 1.0);
        assert_eq!(Driver::from_kind("burgers", &p).unwrap().kind(), "burgers");
        assert!(Driver::from_kind("cross_quadratic", &p).is_err());
        assert!(Driver::from_kind("nope", &BTreeMap::new()).is_err());
        let mut s = BTreeMap::new();
        s.insert("a".to_string(), 2.0);
        s.insert("b".to_string(), 1.0);
        assert!(Driver::from_kind("subadditive", &s).is_err());
    }

    #[test]
    fn analytic_partials_match_differences() {
        let x = [0.3];
        for drv in [
            Driver::cross_quadratic(0.7),
            Driver::subadditive(0.5, 1.5),
            Driver::burgers_damping(1.0, 0.5, 0.2),
            Driver::lipschitz_example(1.0),
            Driver::entropic(0.8),
        ] {
            let plain = Driver::new("copy", 1.0, 1, 1.0, {
                let d = drv.clone();
                move |t, x, y, z| d.eval(t, x, y, z)
            });
            for (y, z) in [(0.4, 0.9), (-1.2, -0.3)] {
                let (mut dx1, mut dz1, mut dx2, mut dz2) = ([0.0], [0.0], [0.0], [0.0]);
                let a = drv.partials(0.1, &x, y, &[z], &mut dx1, &mut dz1);
                let b = plain.partials(0.1, &x, y, &[z], &mut dx2, &mut dz2);
                assert!((a - b).abs() < 1e-6 && (dz1[0] - dz2[0]).abs() < 1e-6, "{drv:?}");
            }
        }
    }

    #[test]
    fn terminal_conditions_probe() {
        assert!(TerminalCondition::cosine(1).probe(5_000, 1));
        assert!(TerminalCondition::tanh(1).probe(5_000, 1));
        let liar = TerminalCondition::new("liar", 1, 0.5, 1.0, |x| x[0].cos());
        assert!(!liar.probe(5_000, 1));
        let tc = TerminalCondition::cosine(1).shifted(-0.1);
        assert!((tc.eval(&[0.0]) - 0.9).abs() < 1e-15);
        assert_eq!(tc.bound(), 1.1);
    }

    #[test]
    fn entropic_transform_is_exponential() {
        let gamma = 0.8;
        let lin = build_linearizer(move |_| gamma / 2.0, 3.0, 2000).unwrap();
        for k in 0..=60 {
            let y = -3.0 + 0.1 * k as f64;
            let want = ((gamma * y).exp() - 1.0) / gamma;
            assert!((lin.phi(y).unwrap() - want).abs() < 1e-10 * (1.0 + want.abs()), "y = {y}");
        }
    }

    #[test]
    fn zero_coefficient_gives_identity() {
        let lin = build_linearizer(|_| 0.0, 2.0, 100).unwrap();
        for y in [-2.0, -0.3, 0.0, 1.7, 2.0] {
            assert!((lin.phi(y).unwrap() - y).abs() < 1e-14);
            assert!((lin.phi_inv(y).unwrap() - y).abs() < 1e-12);
            assert!((lin.dphi(y).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_term_transform_value() {
        let lin = build_linearizer(|y| y, 2.0, 10_000).unwrap();
        assert!((lin.phi(1.0).unwrap() - 1.46265).abs() < 1e-4);
        assert_eq!(lin.phi(0.0).unwrap(), 0.0);
        assert_eq!(lin.dphi(0.0).unwrap(), 1.0);
        assert!(lin.phi(2.5).is_none());
        assert!(lin.phi_inv(lin.phi_range().1 + 1.0).is_none());
    }

    #[test]
    fn round_trip_and_ode_residual() {
        let lin = build_linearizer(|y: f64| 0.5 * y.sin() + 0.3, 3.0, 10_000).unwrap();
        let h = 1e-4;
        for k in 0..100 {
            let y = -2.9 + 5.8 * k as f64 / 99.0;
            let back = lin.phi_inv(lin.phi(y).unwrap()).unwrap();
            assert!((back - y).abs() < 1e-8, "y = {y}, back = {back}");
            let d2 = (lin.dphi(y + h).unwrap() - lin.dphi(y - h).unwrap()) / (2.0 * h);
            let resid = lin.g_coef(y) * lin.dphi(y).unwrap() - 0.5 * d2;
            assert!(resid.abs() < 1e-5, "y = {y}, residual = {resid}");
        }
    }

    #[test]
    fn overflowing_coefficient_is_rejected() {
        assert!(build_linearizer(|y: f64| y.powi(3), 30.0, 1000).is_err());
    }
}
