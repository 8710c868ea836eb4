//! Executes a validated configuration and writes CSV tables plus the run
//! manifest into the output directory.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use fbsde_lab::bsde::{solve_bsde, solve_by_transform, solve_gradient, SolverConfig};
use fbsde_lab::drivers::build_linearizer;
use fbsde_lab::error::LabError;
use fbsde_lab::experiments::burgers::{run_burgers_damping, BurgersConfig, CoupledSetup};
use fbsde_lab::experiments::ns2d::run_ns2d;
use fbsde_lab::experiments::suites::run_proptests;
use fbsde_lab::ldp::{empirical_ldp, extrapolate_to_zero, minimize_rate, ActionProblem, EmpiricalEvent};
use fbsde_lab::pde::{domain_doubling_change, solve_pde, PdeProblem};
use fbsde_lab::regression::RegressionBasis;
use fbsde_lab::sweep::{limit_consistency, run_sweep, SweepConfig};
use fbsde_lab::{perturbation_gap_table, simulate_forward, PathEnsemble, TimeGrid};

use crate::config::{
    invalid, BurgersParams, ConfigError, ExperimentConfig, ForwardParams, LdpParams, Params, PdeParams, SolveParams, SweepParams,
};

pub const MANIFEST: &str = "manifest";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("cannot write output: {0}")]
    Io(String),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

/// One named CSV table, already rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub summary: Value,
    pub flagged: bool,
}

fn io_err(e: impl std::fmt::Display) -> RunError {
    RunError::Io(e.to_string())
}

/// Renders rows as CSV with a header row.
pub fn csv_table<T: Serialize>(name: &str, rows: &[T]) -> Result<Table, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(io_err)?;
    }
    Ok(Table { name: format!("{name}.csv"), bytes: w.into_inner().map_err(io_err)? })
}

fn csv_records(name: &str, header: &[String], records: &[Vec<String>]) -> Result<Table, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(io_err)?;
    for r in records {
        w.write_record(r).map_err(io_err)?;
    }
    Ok(Table { name: format!("{name}.csv"), bytes: w.into_inner().map_err(io_err)? })
}

/// Core precondition failures found while assembling inputs are
/// configuration errors.
fn setup<T>(key: &str, r: fbsde_lab::error::Result<T>) -> Result<T, RunError> {
    r.or_else(|e| match e {
        LabError::Domain(msg) => Ok(invalid(key, msg)?),
        other => Err(other.into()),
    })
}

/// Runs the experiment in the current rayon pool.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    match &cfg.params {
        Params::Forward(p) => forward(p, cfg.seed),
        Params::Solve(p) => solve(p, cfg.seed),
        Params::Pde(p) => pde(p),
        Params::Sweep(p) => sweep(p, cfg.seed),
        Params::Ldp(p) => ldp(p, cfg.seed),
        Params::Burgers(p) => burgers(p, cfg.seed),
        Params::Ns2d(p) => {
            let report = run_ns2d(&p.problem(), cfg.seed)?;
            Ok(Outcome {
                tables: vec![csv_table("ns2d", &report.rows)?],
                summary: json!({
                    "max_div_fd": report.max_div_fd,
                    "max_div_grad": report.max_div_grad,
                    "flagged_fd": report.flagged_fd,
                    "flagged_grad": report.flagged_grad,
                    "routes_agree": report.routes_agree,
                    "u_residual": report.u_residual,
                    "clamp_fraction": report.clamp_fraction,
                }),
                flagged: report.flagged_fd || report.flagged_grad,
            })
        }
        Params::Proptest(p) => {
            let reports = run_proptests(&p.suites, &p.suite_config(), cfg.seed)?;
            let cases: Vec<_> = reports.iter().flat_map(|r| r.cases.iter().cloned()).collect();
            let summary: serde_json::Map<String, Value> = reports.iter().map(|r| (r.name.clone(), Value::Bool(r.passed))).collect();
            Ok(Outcome {
                tables: vec![csv_table("proptest", &cases)?],
                summary: Value::Object(summary),
                flagged: reports.iter().any(|r| !r.passed),
            })
        }
    }
}

/// Runs the experiment and writes its tables and manifest under
/// `cfg.output`.
pub fn run_to_dir(cfg: &ExperimentConfig, threads: usize) -> Result<Outcome, RunError> {
    let outcome = execute(cfg)?;
    write_outputs(cfg, &outcome, &cfg.output, threads)?;
    Ok(outcome)
}

pub fn write_outputs(cfg: &ExperimentConfig, outcome: &Outcome, dir: &Path, threads: usize) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err)?;
    for t in &outcome.tables {
        fs::write(dir.join(&t.name), &t.bytes).map_err(io_err)?;
    }
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": fbsde_lab::VERSION,
        "threads": threads,
        "config": cfg.to_json(),
        "outputs": outcome.tables.iter().map(|t| t.name.clone()).collect::<Vec<_>>(),
        "summary": outcome.summary,
        "flagged": outcome.flagged,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(io_err)?;
    fs::write(dir.join(MANIFEST), text + "\n").map_err(io_err)
}

#[derive(Serialize)]
struct TerminalRow {
    epsilon: f64,
    path: usize,
    x_t: f64,
}

fn forward(p: &ForwardParams, seed: u64) -> Result<Outcome, RunError> {
    let model = p.model.model("params.model")?;
    let grid = setup("params.horizon", TimeGrid::new(0.0, p.horizon, p.steps))?;
    let ens = if p.antithetic {
        PathEnsemble::sample_antithetic(grid, p.paths, model.dim_noise(), seed)
    } else {
        PathEnsemble::sample(grid, p.paths, model.dim_noise(), seed)
    };
    let ens = Arc::new(setup("params.paths", ens)?);
    let mut terminal = Vec::with_capacity(p.epsilons.len() * p.paths);
    for &eps in &p.epsilons {
        let fwd = setup("params", simulate_forward(&model, &ens, &p.x0, eps))?;
        terminal.extend((0..p.paths).map(|j| TerminalRow { epsilon: eps, path: j, x_t: fwd.state(j, p.steps)[0] }));
    }
    let (gaps, slope) = perturbation_gap_table(&model, &ens, &p.x0, &p.epsilons)?;
    let probe = model.probe_report();
    let summary = json!({ "gap_slope": slope, "probe": { "lipschitz_ratio": probe.lipschitz_ratio, "declared_k": probe.declared_k, "passed": probe.passed } });
    Ok(Outcome { tables: vec![csv_table("forward_terminal", &terminal)?, csv_table("forward_gap", &gaps)?], summary, flagged: false })
}

#[derive(Serialize)]
struct SolveRow {
    method: &'static str,
    y0: f64,
    y0_stderr: f64,
    z0: f64,
    max_abs_y: f64,
    y_clamp_fraction: f64,
    z_clamp_fraction: f64,
    nabla_y0: Option<f64>,
    nabla_y0_stderr: Option<f64>,
}

fn solve(p: &SolveParams, seed: u64) -> Result<Outcome, RunError> {
    let model = p.model.model("params.model")?;
    let drv = p.driver.driver("params.driver")?;
    let tc = p.terminal.terminal("params.terminal")?;
    let grid = setup("params.horizon", TimeGrid::new(0.0, p.horizon, p.steps))?;
    let ens = Arc::new(setup("params.paths", PathEnsemble::sample(grid, p.paths, model.dim_noise(), seed))?);
    let fwd = Arc::new(setup("params", simulate_forward(&model, &ens, &p.x0, p.epsilon))?);
    let basis = RegressionBasis::polynomial(p.basis_degree, 1);
    let solver = SolverConfig { picard_iters: p.picard, ..SolverConfig::default() };
    let sol = solve_bsde(&fwd, &drv, &tc, &basis, &solver)?;
    let (nabla, nabla_se) = if p.gradient {
        let g = solve_gradient(&sol, &drv, &tc, &basis, &solver)?;
        (Some(g.nabla_y0()[0]), Some(g.nabla_y0_stderr()[0]))
    } else {
        (None, None)
    };
    let c = sol.clamp();
    let mut rows = vec![SolveRow {
        method: "regression",
        y0: sol.y0(),
        y0_stderr: sol.y0_stderr(),
        z0: sol.z0()[0],
        max_abs_y: sol.max_abs_y(),
        y_clamp_fraction: c.y_fraction(),
        z_clamp_fraction: c.z_fraction(),
        nabla_y0: nabla,
        nabla_y0_stderr: nabla_se,
    }];
    let mut flagged = c.warning;
    if let Some(t) = &p.transform {
        let c0 = t.c;
        let lin = if t.g_coef == "identity" {
            build_linearizer(|y| y, t.y_max, t.table_size)
        } else {
            build_linearizer(move |_| c0, t.y_max, t.table_size)
        };
        let lin = Arc::new(setup("params.transform", lin)?);
        let tr = solve_by_transform(&fwd, &lin, &tc, &basis)?;
        flagged |= tr.clamp().warning;
        rows.push(SolveRow {
            method: "transform",
            y0: tr.y0(),
            y0_stderr: tr.y0_stderr(),
            z0: tr.z0()[0],
            max_abs_y: tr.max_abs_y(),
            y_clamp_fraction: tr.clamp().y_fraction(),
            z_clamp_fraction: tr.clamp().z_fraction(),
            nabla_y0: None,
            nabla_y0_stderr: None,
        });
    }
    let summary = json!({ "y0": rows[0].y0, "y0_stderr": rows[0].y0_stderr, "transform_y0": rows.get(1).map(|r| r.y0) });
    Ok(Outcome { tables: vec![csv_table("solve", &rows)?], summary, flagged })
}

#[derive(Serialize)]
struct PdeRow {
    x: f64,
    u: Option<f64>,
}

fn pde(p: &PdeParams) -> Result<Outcome, RunError> {
    let model = p.model.model("params.model")?;
    let drv = p.driver.driver("params.driver")?;
    let tc = p.terminal.terminal("params.terminal")?;
    let grid = setup("params.n_t", TimeGrid::new(0.0, p.horizon, p.n_t))?;
    let lo = p.probes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.probes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let problem = setup("params", PdeProblem::from_model(&model, &drv, &tc, p.epsilon, &grid, (lo, hi), p.n_x, p.sigma_max))?;
    let field = setup("params", solve_pde(&problem))?;
    let rows: Vec<PdeRow> = p.probes.iter().map(|&x| PdeRow { x, u: field.initial_value(x) }).collect();
    let change = domain_doubling_change(&problem, &p.probes)?;
    let summary = json!({ "domain": [problem.x_lo, problem.x_hi], "domain_doubling_change": change });
    Ok(Outcome { tables: vec![csv_table("pde", &rows)?], summary, flagged: false })
}

fn sweep(p: &SweepParams, seed: u64) -> Result<Outcome, RunError> {
    let cfg = SweepConfig {
        epsilons: p.epsilons.clone(),
        model: p.model.model("params.model")?,
        driver: p.driver.driver("params.driver")?,
        terminal: p.terminal.terminal("params.terminal")?,
        x0: p.x0.clone(),
        grid: setup("params.horizon", TimeGrid::new(0.0, p.horizon, p.steps))?,
        n_paths: p.paths,
        seed,
        p: p.p,
        basis: RegressionBasis::polynomial(p.basis_degree, 1),
        solver: SolverConfig { picard_iters: p.picard, ..SolverConfig::default() },
    };
    setup("params", cfg.validate())?;
    let result = run_sweep(&cfg)?;
    let consistency = limit_consistency(&result, p.discretization_tol);
    let summary = json!({
        "limit_y0": result.limit,
        "slope": result.slope,
        "band": result.band,
        "band_width": result.band_width(),
        "exact_degenerate": result.exact_degenerate,
        "consistency": consistency,
    });
    let flagged = result.rows.iter().any(|r| r.failure.is_some());
    Ok(Outcome { tables: vec![csv_table("sweep", &result.rows)?], summary, flagged })
}

#[derive(Serialize)]
struct RateRow {
    value: f64,
    iterations: usize,
    grad_norm: f64,
    constraint_violation: f64,
    feasible: bool,
    hitting_node: usize,
    control_form: bool,
}

fn ldp(p: &LdpParams, seed: u64) -> Result<Outcome, RunError> {
    let model = p.model.model("params.model")?;
    let grid = setup("params.nodes", TimeGrid::new(0.0, p.horizon, p.nodes))?;
    let event = p.event.event();
    let problem = setup("params", ActionProblem::with_grid(model.clone(), p.x0.clone(), grid, event.clone()))?;
    let rate = minimize_rate(&problem, p.restarts, seed)?;
    let rate_row = RateRow {
        value: rate.value,
        iterations: rate.iterations,
        grad_norm: rate.grad_norm,
        constraint_violation: rate.constraint_violation,
        feasible: rate.feasible,
        hitting_node: rate.hitting_node,
        control_form: problem.uses_control_form(),
    };
    let m = p.x0.len();
    let header: Vec<String> = ["node".to_string(), "t".to_string()].into_iter().chain((1..=m).map(|i| format!("x{i}"))).collect();
    let records: Vec<Vec<String>> = rate
        .path
        .iter()
        .enumerate()
        .map(|(k, s)| [k.to_string(), grid.time(k).to_string()].into_iter().chain(s.iter().map(|v| v.to_string())).collect())
        .collect();
    let mut tables = vec![csv_table("ldp_rate", &[rate_row])?, csv_records("ldp_path", &header, &records)?];
    let mut summary = json!({ "rate": rate.value, "feasible": rate.feasible });
    if let Some(e) = &p.empirical {
        let egrid = setup("params.empirical.steps", TimeGrid::new(0.0, p.horizon, e.steps))?;
        let rows = empirical_ldp(&model, &p.x0, &egrid, &e.epsilons, &EmpiricalEvent::Shape(event), e.paths, seed)?;
        let intercept = extrapolate_to_zero(&rows);
        summary["empirical_intercept"] = json!(intercept);
        summary["empirical_relative_gap"] = json!(intercept.map(|c| ((c + rate.value) / rate.value).abs()));
        tables.push(csv_table("ldp_empirical", &rows)?);
    }
    Ok(Outcome { tables, summary, flagged: !rate.feasible })
}

pub fn burgers_config(p: &BurgersParams) -> Result<BurgersConfig, ConfigError> {
    let cfg = BurgersConfig {
        a: p.a,
        lambda: p.lambda,
        epsilons: p.epsilons.clone(),
        terminal: p.terminal.terminal("params.terminal")?,
        x0: p.x0,
        horizon: p.horizon,
        steps: p.steps,
        paths: p.paths,
        basis_degree: p.basis_degree,
        picard: p.picard,
        probes: p.probes.clone(),
        fd_nx: p.fd_nx,
        fd_nt: p.fd_nt,
        coupled: p.coupled.as_ref().map(|c| CoupledSetup {
            outer_iters: c.outer_iters,
            tol: c.tol,
            cloud: (c.cloud[0], c.cloud[1]),
            lipschitz_probes: c.lipschitz_probes.clone(),
        }),
    };
    cfg.validate().or_else(|e| invalid("params", e))?;
    Ok(cfg)
}

fn burgers(p: &BurgersParams, seed: u64) -> Result<Outcome, RunError> {
    let cfg = burgers_config(p)?;
    let report = run_burgers_damping(&cfg, seed)?;
    let mut tables = vec![csv_table("burgers", &report.rows)?];
    if !report.probes.is_empty() {
        tables.push(csv_table("burgers_probes", &report.probes)?);
    }
    let max_dev = report.probes.iter().map(|r| r.deviation).fold(0.0, f64::max);
    let summary = json!({
        "bound_ok": report.rows.iter().all(|r| r.bound_ok),
        "max_fd_deviation": max_dev,
        "coupled_lipschitz": report.rows.iter().map(|r| r.coupled_lipschitz).collect::<Vec<_>>(),
    });
    Ok(Outcome { tables, summary, flagged: report.flagged })
}
